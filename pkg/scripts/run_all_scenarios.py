#!/usr/bin/env python3
"""Run every scenario in scenarios/ and print one summary block each."""
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from friendmesh.simnet.metrics import summary_table
from friendmesh.simnet.scenario import SimConfig, run_scenario

SCENARIOS = pathlib.Path(__file__).resolve().parent.parent / "scenarios"


def main() -> int:
    for path in sorted(SCENARIOS.glob("*.json")):
        config = SimConfig.from_json(path.read_text())
        started = time.time()
        metrics, _ = run_scenario(config)
        wall = time.time() - started
        print(f"=== {path.stem} (seed {config.seed}, {wall:.1f}s wall) ===")
        print(summary_table(metrics))
        print()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
