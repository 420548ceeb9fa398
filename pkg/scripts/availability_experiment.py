#!/usr/bin/env python3
"""Availability under churn as a function of mirror count.

The owner flaps on a duty cycle while friends keep pulling; each added
mirror should recover most of the availability the churn takes away.
"""
import argparse
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from friendmesh.simnet.scenario import SimConfig, run_scenario


def run(n_mirrors: int, seed: int) -> float:
    friends = [f"user{i:02d}" for i in range(1, 5)]
    mirrors = [["user00", friends[i]] for i in range(n_mirrors)]
    config = SimConfig(
        seed=seed,
        duration_ms=40_000,
        n_rendezvous=2,
        n_relays=1,
        n_peers=5,
        global_mode=True,
        friendships=[["user00", f] for f in friends],
        mirrors=mirrors,
        churn=[
            {"node": "user00", "down_at": 5_000, "up_at": 15_000},
            {"node": "user00", "down_at": 20_000, "up_at": 30_000},
        ],
        pull_interval_ms=2_000,
        sync_interval_ms=3_000,
    )
    metrics, trace = run_scenario(config)
    ok = fail = 0
    for line in trace.splitlines():
        parts = line.split()
        if len(parts) >= 3 and parts[1] == "EV" and parts[2] in ("pull_ok", "pull_fail"):
            fields = dict(p.split("=", 1) for p in parts[3:] if "=" in p)
            if fields.get("owner") == "user00":
                if parts[2] == "pull_ok":
                    ok += 1
                else:
                    fail += 1
    return ok / (ok + fail) if ok + fail else 0.0


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=3)
    args = parser.parse_args()
    print("mirrors  owner-profile availability (mean over seeds)")
    for n_mirrors in range(0, 4):
        rates = [run(n_mirrors, 7000 + s) for s in range(args.seeds)]
        print(f"{n_mirrors:7d}  {sum(rates) / len(rates):.1%}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
