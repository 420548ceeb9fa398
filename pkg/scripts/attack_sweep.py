#!/usr/bin/env python3
"""Sweep the routing/storage attack scenarios across seeds.

Reports, per attack kind: how often the victim ended registered at the
oracle-correct servers, the implicated-node sets observed, and detection
latency statistics for the storage attack.
"""
import argparse
import pathlib
import sys
from collections import Counter

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from friendmesh.chord import dual_hash, node_ident
from friendmesh.simnet.scenario import Scenario, SimConfig, rendezvous_addr


def oracle_for(addrs):
    pairs = sorted((node_ident(a, 128), a) for a in addrs)

    def oracle(key):
        for ident, a in pairs:
            if ident >= key:
                return a
        return pairs[0][1]

    return oracle


def routing_attack(kind: str, seed: int):
    adversaries = [{
        "behaviors": ["claim_key"], "targets": [rendezvous_addr(0)],
        "victims": ["user02"], "start_ms": 500,
    }]
    if kind == "misroute":
        adversaries = [
            {"behaviors": ["misroute"], "targets": [rendezvous_addr(0)],
             "victims": ["user02"], "accomplice": rendezvous_addr(1), "start_ms": 500},
            {"behaviors": ["claim_key"], "targets": [rendezvous_addr(1)],
             "victims": ["user02"], "start_ms": 500},
        ]
    config = SimConfig(
        seed=seed, duration_ms=8000, n_rendezvous=4, n_peers=4, global_mode=True,
        adversaries=adversaries, rebootstrap=[{"peer": "user02", "at": 1500}],
    )
    scenario = Scenario(config)
    _, trace = scenario.run()
    implicated = None
    for line in trace.splitlines():
        if " EV suspect " in line:
            fields = dict(p.split("=", 1) for p in line.split()[3:] if "=" in p)
            implicated = tuple(sorted(fields["implicated"].split(",")))
    oracle = oracle_for([rendezvous_addr(i) for i in range(4)])
    ids = dual_hash("user02")
    correct = set(scenario.peers["user02"].state.registered_at) == {
        oracle(ids.id_md5), oracle(ids.id_sha1)
    }
    return correct, implicated


def storage_attack(seed: int):
    config = SimConfig(
        seed=seed, duration_ms=15000, n_rendezvous=4, n_peers=4, global_mode=True,
        adversaries=[{
            "behaviors": ["falsify_record"],
            "targets": [rendezvous_addr(i) for i in range(4)],
            "victims": ["user01"], "start_ms": 2000,
        }],
    )
    metrics, _ = Scenario(config).run()
    return metrics.detection_latency_ms


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=10)
    args = parser.parse_args()

    for kind in ("claim_key", "misroute"):
        outcomes = [routing_attack(kind, 9000 + s) for s in range(args.seeds)]
        correct = sum(1 for ok, _ in outcomes if ok)
        implicated = Counter(imp for _, imp in outcomes)
        print(f"{kind}: correct registration {correct}/{args.seeds}")
        for suspects, count in implicated.most_common():
            print(f"  implicated {suspects}: {count}x")

    latencies = [storage_attack(9500 + s) for s in range(args.seeds)]
    known = [l for l in latencies if l is not None]
    print(f"falsify_record: detected {len(known)}/{args.seeds}, "
          f"latency min/avg/max = {min(known)}/{sum(known)//len(known)}/{max(known)} ms")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
