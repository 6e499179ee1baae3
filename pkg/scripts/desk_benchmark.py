"""Run the desk benchmark over several seeds and print the verdicts.

    python3 scripts/desk_benchmark.py --seeds 0 1 2 --out runs/benchmark

Each finished seed is appended to ``results.jsonl`` so an interrupted run can
resume with the same command.
"""

import argparse
import json
import logging
from pathlib import Path

from mstkd.benchmark import SeedResult, format_results, run_seed, verdicts


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=Path("runs/benchmark"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    args.out.mkdir(parents=True, exist_ok=True)
    store = args.out / "results.jsonl"
    done = {}
    if store.exists():
        for line in store.read_text().splitlines():
            r = SeedResult.from_json(line)
            done[r.seed] = r
    for seed in args.seeds:
        if seed in done:
            continue
        done[seed] = run_seed(seed)
        with store.open("a") as fh:
            fh.write(done[seed].to_json() + "\n")

    results = [done[s] for s in args.seeds]
    print(format_results(results))
    for name, ok in verdicts(results).items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    (args.out / "verdicts.json").write_text(json.dumps(verdicts(results), indent=2) + "\n")


if __name__ == "__main__":
    main()
