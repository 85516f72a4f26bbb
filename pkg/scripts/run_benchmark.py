#!/usr/bin/env python3
"""End-to-end benchmark: the three modes over 5 seeds x 5 splits at K=10.

Writes per-run metrics and checkpoints under --out, then aggregates.
This is the experiment behind the headline comparison; the acceptance
suite re-runs it with the same frozen defaults.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from fewtrain import cli
from fewtrain.data import FewShotSpec


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/benchmark")
    parser.add_argument("--k", type=int, default=10)
    parser.add_argument("--seeds", type=int, nargs="+",
                        default=[1, 2, 3, 4, 5])
    parser.add_argument("--splits", type=int, nargs="+",
                        default=[1, 2, 3, 4, 5])
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    for mode in ("prompt_fn", "promptst", "list"):
        cfg = cli.ExperimentConfig(
            mode=mode, output_dir=str(out),
            fewshot=FewShotSpec(k=args.k, split_ids=tuple(args.splits)),
            run_seeds=tuple(args.seeds))
        path = out / f"config_{mode}.json"
        path.write_text(cli.dump_config(cfg))
        code = cli.main(["train", "--config", str(path)])
        if code != 0:
            return code
    elapsed = time.time() - started

    code = cli.main(["report", "--runs", str(out)])
    if code != 0:
        return code
    report = json.loads((out / "report.json").read_text())
    print(f"\ntotal training time: {elapsed / 60:.1f} min")
    for name, group in sorted(report["groups"].items()):
        print(f"  {name}: mean={group['mean']:.4f} std={group['std']:.4f} "
              f"({group['runs']} runs)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
