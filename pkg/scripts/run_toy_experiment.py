"""Run the desk-scale adaptation experiment over several seeds.

    python3 scripts/run_toy_experiment.py --seeds 0 1 2 3 4 --workdir runs/toy

Each seed writes its artifacts and a result.json under <workdir>/seed<k>.
Seeds whose result.json already exists are not re-run unless --force is given.
"""
import argparse
import json
from pathlib import Path

from cgadapt.pipeline import run_toy_pipeline, toy_config


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--workdir", default="runs/toy")
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args(argv)

    rows = []
    for seed in args.seeds:
        wd = Path(args.workdir) / f"seed{seed}"
        cached = wd / "result.json"
        if cached.exists() and not args.force:
            res = json.loads(cached.read_text())
        else:
            res = run_toy_pipeline(wd, toy_config(seed), log=lambda m, s=seed: print(f"seed {s} {m}", flush=True))
        rows.append(res)
        print(f"seed {seed}: L1 {res['l1_unmapped']:.3f} -> {res['l1_mapped']:.3f} "
              f"({res['l1_reduction']:.1%})  EER {res['eer_unadapted']:.2%} -> {res['eer_adapted']:.2%}  "
              f"minDCF {res['min_dcf_unadapted']:.3f} -> {res['min_dcf_adapted']:.3f}  [{res['seconds']:.0f}s]",
              flush=True)

    wins = sum(r["eer_adapted"] < r["eer_unadapted"] for r in rows)
    print(f"adapted EER strictly better on {wins}/{len(rows)} seeds")
    (Path(args.workdir) / "summary.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
