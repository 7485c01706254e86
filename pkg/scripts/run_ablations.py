"""Run the recipe ablation suite around the reference config.

Each axis removes or swaps one ingredient of the quantized-training recipe
(stochastic rounding, the random Hadamard transform, square weight tiles,
layer exemption, the scale format) while everything else stays fixed, plus
a stripped variant with every ingredient removed at once.  Writes the same
artifact set as `fp4sim ablate` and prints the summary table.

    python3 scripts/run_ablations.py --seeds 0,1,2 --out-dir results/ablations
"""

import argparse
import json
import os

from fp4sim.harness import (
    config_to_dict,
    format_suite_table,
    reference_config,
    run_ablation_suite,
)

DEFAULT_AXES = "no_sr,no_rht,no_2d,no_exempt,stripped,mxfp4,switch_fwd_80"


def write_artifacts(out_dir, rows, base_cfg):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "base_config.json"), "w") as f:
        json.dump(config_to_dict(base_cfg), f, sort_keys=True, indent=2)
    with open(os.path.join(out_dir, "records.jsonl"), "w") as f:
        for row in rows:
            for rec in row.records:
                f.write(json.dumps({"variant": row.name,
                                    "record": rec.to_dict()},
                                   sort_keys=True, separators=(",", ":")))
                f.write("\n")
    with open(os.path.join(out_dir, "curves.csv"), "w") as f:
        f.write("variant,seed,step,val_loss\n")
        for row in rows:
            for rec in row.records:
                for step, loss in rec.val_curve:
                    f.write(f"{row.name},{rec.seed},{int(step)},{loss!r}\n")
    with open(os.path.join(out_dir, "rel_diffs.csv"), "w") as f:
        f.write("variant,mean_final_loss,rel_diff_vs_base,diverged\n")
        for row in rows:
            f.write(f"{row.name},{row.mean_final_loss!r},"
                    f"{row.rel_diff_vs_base!r},{row.diverged}\n")
    table = format_suite_table(rows)
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(table + "\n")
    return table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    ap.add_argument("--steps", type=int, default=0,
                    help="override the reference step count (0 keeps it)")
    ap.add_argument("--axes", default=DEFAULT_AXES)
    ap.add_argument("--out-dir", default="results/ablations")
    args = ap.parse_args()

    from dataclasses import replace
    cfg = reference_config(0)
    if args.steps:
        cfg = replace(cfg, steps=args.steps)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    axes = args.axes.split(",")
    rows = run_ablation_suite(cfg, axes, seeds=seeds)
    table = write_artifacts(args.out_dir, rows, cfg)
    print(table)
    print(f"\nwrote {args.out_dir}/{{records.jsonl,curves.csv,"
          f"rel_diffs.csv,summary.txt,base_config.json}}")


if __name__ == "__main__":
    main()
