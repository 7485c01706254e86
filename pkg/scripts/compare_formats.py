"""Head-to-head of fractional (nvfp4) vs power-of-two (mxfp4) block scales.

Two views of the same question.  First, static round-trip quality: SQNR of
both formats on tensor families that stress different failure modes
(gaussian, heavy-tailed rows, clustered outliers, an amax just above a
representable point), with and without a Hadamard transform.  Second,
end-to-end training: the reference recipe run under each format.

    python3 scripts/compare_formats.py --seeds 0,1,2 --out-dir results/formats
"""

import argparse
import json
import os

import numpy as np

from fp4sim.blockquant import FORMATS
from fp4sim.hadamard import HadamardSpec
from fp4sim.harness import format_suite_table, reference_config, run_ablation_suite
from fp4sim.reports import analyze_tensor, format_report_table


def tensor_families(seed):
    rng = np.random.default_rng(seed)
    fams = {}
    fams["gaussian"] = rng.standard_normal((64, 64))
    fams["heavy_rows"] = (rng.standard_normal((64, 64))
                          * np.exp(rng.normal(0, 2, (64, 1))))
    spikes = rng.standard_normal((64, 64))
    for r in range(64):
        for t in range(4):
            idx = rng.choice(16, size=4, replace=False) + 16 * t
            spikes[r, idx] = (32 * rng.choice([-1.0, 1.0], size=4)
                              * rng.uniform(0.7, 1.3, size=4))
    fams["clustered_outliers"] = spikes
    near = np.zeros((1, 32))
    near[0, 0] = 3.01
    near[0, 1:4] = [0.5, 1.0, 2.0]
    fams["amax_3.01"] = near
    return fams


def static_comparison(seed):
    print(f"== static round-trip quality (seed {seed}) ==\n")
    for name, x in tensor_families(seed).items():
        reports = []
        for fmt_name in ("nvfp4", "mxfp4"):
            fmt = FORMATS[fmt_name]
            reports.append(analyze_tensor(x, fmt))
            if x.shape[1] >= 16:
                reports.append(analyze_tensor(
                    x, fmt, rht=HadamardSpec(d=fmt.block_len)))
        print(f"-- {name} {x.shape}")
        print(format_report_table(reports))
        print()


def training_comparison(seeds, steps, out_dir):
    from dataclasses import replace
    cfg = reference_config(0)
    if steps:
        cfg = replace(cfg, steps=steps)
    rows = run_ablation_suite(cfg, ["mxfp4", "wide"], seeds=seeds)
    table = format_suite_table(rows)
    print("== end-to-end training ==\n")
    print(table)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "training_summary.txt"), "w") as f:
        f.write(table + "\n")
    with open(os.path.join(out_dir, "training_records.jsonl"), "w") as f:
        for row in rows:
            for rec in row.records:
                f.write(json.dumps({"variant": row.name,
                                    "record": rec.to_dict()},
                                   sort_keys=True, separators=(",", ":")))
                f.write("\n")
    print(f"\nwrote {out_dir}/{{training_summary.txt,training_records.jsonl}}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    ap.add_argument("--steps", type=int, default=0,
                    help="override the reference step count (0 keeps it)")
    ap.add_argument("--tensor-seed", type=int, default=0)
    ap.add_argument("--out-dir", default="results/formats")
    ap.add_argument("--skip-training", action="store_true")
    args = ap.parse_args()

    static_comparison(args.tensor_seed)
    if not args.skip_training:
        seeds = tuple(int(s) for s in args.seeds.split(","))
        training_comparison(seeds, args.steps, args.out_dir)


if __name__ == "__main__":
    main()
