"""Run the full multi-seed experiment: ablation table plus both sweeps.

Each seed gets its own run directory and runs as a separate process; a
summary JSON with every variant's metrics, sweep rows, classifier gates,
parameter budget and stage timings lands in <base>/summary.json.

Usage:
    python scripts/run_experiment.py --base-dir runs/exp --seeds 0,1,2 \
        --n-cases 2000 --jobs-per-seed 2 [--skip-sweeps]
"""

import argparse
import json
import os
import subprocess
import sys
import time
from pathlib import Path

SEED_WORKER = r"""
import json, sys, time
from courtview.config import RunConfig
from courtview.pipeline import (
    report_parameter_budget, stage_ablate, stage_sweep)
from courtview import tensor as tc

spec = json.loads(sys.argv[1])
cfg = RunConfig.from_dict(spec["config"])
run_dir = spec["run_dir"]
out = {"seed": cfg.seed}

t0 = time.time()
reports = stage_ablate(cfg, run_dir, jobs=spec["jobs"])
out["ablate_minutes"] = (time.time() - t0) / 60.0
out["ablate"] = {tag: rep.scores() for tag, rep in reports.items()}
out["param_ratio"] = report_parameter_budget(cfg, run_dir, log=lambda *_: None)
for role in ("navigator", "judge"):
    _, meta = tc.load_checkpoint(f"{run_dir}/ckpt/{role}.ckpt")
    out[f"{role}_micro_f1"] = float(meta["heldout_micro_f1"])
if not spec["skip_sweeps"]:
    t1 = time.time()
    lam_rows = stage_sweep(cfg, run_dir, "lambda", jobs=spec["jobs"])
    k_rows = stage_sweep(cfg, run_dir, "k", jobs=spec["jobs"])
    out["sweep_minutes"] = (time.time() - t1) / 60.0
    out["sweep_lambda"] = {f"{v:g}": rep.scores() for v, rep in lam_rows}
    out["sweep_k"] = {f"{v:g}": rep.scores() for v, rep in k_rows}
out["total_minutes"] = (time.time() - t0) / 60.0
with open(spec["out_path"], "w") as f:
    json.dump(out, f, indent=2, sort_keys=True)
print(f"seed {cfg.seed} done in {out['total_minutes']:.1f} min")
"""


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--base-dir", required=True)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--n-cases", type=int, default=2000)
    ap.add_argument("--lm-epochs", type=int, default=2)
    ap.add_argument("--jobs-per-seed", type=int, default=2)
    ap.add_argument("--skip-sweeps", action="store_true")
    args = ap.parse_args(argv)

    base = Path(args.base_dir)
    base.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]

    procs = []
    t0 = time.time()
    for seed in seeds:
        run_dir = base / f"seed{seed}"
        out_path = base / f"seed{seed}.json"
        spec = {
            "config": {"seed": seed, "n_cases": args.n_cases,
                       "lm_epochs": args.lm_epochs, "jobs": args.jobs_per_seed},
            "run_dir": str(run_dir),
            "out_path": str(out_path),
            "jobs": args.jobs_per_seed,
            "skip_sweeps": args.skip_sweeps,
        }
        log = open(base / f"seed{seed}.log", "w")
        env = dict(os.environ,
                   OPENBLAS_NUM_THREADS="1", OMP_NUM_THREADS="1", MKL_NUM_THREADS="1")
        procs.append((seed, subprocess.Popen(
            [sys.executable, "-u", "-c", SEED_WORKER, json.dumps(spec)],
            stdout=log, stderr=subprocess.STDOUT, env=env), log))

    failed = []
    for seed, proc, log in procs:
        code = proc.wait()
        log.close()
        if code != 0:
            failed.append(seed)
            print(f"seed {seed} FAILED (exit {code}); see {base}/seed{seed}.log", file=sys.stderr)
    if failed:
        return 1

    summary = {
        "seeds": seeds,
        "wall_minutes": (time.time() - t0) / 60.0,
        "per_seed": {str(s): json.loads((base / f"seed{s}.json").read_text()) for s in seeds},
    }
    (base / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"experiment complete in {summary['wall_minutes']:.1f} min -> {base}/summary.json")

    med = _medians(summary)
    print("median Ma-F by variant:", {k: f"{v * 100:.2f}" for k, v in med.items()})
    return 0


def _medians(summary: dict) -> dict:
    import statistics
    out = {}
    for tag in ("kig", "no_v", "no_la", "no_n"):
        vals = [seed["ablate"][tag]["maf"] for seed in summary["per_seed"].values()]
        out[tag] = statistics.median(vals)
    return out


if __name__ == "__main__":
    sys.exit(main())
