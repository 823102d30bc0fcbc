"""SC-model accuracy on their own task with and without the latent-space term (sequential DAC)."""

import argparse
import dataclasses
from pathlib import Path

import numpy as np

from daclab.cli import run_experiment
from daclab.config import load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--lam", type=float, default=None, help="lambda for the PLD run (default: config value)")
    args = p.parse_args()
    base = load_config(CONFIGS / "shapes_sequential.yaml", env={})
    lam = base.consolidation.lam if args.lam is None else args.lam
    print("lam,seed,sc_task_accuracy,per_task")
    results = {}
    for value in (lam, 0.0):
        cfg = dataclasses.replace(base, consolidation=dataclasses.replace(base.consolidation, lam=value))
        for seed in args.seeds:
            sc = run_experiment(cfg, seed).sc_accuracy
            results.setdefault(value, []).append(np.mean(sc))
            print(f"{value},{seed},{np.mean(sc):.4f},{' '.join(f'{v:.3f}' for v in sc)}", flush=True)
    for value, vals in results.items():
        print(f"# lam={value}: {np.mean(vals):.4f} +- {np.std(vals, ddof=1) if len(vals) > 1 else 0:.4f}")


if __name__ == "__main__":
    main()
