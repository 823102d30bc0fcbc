"""DAC (sequential) against plain fine-tuning on the 5-task shapes stream."""

import argparse
from pathlib import Path

import numpy as np

from daclab.cli import run_experiment
from daclab.config import load_config
from daclab.eval import average_accuracy, forgetting

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def summarize(res):
    a = res.accuracy
    n = a.n
    return average_accuracy(a, n), float(np.mean([forgetting(a, i, n) for i in range(1, n)]))


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    print("method,seed,avg_accuracy,mean_forgetting")
    table = {}
    for name, cfg_file in (("dac", "shapes_sequential.yaml"), ("naive", "shapes_naive.yaml")):
        cfg = load_config(CONFIGS / cfg_file, env={})
        for seed in args.seeds:
            acc, fgt = summarize(run_experiment(cfg, seed))
            table.setdefault(name, []).append((acc, fgt))
            print(f"{name},{seed},{acc:.4f},{fgt:.4f}", flush=True)
    for name, vals in table.items():
        v = np.array(vals)
        print(f"# {name}: avg {v[:, 0].mean():.4f} +- {v[:, 0].std():.4f}, forgetting {v[:, 1].mean():.4f}")


if __name__ == "__main__":
    main()
