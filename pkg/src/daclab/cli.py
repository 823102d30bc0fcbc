"""
Command line entry point.

    daclab run <config> [--out DIR] [--seed N]
    daclab ablate-sources <config> --sources single_image,noise [--out DIR] [--seed N]
    daclab report <run_dir>

Exit codes: 0 success, 1 runtime failure, 2 config or usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, SourceConfig, build_source, build_stream, load_config
from .dcl import RunResult, naive_finetune_run, run_independent, run_sequential
from .errors import ConfigError, DaclabError
from .eval import ProbeConfig, average_accuracy, cka_report_csv, cka_stream_report, forgetting, linear_probe
from .models import load_model, save_model

log = logging.getLogger("daclab")

METRICS_SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


def run_experiment(cfg: ExperimentConfig, seed: int) -> RunResult:
    stream = build_stream(cfg, seed)
    arch = cfg.arch.spec(stream[0].train_x.shape[1:])
    if cfg.scheme == "rehearsal_free_naive":
        return naive_finetune_run(stream, arch, cfg.adapt, seed, cfg.eval_mode)
    source = build_source(cfg.source)
    aug = cfg.aug_config(arch.input_shape)
    if cfg.scheme == "independent":
        return run_independent(
            stream, arch, cfg.adapt, cfg.consolidation, source, seed, aug, cfg.eval_mode, workers=cfg.workers
        )
    return run_sequential(stream, arch, cfg.adapt, cfg.consolidation, source, seed, aug, cfg.eval_mode)


def metrics(res: RunResult, cfg: ExperimentConfig, seed: int, seconds: float) -> dict:
    a = res.accuracy
    T = a.n
    return {
        "schema_version": METRICS_SCHEMA_VERSION,
        "name": cfg.name,
        "scheme": cfg.scheme,
        "seed": seed,
        "average_accuracy": [average_accuracy(a, t) for t in range(1, T + 1)],
        "final_average_accuracy": average_accuracy(a, T),
        "forgetting": {str(i): forgetting(a, i, T) for i in range(1, T + 1)},
        "mean_forgetting": float(np.mean([forgetting(a, i, T) for i in range(1, T)])) if T > 1 else 0.0,
        "sc_accuracy": list(res.sc_accuracy),
        "peak_teachers": res.peak_teachers,
        "wall_clock_seconds": seconds,
    }


def write_run(out: Path, res: RunResult, cfg: ExperimentConfig, seed: int, seconds: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    (out / "accuracy_matrix.csv").write_text(res.accuracy.to_csv())
    (out / "message_log.json").write_text(res.log.to_json())
    (out / "metrics.json").write_text(json.dumps(metrics(res, cfg, seed, seconds), indent=1) + "\n")
    (out / "config.yaml").write_text(dataclasses.replace(cfg, seeds=[seed]).to_yaml())
    for t, m in enumerate(res.snapshots, 1):
        save_model(m, ck / f"consolidated_{t}.dacm")
    for t, m in enumerate(res.sc_models, 1):
        save_model(m, ck / f"sc_{t}.dacm")


def _seeds(cfg: ExperimentConfig, override: int | None) -> list[int]:
    return [override] if override is not None else list(cfg.seeds)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out_root = Path(args.out or cfg.output_dir)
    for seed in _seeds(cfg, args.seed):
        t0 = time.perf_counter()
        res = run_experiment(cfg, seed)
        seconds = time.perf_counter() - t0
        write_run(out_root / f"seed_{seed}", res, cfg, seed, seconds)
        log.info("seed %d: final average accuracy %.4f (%.1fs)", seed, average_accuracy(res.accuracy, res.accuracy.n), seconds)
    print(out_root)
    return 0


def parse_sources(text: str, base: SourceConfig) -> list[tuple[str, SourceConfig]]:
    """``kind`` or ``kind=path`` entries; path-based kinds reuse the config's path when omitted."""
    entries = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        kind, _, path = item.partition("=")
        if not path and kind == base.kind:
            path = base.path
        try:
            entries.append((item, SourceConfig(kind, path or None)))
        except ValueError as exc:
            raise ConfigError(f"--sources {item}: {exc}") from None
    if not entries:
        raise ConfigError("--sources: no sources given")
    missing = [f"--sources {label}: file not found: {s.path}" for label, s in entries if s.path and not Path(s.path).exists()]
    if missing:
        raise ConfigError(missing)
    return entries


def cmd_ablate_sources(args) -> int:
    cfg = load_config(args.config)
    if cfg.scheme == "rehearsal_free_naive":
        raise ConfigError("scheme: rehearsal_free_naive does not consolidate, there is no source to ablate")
    sources = parse_sources(args.sources, cfg.source)
    out_root = Path(args.out or cfg.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, src in sources:
        cell_cfg = dataclasses.replace(cfg, source=src)
        for seed in _seeds(cfg, args.seed):
            res = run_experiment(cell_cfg, seed)
            acc = average_accuracy(res.accuracy, res.accuracy.n)
            rows.append((label, seed, acc))
            log.info("%s seed %d: %.4f", label, seed, acc)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "seed", "avg_accuracy"])
    for label, seed, acc in rows:
        w.writerow([label, seed, f"{acc:.6f}"])
    (out_root / "ablation.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source", "n", "mean", "std"])
    for label, _ in sources:
        vals = np.array([acc for lab, _, acc in rows if lab == label])
        w.writerow([label, len(vals), f"{vals.mean():.6f}", f"{vals.std(ddof=1) if len(vals) > 1 else 0.0:.6f}"])
    (out_root / "ablation_summary.csv").write_text(buf.getvalue())
    print(out_root / "ablation.csv")
    return 0


def _report_one(run_dir: Path) -> None:
    ck = run_dir / "checkpoints"
    sc_paths = sorted(ck.glob("sc_*.dacm"), key=lambda p: int(p.stem.split("_")[1])) if ck.is_dir() else []
    if not sc_paths:
        raise UsageError(f"{run_dir}: no SC checkpoints under {ck}")
    cfg = load_config(run_dir / "config.yaml", env={})
    seed = cfg.seeds[0]
    stream = build_stream(cfg, seed)
    models = [load_model(p) for p in sc_paths]
    tap = models[0].arch.penultimate
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "tap", "probe_accuracy"])
    for t, m in enumerate(models, 1):
        w.writerow([t, tap, f"{linear_probe(m, tap, stream, ProbeConfig(), seed):.6f}"])
    (run_dir / "probe.csv").write_text(buf.getvalue())
    if len(models) > 1:
        report = cka_stream_report(models, 0, stream[0], models[0].arch.layer_names)
        (run_dir / "cka.csv").write_text(cka_report_csv(report))


def cmd_report(args) -> int:
    root = Path(args.run_dir)
    if not root.is_dir():
        raise UsageError(f"{root}: not a directory")
    dirs = [root] if (root / "checkpoints").is_dir() else sorted(p for p in root.glob("seed_*") if p.is_dir())
    if not dirs:
        raise UsageError(f"{root}: no checkpoints found")
    for d in dirs:
        _report_one(d)
        print(d / "probe.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="daclab", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: config output_dir)")
    r.add_argument("--seed", type=int, help="run this seed only")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate-sources", help="repeat an experiment per consolidation data source")
    a.add_argument("config")
    a.add_argument("--sources", required=True, help="comma-separated kinds, optionally kind=path")
    a.add_argument("--out")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate_sources)

    rep = sub.add_parser("report", help="linear probe and CKA reports for a finished run")
    rep.add_argument("run_dir")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DaclabError, OSError, ValueError, KeyError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
