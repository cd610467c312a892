"""``dropda`` command line: gen-data, train, eval, sweep, grad-check."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import replace
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from dropda import __version__
from dropda import data as D
from dropda.adapt import train
from dropda.config import METRICS, ExperimentConfig, load_config
from dropda.errors import DimensionError, ParseError, StateError, ValidationError
from dropda.evaluation import (SUMMARY_HEADER, accuracy, average_ranks, cached_cell,
                               feature_distance, nemenyi_cd, proxy_a_distance, summarize,
                               sweep_plan, write_cells)
from dropda.network import load_checkpoint, save_checkpoint

log = logging.getLogger("dropda")

USER_ERRORS = (ValidationError, DimensionError, ParseError, StateError)


class CommandError(Exception):
    pass


def _write_text(path: Path, text: str) -> None:
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc.strerror}") from None


def _mkdir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create directory {path}: {exc.strerror}") from None


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write_manifest(run_dir: Path, cfg: ExperimentConfig, artifacts, started: float, **extra) -> None:
    manifest = {
        "config": cfg.to_dict(),
        "artifacts": sorted(artifacts),
        "duration_s": round(time.time() - started, 3),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "version": __version__,
        **extra,
    }
    _write_text(run_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    out = cfg.data_dir
    _mkdir(out)
    src, tgt = cfg.data.generate()
    for name, ds in (("source.csv", src), ("target_train.csv", tgt.unlabeled()),
                     ("target_eval.csv", tgt)):
        try:
            D.save_csv(ds, out / name)
        except OSError as exc:
            raise CommandError(f"cannot write {out / name}: {exc.strerror}") from None
    log.info("wrote %s", out)
    return out


def load_training_data(cfg: ExperimentConfig):
    d = cfg.data_dir
    paths = {name: d / f"{name}.csv" for name in ("source", "target_train", "target_eval")}
    missing = [str(p) for name, p in paths.items() if name != "target_eval" and not p.exists()]
    if missing:
        raise CommandError(f"missing data files: {', '.join(missing)} (run gen-data first)")
    source = D.load_csv(paths["source"], require_labels=True)
    target = D.load_csv(paths["target_train"], n_classes=source.n_classes, require_labels=False)
    if target.labels is not None:
        raise CommandError(f"{paths['target_train']} must not carry labels")
    target_eval = None
    if paths["target_eval"].exists():
        target_eval = D.load_csv(paths["target_eval"], n_classes=source.n_classes, require_labels=True)
    return source, target, target_eval


def cmd_train(cfg: ExperimentConfig) -> list[Path]:
    source, target, target_eval = load_training_data(cfg)
    run_dirs = []
    for seed in cfg.seeds:
        started = time.time()
        tcfg = cfg.train_config(seed)
        params, history = train(source, target, tcfg, target_eval=target_eval)
        run_dir = cfg.experiment_dir / f"{tcfg.variant}-seed{seed}"
        _mkdir(run_dir)
        save_checkpoint(run_dir / "checkpoint.npz", params)
        _write_text(run_dir / "history.csv", history.to_csv())
        _write_manifest(run_dir, cfg, ["checkpoint.npz", "history.csv", "manifest.json"], started,
                        seed=seed)
        log.info("%s: final acc_src=%s acc_tgt=%s", run_dir, history.last_accuracy("acc_src"),
                 history.last_accuracy("acc_tgt"))
        run_dirs.append(run_dir)
    return run_dirs


def cmd_eval(checkpoint, data_paths, metrics) -> str:
    """Metrics CSV with header ``dataset,metric,value``.

    ``accuracy`` is reported for every labeled dataset. ``proxy_a`` (learned
    features) and ``proxy_a_raw`` (inputs) compare each dataset after the
    first against the first one.
    """
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise ValidationError(f"unknown metrics {bad}; valid metrics: {', '.join(METRICS)}")
    if not data_paths:
        raise ValidationError("at least one --data file is required")
    try:
        params = load_checkpoint(checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        raise CommandError(f"cannot load checkpoint {checkpoint}: {exc}") from None
    datasets = [D.load_csv(p, n_classes=params.n_classes, require_labels=False) for p in data_paths]
    for p, ds in zip(data_paths, datasets):
        if ds.dim != params.input_dim:
            raise DimensionError(
                f"{p} has {ds.dim} feature columns but checkpoint {checkpoint} expects {params.input_dim}")
    if any(m.startswith("proxy_a") for m in metrics) and len(datasets) < 2:
        raise ValidationError("proxy_a metrics need at least two --data files (reference first)")
    rows = []
    for p, ds in zip(data_paths, datasets):
        name = Path(p).name
        for m in metrics:
            if m == "accuracy" and ds.labels is not None:
                rows.append([name, m, repr(accuracy(params, ds))])
            elif m == "proxy_a" and ds is not datasets[0]:
                rows.append([name, m, repr(feature_distance(params, datasets[0], ds).d_a)])
            elif m == "proxy_a_raw" and ds is not datasets[0]:
                rows.append([name, m, repr(proxy_a_distance(datasets[0].features, ds.features).d_a)])
    return _csv_text(["dataset", "metric", "value"], rows)


def _cell_job(args):
    variant, k, seed, tcfg, source, target, target_eval, cell_dir = args
    return cached_cell(cell_dir, variant, k, seed, tcfg, source, target, target_eval)


def cmd_sweep(cfg: ExperimentConfig, workers: int = 1) -> tuple[Path, list]:
    """Run the K sweep plus the baseline methods used for ranking.

    Every cell writes its own file under ``<experiment>/sweep/cells`` and is
    skipped when that file exists, so an interrupted sweep resumes.
    """
    source, target_eval = cfg.data.generate()
    target = target_eval.unlabeled()
    out = cfg.experiment_dir / "sweep"
    cell_dir = out / "cells"
    _mkdir(cell_dir)
    started = time.time()
    base = replace(cfg.train, eval_period=0)
    seeds = list(cfg.seeds)
    k_values = [int(k) for k in cfg.sweep.k_values]
    plan = sweep_plan(base, k_values, seeds, source.n_classes)
    k_cur = plan[-1][1]
    ranked = {"source_only": 0, "grl": 1, "cd3a": k_cur, "d3a": base.k_fixed}
    extra = [(m, ranked[m], s) for m in cfg.sweep.methods for s in seeds]
    jobs = list(dict.fromkeys(plan + extra))
    payload = [(v, k, s, base, source, target, target_eval, cell_dir) for v, k, s in jobs]

    results, failures = {}, []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {job: pool.submit(_cell_job, p) for job, p in zip(jobs, payload)}
            for job, fut in futures.items():
                try:
                    results[job] = fut.result()
                except Exception as exc:  # noqa: BLE001 - reported per cell
                    failures.append((job, exc))
    else:
        for job, p in zip(jobs, payload):
            try:
                results[job] = _cell_job(p)
            except Exception as exc:  # noqa: BLE001
                failures.append((job, exc))

    sweep_cells = [results[j] for j in plan if j in results]
    write_cells(out / "sweep.csv", sweep_cells)
    _write_text(out / "sweep_summary.csv", _csv_text(SUMMARY_HEADER, summarize(sweep_cells)))
    baseline_cells = [results[j] for j in extra if j in results]
    write_cells(out / "methods.csv", baseline_cells)
    artifacts = ["sweep.csv", "sweep_summary.csv", "methods.csv"]

    if not failures:
        table = np.array([[results[(m, ranked[m], s)].acc_tgt for m in cfg.sweep.methods] for s in seeds])
        ranks = average_ranks(table, higher_is_better=True, methods=cfg.sweep.methods)
        cd = nemenyi_cd(len(cfg.sweep.methods), len(seeds), cfg.sweep.alpha)
        rows = [[m, repr(float(r))] for m, r in zip(ranks.methods, ranks.average)]
        text = _csv_text(["method", "avg_rank"], rows) + f"cd,{cd!r}\n"
        _write_text(out / "cd_diagram.csv", text)
        artifacts.append("cd_diagram.csv")
    _write_manifest(out, cfg, artifacts + ["manifest.json"], started,
                    failures=[f"{v}-k{k}-seed{s}: {e}" for (v, k, s), e in failures])
    return out, failures


def cmd_grad_check(seed: int = 0, n_configs: int = 24) -> tuple[float, int]:
    from dropda.gradcheck import run_suite

    return run_suite(seed=seed, n_configs=n_configs)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dropda", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        sp.add_argument("--out", help="output root (overrides config 'out')")
        sp.add_argument("--variant", choices=["source_only", "grl", "d3a", "cd3a"])

    common(sub.add_parser("gen-data", help="write source/target CSV files"))
    common(sub.add_parser("train", help="train one run per seed"))
    sp = sub.add_parser("sweep", help="K sweep plus significance ranking")
    common(sp)
    sp.add_argument("--workers", type=int, default=1)
    sp = sub.add_parser("eval", help="evaluate a checkpoint on CSV datasets")
    sp.add_argument("--checkpoint", required=True, type=Path)
    sp.add_argument("--data", action="append", default=[], type=Path,
                    help="dataset CSV; repeat. The first is the proxy-A reference")
    sp.add_argument("--metrics", default="accuracy",
                    help=f"comma-separated, from: {', '.join(METRICS)}")
    sp.add_argument("--out", type=Path, help="write metrics.csv here instead of stdout")
    sp = sub.add_parser("grad-check", help="finite-difference gradient suite")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--configs", type=int, default=24)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "grad-check":
            worst, n = cmd_grad_check(args.seed, args.configs)
            ok = worst < 1e-4
            print(f"grad-check: {n} configurations, max relative error {worst:.3e} "
                  f"({'ok' if ok else 'FAILED'})")
            return 0 if ok else 1
        if args.command == "eval":
            text = cmd_eval(args.checkpoint, args.data, [m.strip() for m in args.metrics.split(",") if m.strip()])
            if args.out:
                _mkdir(args.out)
                _write_text(args.out / "metrics.csv", text)
            else:
                sys.stdout.write(text)
            return 0
        cfg = load_config(args.config, seed=args.seed, out=args.out, variant=args.variant)
        if args.command == "gen-data":
            print(cmd_gen_data(cfg))
        elif args.command == "train":
            for d in cmd_train(cfg):
                print(d)
        elif args.command == "sweep":
            out, failures = cmd_sweep(cfg, workers=args.workers)
            if failures:
                for (v, k, s), exc in failures:
                    print(f"failed: {v} k={k} seed={s}: {exc}", file=sys.stderr)
                return 1
            print(out)
        return 0
    except (CommandError, *USER_ERRORS) as exc:
        print(f"dropda {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
