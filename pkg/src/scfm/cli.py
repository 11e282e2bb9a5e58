"""Command-line harness: single runs, sweeps, and the verification suite.

Every run writes one metrics CSV per (method, K, seed) cell, a verbatim
copy of the effective config, and a manifest recording the config hash and
package version.  Sweeps additionally aggregate terminal metrics into a
summary CSV (median and interquartile range per cell).  Cells execute in
parallel up to the configured worker count; all files are written
atomically.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config

GMM_METRICS = ("l2_prior", "l2_posterior", "grad_std", "support_size")
PCFG_METRICS = ("production_kl", "sleep_loss_proxy")

SUMMARY_HEADER = ["benchmark", "method", "K", "metric", "median", "q1", "q3", "n_seeds"]


def _atomic_write(path, writer_fn):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell_name(benchmark, method, k, seed):
    return f"{benchmark}_{method}_K{k}_seed{seed}"


def run_cell(benchmark, method, k, seed, cfg_dict):
    """Train one cell and write its artifacts; returns a result record."""
    cfg = ExperimentConfig(**cfg_dict)
    name = _cell_name(benchmark, method, k, seed)
    csv_path = os.path.join(cfg.out_dir, name + ".csv")
    try:
        if benchmark == "gmm":
            from .gmm import GMM_CSV_HEADER, GmmTrainer

            trainer = GmmTrainer(
                method,
                k,
                seed,
                init_mode=cfg.init_mode,
                c=cfg.c,
                batch_size=cfg.gmm_batch_size,
                delta=cfg.delta,
                temp_start=cfg.temp_start,
                temp_end=cfg.temp_end,
                iterations=cfg.iterations,
            )
            rows = trainer.run(
                cadence=cfg.cadence,
                grad_std_repeats=cfg.grad_std_repeats,
                wallclock_max_s=cfg.wallclock_max_s,
            )

            def write(fh):
                w = csv.writer(fh)
                w.writerow(GMM_CSV_HEADER)
                for r in rows:
                    w.writerow(
                        [r.iteration, r.method, r.k, r.seed, repr(r.l2_prior),
                         repr(r.l2_posterior), repr(r.grad_std), r.support_size]
                    )

            _atomic_write(csv_path, write)
            last = rows[-1]
            terminal = {
                "l2_prior": last.l2_prior,
                "l2_posterior": last.l2_posterior,
                "grad_std": last.grad_std,
                "support_size": float(last.support_size),
            }
        else:
            from .config import derive_rng
            from .pcfg import (
                PCFG_CSV_HEADER,
                PcfgTrainer,
                posterior_dump,
                write_posterior_dump,
            )

            trainer = PcfgTrainer(
                method,
                k,
                seed,
                iterations=cfg.iterations,
                batch_size=cfg.pcfg_batch_size,
                max_expansions=cfg.max_expansions,
                data_max_expansions=cfg.data_max_expansions,
                sleep_proxy_samples=cfg.sleep_proxy_samples,
                fixed_corpus_size=cfg.fixed_corpus_size,
            )
            rows = trainer.run(cadence=cfg.cadence, wallclock_max_s=cfg.wallclock_max_s)
            status = "ok"
            if trainer.stalled:
                status = "capped: tree-length stall"
            elif not trainer.retained:
                status = "capped: wall clock"

            def write(fh):
                w = csv.writer(fh)
                w.writerow(PCFG_CSV_HEADER)
                for r in rows:
                    w.writerow(
                        [r.iteration, r.method, r.k, r.seed, repr(r.production_kl),
                         repr(r.sleep_loss_proxy), repr(r.wallclock_s)]
                    )

            _atomic_write(csv_path, write)
            dump = posterior_dump(
                trainer.net,
                cfg.posterior_dump_sentence,
                cfg.posterior_dump_samples,
                derive_rng(seed, method, k, "eval"),
                cfg.max_expansions,
            )
            dump_path = os.path.join(cfg.out_dir, name + "_posterior.txt")
            _atomic_write(
                dump_path,
                lambda fh: [
                    fh.write(f"{count}\t{count / cfg.posterior_dump_samples:.6f}\t{tree}\n")
                    for tree, count in dump
                ],
            )
            last = rows[-1]
            terminal = {
                "production_kl": last.production_kl,
                "sleep_loss_proxy": last.sleep_loss_proxy,
            }
    except Exception as exc:  # aborted cell: record and propagate failure
        return {
            "method": method,
            "k": k,
            "seed": seed,
            "status": f"failed: {type(exc).__name__}: {exc}",
            "csv": None,
            "terminal": None,
        }
    if benchmark == "gmm":
        status = "ok"
    return {
        "method": method,
        "k": k,
        "seed": seed,
        "status": status,
        "csv": os.path.basename(csv_path),
        "terminal": terminal,
    }


def run_experiment(cfg, write_summary=False, stream=None):
    """Run every (method, K, seed) cell of the config; returns exit status."""
    stream = stream or sys.stdout
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    _atomic_write(
        os.path.join(cfg.out_dir, "config.ini"), lambda fh: fh.write(cfg.to_ini())
    )
    cells = [
        (cfg.benchmark, m, k, s)
        for m in cfg.methods
        for k in cfg.ks
        for s in cfg.seeds
    ]
    cfg_dict = cfg.as_dict()
    if cfg.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(
                pool.map(_run_cell_star, [(c, cfg_dict) for c in cells])
            )
    else:
        results = [run_cell(*c, cfg_dict) for c in cells]

    manifest = {
        "version": __version__,
        "config_sha256": cfg.digest(),
        "benchmark": cfg.benchmark,
        "cells": [
            {k: v for k, v in r.items() if k != "terminal"} for r in results
        ],
    }
    _atomic_write(
        os.path.join(cfg.out_dir, "manifest.json"),
        lambda fh: fh.write(json.dumps(manifest, indent=2) + "\n"),
    )
    failed = [r for r in results if r["status"].startswith("failed")]
    for r in results:
        stream.write(
            f"{_cell_name(cfg.benchmark, r['method'], r['k'], r['seed'])}: {r['status']}\n"
        )
    if write_summary:
        _write_summary(cfg, results)
    return 1 if failed else 0


def _run_cell_star(args):
    (benchmark, method, k, seed), cfg_dict = args
    return run_cell(benchmark, method, k, seed, cfg_dict)


def _write_summary(cfg, results):
    metrics = GMM_METRICS if cfg.benchmark == "gmm" else PCFG_METRICS
    rows = []
    for m in cfg.methods:
        for k in cfg.ks:
            cell = [r for r in results if r["method"] == m and r["k"] == k]
            ok = [r for r in cell if not r["status"].startswith("failed")]
            for metric in metrics:
                if ok:
                    vals = np.array([r["terminal"][metric] for r in ok])
                    q1, med, q3 = np.percentile(vals, [25.0, 50.0, 75.0])
                    rows.append(
                        [cfg.benchmark, m, k, metric, repr(float(med)),
                         repr(float(q1)), repr(float(q3)), len(ok)]
                    )
                else:
                    rows.append([cfg.benchmark, m, k, metric, "failed", "", "", 0])

    def write(fh):
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        w.writerows(rows)

    _atomic_write(os.path.join(cfg.out_dir, "summary.csv"), write)


def _base_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    if getattr(args, "iterations", None) is not None:
        cfg.iterations = args.iterations
    if getattr(args, "cadence", None) is not None:
        cfg.cadence = args.cadence
    if getattr(args, "wallclock_max_s", None) is not None:
        cfg.wallclock_max_s = args.wallclock_max_s
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    return cfg


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="scfm",
        description="Benchmark harness for stochastic-control-flow gradient estimators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, nargs="+", required=True)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--iterations", type=int, default=None)
        p.add_argument("--cadence", type=int, default=None)
        p.add_argument("--wallclock-max-s", type=float, default=None)
        p.add_argument("--workers", type=int, default=None)

    g = sub.add_parser("gmm", help="train the mixture benchmark")
    common(g)
    g.add_argument("--method", required=True)
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--c", type=int, default=None)
    g.add_argument("--delta", type=float, default=None)
    g.add_argument("--init-mode", choices=("adverse", "uniform"), default=None)
    g.add_argument("--temp-start", type=float, default=None)
    g.add_argument("--temp-end", type=float, default=None)
    g.add_argument("--batch-size", type=int, default=None)

    p = sub.add_parser("pcfg", help="train the grammar benchmark")
    common(p)
    p.add_argument("--method", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--max-expansions", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)

    sub.add_parser("check", help="run the exact-oracle verification suite")

    s = sub.add_parser("sweep", help="run a method x K x seed product from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", default=None)
    s.add_argument("--workers", type=int, default=None)

    args = parser.parse_args(argv)

    if args.command == "check":
        from .checks import run_checks

        return 0 if run_checks() else 1

    if args.command == "sweep":
        cfg = load_config(args.config)
        if args.out_dir:
            cfg.out_dir = args.out_dir
        if args.workers is not None:
            cfg.workers = args.workers
        return run_experiment(cfg, write_summary=True)

    cfg = _base_config(args)
    cfg.benchmark = args.command
    cfg.methods = [args.method]
    cfg.ks = [args.k]
    cfg.seeds = list(args.seed)
    if args.command == "gmm":
        if args.c is not None:
            cfg.c = args.c
        if args.delta is not None:
            cfg.delta = args.delta
        if args.init_mode is not None:
            cfg.init_mode = args.init_mode
        if args.temp_start is not None:
            cfg.temp_start = args.temp_start
        if args.temp_end is not None:
            cfg.temp_end = args.temp_end
        if args.batch_size is not None:
            cfg.gmm_batch_size = args.batch_size
    else:
        if args.max_expansions is not None:
            cfg.max_expansions = args.max_expansions
        if args.batch_size is not None:
            cfg.pcfg_batch_size = args.batch_size
    return run_experiment(cfg)


if __name__ == "__main__":
    raise SystemExit(main())
