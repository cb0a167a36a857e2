"""Command line entry point: ``weakret <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/contract error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import pipeline as pl
from .config import ExperimentConfig, load_config
from .difftopk import PerturbConfig, estimator_spread
from .retrieval import write_query_csv
from .voxcore import FormatError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else ExperimentConfig()


def _dataset(args, cfg):
    ds = pl.load_dataset(args.dataset)
    pl.check_dataset(cfg, ds)
    return ds


def _params(args, cfg, ds):
    path = Path(args.checkpoint) if args.checkpoint else pl.run_dir(cfg, ds) / "checkpoint_final.wckp"
    if not path.exists():
        raise pl.ContractError(f"checkpoint not found: {path}")
    try:
        return enc.load_checkpoint(path, cfg.encoder, expected_hash=cfg.digest())
    except ValueError as exc:
        raise pl.ContractError(str(exc)) from exc


def cmd_gen_data(args):
    cfg = _config(args)
    out = pl.gen_data(cfg, args.out, force=args.force)
    ds = pl.load_dataset(out)
    n_cad, n_scan = len(ds.ids("cad")), len(ds.ids("scan"))
    print(f"wrote {n_cad} CADs and {n_scan} scans to {out}")
    print(f"manifest sha256 {pl.manifest_digest(out)}")


def cmd_compute_proxy(args):
    cfg = _config(args)
    ds = _dataset(args, cfg)
    pm, cached = pl.compute_proxy(cfg, ds)
    v = pm.values
    print(f"proxy matrix {v.shape[0]}x{v.shape[1]} ({'cache hit' if cached else 'computed'})")
    print(f"min {v.min():.6f} mean {v.mean():.6f} max {v.max():.6f}")


def cmd_train(args):
    cfg = _config(args)
    ds = _dataset(args, cfg)
    pm = pl.load_proxy(cfg, ds)
    out = pl.run_dir(cfg, ds)
    _, _, records = pl.train(cfg, ds, pm, out)
    print(f"trained {len(records)} steps, final loss {records[-1]['loss']:.6f}")
    print(f"log digest {pl.log_digest(records)}")
    print(f"outputs in {out}")


def cmd_embed(args):
    cfg = _config(args)
    ds = _dataset(args, cfg)
    params = _params(args, cfg, ds)
    queries, cads = pl.evaluation_split(cfg, ds)
    es = pl.embed_all(ds, params, list(queries) + list(cads))
    path = pl.run_dir(cfg, ds) / "embeddings.wemb"
    enc.write_embeddings(es, path)
    print(f"wrote {len(es.ids)} embeddings to {path}")


def _results(args, cfg, ds, pm):
    queries, cads = pl.evaluation_split(cfg, ds)
    if args.oracle == "proxy":
        return pl.oracle_results(pm, queries, cads), queries, cads
    emb_path = pl.run_dir(cfg, ds) / "embeddings.wemb"
    es = enc.read_embeddings(emb_path) if emb_path.exists() and not args.checkpoint else None
    if es is None:
        es = pl.embed_all(ds, _params(args, cfg, ds), list(queries) + list(cads))
    return pl.learned_results(ds, None, queries, cads, embeddings=es), queries, cads


def cmd_retrieve(args):
    cfg = _config(args)
    ds = _dataset(args, cfg)
    pm = pl.load_proxy(cfg, ds)
    results, _, _ = _results(args, cfg, ds, pm)
    suffix = "_oracle" if args.oracle == "proxy" else ""
    path = pl.run_dir(cfg, ds) / f"retrieval{suffix}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        k = len(results[0].ranked_cad_ids) if results else 0
        w.writerow(["query_id"] + [f"rank{i + 1}" for i in range(k)] + [f"score{i + 1}" for i in range(k)])
        for r in results:
            w.writerow([r.query_id] + r.ranked_cad_ids + [f"{s:.6f}" for s in r.scores])
    print(f"wrote {len(results)} rows to {path}")


def cmd_eval(args):
    cfg = _config(args)
    ds = _dataset(args, cfg)
    pm = pl.load_proxy(cfg, ds)
    results, queries, cads = _results(args, cfg, ds, pm)
    report, rows = pl.evaluate_results(ds, pm, results, queries, cads)
    suffix = "_oracle" if args.oracle == "proxy" else ""
    out = pl.run_dir(cfg, ds)
    (out / f"eval_report{suffix}.json").write_text(report.to_json())
    write_query_csv(rows, out / f"eval_queries{suffix}.csv")
    print(report.to_json(), end="")


def cmd_bench(args):
    scores = np.random.default_rng(args.seed).uniform(0, 4 * args.sigma, args.n)
    cfg = PerturbConfig(sigma=args.sigma, seed=args.seed)
    counts = [int(c) for c in args.samples.split(",")]
    print("n_samples  mean_entry_std  std*sqrt(n)")
    for n, spread in estimator_spread(scores, args.k, cfg, counts, repeats=args.repeats):
        print(f"{n:9d}  {spread:14.6e}  {spread * np.sqrt(n):10.4f}")


def cmd_report(args):
    cfg = _config(args)
    ds = _dataset(args, cfg)
    out = pl.run_dir(cfg, ds)
    reports = {}
    for name in ("eval_report", "eval_report_oracle"):
        path = out / f"{name}.json"
        if path.exists():
            reports["learned" if name == "eval_report" else "proxy oracle"] = json.loads(path.read_text())
    if not reports:
        raise pl.ContractError(f"no evaluation reports in {out}; run eval first")
    keys = ("top1", "top5", "cat", "iou_top1", "iou_top5", "rq", "mrr")
    print(f"{'method':<14}" + "".join(f"{k:>10}" for k in keys))
    for name, rep in reports.items():
        print(f"{name:<14}" + "".join(f"{rep[k]:>10.4f}" for k in keys))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="weakret", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, dataset=True):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value experiment config file")
        if dataset:
            p.add_argument("--dataset", required=True, help="dataset directory from gen-data")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, dataset=False)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    add("compute-proxy", cmd_compute_proxy)
    add("train", cmd_train)
    for name, fn in (("embed", cmd_embed), ("retrieve", cmd_retrieve), ("eval", cmd_eval)):
        p = add(name, fn)
        p.add_argument("--checkpoint")
        if name != "embed":
            p.add_argument("--oracle", choices=["proxy"], default=None)
    add("report", cmd_report)
    p = sub.add_parser("bench", help="perturbed top-k estimator spread versus sample count")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--samples", default="100,1000,10000")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        args.func(args)
    except (pl.ContractError, FormatError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
