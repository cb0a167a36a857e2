"""Experiment stages: dataset on disk, proxy matrix, training, embedding, retrieval, evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoder as enc
from .config import ExperimentConfig
from .proxysim import FeatureExtractor, ProxyMatrix, build_proxy_matrix
from .retrieval import QueryTruth, evaluate, retrieve_all, retrieve_from_scores, similarity_matrix
from .trainloss import LossConfig, assemble_batch, batch_triplet_loss, mse_embedding_loss, retrieval_loss
from .voxcore import FAMILIES, generate_dataset, read_grid, write_grid

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
PROXY_CACHE = "proxy.wprx"


class ContractError(RuntimeError):
    """Data or artifact contract violated (missing inputs, hash mismatch, non-finite loss)."""


@dataclass
class Dataset:
    root: Path
    entries: list
    objects: dict
    config_hash: str

    def ids(self, role: str, split: str | None = None, families=None) -> list:
        return [e["id"] for e in self.entries
                if e["role"] == role
                and (split is None or e["split"] == split)
                and (families is None or e["family"] in families)]

    def get(self, ids) -> list:
        return [self.objects[i] for i in ids]

    def entry(self, id: str) -> dict:
        return next(e for e in self.entries if e["id"] == id)


def gen_data(cfg: ExperimentConfig, out_dir, force: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ContractError(f"{out} is not empty (use --force)")
    grids = out / "grids"
    grids.mkdir(parents=True, exist_ok=True)
    cads, scans, source = generate_dataset(cfg.dataset)
    n_test = cfg.train.test_scans_per_prototype
    n_scans = cfg.dataset.n_scans_per_prototype
    entries = []
    for c in cads:
        write_grid(c, grids / f"{c.id}.wvox")
        entries.append({"id": c.id, "family": c.family, "role": "cad", "prototype": c.id, "split": "db"})
    for s in scans:
        write_grid(s, grids / f"{s.id}.wvox")
        index = int(s.id.rsplit("_s", 1)[1])
        split = "test" if index >= n_scans - n_test else "train"
        entries.append({"id": s.id, "family": s.family, "role": "scan", "prototype": source[s.id], "split": split})
    manifest = {"config_hash": cfg.dataset_digest(), "objects": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    return out


def manifest_digest(dataset_dir) -> str:
    return hashlib.sha256((Path(dataset_dir) / MANIFEST).read_bytes()).hexdigest()


def load_dataset(dataset_dir) -> Dataset:
    root = Path(dataset_dir)
    path = root / MANIFEST
    if not path.exists():
        raise ContractError(f"missing dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    objects = {}
    for e in manifest["objects"]:
        objects[e["id"]] = read_grid(root / "grids" / f"{e['id']}.wvox", id=e["id"], family=e["family"])
    return Dataset(root, manifest["objects"], objects, manifest["config_hash"])


def check_dataset(cfg: ExperimentConfig, ds: Dataset) -> None:
    if ds.config_hash != cfg.dataset_digest():
        raise ContractError("dataset was generated with a different dataset configuration")


def compute_proxy(cfg: ExperimentConfig, ds: Dataset):
    """Returns (ProxyMatrix, from_cache)."""
    scans = ds.get(ds.ids("scan"))
    cads = ds.get(ds.ids("cad"))
    fx = FeatureExtractor(seed=cfg.proxy.feature_seed)
    return build_proxy_matrix(scans, cads, cfg.proxy, ds.root / PROXY_CACHE, fx)


def load_proxy(cfg: ExperimentConfig, ds: Dataset) -> ProxyMatrix:
    if not (ds.root / PROXY_CACHE).exists():
        raise ContractError("proxy cache missing; run compute-proxy first")
    pm, _ = compute_proxy(cfg, ds)
    return pm


# -- splits --------------------------------------------------------------------


def training_split(cfg: ExperimentConfig, ds: Dataset):
    """(train scan ids, train CAD ids)."""
    fams = FAMILIES[:cfg.dataset.n_families]
    if cfg.train.mode == "unseen":
        fams = tuple(f for f in fams if f not in cfg.train.holdout_families)
    return ds.ids("scan", "train", fams), ds.ids("cad", None, fams)


def evaluation_split(cfg: ExperimentConfig, ds: Dataset):
    """(query scan ids, database CAD ids)."""
    if cfg.train.mode == "unseen":
        queries = ds.ids("scan", None, cfg.train.holdout_families)
    else:
        queries = ds.ids("scan", "test")
    return queries, ds.ids("cad")


def run_dir(cfg: ExperimentConfig, ds: Dataset) -> Path:
    path = ds.root / "runs" / cfg.hexdigest()[:12]
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- training --------------------------------------------------------------------


def log_digest(records) -> str:
    """Hash of the deterministic fields of a training log (wall time excluded)."""
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps({k: r[k] for k in ("step", "loss", "seed")}, sort_keys=True).encode())
    return h.hexdigest()


def _batch_loss(cfg: ExperimentConfig, S, P, positives, F_s, F_c, step: int):
    """Returns (loss, dL/dF_scan, dL/dF_cad)."""
    kind = cfg.train.loss
    if kind == "triplet":
        return batch_triplet_loss(F_s, F_c, positives, cfg.train.margin)
    if kind == "mse":
        loss, dS = mse_embedding_loss(S, P)
    else:
        lcfg = LossConfig(k=cfg.topk.k, perturb=cfg.perturb(), soft_sigma=cfg.topk.soft_sigma)
        loss, dS = retrieval_loss(S, P, cfg.topk.k, lcfg, nonce=step)
    return loss, dS @ F_c, dS.T @ F_s


def train(cfg: ExperimentConfig, ds: Dataset, proxy: ProxyMatrix, out_dir=None):
    """Train the encoder; returns (final params, best params, log records)."""
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    scan_ids, cad_ids = training_split(cfg, ds)
    params = enc.init_params(cfg.encoder)
    pool = scan_ids + cad_ids
    calib = [pool[i] for i in sorted(rng.choice(len(pool), min(cfg.train.calibration_size, len(pool)), replace=False))]
    params = enc.calibrate(params, ds.get(calib))

    batch_size = min(cfg.train.batch_size, len(scan_ids))
    steps_per_epoch = -(-len(scan_ids) // batch_size)
    records = []
    best, best_loss = params, np.inf
    log_fh = open(Path(out_dir) / "train_log.ndjson", "w") if out_dir else None
    step = 0
    try:
        for epoch in range(cfg.train.epochs):
            epoch_losses = []
            for _ in range(steps_per_epoch):
                t0 = time.perf_counter()
                batch = assemble_batch(scan_ids, cad_ids, proxy, batch_size, rng)
                objs = ds.get(batch.scan_ids) + ds.get(batch.cad_ids)
                x, scales = enc._batch_inputs(objs, cfg.encoder)
                F, cache = enc.forward(x, scales, params)
                n_s = len(batch.scan_ids)
                F_s, F_c = F[:n_s].astype(np.float64), F[n_s:].astype(np.float64)
                S = similarity_matrix(F_s, F_c)
                loss, dF_s, dF_c = _batch_loss(cfg, S, batch.proxy_rows, batch.positives, F_s, F_c, step)
                if not np.isfinite(loss):
                    raise ContractError(f"non-finite loss at step {step} (epoch {epoch})")
                dF = np.concatenate([dF_s, dF_c]).astype(F.dtype)
                grads = enc.backward(dF, cache, params)
                params = enc.adam_step(params, grads, lr=cfg.train.lr)
                rec = {"step": step, "epoch": epoch, "loss": float(loss),
                       "wall_ms": round(1000 * (time.perf_counter() - t0), 3), "seed": cfg.seed}
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                    log_fh.flush()
                epoch_losses.append(loss)
                step += 1
            mean_loss = float(np.mean(epoch_losses))
            log.info("epoch %d loss %.5f", epoch, mean_loss)
            if mean_loss < best_loss:
                best, best_loss = params.copy(), mean_loss
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        digest = cfg.digest()
        enc.save_checkpoint(params, Path(out_dir) / "checkpoint_final.wckp", digest)
        enc.save_checkpoint(best, Path(out_dir) / "checkpoint_best.wckp", digest)
    return params, best, records


# -- evaluation ------------------------------------------------------------------


def ground_truth(ds: Dataset, proxy: ProxyMatrix, query_ids, cad_ids, n_ranked: int = 3) -> dict:
    P = proxy.values[proxy.rows(query_ids)][:, proxy.cols(cad_ids)]
    truth = {}
    for qid, row in zip(query_ids, P):
        order = np.argsort(-row, kind="stable")[:n_ranked]
        e = ds.entry(qid)
        truth[qid] = QueryTruth(gt_cad=e["prototype"], family=e["family"], ranked=[cad_ids[i] for i in order])
    return truth


def embed_all(ds: Dataset, params: enc.EncoderParams, ids) -> enc.EmbeddingSet:
    return enc.embed_objects(ds.get(ids), params)


def evaluate_results(ds: Dataset, proxy: ProxyMatrix, results, query_ids, cad_ids):
    truth = ground_truth(ds, proxy, query_ids, cad_ids)
    cad_occ = {c: ds.objects[c].occupancy for c in cad_ids}
    cad_family = {c: ds.objects[c].family for c in cad_ids}
    return evaluate(results, truth, cad_occ, cad_family)


def learned_results(ds: Dataset, params, query_ids, cad_ids, k: int = 5, embeddings=None):
    es = embeddings or embed_all(ds, params, list(query_ids) + list(cad_ids))
    return retrieve_all(es.subset(query_ids), es.subset(cad_ids), min(k, len(cad_ids)))


def oracle_results(proxy: ProxyMatrix, query_ids, cad_ids, k: int = 5):
    P = proxy.values[proxy.rows(query_ids)][:, proxy.cols(cad_ids)].astype(np.float64)
    return retrieve_from_scores(query_ids, cad_ids, P, min(k, len(cad_ids)))


def mean_top1_proxy(proxy: ProxyMatrix, results) -> float:
    vals = [proxy.values[proxy.rows([r.query_id])[0], proxy.cols([r.ranked_cad_ids[0]])[0]] for r in results]
    return float(np.mean(np.asarray(vals, dtype=np.float64)))
