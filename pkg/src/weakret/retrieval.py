"""Cosine retrieval over an embedding database and retrieval metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .encoder import EmbeddingSet

METRIC_KEYS = ("top1", "top5", "cat", "iou_top1", "iou_top5", "rq", "mrr")


@dataclass
class RetrievalResult:
    query_id: str
    ranked_cad_ids: list
    scores: list


@dataclass
class EvalReport:
    top1: float
    top5: float
    cat: float
    iou_top1: float
    iou_top5: float
    rq: float
    mrr: float
    per_family: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_json(self) -> str:
        payload = self.metrics()
        payload["per_family"] = {fam: self.per_family[fam] for fam in sorted(self.per_family)}
        return json.dumps(payload, indent=2, sort_keys=False) + "\n"


def similarity_matrix(scan_embs, cad_embs) -> np.ndarray:
    a = np.asarray(scan_embs, dtype=np.float64)
    b = np.asarray(cad_embs, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"embedding dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    return np.clip(a @ b.T, -1.0, 1.0)


def rank_row(scores: np.ndarray, k: int) -> np.ndarray:
    """Descending order, lower index first on ties."""
    if k > scores.shape[-1]:
        raise ValueError(f"k={k} exceeds database size {scores.shape[-1]}")
    return np.argsort(-scores, kind="stable")[:k]


def retrieve_topk(query_emb, db: EmbeddingSet, k: int, query_id: str = "") -> RetrievalResult:
    row = similarity_matrix(np.asarray(query_emb)[None, :], db.vectors)[0]
    idx = rank_row(row, k)
    return RetrievalResult(query_id, [db.ids[i] for i in idx], row[idx].tolist())


def retrieve_all(queries: EmbeddingSet, db: EmbeddingSet, k: int) -> list:
    S = similarity_matrix(queries.vectors, db.vectors)
    return retrieve_from_scores(queries.ids, db.ids, S, k)


def retrieve_from_scores(query_ids, cad_ids, scores: np.ndarray, k: int) -> list:
    """Rank CADs by an arbitrary score matrix (learned cosine or proxy oracle)."""
    out = []
    for qid, row in zip(query_ids, scores):
        idx = rank_row(row, k)
        out.append(RetrievalResult(qid, [cad_ids[i] for i in idx], [float(row[i]) for i in idx]))
    return out


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


@dataclass
class QueryTruth:
    gt_cad: str
    family: str
    ranked: list  # annotated ranking (up to 3 ids) for RQ


def per_query_metrics(res: RetrievalResult, truth: QueryTruth, cad_occ: Mapping, cad_family: Mapping) -> dict:
    ranked = res.ranked_cad_ids
    gt_occ = cad_occ[truth.gt_cad]
    ious = [iou(cad_occ[c], gt_occ) for c in ranked[:5]]
    rank = ranked.index(truth.gt_cad) + 1 if truth.gt_cad in ranked else 0
    positions = min(len(truth.ranked), len(ranked))
    return {
        "top1": float(ranked[0] == truth.gt_cad),
        "top5": float(truth.gt_cad in ranked[:5]),
        "cat": float(cad_family[ranked[0]] == truth.family),
        "iou_top1": ious[0],
        "iou_top5": float(np.mean(ious)),
        "rq_hits": sum(ranked[p] == truth.ranked[p] for p in range(positions)),
        "rq_total": len(truth.ranked),
        "mrr": 1.0 / rank if rank else 0.0,
    }


def _aggregate(rows: list) -> dict:
    out = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_KEYS if k != "rq"}
    total = sum(r["rq_total"] for r in rows)
    out["rq"] = sum(r["rq_hits"] for r in rows) / total if total else 0.0
    return {k: out[k] for k in METRIC_KEYS}


def evaluate(results: Sequence[RetrievalResult], ground_truth: Mapping[str, QueryTruth],
             cad_occ: Mapping, cad_family: Mapping):
    """Aggregate retrieval metrics. Returns (EvalReport, per-query rows)."""
    if not results:
        raise ValueError("no retrieval results to evaluate")
    rows = []
    for res in results:
        if res.query_id not in ground_truth:
            raise ValueError(f"missing ground truth for query {res.query_id!r}")
        truth = ground_truth[res.query_id]
        row = per_query_metrics(res, truth, cad_occ, cad_family)
        row.update(query_id=res.query_id, family=truth.family, gt_cad=truth.gt_cad,
                   retrieved=" ".join(res.ranked_cad_ids))
        rows.append(row)
    families = sorted({r["family"] for r in rows})
    per_family = {f: _aggregate([r for r in rows if r["family"] == f]) for f in families}
    report = EvalReport(**_aggregate(rows), per_family=per_family,
                        counts={"queries": len(rows), **{f: sum(r["family"] == f for r in rows) for f in families}})
    return report, rows


def write_query_csv(rows: list, path) -> None:
    fields = ["query_id", "family", "gt_cad", "retrieved", "top1", "top5", "cat", "iou_top1", "iou_top5", "mrr"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in fields})
