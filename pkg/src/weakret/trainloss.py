"""Batch assembly and training objectives (top-k retrieval loss, triplet, embedding MSE)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .difftopk import PerturbConfig, hard_topk, perturbed_topk_forward, perturbed_topk_vjp, soft_topk
from .proxysim import ProxyMatrix


@dataclass
class Batch:
    scan_ids: list
    cad_ids: list
    proxy_rows: np.ndarray  # (n_scans, n_cads)
    positives: np.ndarray  # column of each scan's top-1 proxy CAD


def assemble_batch(scan_ids: Sequence[str], cad_ids: Sequence[str], proxy: ProxyMatrix,
                   batch_size: int, rng: np.random.Generator) -> Batch:
    """Sample scans uniformly without replacement and collect their top-1 proxy CADs."""
    if batch_size > len(scan_ids):
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(scan_ids)}")
    pick = rng.choice(len(scan_ids), size=batch_size, replace=False)
    chosen = [scan_ids[i] for i in pick]
    rows = proxy.values[proxy.rows(chosen)][:, proxy.cols(cad_ids)]
    best = np.argmax(rows, axis=1)  # first max wins
    keep = np.unique(best)
    batch_cads = [cad_ids[j] for j in keep]
    positives = np.searchsorted(keep, best)
    sub = proxy.values[proxy.rows(chosen)][:, proxy.cols(batch_cads)]
    return Batch(chosen, batch_cads, sub.astype(np.float64), positives)


@dataclass(frozen=True)
class LossConfig:
    k: int = 5
    perturb: PerturbConfig = PerturbConfig()
    soft_sigma: float = 0.005
    ordered: bool = True
    hard: bool = False


def target_stack(P: np.ndarray, k: int, cfg: LossConfig, nonce: int = 0) -> np.ndarray:
    """Per-rank proxy targets: SoftTopK(P) * P when ordered, plain P otherwise."""
    if not cfg.ordered:
        return np.repeat(P[..., None], k, axis=-1)
    if cfg.hard:
        sel = hard_topk(P, k)
    else:
        sel = soft_topk(P, k, sigma=cfg.soft_sigma, n_samples=cfg.perturb.n_samples,
                        seed=cfg.perturb.seed + 1, nonce=nonce)
    return sel * P[..., None]


def retrieval_loss(S, P, k: Optional[int] = None, cfg: LossConfig = LossConfig(), nonce: int = 0):
    """Negative mean proxy reward of the smoothed top-k retrievals.

    Returns (loss, dL/dS). The proxy targets are constants.
    """
    S = np.asarray(S, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if S.shape != P.shape or S.ndim != 2:
        raise ValueError(f"shape mismatch: S {S.shape} vs P {P.shape}")
    k = cfg.k if k is None else k
    k = min(k, S.shape[1])
    n_scans = S.shape[0]
    p_hat = target_stack(P, k, cfg, nonce)
    if cfg.hard:
        y = hard_topk(S, k)
        return -float(np.mean(np.sum(y * p_hat, axis=-2))), np.zeros_like(S)
    y, state = perturbed_topk_forward(S, k, cfg.perturb, nonce)
    loss = -float(np.mean(np.sum(y * p_hat, axis=-2)))
    grad = perturbed_topk_vjp(-p_hat / (n_scans * k), S, k, cfg.perturb, state)
    return loss, grad


def retrieval_score(S, P, k: int) -> float:
    """Batch mean of Score(Q, R): mean proxy similarity of the hard top-k retrievals."""
    idx = np.argsort(-np.asarray(S), axis=1, kind="stable")[:, :k]
    return float(np.mean(np.take_along_axis(np.asarray(P, dtype=np.float64), idx, axis=1)))


def triplet_loss(anchor, positive, negatives, margin: float = 0.2):
    """Hardest-negative triplet loss with squared Euclidean distance for one anchor.

    Returns (loss, d_anchor, d_positive, d_negatives).
    """
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    negs = np.asarray(negatives, dtype=np.float64).reshape(-1, a.size)
    d_neg_all = np.zeros_like(negs)
    if negs.shape[0] == 0:
        return 0.0, np.zeros_like(a), np.zeros_like(p), d_neg_all
    d_ap = float(np.sum((a - p) ** 2))
    d_an = np.sum((negs - a) ** 2, axis=1)
    j = int(np.argmin(d_an))
    loss = d_ap - float(d_an[j]) + margin
    if loss <= 0:
        return 0.0, np.zeros_like(a), np.zeros_like(p), d_neg_all
    n = negs[j]
    d_neg_all[j] = 2.0 * (a - n)
    return loss, 2.0 * (n - p), -2.0 * (a - p), d_neg_all


def batch_triplet_loss(F_scan: np.ndarray, F_cad: np.ndarray, positives: np.ndarray, margin: float = 0.2):
    """Mean triplet loss over a batch; other batch CADs act as negatives.

    Returns (loss, dL/dF_scan, dL/dF_cad).
    """
    n = F_scan.shape[0]
    d_scan = np.zeros_like(F_scan, dtype=np.float64)
    d_cad = np.zeros_like(F_cad, dtype=np.float64)
    total = 0.0
    cols = np.arange(F_cad.shape[0])
    for i in range(n):
        neg_idx = cols[cols != positives[i]]
        loss, da, dp, dn = triplet_loss(F_scan[i], F_cad[positives[i]], F_cad[neg_idx], margin)
        total += loss
        d_scan[i] += da
        d_cad[positives[i]] += dp
        d_cad[neg_idx] += dn
    return total / n, d_scan / n, d_cad / n


def mse_embedding_loss(S, P):
    """Mean squared error between cosine similarities and proxy similarities."""
    S = np.asarray(S, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if S.shape != P.shape:
        raise ValueError(f"shape mismatch: S {S.shape} vs P {P.shape}")
    diff = S - P
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
