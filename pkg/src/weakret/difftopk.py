"""Differentiable top-k via the perturbed-maximum method.

Indicator stacks have shape ``(..., N, K)``: column ``k`` is a distribution
over the ``N`` candidates for rank ``k`` (rank 0 = largest score). Leading
dimensions are independent rows, each perturbed with its own noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class PerturbConfig:
    sigma: float = 0.05
    n_samples: int = 1000
    seed: int = 0
    share_samples_fwd_bwd: bool = True
    store_samples: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass
class RetainedState:
    """What the backward pass needs to regenerate (or reuse) the forward noise."""

    scores: np.ndarray
    k: int
    cfg: PerturbConfig
    nonce: int
    indices: Optional[np.ndarray] = None  # (..., n, K) when cfg.store_samples
    noise: Optional[np.ndarray] = None


def _check_k(n: int, k: int) -> None:
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= N (got k={k}, N={n})")


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, largest first, lower index on ties."""
    scores = np.asarray(scores)
    _check_k(scores.shape[-1], k)
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def indicators_from_indices(indices: np.ndarray, n: int) -> np.ndarray:
    """One-hot stack (..., N, K) from rank indices (..., K)."""
    k = indices.shape[-1]
    out = np.zeros(indices.shape[:-1] + (n, k))
    np.put_along_axis(out, indices[..., None, :], 1.0, axis=-2)
    return out


def hard_topk(scores, k: int) -> np.ndarray:
    """Exact top-k indicator stack; the maximiser of the top-k linear program."""
    scores = np.asarray(scores, dtype=np.float64)
    return indicators_from_indices(topk_indices(scores, k), scores.shape[-1])


def gaussian_noise(seed: int, nonce: int, shape) -> np.ndarray:
    """Standard normal noise from a counter-based generator keyed by (seed, nonce)."""
    key = np.random.SeedSequence([int(seed) & (2**64 - 1), int(nonce) & (2**64 - 1)]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).standard_normal(shape)


def _sample_indices(scores: np.ndarray, k: int, sigma: float, noise: np.ndarray) -> np.ndarray:
    perturbed = scores[..., None, :] + sigma * noise  # (..., n, N)
    return topk_indices(perturbed, k)


def _average_indicators(indices: np.ndarray, n: int) -> np.ndarray:
    """Mean one-hot stack over the sample axis without materialising (n, N, K)."""
    *lead, m, k = indices.shape
    rows = int(np.prod(lead)) if lead else 1
    flat = indices.reshape(rows, m, k)
    offsets = (np.arange(rows)[:, None, None] * n * k) + flat * k + np.arange(k)
    counts = np.bincount(offsets.ravel(), minlength=rows * n * k).reshape(rows, n, k)
    return (counts / m).reshape(*lead, n, k)


def _noise_for(state_scores: np.ndarray, cfg: PerturbConfig, nonce: int) -> np.ndarray:
    shape = state_scores.shape[:-1] + (cfg.n_samples, state_scores.shape[-1])
    return gaussian_noise(cfg.seed, nonce, shape)


def perturbed_topk_forward(scores, k: int, cfg: PerturbConfig = PerturbConfig(), nonce: int = 0):
    """Monte-Carlo estimate of E[hard_topk(scores + sigma * Z)].

    Returns (indicator stack, RetainedState).
    """
    scores = np.asarray(scores, dtype=np.float64)
    _check_k(scores.shape[-1], k)
    noise = _noise_for(scores, cfg, nonce)
    indices = _sample_indices(scores, k, cfg.sigma, noise)
    y = _average_indicators(indices, scores.shape[-1])
    state = RetainedState(scores=scores.copy(), k=k, cfg=cfg, nonce=nonce)
    if cfg.store_samples:
        state.indices = indices
        state.noise = noise
    return y, state


_BACKWARD_NONCE_SALT = 0x9E3779B97F4A7C15


def perturbed_topk_vjp(upstream, scores, k: int, cfg: PerturbConfig, state: RetainedState) -> np.ndarray:
    """Vector-Jacobian product of the smoothed top-k.

    grad[j] = mean_m( <upstream, Y_m> * Z_m[j] ) / sigma, contracting the full
    Jacobian (off-diagonal terms included).
    """
    scores = np.asarray(scores, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if (state.k != k or state.cfg != cfg or state.scores.shape != scores.shape
            or not np.array_equal(state.scores, scores)):
        raise ValueError("retained state does not match this call")
    if upstream.shape != scores.shape + (k,):
        raise ValueError(f"upstream must have shape {scores.shape + (k,)}")

    if cfg.share_samples_fwd_bwd:
        if state.indices is not None:
            noise, indices = state.noise, state.indices
        else:
            noise = _noise_for(scores, cfg, state.nonce)
            indices = _sample_indices(scores, k, cfg.sigma, noise)
    else:
        noise = _noise_for(scores, cfg, state.nonce ^ _BACKWARD_NONCE_SALT)
        indices = _sample_indices(scores, k, cfg.sigma, noise)

    # <upstream, Y_m> = sum_k upstream[idx_mk, k]
    picked = np.take_along_axis(upstream[..., None, :, :], indices[..., None, :], axis=-2)[..., 0, :]
    weights = picked.sum(axis=-1)  # (..., n)
    grad = np.einsum("...m,...mj->...j", weights, noise) / (cfg.n_samples * cfg.sigma)
    return grad


def soft_topk(scores, k: int, sigma: float = 0.005, n_samples: int = 1000, seed: int = 0, nonce: int = 0):
    """Forward-only smoothed top-k with a small perturbation scale."""
    cfg = PerturbConfig(sigma=sigma, n_samples=n_samples, seed=seed)
    y, _ = perturbed_topk_forward(scores, k, cfg, nonce)
    return y


def estimator_spread(scores, k: int, cfg: PerturbConfig, sample_counts, repeats: int = 20):
    """Per-n mean entrywise standard deviation of the forward estimate across independent nonces."""
    rows = []
    for n in sample_counts:
        c = PerturbConfig(sigma=cfg.sigma, n_samples=int(n), seed=cfg.seed)
        draws = np.stack([perturbed_topk_forward(scores, k, c, nonce=r)[0] for r in range(repeats)])
        rows.append((int(n), float(draws.std(axis=0, ddof=1).mean())))
    return rows
