"""Proxy scan-to-CAD similarity: perceptual (multi-view features) and masked IoU."""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .renderer import DEFAULT_VIEWS, ViewPose, render_view
from .voxcore import FormatError, VoxelObject, encode_grid, rescale_anisotropic

PROXY_MAGIC = b"WPRX1"
PROXY_VERSION = 1


def _conv2d_same(image: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """image (H, W, C), kernels (kh, kw, C, O) -> (H, W, O), zero padded."""
    kh, kw = kernels.shape[:2]
    padded = np.pad(image, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    windows = sliding_window_view(padded, (kh, kw), axis=(0, 1))  # H, W, C, kh, kw
    return np.einsum("hwcij,ijco->hwo", windows, kernels, optimize=True)


def _avg_pool(x: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = x.shape
    return x[: h - h % factor, : w - w % factor].reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


@dataclass
class FeatureExtractor:
    """Image features for the perceptual metric.

    ``filter_bank`` runs two fixed random conv/ReLU/avg-pool stages.
    ``external`` looks features up in a table keyed by ``"<object id>/<view index>"``,
    e.g. loaded from an ``.npz`` file produced by a pretrained network.
    """

    kind: str = "filter_bank"
    seed: int = 0
    pool: int = 4
    table: Optional[dict] = None
    filters: list = field(init=False, default_factory=list)

    def __post_init__(self):
        if self.kind == "filter_bank":
            rng = np.random.default_rng(self.seed)
            self.filters = [rng.standard_normal((5, 5, 3, 32)), rng.standard_normal((3, 3, 32, 16))]
        elif self.kind == "external":
            if self.table is None:
                raise ValueError("external feature extractor needs a feature table")
        else:
            raise ValueError(f"unknown feature extractor kind: {self.kind!r}")

    @classmethod
    def from_file(cls, path) -> "FeatureExtractor":
        with np.load(path) as data:
            table = {k: data[k] for k in data.files}
        return cls(kind="external", table=table)

    @property
    def pool_stages(self) -> int:
        return len(self.filters)

    def __call__(self, image: np.ndarray, key: Optional[str] = None) -> np.ndarray:
        if self.kind == "external":
            return np.asarray(self.table[key], dtype=np.float64)
        x = np.asarray(image, dtype=np.float64)
        for kernels in self.filters:
            x = _avg_pool(np.maximum(_conv2d_same(x, kernels), 0.0), self.pool)
        return x


@dataclass(frozen=True)
class ProxyConfig:
    w_percep: float = 0.7
    w_geo: float = 0.3
    views: tuple = DEFAULT_VIEWS
    resolution: int = 128
    feature_seed: int = 0

    def __post_init__(self):
        if abs(self.w_percep + self.w_geo - 1.0) > 1e-9:
            raise ValueError("proxy weights must sum to 1")

    def describe(self) -> str:
        views = ";".join(f"{v.azimuth_deg:g},{v.elevation_deg:g}" for v in self.views)
        return f"w_percep={self.w_percep!r} w_geo={self.w_geo!r} views={views} res={self.resolution} fseed={self.feature_seed}"


@dataclass
class ViewFeatures:
    """Flattened per-view features of one object plus its occupied pixel fractions."""

    features: np.ndarray  # (V, F)
    occupied: np.ndarray  # (V,)


def view_features(obj: VoxelObject, views: Sequence[ViewPose], fx: FeatureExtractor,
                  resolution: int = 128) -> ViewFeatures:
    feats, occupied = [], []
    for i, view in enumerate(views):
        out = render_view(obj, view, resolution)
        feats.append(np.ravel(fx(out.composite, key=f"{obj.id}/{i}")))
        occupied.append(out.occupied_fraction)
    return ViewFeatures(np.stack(feats), np.array(occupied))


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dot = np.sum(a * b, axis=-1)
    denom = na * nb
    return np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0)


def perceptual_from_features(scan: ViewFeatures, cad: ViewFeatures) -> float:
    total = scan.occupied.sum()
    if total <= 0:
        return 0.0
    weights = scan.occupied / total
    cos = np.clip(_cosine_rows(scan.features, cad.features), -1.0, 1.0)
    return float((float(np.dot(weights, cos)) + 1.0) / 2.0)


def perceptual_similarity(scan: VoxelObject, cad: VoxelObject, views: Sequence[ViewPose] = DEFAULT_VIEWS,
                          fx: Optional[FeatureExtractor] = None, resolution: int = 128) -> float:
    """View-weighted feature cosine between renders, mapped from [-1, 1] to [0, 1]."""
    if len(views) == 0:
        raise ValueError("at least one view is required")
    fx = fx or FeatureExtractor()
    return perceptual_from_features(view_features(scan, views, fx, resolution),
                                    view_features(cad, views, fx, resolution))


def masked_iou(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    inter = np.count_nonzero(a & b & mask)
    union = np.count_nonzero((a | b) & mask)
    return 1.0 if union == 0 else inter / union


def geometric_similarity(scan: VoxelObject, cad: VoxelObject) -> float:
    """IoU restricted to the scan's observed space, after fitting the CAD to the scan's aspect."""
    if scan.visibility is None:
        raise ValueError("scan lacks visibility")
    fitted = rescale_anisotropic(cad, scan.scale)
    return masked_iou(scan.occupancy, fitted.occupancy, scan.visibility)


def combine(f_percep: float, f_geo: float, cfg: ProxyConfig = ProxyConfig()) -> float:
    return cfg.w_percep * f_percep + cfg.w_geo * f_geo


def combined_similarity(scan: VoxelObject, cad: VoxelObject, cfg: ProxyConfig = ProxyConfig(),
                        fx: Optional[FeatureExtractor] = None) -> float:
    fx = fx or FeatureExtractor(seed=cfg.feature_seed)
    f_percep = perceptual_similarity(scan, cad, cfg.views, fx, cfg.resolution)
    f_geo = geometric_similarity(scan, cad)
    return combine(f_percep, f_geo, cfg)


@dataclass
class ProxyMatrix:
    values: np.ndarray  # float32 (n_scans, n_cads)
    scan_ids: list
    cad_ids: list
    weights: tuple = (0.7, 0.3)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.weights = tuple(float(np.float32(w)) for w in self.weights)
        if self.values.shape != (len(self.scan_ids), len(self.cad_ids)):
            raise ValueError("proxy matrix shape does not match id lists")

    def rows(self, scan_ids) -> np.ndarray:
        index = {s: i for i, s in enumerate(self.scan_ids)}
        return np.array([index[s] for s in scan_ids], dtype=np.int64)

    def cols(self, cad_ids) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.cad_ids)}
        return np.array([index[c] for c in cad_ids], dtype=np.int64)


def content_hash(scans, cads, cfg: ProxyConfig, fx: Optional[FeatureExtractor] = None) -> bytes:
    h = hashlib.sha256()
    h.update(cfg.describe().encode())
    if fx is not None:
        h.update(f"{fx.kind}:{fx.seed}:{fx.pool}".encode())
    for tag, objs in ((b"S", scans), (b"C", cads)):
        h.update(tag)
        for obj in objs:
            h.update(obj.id.encode() + b"\0")
            h.update(encode_grid(obj))
    return h.digest()


def _pack_ids(ids) -> bytes:
    out = [struct.pack("<I", len(ids))]
    for i in ids:
        raw = i.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
    return b"".join(out)


def _unpack_ids(data: bytes, offset: int):
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    ids = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, offset)
        offset += 2
        ids.append(data[offset:offset + n].decode("utf-8"))
        offset += n
    return ids, offset


def encode_proxy(pm: ProxyMatrix, digest: bytes) -> bytes:
    n_s, n_c = pm.values.shape
    head = PROXY_MAGIC + struct.pack("<B", PROXY_VERSION) + digest
    head += struct.pack("<IIff", n_s, n_c, *pm.weights)
    return head + pm.values.astype("<f4").tobytes() + _pack_ids(pm.scan_ids) + _pack_ids(pm.cad_ids)


def decode_proxy(data: bytes):
    """Return (ProxyMatrix, content hash)."""
    if data[:5] != PROXY_MAGIC or len(data) < 6 or data[5] != PROXY_VERSION:
        raise FormatError("unsupported format")
    try:
        digest = data[6:38]
        n_s, n_c, wp, wg = struct.unpack_from("<IIff", data, 38)
        offset = 54
        values = np.frombuffer(data, "<f4", n_s * n_c, offset).reshape(n_s, n_c).astype(np.float32)
        offset += 4 * n_s * n_c
        scan_ids, offset = _unpack_ids(data, offset)
        cad_ids, offset = _unpack_ids(data, offset)
    except (struct.error, ValueError) as exc:
        raise FormatError("corrupt file") from exc
    if offset != len(data) or len(digest) != 32:
        raise FormatError("corrupt file")
    return ProxyMatrix(values, scan_ids, cad_ids, (wp, wg)), digest


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def compute_proxy_values(scans, cads, cfg: ProxyConfig, fx: FeatureExtractor):
    """Return (values (n_scans, n_cads) float64, f_percep, f_geo)."""
    scan_feats = [view_features(s, cfg.views, fx, cfg.resolution) for s in scans]
    cad_feats = [view_features(c, cfg.views, fx, cfg.resolution) for c in cads]
    percep = np.array([[perceptual_from_features(sf, cf) for cf in cad_feats] for sf in scan_feats])
    geo = np.array([[geometric_similarity(s, c) for c in cads] for s in scans])
    return cfg.w_percep * percep + cfg.w_geo * geo, percep, geo


def build_proxy_matrix(scans, cads, cfg: ProxyConfig = ProxyConfig(), cache_path=None,
                       fx: Optional[FeatureExtractor] = None):
    """Full scan x CAD proxy matrix, loaded from cache when the content hash matches.

    Returns (ProxyMatrix, from_cache).
    """
    if not scans or not cads:
        raise ValueError("scans and cads must be non-empty")
    fx = fx or FeatureExtractor(seed=cfg.feature_seed)
    digest = content_hash(scans, cads, cfg, fx)
    if cache_path is not None and Path(cache_path).exists():
        try:
            cached, cached_digest = decode_proxy(Path(cache_path).read_bytes())
            if cached_digest == digest:
                return cached, True
        except FormatError:
            pass
    values, _, _ = compute_proxy_values(scans, cads, cfg, fx)
    pm = ProxyMatrix(np.clip(values, 0.0, 1.0), [s.id for s in scans], [c.id for c in cads],
                     (cfg.w_percep, cfg.w_geo))
    if cache_path is not None:
        _atomic_write(Path(cache_path), encode_proxy(pm, digest))
    return pm, False
