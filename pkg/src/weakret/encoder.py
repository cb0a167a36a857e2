"""Siamese 3D-CNN voxel encoder with hand-written backprop, Adam and checkpoints.

Activations are channel-last: ``(B, D, H, W, C)``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .voxcore import FormatError, VoxelObject

CKPT_MAGIC = b"WCKP1"
CKPT_VERSION = 1
EMB_MAGIC = b"WEMB1"


@dataclass(frozen=True)
class EncoderConfig:
    input_res: int = 36
    channels: tuple = (8, 16, 32)
    res_blocks: int = 1
    embed_dim: int = 128
    kernel: int = 3
    stride: int = 2
    seed: int = 0
    dtype: str = "float32"

    def describe(self) -> str:
        ch = ",".join(str(c) for c in self.channels)
        return (f"input_res={self.input_res} channels={ch} res_blocks={self.res_blocks} "
                f"embed_dim={self.embed_dim} kernel={self.kernel} stride={self.stride} "
                f"seed={self.seed} dtype={self.dtype}")

    def digest(self) -> bytes:
        return hashlib.sha256(self.describe().encode()).digest()

    def spatial_sizes(self) -> list[int]:
        sizes = [self.input_res]
        pad = self.kernel // 2
        for _ in self.channels:
            sizes.append((sizes[-1] + 2 * pad - self.kernel) // self.stride + 1)
        return sizes

    @property
    def feature_dim(self) -> int:
        return self.spatial_sizes()[-1] ** 3 * self.channels[-1]


@dataclass
class EncoderParams:
    config: EncoderConfig
    params: dict
    rms: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "EncoderParams":
        dup = lambda d: {k: a.copy() for k, a in d.items()}
        return EncoderParams(self.config, dup(self.params), dup(self.rms), dup(self.m), dup(self.v), self.step)

    def names(self) -> list[str]:
        return list(self.params)


def init_params(config: EncoderConfig = EncoderConfig()) -> EncoderParams:
    """Kaiming-uniform (fan-in) weights, zero biases, unit normalisation statistics."""
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    k = config.kernel
    params, rms = {}, {}

    def conv(name, cin, cout):
        bound = np.sqrt(6.0 / (k ** 3 * cin))
        params[f"{name}.w"] = rng.uniform(-bound, bound, (k, k, k, cin, cout)).astype(dtype)
        params[f"{name}.b"] = np.zeros(cout, dtype)

    cin = 1
    for i, cout in enumerate(config.channels):
        conv(f"down{i}", cin, cout)
        rms[f"down{i}"] = np.ones(cout, dtype)
        cin = cout
    for r in range(config.res_blocks):
        conv(f"res{r}.a", cin, cin)
        conv(f"res{r}.b", cin, cin)
    fan_in = config.feature_dim + 3
    bound = np.sqrt(6.0 / fan_in)
    params["fc.w"] = rng.uniform(-bound, bound, (fan_in, config.embed_dim)).astype(dtype)
    params["fc.b"] = np.zeros(config.embed_dim, dtype)

    zeros = {name: np.zeros_like(a) for name, a in params.items()}
    return EncoderParams(config, params, rms, zeros, {n: a.copy() for n, a in zeros.items()}, 0)


# -- convolution ---------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    b, d, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)))
    do, ho, wo = [(n + 2 * pad - k) // stride + 1 for n in (d, h, w)]
    cols = np.empty((b, do, ho, wo, k, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols[:, :, :, :, i, j, l, :] = xp[:, i:i + stride * (do - 1) + 1:stride,
                                                  j:j + stride * (ho - 1) + 1:stride,
                                                  l:l + stride * (wo - 1) + 1:stride, :]
    return cols.reshape(b, do, ho, wo, k * k * k * c)


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    b, d, h, w, c = x_shape
    do, ho, wo = dcols.shape[1:4]
    dcols = dcols.reshape(b, do, ho, wo, k, k, k, c)
    dxp = np.zeros((b, d + 2 * pad, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                dxp[:, i:i + stride * (do - 1) + 1:stride,
                    j:j + stride * (ho - 1) + 1:stride,
                    l:l + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, :, i, j, l, :]
    return dxp[:, pad:pad + d, pad:pad + h, pad:pad + w, :]


def conv3d_forward(x, w, b, stride):
    k = w.shape[0]
    cols = _im2col(x, k, stride, k // 2)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out, cols


def conv3d_backward(dout, cols, x_shape, w, stride):
    k = w.shape[0]
    cout = w.shape[-1]
    flat = dout.reshape(-1, cout)
    dw = (cols.reshape(-1, cols.shape[-1]).T @ flat).reshape(w.shape)
    db = flat.sum(axis=0)
    dcols = dout @ w.reshape(-1, cout).T
    dx = _col2im(dcols, x_shape, k, stride, k // 2)
    return dx, dw, db


# -- network -------------------------------------------------------------------


def _batch_inputs(objs, config: EncoderConfig):
    dtype = np.dtype(config.dtype)
    res = (config.input_res,) * 3
    for o in objs:
        if o.occupancy.shape != res:
            raise ValueError(f"resolution mismatch: expected {res}, got {o.occupancy.shape}")
    x = np.stack([o.occupancy for o in objs]).astype(dtype)[..., None]
    scales = np.stack([o.scale for o in objs]).astype(dtype)
    return x, scales


def forward(x: np.ndarray, scales: np.ndarray, p: EncoderParams, keep: bool = True):
    """Batched forward pass. Returns (embeddings (B, E), cache)."""
    cfg = p.config
    W = p.params
    cache = {"x_shapes": [], "cols": [], "pre": []}
    h = x
    for i in range(len(cfg.channels)):
        out, cols = conv3d_forward(h, W[f"down{i}.w"], W[f"down{i}.b"], cfg.stride)
        out = out / p.rms[f"down{i}"]
        if keep:
            cache["x_shapes"].append(h.shape)
            cache["cols"].append(cols)
            cache["pre"].append(out)
        h = np.maximum(out, 0)
    res_cache = []
    for r in range(cfg.res_blocks):
        a, cols_a = conv3d_forward(h, W[f"res{r}.a.w"], W[f"res{r}.a.b"], 1)
        ha = np.maximum(a, 0)
        bb, cols_b = conv3d_forward(ha, W[f"res{r}.b.w"], W[f"res{r}.b.b"], 1)
        pre = h + bb
        if keep:
            res_cache.append((h.shape, cols_a, a, cols_b, pre))
        h = np.maximum(pre, 0)
    cache["res"] = res_cache
    flat = np.concatenate([h.reshape(h.shape[0], -1), scales], axis=1)
    z = flat @ W["fc.w"] + W["fc.b"]
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    f = z / np.maximum(norm, 1e-12)
    if keep:
        cache.update(flat=flat, feat_shape=h.shape, f=f, norm=norm)
    return f, cache


def backward(df: np.ndarray, cache: dict, p: EncoderParams) -> dict:
    """Gradients of sum(df * f) w.r.t. every parameter, summed over the batch."""
    cfg = p.config
    W = p.params
    grads = {}
    f, norm = cache["f"], cache["norm"]
    # d(z/|z|) = (I - f f^T) / |z|
    dz = (df - f * np.sum(df * f, axis=1, keepdims=True)) / np.maximum(norm, 1e-12)
    grads["fc.w"] = cache["flat"].T @ dz
    grads["fc.b"] = dz.sum(axis=0)
    dflat = dz @ W["fc.w"].T
    n_feat = int(np.prod(cache["feat_shape"][1:]))
    dh = dflat[:, :n_feat].reshape(cache["feat_shape"])

    for r in reversed(range(cfg.res_blocks)):
        x_shape, cols_a, a, cols_b, pre = cache["res"][r]
        dpre = dh * (pre > 0)
        dha, grads[f"res{r}.b.w"], grads[f"res{r}.b.b"] = conv3d_backward(
            dpre, cols_b, a.shape, W[f"res{r}.b.w"], 1)
        da = dha * (a > 0)
        dx, grads[f"res{r}.a.w"], grads[f"res{r}.a.b"] = conv3d_backward(
            da, cols_a, x_shape, W[f"res{r}.a.w"], 1)
        dh = dpre + dx

    for i in reversed(range(len(cfg.channels))):
        pre = cache["pre"][i]
        dout = dh * (pre > 0) / p.rms[f"down{i}"]
        dh, grads[f"down{i}.w"], grads[f"down{i}.b"] = conv3d_backward(
            dout, cache["cols"][i], cache["x_shapes"][i], W[f"down{i}.w"], cfg.stride)
    return {name: grads[name] for name in W}


def encode_batch(objs, p: EncoderParams, chunk: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(objs), chunk):
        x, s = _batch_inputs(objs[start:start + chunk], p.config)
        out.append(forward(x, s, p, keep=False)[0])
    return np.concatenate(out) if out else np.zeros((0, p.config.embed_dim))


def encode(obj: VoxelObject, p: EncoderParams) -> np.ndarray:
    """L2-normalised embedding of one object."""
    return encode_batch([obj], p)[0]


def encode_backward(obj: VoxelObject, p: EncoderParams, upstream: np.ndarray) -> dict:
    x, s = _batch_inputs([obj], p.config)
    _, cache = forward(x, s, p)
    return backward(np.asarray(upstream, dtype=x.dtype)[None, :], cache, p)


def calibrate(p: EncoderParams, objs) -> EncoderParams:
    """Freeze per-channel RMS statistics of each downscale block on a calibration batch."""
    out = p.copy()
    x, scales = _batch_inputs(objs, p.config)
    h = x
    for i in range(len(p.config.channels)):
        conv, _ = conv3d_forward(h, out.params[f"down{i}.w"], out.params[f"down{i}.b"], p.config.stride)
        rms = np.sqrt(np.mean(conv.astype(np.float64) ** 2, axis=(0, 1, 2, 3)))
        out.rms[f"down{i}"] = np.maximum(rms, 1e-3).astype(conv.dtype)
        h = np.maximum(conv / out.rms[f"down{i}"], 0)
    return out


# -- optimiser ---------------------------------------------------------------------


def adam_step(p: EncoderParams, grads: dict, lr: float = 3e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> EncoderParams:
    """One bias-corrected Adam update; returns new parameters."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    out = p.copy()
    out.step = p.step + 1
    t = out.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        dtype = out.params[name].dtype
        g = np.asarray(g, dtype=dtype)
        m = beta1 * out.m[name] + (1.0 - beta1) * g
        v = beta2 * out.v[name] + (1.0 - beta2) * g * g
        out.m[name] = m.astype(dtype)
        out.v[name] = v.astype(dtype)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        out.params[name] = (out.params[name] - update).astype(dtype)
    return out


# -- serialisation -----------------------------------------------------------------


def _tensor_order(p: EncoderParams):
    names = p.names()
    order = [("param", n) for n in names] + [("m", n) for n in names] + [("v", n) for n in names]
    order += [("rms", n) for n in p.rms]
    return order


def _lookup(p: EncoderParams, kind: str):
    return {"param": p.params, "m": p.m, "v": p.v, "rms": p.rms}[kind]


def encode_checkpoint(p: EncoderParams, config_hash: Optional[bytes] = None) -> bytes:
    digest = config_hash if config_hash is not None else p.config.digest()
    if len(digest) != 32:
        raise ValueError("config hash must be 32 bytes")
    order = _tensor_order(p)
    chunks = [CKPT_MAGIC, struct.pack("<B", CKPT_VERSION), digest, struct.pack("<II", p.step, len(order))]
    for kind, name in order:
        a = _lookup(p, kind)[name]
        chunks.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(p: EncoderParams, path, config_hash: Optional[bytes] = None) -> None:
    Path(path).write_bytes(encode_checkpoint(p, config_hash))


def decode_checkpoint(data: bytes, config: EncoderConfig):
    """Return (EncoderParams, stored config hash)."""
    if data[:5] != CKPT_MAGIC or len(data) < 6 or data[5] != CKPT_VERSION:
        raise FormatError("unsupported checkpoint")
    template = init_params(EncoderConfig(**{**config.__dict__, "dtype": "float32"}))
    try:
        digest = data[6:38]
        step, count = struct.unpack_from("<II", data, 38)
        offset = 46
        order = _tensor_order(template)
        if count != len(order):
            raise FormatError("checkpoint does not match encoder configuration")
        for kind, name in order:
            (ndim,) = struct.unpack_from("<I", data, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            target = _lookup(template, kind)
            if tuple(shape) != target[name].shape:
                raise FormatError("checkpoint does not match encoder configuration")
            n = int(np.prod(shape))
            if offset + 4 * n > len(data):
                raise FormatError("corrupt file")
            target[name] = np.frombuffer(data, "<f4", n, offset).reshape(shape).astype(np.float32)
            offset += 4 * n
    except struct.error as exc:
        raise FormatError("corrupt file") from exc
    if offset != len(data):
        raise FormatError("corrupt file")
    template.step = step
    return template, digest


def load_checkpoint(path, config: EncoderConfig = EncoderConfig(), expected_hash: Optional[bytes] = None):
    params, digest = decode_checkpoint(Path(path).read_bytes(), config)
    if expected_hash is not None and digest != expected_hash:
        raise ValueError("checkpoint/config hash mismatch")
    return params


# -- embedding sets ------------------------------------------------------------------


@dataclass
class EmbeddingSet:
    ids: list
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError("embedding rows must match ids")

    def subset(self, ids) -> "EmbeddingSet":
        index = {i: n for n, i in enumerate(self.ids)}
        return EmbeddingSet(list(ids), self.vectors[[index[i] for i in ids]])


def embed_objects(objs, p: EncoderParams) -> EmbeddingSet:
    return EmbeddingSet([o.id for o in objs], encode_batch(list(objs), p))


def encode_embeddings(es: EmbeddingSet) -> bytes:
    count, dim = es.vectors.shape
    out = [EMB_MAGIC, struct.pack("<II", count, dim), struct.pack("<I", count)]
    for i in es.ids:
        raw = i.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
    out.append(es.vectors.astype("<f4").tobytes())
    return b"".join(out)


def decode_embeddings(data: bytes) -> EmbeddingSet:
    if data[:5] != EMB_MAGIC:
        raise FormatError("unsupported format")
    try:
        count, dim, n_ids = struct.unpack_from("<III", data, 5)
        offset = 17
        ids = []
        for _ in range(n_ids):
            (n,) = struct.unpack_from("<H", data, offset)
            ids.append(data[offset + 2:offset + 2 + n].decode("utf-8"))
            offset += 2 + n
        if len(data) != offset + 4 * count * dim or n_ids != count:
            raise FormatError("corrupt file")
        vectors = np.frombuffer(data, "<f4", count * dim, offset).reshape(count, dim)
    except struct.error as exc:
        raise FormatError("corrupt file") from exc
    return EmbeddingSet(ids, vectors)


def write_embeddings(es: EmbeddingSet, path) -> None:
    Path(path).write_bytes(encode_embeddings(es))


def read_embeddings(path) -> EmbeddingSet:
    return decode_embeddings(Path(path).read_bytes())
