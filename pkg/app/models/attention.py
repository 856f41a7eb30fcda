"""Exact softmax multi-head self-attention and the FAVOR+ linear-time approximation.

FAVOR+ never builds an N x N matrix: it computes phi(K)^T V and phi(K)^T 1 once
and normalizes each query row against them. Queries and keys are scaled by
head_dim^(-1/4) before the feature map, so phi(Q) phi(K)^T estimates
softmax(Q K^T / sqrt(head_dim)).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional

import numpy as np

from app.models.config import AttentionConfig
from app.numcore import functional as F
from app.numcore.module import Dense, Module, ParamFactory
from app.numcore.tensor import (
    Tensor,
    as_tensor,
    clamp_min,
    exp,
    is_grad_enabled,
    no_grad,
    stop_gradient,
    swapaxes,
    tsum,
)
from app.utils.helper import DimensionError, DumpLimitError, dump_limit, log

DENOMINATOR_FLOOR = 1e-9

Stabilizer = Literal["row", "sequence", "none"]


@dataclass
class RandomFeatureMap:
    """Orthogonal random projections: omega = directions * norms[:, None] (D_r x D)."""
    directions: np.ndarray
    norms: np.ndarray
    created_at_step: int = 0
    seed: int = 0

    @property
    def omega(self) -> np.ndarray:
        return self.directions * self.norms[:, None]

    @property
    def num_features(self) -> int:
        return int(self.directions.shape[0])

    @property
    def dim(self) -> int:
        return int(self.directions.shape[1])


def draw_orthogonal_features(dim: int, num_features: int, seed: int, step: int = 0) -> RandomFeatureMap:
    """Stack ceil(D_r / D) QR-orthogonalized Gaussian blocks; rescale rows to chi(D) norms."""
    if dim < 1 or num_features < 1:
        raise ValueError(f"Feature map needs positive sizes, got D={dim}, D_r={num_features}")
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(-(-num_features // dim)):
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        blocks.append(q.T)
    directions = np.concatenate(blocks, axis=0)[:num_features]
    norms = np.linalg.norm(rng.standard_normal((num_features, dim)), axis=1)
    return RandomFeatureMap(directions=directions, norms=norms, created_at_step=step, seed=seed)


def favor_features(x, feature_map: RandomFeatureMap, stabilizer: Stabilizer = "row") -> Tensor:
    """Positive random features phi(x)_i = exp(w_i.x - |x|^2/2 - c) / sqrt(D_r).

    `row` subtracts each row's max projection (cancels in a query's own
    normalization); `sequence` subtracts one max over all rows (cancels across
    keys). The stabilizer never carries gradient.
    """
    x = as_tensor(x)
    omega = Tensor(feature_map.omega.astype(x.dtype))
    if x.shape[-1] != feature_map.dim:
        raise DimensionError("feature map dimension does not match input", x.shape, feature_map.directions.shape)
    projection = x @ swapaxes(omega, 0, 1)
    half_norm = tsum(x * x, axis=-1, keepdims=True) * 0.5
    if stabilizer == "row":
        shift = stop_gradient(Tensor(projection.data.max(axis=-1, keepdims=True)))
        projection = projection - shift
    elif stabilizer == "sequence":
        shift = stop_gradient(Tensor(projection.data.max(axis=(-2, -1), keepdims=True)))
        projection = projection - shift
    elif stabilizer != "none":
        raise ValueError(f"Unknown stabilizer '{stabilizer}'")
    return exp(projection - half_norm) * (1.0 / np.sqrt(feature_map.num_features))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    width = t.shape[-1]
    split = t.reshape(t.shape[:-1] + (heads, width // heads))
    return swapaxes(split, -3, -2)


def _merge_heads(t: Tensor) -> Tensor:
    merged = swapaxes(t, -3, -2)
    return merged.reshape(merged.shape[:-2] + (merged.shape[-2] * merged.shape[-1],))


@dataclass
class AttentionDiagnostics:
    calls: int = 0
    clamped: int = 0
    redraws: int = 0
    last_clamped: int = 0


class SelfAttention(Module):
    """Multi-head self-attention with switchable core (`softmax` or `favor`)."""

    def __init__(self, cfg: AttentionConfig, factory: ParamFactory):
        self.cfg = cfg
        self.kind = cfg.kind
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.query = Dense(factory, cfg.d_model, cfg.attention_dim)
        self.key = Dense(factory, cfg.d_model, cfg.attention_dim)
        self.value = Dense(factory, cfg.d_model, cfg.attention_dim)
        self.output = Dense(factory, cfg.attention_dim, cfg.d_model)
        self.feature_map = draw_orthogonal_features(self.head_dim, cfg.num_random_features, cfg.rng_seed)
        self.diagnostics = AttentionDiagnostics()

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"feature_directions": self.feature_map.directions, "feature_norms": self.feature_map.norms}

    def load_buffer(self, key: str, value: np.ndarray) -> None:
        if key == "feature_directions":
            self.feature_map.directions = np.asarray(value, dtype=np.float64)
        elif key == "feature_norms":
            self.feature_map.norms = np.asarray(value, dtype=np.float64)
        else:
            super().load_buffer(key, value)

    def maybe_redraw(self, step: int) -> bool:
        interval = self.cfg.redraw_interval
        if interval <= 0 or step <= 0 or step % interval:
            return False
        self.feature_map = draw_orthogonal_features(
            self.head_dim, self.cfg.num_random_features, self.cfg.rng_seed + step, step=step
        )
        self.diagnostics.redraws += 1
        return True

    def project(self, z):
        """Per-head Q, K, V of shape (..., heads, N, head_dim)."""
        z = as_tensor(z)
        if z.shape[-1] != self.cfg.d_model:
            raise DimensionError("attention input width mismatch", z.shape, (self.cfg.d_model,))
        return (
            _split_heads(self.query(z), self.heads),
            _split_heads(self.key(z), self.heads),
            _split_heads(self.value(z), self.heads),
        )

    def head_outputs(self, z) -> Tensor:
        q, k, v = self.project(z)
        if self.kind == "softmax":
            return _softmax_core(q, k, v)
        return self._favor_core(q, k, v)

    def _favor_core(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        scale = self.head_dim ** -0.25
        phi_q = favor_features(q * scale, self.feature_map, stabilizer="row")
        phi_k = favor_features(k * scale, self.feature_map, stabilizer="sequence")
        kv = swapaxes(phi_k, -1, -2) @ v
        k_sum = tsum(phi_k, axis=-2, keepdims=True)
        numerator = phi_q @ kv
        denominator = tsum(phi_q * k_sum, axis=-1, keepdims=True)
        denominator, clamped = clamp_min(denominator, DENOMINATOR_FLOOR)
        self.diagnostics.calls += 1
        self.diagnostics.last_clamped = clamped
        if clamped:
            self.diagnostics.clamped += clamped
            log(f"FAVOR+ denominator clamped: rows={clamped}, total={self.diagnostics.clamped}", "WARNING")
        return numerator / denominator

    def forward(self, z) -> Tensor:
        return self.output(_merge_heads(self.head_outputs(z)))

    def attention_matrix(self, z) -> np.ndarray:
        """Explicit (..., heads, N, N) row-normalized attention weights."""
        with no_grad():
            q, k, _ = self.project(z)
            if self.kind == "softmax":
                return _softmax_weights(q.data, k.data)
            scale = self.head_dim ** -0.25
            phi_q = favor_features(q * scale, self.feature_map, stabilizer="row").data
            phi_k = favor_features(k * scale, self.feature_map, stabilizer="sequence").data
        kernel = phi_q @ np.swapaxes(phi_k, -1, -2)
        rows = np.maximum(kernel.sum(axis=-1, keepdims=True), DENOMINATOR_FLOOR)
        return kernel / rows


def _softmax_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    scores = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(q.shape[-1])
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    return weights / weights.sum(axis=-1, keepdims=True)


def _softmax_core(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    if not is_grad_enabled() or not (q.requires_grad or k.requires_grad or v.requires_grad):
        # one head at a time bounds memory at N x N
        out = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=v.dtype)
        for h in range(q.shape[-3]):
            weights = _softmax_weights(q.data[..., h, :, :], k.data[..., h, :, :])
            out[..., h, :, :] = weights @ v.data[..., h, :, :]
        return Tensor(out)
    scores = (q @ swapaxes(k, -1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    return F.softmax(scores, axis=-1) @ v


def softmax_mhsa(z, attention: SelfAttention) -> Tensor:
    """Exact attention through the module's projections, regardless of its configured kind."""
    q, k, v = attention.project(z)
    return attention.output(_merge_heads(_softmax_core(q, k, v)))


def favor_attention(z, attention: SelfAttention) -> Tensor:
    q, k, v = attention.project(z)
    return attention.output(_merge_heads(attention._favor_core(q, k, v)))


def dump_attention_matrix(z, attention: SelfAttention, head: Optional[int] = None,
                          limit: Optional[int] = None) -> np.ndarray:
    """Materialized attention weights (heads x N x N, or N x N for one head) for inspection."""
    z = as_tensor(z)
    n = z.shape[-2]
    limit = dump_limit() if limit is None else limit
    if n > limit:
        raise DumpLimitError(
            f"Attention dump of N={n} frames exceeds the limit of {limit}; "
            f"use a shorter input or raise DFC_DUMP_LIMIT"
        )
    if head is not None and not 0 <= head < attention.heads:
        raise ValueError(f"Head {head} out of range 0..{attention.heads - 1}")
    matrix = attention.attention_matrix(z)
    return matrix if head is None else matrix[..., head, :, :]


@dataclass
class AttentionSummary:
    mean_entropy: float
    max_entropy: float
    diagonal_mass: float
    band: int
    far_mass: float = field(default=0.0)


def attention_summary(matrix: np.ndarray, band: int = 8) -> AttentionSummary:
    """Row entropy and how much weight sits within `band` frames of the diagonal."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[-1]
    safe = np.where(matrix > 0, matrix, 1.0)
    entropy = -(matrix * np.log(safe)).sum(axis=-1)
    offsets = np.abs(np.arange(n)[:, None] - np.arange(n)[None, :])
    near = (matrix * (offsets <= band)).sum(axis=-1).mean()
    return AttentionSummary(
        mean_entropy=float(entropy.mean()),
        max_entropy=float(np.log(n)),
        diagonal_mass=float(near),
        band=band,
        far_mass=float(1.0 - near),
    )


def time_attention_path(kind: str, n_frames: int, d_model: int = 192, heads: int = 6, blocks: int = 4,
                        num_random_features: int = 384, reps: int = 3, warmup: int = 1,
                        seed: int = 0, dtype=np.float32) -> float:
    """Median wall time of `blocks` stacked attention layers on one N-frame input."""
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(d_model=d_model, heads=heads, num_random_features=num_random_features,
                          rng_seed=seed, kind=kind)
    factory = ParamFactory(rng, dtype=dtype)
    layers: List[SelfAttention] = [SelfAttention(cfg, factory) for _ in range(blocks)]
    z = Tensor(rng.standard_normal((n_frames, d_model)).astype(dtype))
    timings = []
    with no_grad():
        for i in range(warmup + reps):
            start = time.perf_counter()
            out = z
            for layer in layers:
                out = out + layer(out)
            elapsed = time.perf_counter() - start
            if i >= warmup:
                timings.append(elapsed)
    median = float(np.median(timings))
    log(f"Attention path timed: kind={kind}, frames={n_frames}, blocks={blocks}, median_s={median:.4f}", "DEBUG")
    return median
