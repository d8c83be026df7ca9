"""Synthetic multi-layer activations with planted features, and the FMXA1 cache.

Planted features write ``magnitude * direction_l`` into every layer ``l`` of
their support set, so a feature with support ``{l}`` is layer-local and one
with a wide support and a shared direction is a cross-layer feature.

FMXA1 layout (little-endian)::

    offset  size      field
    0       5         magic b"FMXA1"
    5       4         u32 version (1)
    9       4         u32 T
    13      4         u32 L
    17      4         u32 d
    21      4         u32 flags (bit 0: label block present)
    25      4*T*L*d   f32 activations, token-major (T, L, d), C order
    ...     T         u8 labels (0/1), only when flag bit 0 is set
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError

SHARED = "shared"
INDEPENDENT = "independent"


@dataclass
class ActivationBatch:
    data: np.ndarray
    labels: Optional[np.ndarray] = None
    tokens: Optional[list] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DataError(f"activations must be (T, L, d), got shape {self.data.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != (self.data.shape[0],):
                raise DataError(f"labels shape {self.labels.shape} != ({self.data.shape[0]},)")
            if np.any(self.labels > 1):
                raise DataError("labels must be binary")

    @property
    def dims(self):
        T, L, d = self.data.shape
        return T, L, d

    def __len__(self):
        return self.data.shape[0]

    def slice(self, start, stop):
        return ActivationBatch(
            self.data[start:stop],
            None if self.labels is None else self.labels[start:stop],
            None if self.tokens is None else self.tokens[start:stop],
        )


@dataclass
class SynthSpec:
    """Ground-truth dictionary for the generator.

    ``directions`` has shape ``(n_features, L, d)``; rows outside a feature's
    support are zero, rows inside are unit vectors.
    """

    d: int
    L: int
    supports: list
    directions: np.ndarray
    firing_prob: np.ndarray
    mag_mu: float = 0.0
    mag_sigma: float = 0.5
    noise_sigma: float = 0.0
    policy: str = SHARED
    concept_feature: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.firing_prob = np.asarray(self.firing_prob, dtype=np.float64)
        n = len(self.supports)
        if self.directions.shape != (n, self.L, self.d):
            raise ConfigError(f"directions shape {self.directions.shape} != ({n}, {self.L}, {self.d})")
        if self.firing_prob.shape != (n,):
            raise ConfigError("firing_prob needs one entry per feature")
        if np.any(self.firing_prob <= 0) or np.any(self.firing_prob >= 1):
            raise ConfigError("firing probabilities must lie in (0, 1)")
        for f, sup in enumerate(self.supports):
            if not sup or min(sup) < 0 or max(sup) >= self.L:
                raise ConfigError(f"feature {f} has an invalid support {sup}")
            norms = np.linalg.norm(self.directions[f, list(sup)], axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ConfigError(f"feature {f} directions are not unit norm")
        if self.concept_feature is not None and not 0 <= self.concept_feature < n:
            raise ConfigError(f"concept_feature {self.concept_feature} out of range")

    @property
    def n_features(self):
        return len(self.supports)

    @property
    def support_sizes(self):
        return np.array([len(s) for s in self.supports])


def _unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_spec(
    d: int,
    L: int,
    supports: Sequence[Sequence[int]],
    rng=None,
    firing_prob=0.05,
    policy: str = SHARED,
    noise_sigma: float = 0.0,
    mag_mu: float = 0.0,
    mag_sigma: float = 0.5,
    concept_feature: Optional[int] = None,
) -> SynthSpec:
    """Random unit directions for the given layer supports."""
    if policy not in (SHARED, INDEPENDENT):
        raise ConfigError(f"unknown direction policy {policy!r}")
    rng = np.random.default_rng(rng)
    supports = [tuple(sorted(set(int(l) for l in s))) for s in supports]
    for f, sup in enumerate(supports):
        if not sup or sup[0] < 0 or sup[-1] >= L:
            raise ConfigError(f"feature {f} has an invalid support {sup} for L={L}")
    n = len(supports)
    directions = np.zeros((n, L, d))
    for f, sup in enumerate(supports):
        if policy == SHARED:
            directions[f, list(sup)] = _unit(rng, 1, d)[0]
        else:
            directions[f, list(sup)] = _unit(rng, len(sup), d)
    probs = np.broadcast_to(np.asarray(firing_prob, dtype=np.float64), (n,)).copy()
    return SynthSpec(
        d=d,
        L=L,
        supports=supports,
        directions=directions,
        firing_prob=probs,
        mag_mu=mag_mu,
        mag_sigma=mag_sigma,
        noise_sigma=noise_sigma,
        policy=policy,
        concept_feature=concept_feature,
    )


def mixed_support_spec(
    d, L, n_single, n_cross, cross_width, rng=None, **kwargs
) -> SynthSpec:
    """``n_single`` one-layer features spread round-robin over layers, plus
    ``n_cross`` features on windows of ``cross_width`` consecutive layers."""
    rng = np.random.default_rng(rng)
    supports = [(f % L,) for f in range(n_single)]
    n_windows = L - cross_width + 1
    if n_windows < 1:
        raise ConfigError(f"cross_width {cross_width} exceeds L={L}")
    supports += [tuple(range(s, s + cross_width)) for s in (np.arange(n_cross) % n_windows)]
    return make_spec(d, L, supports, rng=rng, **kwargs)


def generate(spec: SynthSpec, T: int, rng=None):
    """Sample ``T`` tokens.

    Returns ``(ActivationBatch, firing)`` where ``firing`` is the ``(T,
    n_features)`` array of planted magnitudes (zero where a feature is off).
    Labels are attached when ``spec.concept_feature`` is set.
    """
    rng = np.random.default_rng(rng)
    n = spec.n_features
    fires = rng.random((T, n)) < spec.firing_prob[None, :]
    mags = rng.lognormal(spec.mag_mu, spec.mag_sigma, size=(T, n))
    firing = np.where(fires, mags, 0.0)
    x = (firing @ spec.directions.reshape(n, -1)).reshape(T, spec.L, spec.d)
    if spec.noise_sigma > 0:
        x = x + rng.normal(0.0, spec.noise_sigma, size=x.shape)
    labels = None
    if spec.concept_feature is not None:
        labels = (firing[:, spec.concept_feature] > 0).astype(np.uint8)
    return ActivationBatch(x.astype(np.float32), labels), firing.astype(np.float32)


# --- FMXA1 cache ----------------------------------------------------------------

CACHE_MAGIC = b"FMXA1"
CACHE_VERSION = 1
FLAG_LABELS = 1
_CACHE_HEADER = struct.Struct("<5sIIIII")


def cache_bytes(batch: ActivationBatch) -> bytes:
    T, L, d = batch.dims
    flags = FLAG_LABELS if batch.labels is not None else 0
    parts = [
        _CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, T, L, d, flags),
        np.ascontiguousarray(batch.data, dtype="<f4").tobytes(),
    ]
    if batch.labels is not None:
        parts.append(np.ascontiguousarray(batch.labels, dtype=np.uint8).tobytes())
    return b"".join(parts)


def parse_cache(buf: bytes) -> ActivationBatch:
    if len(buf) < _CACHE_HEADER.size:
        raise FormatError(f"cache truncated inside header ({len(buf)} bytes)", len(buf))
    magic, version, T, L, d, flags = _CACHE_HEADER.unpack_from(buf, 0)
    if magic != CACHE_MAGIC:
        raise FormatError(f"bad cache magic {magic!r}, expected {CACHE_MAGIC!r}", 0)
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported cache version {version}", 5)
    if flags & ~FLAG_LABELS:
        raise FormatError(f"unknown cache flags {flags:#x}", 21)
    n = T * L * d
    expected = _CACHE_HEADER.size + 4 * n + (T if flags & FLAG_LABELS else 0)
    if len(buf) != expected:
        raise FormatError(
            f"cache length {len(buf)} inconsistent with header (T={T}, L={L}, d={d}, flags={flags}); "
            f"expected {expected}",
            min(len(buf), expected),
        )
    off = _CACHE_HEADER.size
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(T, L, d).astype(np.float32)
    labels = None
    if flags & FLAG_LABELS:
        labels = np.frombuffer(buf, dtype=np.uint8, count=T, offset=off + 4 * n).copy()
        bad = np.flatnonzero(labels > 1)
        if bad.size:
            raise FormatError(f"label byte {labels[bad[0]]} is not 0/1", off + 4 * n + int(bad[0]))
    return ActivationBatch(data, labels)


def write_cache(batch: ActivationBatch, path) -> None:
    Path(path).write_bytes(cache_bytes(batch))


def read_cache(path) -> ActivationBatch:
    return parse_cache(Path(path).read_bytes())


# --- recovery scoring -------------------------------------------------------------


@dataclass
class RecoveryReport:
    matched_latent: np.ndarray  # (n_features,), -1 when unmatched
    correlation: np.ndarray  # |Pearson r| of each feature with its matched latent
    coherence: Optional[np.ndarray] = None  # c_f of the matched latent, NaN if unknown

    @property
    def mean_correlation(self):
        return float(np.mean(self.correlation))


def _abs_corr(a, b):
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    num = a.T @ b
    den = np.outer(na, nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.abs(r)


def match_features(firing: np.ndarray, latents: np.ndarray):
    """Greedy one-to-one matching by absolute Pearson correlation.

    Repeatedly takes the globally largest remaining (feature, latent) pair.
    """
    corr = _abs_corr(np.asarray(firing, dtype=np.float64), np.asarray(latents, dtype=np.float64))
    n_f, n_l = corr.shape
    matched = np.full(n_f, -1)
    best = np.zeros(n_f)
    work = corr.copy()
    for _ in range(min(n_f, n_l)):
        f, i = np.unravel_index(np.argmax(work), work.shape)
        if work[f, i] < 0:
            break
        matched[f], best[f] = i, corr[f, i]
        work[f, :] = -1.0
        work[:, i] = -1.0
    return matched, best


def recovery_score(
    model, spec: SynthSpec, firing, batch, mode="batch_topk", coherence=None, chunk_size=None
):
    """Match planted features to latents on ``batch`` and report per-feature quality.

    ``coherence`` may be a per-latent functional-coherence array; the matched
    latent's value is then copied into the report.
    """
    from .model import encode_chunked

    if np.shape(firing)[1] != spec.n_features:
        raise DataError("firing record does not match the spec's feature count")
    code = encode_chunked(model, batch, mode, chunk_size)
    matched, best = match_features(firing, code.values)
    coh = None
    if coherence is not None:
        coherence = np.asarray(coherence, dtype=np.float64)
        coh = np.where(matched >= 0, coherence[np.maximum(matched, 0)], np.nan)
    return RecoveryReport(matched, best, coh)
