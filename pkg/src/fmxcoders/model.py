"""Crosscoder variants, the sparse forward map, and rank selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor_kernel import (
    DECODER,
    ENCODER,
    CpFactors,
    DenseWeights3,
    TrFactors,
    Weights3,
    decoder_apply,
    unwrap,
)

VARIANTS = ("dense", "tr", "cp")
_ALIASES = {"crosscoder": "dense", "dense": "dense", "sae": "dense", "tr": "tr", "cp": "cp"}


def canonical_variant(name: str) -> str:
    try:
        return _ALIASES[str(name).lower()]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(_ALIASES)}") from None


def variant_of(w: Weights3) -> str:
    if isinstance(w, DenseWeights3):
        return "dense"
    if isinstance(w, TrFactors):
        return "tr"
    if isinstance(w, CpFactors):
        return "cp"
    raise TypeError(f"not a weight family: {type(w).__name__}")


@dataclass(frozen=True)
class SparseCode:
    """Post-sparsification latent activations.

    Stored densely as ``(T, d_sae)`` with zeros for unselected latents; every
    nonzero entry is strictly positive.
    """

    values: np.ndarray

    @property
    def n_tokens(self):
        return self.values.shape[0]

    @property
    def active(self):
        return self.values > 0

    @property
    def nnz(self):
        return int(np.count_nonzero(self.values))

    def pairs(self, t):
        idx = np.flatnonzero(self.values[t])
        return [(int(i), float(self.values[t, i])) for i in idx]


@dataclass(frozen=True)
class SparsifyMode:
    kind: str = "batch_topk"
    theta: float = 0.0

    KINDS = ("batch_topk", "per_token_topk", "threshold")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown sparsify mode {self.kind!r}")
        if self.kind == "threshold" and self.theta < 0:
            raise ConfigError(f"threshold must be >= 0, got {self.theta}")

    @classmethod
    def parse(cls, spec) -> "SparsifyMode":
        """Accepts a mode, ``"batch_topk"``, ``"per_token_topk"`` or ``"threshold:0.1"``."""
        if isinstance(spec, SparsifyMode):
            return spec
        text = str(spec)
        if text.startswith("threshold"):
            _, _, theta = text.partition(":")
            try:
                return cls("threshold", float(theta or 0.0))
            except ValueError:
                raise ConfigError(f"bad threshold in sparsify mode {text!r}") from None
        return cls(text)

    def __str__(self):
        return f"threshold:{self.theta:g}" if self.kind == "threshold" else self.kind


@dataclass(frozen=True)
class CrosscoderModel:
    encoder: Weights3
    decoder: Weights3
    b_enc: np.ndarray
    b_dec: np.ndarray
    k: int
    mask_p: float = 0.0
    variant: str = field(init=False)

    def __post_init__(self):
        ev, dv = variant_of(self.encoder), variant_of(self.decoder)
        if ev != dv:
            raise DimensionError(f"encoder ({ev}) and decoder ({dv}) families differ")
        object.__setattr__(self, "variant", ev)
        d, d_sae, L = self.encoder.dims
        if self.decoder.dims != (d, d_sae, L):
            raise DimensionError(f"decoder dims {self.decoder.dims} != encoder dims {(d, d_sae, L)}")
        if isinstance(self.encoder, DenseWeights3) and self.encoder.role != ENCODER:
            raise DimensionError("dense encoder must use the encoder layout")
        if isinstance(self.decoder, DenseWeights3) and self.decoder.role != DECODER:
            raise DimensionError("dense decoder must use the decoder layout")
        if np.shape(self.b_enc) != (d_sae,):
            raise DimensionError(f"b_enc shape {np.shape(self.b_enc)} != ({d_sae},)")
        if np.shape(self.b_dec) != (L, d):
            raise DimensionError(f"b_dec shape {np.shape(self.b_dec)} != ({L}, {d})")
        if not 1 <= int(self.k) <= d_sae:
            raise ConfigError(f"k={self.k} outside [1, {d_sae}]")
        if not 0.0 <= float(self.mask_p) <= 1.0:
            raise ConfigError(f"mask_p={self.mask_p} outside [0, 1]")

    @property
    def dims(self):
        return self.encoder.dims

    @property
    def ranks(self):
        if self.variant == "tr":
            return self.encoder.ranks
        if self.variant == "cp":
            return (self.encoder.rank,)
        return ()

    @property
    def dtype(self):
        return np.asarray(self.b_enc).dtype

    def params(self) -> dict:
        """Flat name -> array mapping of every trainable tensor."""
        out = {f"enc.{k}": v for k, v in self.encoder.arrays().items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.arrays().items()})
        out["b_enc"] = self.b_enc
        out["b_dec"] = self.b_dec
        return out

    def with_params(self, params: dict) -> "CrosscoderModel":
        enc = {k[4:]: v for k, v in params.items() if k.startswith("enc.")}
        dec = {k[4:]: v for k, v in params.items() if k.startswith("dec.")}
        return replace(
            self,
            encoder=self.encoder.with_arrays(enc),
            decoder=self.decoder.with_arrays(dec),
            b_enc=params["b_enc"],
            b_dec=params["b_dec"],
        )

    def astype(self, dtype) -> "CrosscoderModel":
        return self.with_params({k: np.asarray(v, dtype=dtype) for k, v in self.params().items()})


def _data(batch):
    return unwrap(batch)


def preactivations(m: CrosscoderModel, batch) -> np.ndarray:
    """``ReLU(sum_l E_l^T x_l + b_enc)`` per token, in float64."""
    pre = m.encoder.contract(_data(batch)) + np.asarray(m.b_enc, dtype=np.float64)
    return np.maximum(pre, 0.0)


def batch_topk(preacts: np.ndarray, k: int) -> SparseCode:
    """Keep the ``T*k`` largest positive entries of the whole batch.

    Ties at the cut are resolved toward lower token index, then lower latent
    index, so the result is a deterministic function of the input.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    preacts = np.asarray(preacts)
    flat = preacts.ravel()
    budget = preacts.shape[0] * int(k)
    positive = flat > 0
    n_pos = int(np.count_nonzero(positive))
    keep = np.zeros(flat.shape, dtype=bool)
    if n_pos <= budget:
        keep = positive
    else:
        # value of the budget-th largest entry
        cut = np.partition(flat, flat.size - budget)[flat.size - budget]
        above = flat > cut
        keep[above] = True
        remaining = budget - int(np.count_nonzero(above))
        tied = np.flatnonzero(flat == cut)
        keep[tied[:remaining]] = True
    out = np.where(keep.reshape(preacts.shape), preacts, 0.0)
    return SparseCode(out)


def per_token_topk(preacts: np.ndarray, k: int) -> SparseCode:
    preacts = np.asarray(preacts)
    T, n = preacts.shape
    if k >= n:
        return SparseCode(np.where(preacts > 0, preacts, 0.0))
    # stable sort on negated values keeps lower latent index first among ties
    order = np.argsort(-preacts, axis=1, kind="stable")[:, :k]
    keep = np.zeros_like(preacts, dtype=bool)
    np.put_along_axis(keep, order, True, axis=1)
    keep &= preacts > 0
    return SparseCode(np.where(keep, preacts, 0.0))


def threshold_code(preacts: np.ndarray, theta: float) -> SparseCode:
    if theta < 0:
        raise ConfigError(f"threshold must be >= 0, got {theta}")
    preacts = np.asarray(preacts)
    return SparseCode(np.where(preacts > theta, preacts, 0.0))


def sparsify_eval(preacts, mode="batch_topk", k: int = 1) -> SparseCode:
    mode = SparsifyMode.parse(mode)
    if mode.kind == "batch_topk":
        return batch_topk(preacts, k)
    if mode.kind == "per_token_topk":
        return per_token_topk(preacts, k)
    return threshold_code(preacts, mode.theta)


def encode(m: CrosscoderModel, batch, mode="batch_topk") -> SparseCode:
    return sparsify_eval(preactivations(m, batch), mode, m.k)


def encode_chunked(m: CrosscoderModel, batch, mode="batch_topk", chunk_size=None) -> SparseCode:
    """Encode in consecutive chunks; BatchTopK selects within each chunk."""
    x = _data(batch)
    if chunk_size is None or chunk_size >= len(x):
        return encode(m, x, mode)
    parts = [encode(m, x[s : s + chunk_size], mode).values for s in range(0, len(x), chunk_size)]
    return SparseCode(np.concatenate(parts, axis=0))


def decode(m: CrosscoderModel, code) -> np.ndarray:
    z = code.values if isinstance(code, SparseCode) else code
    return m.decoder.expand(z) + np.asarray(m.b_dec, dtype=np.float64)[None]


def forward(m: CrosscoderModel, batch, eval_mode="batch_topk"):
    """Sparse code and per-layer reconstructions ``(T, L, d)`` for a batch."""
    code = encode(m, batch, eval_mode)
    recon = decode(m, code)
    return code, recon.astype(m.dtype, copy=False)


def forward_token_reference(m: CrosscoderModel, code: SparseCode, t: int) -> np.ndarray:
    """Reconstruction of token ``t`` built fiber by fiber (oracle for ``decode``)."""
    d, d_sae, L = m.dims
    pairs = code.pairs(t)
    return np.stack([decoder_apply(m.decoder, pairs, l) + m.b_dec[l] for l in range(L)])


# --- parameter accounting -------------------------------------------------


def weight_count(variant, dims, ranks=()) -> int:
    """Parameters of one 3-way tensor (encoder or decoder) of the given family."""
    d, d_sae, L = dims
    variant = canonical_variant(variant)
    if variant == "dense":
        return d * d_sae * L
    if variant == "tr":
        r1, r2, r3 = ranks
        return r1 * d * r2 + r2 * d_sae * r3 + r3 * L * r1
    (r,) = ranks
    return r * (d + d_sae + L)


def param_count(m: CrosscoderModel, weights_only: bool = False) -> int:
    d, d_sae, L = m.dims
    n = 2 * weight_count(m.variant, m.dims, m.ranks)
    return n if weights_only else n + d_sae + L * d


def _ratio_scale(d, d_sae, L, half_budget):
    rho2 = math.sqrt(d_sae / L)
    rho3 = math.sqrt(d_sae / d)
    coef = d * rho2 + d_sae * rho2 * rho3 + L * rho3
    return math.sqrt(half_budget / coef), rho2, rho3


def _ray_tuple(s, rho2, rho3):
    return (max(1, round(s)), max(1, round(s * rho2)), max(1, round(s * rho3)))


def select_tr_ranks(d, d_sae, L, param_budget=None, rule="budget", ranks=None):
    """Tensor-ring ranks matching a parameter budget (both tensors together).

    Tuples lie on the ray ``R2/R1 = sqrt(d_sae/L)``, ``R3/R1 = sqrt(d_sae/d)``.
    ``rule="ratio"`` solves the continuous matching scale and rounds each rank;
    it reproduces the published tuples. ``rule="budget"`` returns the largest
    tuple on the ray whose per-tensor count stays within ``param_budget / 2``.
    Explicit ``ranks`` are returned unchanged after validation.
    """
    if ranks is not None:
        ranks = tuple(int(r) for r in ranks)
        if len(ranks) != 3 or min(ranks) < 1:
            raise ConfigError(f"TR ranks must be three positive integers, got {ranks}")
        return ranks
    if param_budget is None:
        param_budget = 2 * d * d_sae * L
    half = param_budget / 2
    if half < weight_count("tr", (d, d_sae, L), (1, 1, 1)):
        raise ConfigError(f"budget {param_budget} below the rank-one TR parameter count")
    s, rho2, rho3 = _ratio_scale(d, d_sae, L, half)
    if rule == "ratio":
        return _ray_tuple(s, rho2, rho3)
    if rule != "budget":
        raise ConfigError(f"unknown rank rule {rule!r}")
    # Candidate tuples change only where s*rho crosses a half-integer.
    hi = s * 2 + 2
    breaks = {0.5}
    for rho in (1.0, rho2, rho3):
        n = 0
        while (n + 0.5) / rho <= hi:
            breaks.add((n + 0.5) / rho)
            n += 1
    best, best_count = (1, 1, 1), weight_count("tr", (d, d_sae, L), (1, 1, 1))
    for b in sorted(breaks):
        cand = _ray_tuple(b + 1e-9, rho2, rho3)
        c = weight_count("tr", (d, d_sae, L), cand)
        if c <= half and c > best_count:
            best, best_count = cand, c
    return best


def select_cp_rank(d, d_sae, L, param_budget=None) -> int:
    """CP rank whose two tensors come closest to ``param_budget``."""
    if param_budget is None:
        param_budget = 2 * d * d_sae * L
    per_rank = d + d_sae + L
    r = math.floor((param_budget / 2) / per_rank + 0.5)
    if r < 1:
        raise ConfigError(
            f"budget {param_budget} cannot fit a rank-one CP pair ({2 * per_rank} parameters)"
        )
    return r


__all__ = [
    "CrosscoderModel",
    "SparseCode",
    "SparsifyMode",
    "batch_topk",
    "canonical_variant",
    "decode",
    "encode",
    "encode_chunked",
    "forward",
    "param_count",
    "per_token_topk",
    "preactivations",
    "select_cp_rank",
    "select_tr_ranks",
    "sparsify_eval",
    "threshold_code",
    "weight_count",
]
