"""Reconstruction objective, stochastic layer masking, initialization and training."""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator, NamedTuple, Optional

import numpy as np

from .errors import ConfigError, DataError, TrainingError
from .model import (
    CrosscoderModel,
    SparseCode,
    canonical_variant,
    select_cp_rank,
    select_tr_ranks,
    sparsify_eval,
)
from .tensor_kernel import DECODER, ENCODER, CpFactors, DenseWeights3, TrFactors, unwrap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip_norm: float = 1.0
    batch_size: int = 256
    steps: int = 1000
    mask_p: float = 0.0
    seed: int = 0
    eval_every: int = 50
    epochs: Optional[int] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.mask_p <= 1.0:
            raise ConfigError(f"mask_p must be in [0, 1], got {self.mask_p}")
        if not self.grad_clip_norm > 0:
            raise ConfigError(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")


def rng_streams(seed: int):
    """Independent generators for (init, data order, layer masks)."""
    init, data, mask = np.random.SeedSequence(int(seed)).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(data), np.random.default_rng(mask)


# --- masking ----------------------------------------------------------------


def apply_layer_mask(batch, p: float, rng):
    """Zero whole layers of each token independently with probability ``p``.

    Returns ``(masked, mask)`` where ``mask`` is a boolean ``(T, L)`` array of
    kept layers. The input is not modified.
    """
    x = np.asarray(unwrap(batch))
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"mask probability must be in [0, 1], got {p}")
    T, L = x.shape[:2]
    if p == 0.0:
        mask = np.ones((T, L), dtype=bool)
    else:
        mask = rng.random((T, L)) >= p
    return x * mask[:, :, None].astype(x.dtype), mask


# --- objective ----------------------------------------------------------------


class LossAndGrads(NamedTuple):
    loss: float
    grads: dict
    code: SparseCode


def recon_loss(
    model: CrosscoderModel,
    clean,
    masked_input=None,
    mode="batch_topk",
    selection: Optional[np.ndarray] = None,
) -> LossAndGrads:
    """``(1/L) * mean_t sum_l ||x_l - xhat_l(masked_input)||^2`` and its gradients.

    The sparsifier's selection is held fixed in the backward pass: gradients
    reach only the selected latents. ``selection`` (boolean ``(T, d_sae)``)
    overrides the sparsifier, which finite-difference checks rely on.
    """
    x = np.asarray(unwrap(clean), dtype=np.float64)
    inp = x if masked_input is None else np.asarray(unwrap(masked_input))
    if inp.shape != x.shape:
        raise DataError(f"masked input shape {inp.shape} != clean shape {x.shape}")
    if not (np.isfinite(x).all() and np.isfinite(inp).all()):
        raise DataError("activations contain NaN or infinite values")
    T, L, d = x.shape

    pre = model.encoder.contract(inp) + np.asarray(model.b_enc, dtype=np.float64)
    relu = np.maximum(pre, 0.0)
    if selection is None:
        code = sparsify_eval(relu, mode, model.k)
        keep = code.values > 0
    else:
        keep = np.asarray(selection, dtype=bool) & (pre > 0)
        code = SparseCode(np.where(keep, relu, 0.0))
    z = code.values

    recon = model.decoder.expand(z) + np.asarray(model.b_dec, dtype=np.float64)[None]
    resid = recon - x
    loss = float(np.sum(resid * resid) / (L * T))

    g_recon = resid * (2.0 / (L * T))
    dec_grads, dz = model.decoder.expand_grad(z, g_recon)
    g_pre = np.where(keep, dz, 0.0)
    enc_grads = model.encoder.contract_grad(inp, g_pre)

    grads = {f"enc.{k}": v for k, v in enc_grads.items()}
    grads.update({f"dec.{k}": v for k, v in dec_grads.items()})
    grads["b_enc"] = g_pre.sum(axis=0)
    grads["b_dec"] = g_recon.sum(axis=0)
    return LossAndGrads(loss, grads, code)


# --- initialization -----------------------------------------------------------


def init_model(
    dims,
    variant: str,
    ranks=None,
    rng=None,
    k: int = 64,
    mask_p: float = 0.0,
    dtype=np.float32,
) -> CrosscoderModel:
    """Gaussian weights whose materialized entries have variance ``2 / fan_in``.

    ``fan_in`` is ``d`` for the encoder and ``d_sae`` for the decoder. For
    factorized families the per-factor scale is chosen so the product of
    factors reproduces that element variance (``R * s^6`` for CP,
    ``R1 R2 R3 * s^6`` for TR). Biases start at zero.
    """
    d, d_sae, L = dims
    variant = canonical_variant(variant)
    rng = np.random.default_rng(rng)
    var_enc, var_dec = 2.0 / d, 2.0 / d_sae

    if variant == "dense":
        enc = DenseWeights3(rng.normal(0.0, np.sqrt(var_enc), (d, d_sae, L)).astype(dtype), ENCODER)
        dec = DenseWeights3(rng.normal(0.0, np.sqrt(var_dec), (d_sae, d, L)).astype(dtype), DECODER)
    elif variant == "tr":
        r1, r2, r3 = select_tr_ranks(d, d_sae, L, ranks=ranks) if ranks else select_tr_ranks(d, d_sae, L)

        def tr(var):
            s = (var / (r1 * r2 * r3)) ** (1 / 6)
            return TrFactors(
                rng.normal(0.0, s, (r1, d, r2)).astype(dtype),
                rng.normal(0.0, s, (r2, d_sae, r3)).astype(dtype),
                rng.normal(0.0, s, (r3, L, r1)).astype(dtype),
            )

        enc, dec = tr(var_enc), tr(var_dec)
    else:
        if ranks is None:
            r = select_cp_rank(d, d_sae, L)
        else:
            r = int(ranks[0] if np.ndim(ranks) else ranks)
        if r < 1:
            raise ConfigError(f"CP rank must be >= 1, got {r}")

        def cp(var):
            s = (var / r) ** (1 / 6)
            return CpFactors(
                rng.normal(0.0, s, (d, r)).astype(dtype),
                rng.normal(0.0, s, (d_sae, r)).astype(dtype),
                rng.normal(0.0, s, (L, r)).astype(dtype),
            )

        enc, dec = cp(var_enc), cp(var_dec)

    return CrosscoderModel(
        encoder=enc,
        decoder=dec,
        b_enc=np.zeros(d_sae, dtype=dtype),
        b_dec=np.zeros((L, d), dtype=dtype),
        k=k,
        mask_p=mask_p,
    )


# --- optimizer ------------------------------------------------------------------


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


def clip_grads(grads: dict, max_norm: float):
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls(
            0,
            {k: np.zeros(np.shape(p)) for k, p in params.items()},
            {k: np.zeros(np.shape(p)) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """One clipped Adam update. Returns ``(new_params, new_state, pre-clip norm)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"nonfinite gradient in {name}", step=state.step + 1)
    grads, norm = clip_grads(grads, cfg.grad_clip_norm)
    b1, b2 = cfg.betas
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = (p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(
            np.asarray(p).dtype, copy=False
        )
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v), norm


# --- data feeding -----------------------------------------------------------------


def epoch_batches(data, batch_size: int, rng, epochs: Optional[int] = None) -> Iterator[np.ndarray]:
    """Shuffled minibatches of an in-memory ``(T, L, d)`` array.

    Runs for ``epochs`` passes, or forever when ``epochs`` is None. A trailing
    partial batch is dropped.
    """
    x = np.asarray(unwrap(data))
    n = x.shape[0]
    if n < batch_size:
        raise DataError(f"{n} tokens is fewer than one batch of {batch_size}")
    e = 0
    while epochs is None or e < epochs:
        order = rng.permutation(n)
        for s in range(0, n - batch_size + 1, batch_size):
            yield x[order[s : s + batch_size]]
        e += 1


class Prefetcher:
    """Runs a batch producer in a background thread behind a bounded queue.

    The producer blocks when ``maxsize`` batches are waiting.
    """

    _DONE = object()

    def __init__(self, source: Iterable, maxsize: int = 4):
        self._queue = queue.Queue(maxsize=maxsize)
        self._error = None
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(iter(source),), daemon=True)
        self._thread.start()

    def _run(self, it):
        try:
            for item in it:
                while not self._stop.is_set():
                    try:
                        self._queue.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
        except BaseException as exc:  # re-raised in the consumer thread
            self._error = exc
        self._queue.put(self._DONE)

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is self._DONE:
                if self._error is not None:
                    raise self._error
                return
            yield item

    def close(self):
        self._stop.set()


# --- training loop ----------------------------------------------------------------


def train(model: CrosscoderModel, data_source, cfg: TrainConfig, log_path=None, callback=None):
    """Train ``model`` and return ``(trained model, metrics records)``.

    ``data_source`` is either an activation array / batch (shuffled into
    minibatches from the config seed) or any iterable of ``(B, L, d)`` arrays.
    If the data runs out before ``cfg.steps``, training stops early and the
    last record carries ``"truncated": True``.
    """
    _, data_rng, mask_rng = rng_streams(cfg.seed)
    x0 = unwrap(data_source)
    if isinstance(x0, np.ndarray):
        batches = epoch_batches(x0, cfg.batch_size, data_rng, cfg.epochs)
    else:
        batches = iter(data_source)

    out_dtype = model.dtype
    params = {k: np.asarray(v, dtype=np.float64) for k, v in model.params().items()}
    state = AdamState.zeros(params)
    work = model.with_params(params)
    records = []
    sink = open(log_path, "w") if log_path is not None else None
    start = time.perf_counter()
    step = 0
    try:
        for step in range(1, cfg.steps + 1):
            try:
                batch = next(batches)
            except StopIteration:
                log.warning("data exhausted after %d of %d steps", step - 1, cfg.steps)
                if records:
                    records[-1]["truncated"] = True
                else:
                    records.append({"step": 0, "truncated": True})
                step -= 1
                break
            masked, _ = apply_layer_mask(batch, cfg.mask_p, mask_rng)
            res = recon_loss(work, batch, masked)
            if not np.isfinite(res.loss):
                raise TrainingError("loss is not finite", step=step)
            params, state, gnorm = adam_step(params, res.grads, state, cfg)
            work = work.with_params(params)
            if step == 1 or step % cfg.eval_every == 0 or step == cfg.steps:
                rec = {
                    "step": step,
                    "loss": res.loss,
                    "mean_active": res.code.nnz / res.code.n_tokens,
                    "grad_norm": gnorm,
                    "wall_ms": round((time.perf_counter() - start) * 1000.0, 3),
                }
                records.append(rec)
                if sink is not None:
                    sink.write(json.dumps(rec) + "\n")
                    sink.flush()
                if callback is not None:
                    callback(rec)
    finally:
        if sink is not None:
            sink.close()
        if isinstance(batches, Prefetcher):
            batches.close()
    trained = work.astype(out_dtype)
    return trained, records


def deterministic_view(records):
    """Metrics records without wall-clock fields (for reproducibility checks)."""
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in records]


def config_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["betas"] = list(cfg.betas)
    return out
