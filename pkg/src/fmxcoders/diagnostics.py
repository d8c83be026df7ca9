"""Coherence diagnostics and reconstruction metrics.

Coherence of a latent is ``sum_l s_l / max_l s_l`` for some nonnegative
per-layer dependence ``s``; it runs from 1 (one layer) to ``L`` (all equal).
Norm coherence uses decoder fiber norms, functional coherence uses the mean
relative change of the latent when one input layer is zeroed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import CrosscoderModel, decode, encode
from .tensor_kernel import unwrap

EPS = 1e-8


def _data(batch):
    x = np.asarray(unwrap(batch))
    if x.ndim != 3 or x.shape[0] == 0:
        raise DataError("evaluation data must be a nonempty (T, L, d) array")
    return x


def _chunks(n, size):
    size = n if not size else int(size)
    for s in range(0, n, size):
        yield s, min(n, s + size)


def coherence_ratio(values: np.ndarray) -> np.ndarray:
    """Row-wise ``sum / max``; NaN where the row maximum is zero."""
    values = np.asarray(values, dtype=np.float64)
    top = values.max(axis=1)
    total = values.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(top > 0, total / np.where(top > 0, top, 1.0), np.nan)


def decoder_norms(model: CrosscoderModel, chunk_size: int = 4096) -> np.ndarray:
    """``N[i, l] = ||D[:, i, l]||``, computed a block of fibers at a time."""
    d, d_sae, L = model.dims
    norms = np.empty((d_sae, L))
    for l in range(L):
        for s, e in _chunks(d_sae, chunk_size):
            norms[s:e, l] = np.linalg.norm(model.decoder.fibers(np.arange(s, e), l), axis=1)
    return norms


def norm_coherence(model: CrosscoderModel):
    """Returns ``(c_n, N)``; ``c_n`` is NaN for latents whose fibers are all zero."""
    norms = decoder_norms(model)
    return coherence_ratio(norms), norms


def layer_sensitivity(model: CrosscoderModel, data, mode="batch_topk", chunk_size=None, eps=EPS):
    """Per-latent, per-layer sensitivity ``S`` and per-latent active-token counts.

    ``S[i, l]`` averages ``|z_i(x) - z_i(x with layer l zeroed)| / (z_i(x) + eps)``
    over the tokens where ``z_i(x) > 0``. Each chunk is encoded once clean and
    once per zeroed layer; under BatchTopK the zeroed pass re-selects within
    the same chunk.
    """
    x = _data(data)
    d, d_sae, L = model.dims
    totals = np.zeros((d_sae, L))
    counts = np.zeros(d_sae, dtype=np.int64)
    for s, e in _chunks(len(x), chunk_size):
        xc = np.asarray(x[s:e], dtype=np.float64)
        z = encode(model, xc, mode).values
        active = z > 0
        counts += active.sum(axis=0)
        denom = z + eps
        for l in range(L):
            held = xc[:, l, :].copy()
            xc[:, l, :] = 0.0
            zm = encode(model, xc, mode).values
            xc[:, l, :] = held
            rel = np.where(active, np.abs(z - zm) / denom, 0.0)
            totals[:, l] += rel.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        S = np.where(counts[:, None] > 0, totals / np.maximum(counts, 1)[:, None], 0.0)
    return S, counts


def functional_coherence(S: np.ndarray) -> np.ndarray:
    return coherence_ratio(S)


@dataclass
class CoherenceReport:
    c_n: np.ndarray
    c_f: np.ndarray
    N: np.ndarray
    S: np.ndarray
    active_counts: np.ndarray

    @property
    def n_layers(self):
        return self.N.shape[1]

    @property
    def defined_cf(self):
        return ~np.isnan(self.c_f)

    def mean_cf(self):
        return float(np.nanmean(self.c_f)) if self.defined_cf.any() else float("nan")

    def mean_cn(self):
        ok = ~np.isnan(self.c_n)
        return float(np.mean(self.c_n[ok])) if ok.any() else float("nan")

    def histogram(self, which="c_f", bin_width=0.25):
        """Counts of defined values on bins spanning ``[1, L]``."""
        values = getattr(self, which)
        values = values[~np.isnan(values)]
        L = self.n_layers
        n_bins = max(1, int(np.ceil((L - 1) / bin_width)))
        edges = np.linspace(1.0, 1.0 + n_bins * bin_width, n_bins + 1) if L > 1 else np.array([1.0, 1.0 + bin_width])
        counts, edges = np.histogram(np.clip(values, edges[0], edges[-1]), bins=edges)
        return counts, edges


def coherence_report(model: CrosscoderModel, data, mode="batch_topk", chunk_size=None) -> CoherenceReport:
    c_n, N = norm_coherence(model)
    S, counts = layer_sensitivity(model, data, mode, chunk_size)
    c_f = functional_coherence(S)
    c_f[counts == 0] = np.nan
    return CoherenceReport(c_n, c_f, N, S, counts)


def write_coherence_csv(report: CoherenceReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["latent", "c_n", "c_f", "active_count"])
        for i in range(len(report.c_n)):
            w.writerow([i, _fmt(report.c_n[i]), _fmt(report.c_f[i]), int(report.active_counts[i])])


def write_histogram_csv(report: CoherenceReport, path, bin_width=0.25) -> None:
    cn, edges = report.histogram("c_n", bin_width)
    cf, _ = report.histogram("c_f", bin_width)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count_c_n", "count_c_f"])
        for b in range(len(cn)):
            w.writerow([f"{edges[b]:g}", f"{edges[b + 1]:g}", int(cn[b]), int(cf[b])])


def _fmt(v):
    return "" if np.isnan(v) else f"{v:.6f}"


# --- reconstruction ----------------------------------------------------------


@dataclass
class ReconMetrics:
    mse: float  # per dimension, averaged over (token, layer)
    mse_sum: float  # summed over dimensions, averaged over (token, layer)
    ev: float  # NaN when the data has zero variance
    cs: float
    per_layer_mse: np.ndarray
    ev_defined: bool = True

    def row(self) -> dict:
        out = {"mse": self.mse, "mse_sum": self.mse_sum, "ev": self.ev, "cs": self.cs}
        for l, v in enumerate(self.per_layer_mse):
            out[f"mse_layer{l}"] = float(v)
        return out


def recon_metrics(model: CrosscoderModel, data, mode="batch_topk", chunk_size=None, recon_fn=None) -> ReconMetrics:
    """MSE, explained variance and cosine similarity over an evaluation set.

    EV pools the residual and total sums of squares over all layers, with the
    total measured around each layer's mean over the evaluation set. CS
    compares raw (uncentred) vectors. ``recon_fn`` replaces the model's
    reconstruction, mainly for fixtures.
    """
    x = _data(data)
    T, L, d = x.shape
    sq_layer = np.zeros(L)
    sum_x = np.zeros((L, d))
    sum_x2 = np.zeros(L)
    cos_total = 0.0
    for s, e in _chunks(T, chunk_size):
        xc = np.asarray(x[s:e], dtype=np.float64)
        if recon_fn is None:
            xh = decode(model, encode(model, xc, mode))
        else:
            xh = np.asarray(recon_fn(xc), dtype=np.float64)
        diff = xc - xh
        sq_layer += np.einsum("tld,tld->l", diff, diff)
        sum_x += xc.sum(axis=0)
        sum_x2 += np.einsum("tld,tld->l", xc, xc)
        nx = np.linalg.norm(xc, axis=2)
        nh = np.linalg.norm(xh, axis=2)
        dot = np.einsum("tld,tld->tl", xc, xh)
        both = (nx > 0) & (nh > 0)
        cos = np.where(both, dot / np.where(both, nx * nh, 1.0), 0.0)
        cos = np.where((nx == 0) & (nh == 0), 1.0, cos)
        cos_total += cos.sum()
    per_layer_sum = sq_layer / T
    per_layer_mse = per_layer_sum / d
    total_ss = float(np.sum(sum_x2 - np.einsum("ld,ld->l", sum_x, sum_x) / T))
    resid_ss = float(sq_layer.sum())
    ev_defined = total_ss > 0
    ev = 1.0 - resid_ss / total_ss if ev_defined else float("nan")
    return ReconMetrics(
        mse=float(per_layer_mse.mean()),
        mse_sum=float(per_layer_sum.mean()),
        ev=ev,
        cs=float(cos_total / (T * L)),
        per_layer_mse=per_layer_mse,
        ev_defined=ev_defined,
    )


def write_metrics_csv(rows, path) -> None:
    rows = list(rows)
    keys = list(rows[0].keys())
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)
