"""Three-way weight tensors for crosscoders and the contractions that apply them.

Every weight family (dense, tensor ring, CP) is indexed logically as
``W[j, i, l]`` with ``j`` over the activation dimension ``d``, ``i`` over the
dictionary width ``d_sae`` and ``l`` over the ``L`` layers. Two directions
of application are needed:

* ``contract(x)``: ``pre[t, i] = sum_{l, j} x[t, l, j] W[j, i, l]``  (encoder)
* ``expand(z)``:   ``out[t, l, j] = sum_i z[t, i] W[j, i, l]``       (decoder)

Factorized families implement both without building the ``d x d_sae x L``
tensor. All reductions run in float64 regardless of storage dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DimensionError

ENCODER = "encoder"
DECODER = "decoder"
_F64 = np.float64


def _f64(a):
    return np.asarray(a, dtype=_F64)


def _check_index(name, value, size):
    if not (0 <= int(value) < size):
        raise IndexError(f"{name}={value} out of range [0, {size})")


def _check_batch(x, d, L):
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1] != L or x.shape[2] != d:
        raise DimensionError(f"activation batch shape {x.shape} does not match (T, {L}, {d})")
    return _f64(x)


def _check_code(z, d_sae):
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] != d_sae:
        raise DimensionError(f"code shape {z.shape} does not match (T, {d_sae})")
    return _f64(z)


@dataclass(frozen=True)
class DenseWeights3:
    """Unfactorized 3-way weights.

    Encoders are stored ``(d, d_sae, L)`` and decoders ``(d_sae, d, L)``;
    ``role`` records which layout ``entries`` uses.
    """

    entries: np.ndarray
    role: str = ENCODER

    def __post_init__(self):
        if self.role not in (ENCODER, DECODER):
            raise DimensionError(f"unknown role {self.role!r}")
        if np.asarray(self.entries).ndim != 3:
            raise DimensionError(f"dense weights must be 3-D, got shape {np.shape(self.entries)}")

    @property
    def dims(self):
        a, b, L = self.entries.shape
        return (a, b, L) if self.role == ENCODER else (b, a, L)

    @property
    def canonical(self):
        """View indexed ``[j, i, l]`` regardless of role."""
        if self.role == ENCODER:
            return self.entries
        return self.entries.transpose(1, 0, 2)

    def arrays(self):
        return {"w": self.entries}

    def with_arrays(self, arrays):
        return DenseWeights3(arrays["w"], self.role)

    def element(self, j, i, l):
        d, d_sae, L = self.dims
        _check_index("j", j, d)
        _check_index("i", i, d_sae)
        _check_index("l", l, L)
        return float(self.canonical[j, i, l])

    def materialize(self, role=ENCODER):
        return DenseWeights3(np.array(_to_role(self.canonical, role)), role)

    def contract(self, x):
        d, d_sae, L = self.dims
        x = _check_batch(x, d, L)
        T = x.shape[0]
        # rows ordered (l, j) on both sides
        w = _f64(self.canonical).transpose(2, 0, 1).reshape(L * d, d_sae)
        return x.reshape(T, L * d) @ w

    def contract_grad(self, x, g):
        d, d_sae, L = self.dims
        x = _check_batch(x, d, L)
        T = x.shape[0]
        gw = (x.reshape(T, L * d).T @ _f64(g)).reshape(L, d, d_sae).transpose(1, 2, 0)
        return {"w": _to_role(gw, self.role)}

    def expand(self, z):
        d, d_sae, L = self.dims
        z = _check_code(z, d_sae)
        w = _f64(self.canonical).transpose(1, 2, 0).reshape(d_sae, L * d)
        return (z @ w).reshape(-1, L, d)

    def expand_grad(self, z, g):
        d, d_sae, L = self.dims
        z = _check_code(z, d_sae)
        T = z.shape[0]
        g2 = _f64(g).reshape(T, L * d)
        w = _f64(self.canonical).transpose(1, 2, 0).reshape(d_sae, L * d)
        gw = (z.T @ g2).reshape(d_sae, L, d).transpose(2, 0, 1)
        return {"w": _to_role(gw, self.role)}, g2 @ w.T

    def fibers(self, indices, l):
        d, d_sae, L = self.dims
        _check_index("l", l, L)
        idx = np.asarray(indices, dtype=np.intp)
        for i in idx:
            _check_index("i", i, d_sae)
        return _f64(self.canonical[:, idx, l].T)


@dataclass(frozen=True)
class TrFactors:
    """Tensor-ring factors: ``W[j,i,l] = Tr(g1[:,j,:] @ g2[:,i,:] @ g3[:,l,:])``.

    Shapes: ``g1`` (R1, d, R2), ``g2`` (R2, d_sae, R3), ``g3`` (R3, L, R1).
    """

    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray

    def __post_init__(self):
        g1, g2, g3 = (np.asarray(g) for g in (self.g1, self.g2, self.g3))
        if g1.ndim != 3 or g2.ndim != 3 or g3.ndim != 3:
            raise DimensionError("tensor-ring factors must all be 3-D")
        r1, _, r2 = g1.shape
        if g2.shape[0] != r2 or g3.shape[0] != g2.shape[2] or g3.shape[2] != r1:
            raise DimensionError(
                f"tensor-ring ranks do not close: {g1.shape}, {g2.shape}, {g3.shape}"
            )
        if min(r1, r2, g2.shape[2]) < 1:
            raise DimensionError("tensor-ring ranks must be >= 1")

    @property
    def ranks(self):
        return (self.g1.shape[0], self.g2.shape[0], self.g3.shape[0])

    @property
    def dims(self):
        return (self.g1.shape[1], self.g2.shape[1], self.g3.shape[1])

    def arrays(self):
        return {"g1": self.g1, "g2": self.g2, "g3": self.g3}

    def with_arrays(self, arrays):
        return TrFactors(arrays["g1"], arrays["g2"], arrays["g3"])

    def element(self, j, i, l):
        d, d_sae, L = self.dims
        _check_index("j", j, d)
        _check_index("i", i, d_sae)
        _check_index("l", l, L)
        prod = _f64(self.g1[:, j, :]) @ _f64(self.g2[:, i, :]) @ _f64(self.g3[:, l, :])
        return float(np.trace(prod))

    def materialize(self, role=ENCODER):
        full = np.einsum("ajb,bic,cla->jil", _f64(self.g1), _f64(self.g2), _f64(self.g3))
        return DenseWeights3(_to_role(full, role).astype(self.g1.dtype), role)

    # Layouts chosen so every step is a single GEMM:
    #   g1 as (j, (a, b)) for the encoder and ((b, a), j) for the decoder,
    #   g2 as ((c, b), i) for the encoder and (i, (b, c)) for the decoder.
    def _g2_cb(self):
        return _f64(self.g2).transpose(2, 0, 1).reshape(-1, self.g2.shape[1])

    def _g1_j_ab(self):
        r1, d, r2 = self.g1.shape
        return _f64(self.g1).transpose(1, 0, 2).reshape(d, r1 * r2)

    def _layer_h(self, x_l, g1):
        # H_l for every token, laid out (a, (t, b)) for the R3 x R1 product
        r1, r2 = self.g1.shape[0], self.g1.shape[2]
        T = x_l.shape[0]
        return (x_l @ g1).reshape(T, r1, r2).transpose(1, 0, 2).reshape(r1, T * r2)

    def contract(self, x):
        d, d_sae, L = self.dims
        r1, r2, r3 = self.ranks
        x = _check_batch(x, d, L)
        T = x.shape[0]
        g1 = self._g1_j_ab()
        g3 = _f64(self.g3)
        m = np.zeros((r3, T * r2))  # M laid out (c, (t, b))
        for l in range(L):
            m += g3[:, l, :] @ self._layer_h(x[:, l, :], g1)
        m = m.reshape(r3, T, r2).transpose(1, 0, 2).reshape(T, r3 * r2)
        return m @ self._g2_cb()

    def contract_grad(self, x, g):
        d, d_sae, L = self.dims
        r1, r2, r3 = self.ranks
        x = _check_batch(x, d, L)
        g = _f64(g)
        T = x.shape[0]
        g1 = self._g1_j_ab()
        g3 = _f64(self.g3)
        g2_cb = self._g2_cb()
        dm = (g @ g2_cb.T).reshape(T, r3, r2).transpose(1, 0, 2).reshape(r3, T * r2)
        m = np.zeros((r3, T * r2))
        dg1 = np.zeros((d, r1 * r2))
        dg3 = np.zeros_like(g3)
        for l in range(L):
            h = self._layer_h(x[:, l, :], g1)
            m += g3[:, l, :] @ h
            dg3[:, l, :] = dm @ h.T
            dh = (g3[:, l, :].T @ dm).reshape(r1, T, r2).transpose(1, 0, 2).reshape(T, r1 * r2)
            dg1 += x[:, l, :].T @ dh
        m = m.reshape(r3, T, r2).transpose(1, 0, 2).reshape(T, r3 * r2)
        dg2 = (m.T @ g).reshape(r3, r2, d_sae).transpose(1, 2, 0)
        dg1 = dg1.reshape(d, r1, r2).transpose(1, 0, 2)
        return {"g1": dg1, "g2": dg2, "g3": dg3}

    def _decoder_layouts(self, z):
        d, d_sae, L = self.dims
        r1, r2, r3 = self.ranks
        g2_i_bc = _f64(self.g2).transpose(1, 0, 2).reshape(d_sae, r2 * r3)
        p = (z @ g2_i_bc).reshape(z.shape[0] * r2, r3)  # rows (t, b)
        g1_ba_j = _f64(self.g1).transpose(2, 0, 1).reshape(r2 * r1, d)
        return g2_i_bc, p, g1_ba_j

    def expand(self, z):
        d, d_sae, L = self.dims
        r1, r2, r3 = self.ranks
        z = _check_code(z, d_sae)
        T = z.shape[0]
        _, p, g1_ba_j = self._decoder_layouts(z)
        g3 = _f64(self.g3)
        out = np.empty((T, L, d))
        for l in range(L):
            q = p @ g3[:, l, :]  # rows (t, b), columns a
            out[:, l, :] = q.reshape(T, r2 * r1) @ g1_ba_j
        return out

    def expand_grad(self, z, g):
        d, d_sae, L = self.dims
        r1, r2, r3 = self.ranks
        z = _check_code(z, d_sae)
        g = _f64(g)
        T = z.shape[0]
        g2_i_bc, p, g1_ba_j = self._decoder_layouts(z)
        g3 = _f64(self.g3)
        dg1 = np.zeros((r2 * r1, d))
        dg3 = np.zeros_like(g3)
        dp = np.zeros((T * r2, r3))
        for l in range(L):
            q = (p @ g3[:, l, :]).reshape(T, r2 * r1)
            dg1 += q.T @ g[:, l, :]
            dq = (g[:, l, :] @ g1_ba_j.T).reshape(T * r2, r1)
            dg3[:, l, :] = p.T @ dq
            dp += dq @ g3[:, l, :].T
        dp = dp.reshape(T, r2 * r3)
        dg2 = (z.T @ dp).reshape(d_sae, r2, r3).transpose(1, 0, 2)
        dg1 = dg1.reshape(r2, r1, d).transpose(1, 2, 0)
        return {"g1": dg1, "g2": dg2, "g3": dg3}, dp @ g2_i_bc.T

    def fibers(self, indices, l):
        d, d_sae, L = self.dims
        _check_index("l", l, L)
        idx = np.asarray(indices, dtype=np.intp)
        for i in idx:
            _check_index("i", i, d_sae)
        g2 = _f64(self.g2)[:, idx, :]
        return np.einsum("ajb,bnc,ca->nj", _f64(self.g1), g2, _f64(self.g3[:, l, :]))


@dataclass(frozen=True)
class CpFactors:
    """CP factors: ``W[j,i,l] = sum_r w[j,r] u[i,r] v[l,r]``."""

    w: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        shapes = [np.shape(a) for a in (self.w, self.u, self.v)]
        if any(len(s) != 2 for s in shapes) or len({s[1] for s in shapes}) != 1:
            raise DimensionError(f"CP factors need a shared rank column: {shapes}")
        if shapes[0][1] < 1:
            raise DimensionError("CP rank must be >= 1")

    @property
    def rank(self):
        return self.w.shape[1]

    @property
    def dims(self):
        return (self.w.shape[0], self.u.shape[0], self.v.shape[0])

    def arrays(self):
        return {"w": self.w, "u": self.u, "v": self.v}

    def with_arrays(self, arrays):
        return CpFactors(arrays["w"], arrays["u"], arrays["v"])

    def element(self, j, i, l):
        d, d_sae, L = self.dims
        _check_index("j", j, d)
        _check_index("i", i, d_sae)
        _check_index("l", l, L)
        return float(np.sum(_f64(self.w[j]) * _f64(self.u[i]) * _f64(self.v[l])))

    def materialize(self, role=ENCODER):
        full = np.einsum("jr,ir,lr->jil", _f64(self.w), _f64(self.u), _f64(self.v))
        return DenseWeights3(_to_role(full, role).astype(self.w.dtype), role)

    def _contract_state(self, x):
        d, d_sae, L = self.dims
        x = _check_batch(x, d, L)
        a = x @ _f64(self.w)  # (T, L, R)
        b = (a * _f64(self.v)[None]).sum(axis=1)
        return b @ _f64(self.u).T, a, b

    def contract(self, x):
        return self._contract_state(x)[0]

    def contract_grad(self, x, g):
        d, d_sae, L = self.dims
        x = _check_batch(x, d, L)
        g = _f64(g)
        T = x.shape[0]
        _, a, b = self._contract_state(x)
        du = g.T @ b
        db = g @ _f64(self.u)
        dv = (a * db[:, None, :]).sum(axis=0)
        da = db[:, None, :] * _f64(self.v)[None, :, :]
        dw = x.reshape(T * L, d).T @ da.reshape(T * L, -1)
        return {"w": dw, "u": du, "v": dv}

    def expand(self, z):
        d, d_sae, L = self.dims
        z = _check_code(z, d_sae)
        b = z @ _f64(self.u)
        c = b[:, None, :] * _f64(self.v)[None, :, :]
        return c @ _f64(self.w).T

    def expand_grad(self, z, g):
        d, d_sae, L = self.dims
        z = _check_code(z, d_sae)
        g = _f64(g)
        T = z.shape[0]
        b = z @ _f64(self.u)
        v = _f64(self.v)
        c = b[:, None, :] * v[None, :, :]
        dw = g.reshape(T * L, d).T @ c.reshape(T * L, -1)
        dc = g @ _f64(self.w)
        dv = (dc * b[:, None, :]).sum(axis=0)
        db = (dc * v[None]).sum(axis=1)
        du = z.T @ db
        return {"w": dw, "u": du, "v": dv}, db @ _f64(self.u).T

    def fibers(self, indices, l):
        d, d_sae, L = self.dims
        _check_index("l", l, L)
        idx = np.asarray(indices, dtype=np.intp)
        for i in idx:
            _check_index("i", i, d_sae)
        return (_f64(self.u[idx]) * _f64(self.v[l])[None, :]) @ _f64(self.w).T


Weights3 = Union[DenseWeights3, TrFactors, CpFactors]


def _to_role(canonical, role):
    if role == ENCODER:
        return canonical
    if role == DECODER:
        return canonical.transpose(1, 0, 2)
    raise DimensionError(f"unknown role {role!r}")


def tr_element(f: TrFactors, j: int, i: int, l: int) -> float:
    return f.element(j, i, l)


def cp_element(f: CpFactors, j: int, i: int, l: int) -> float:
    return f.element(j, i, l)


def materialize(f: Weights3, target_shape=None, role=ENCODER) -> DenseWeights3:
    """Build the dense tensor of ``f`` (oracle and fiber-extraction backend).

    ``target_shape`` is checked against the layout implied by ``role``.
    """
    out = f.materialize(role)
    if target_shape is not None and tuple(target_shape) != out.entries.shape:
        raise DimensionError(
            f"target shape {tuple(target_shape)} inconsistent with factors ({out.entries.shape})"
        )
    return out


def unwrap(batch):
    """The activation array of a batch object, or the array itself.

    ``ndarray.data`` is a raw buffer, so arrays must not go through ``getattr``.
    """
    return batch if isinstance(batch, np.ndarray) else getattr(batch, "data", batch)


def encoder_contract(enc: Weights3, batch) -> np.ndarray:
    """Linear part of the encoder, ``sum_l E_l^T x_l`` per token, shape ``(T, d_sae)``."""
    return enc.contract(unwrap(batch))


def decoder_apply(dec: Weights3, code, layer: int) -> np.ndarray:
    """``D_l z`` for one token's sparse code, touching only the active fibers.

    ``code`` is a sequence of ``(latent index, value)`` pairs.
    """
    d, d_sae, L = dec.dims
    _check_index("layer", layer, L)
    pairs = list(code)
    if not pairs:
        return np.zeros(d)
    idx = np.array([p[0] for p in pairs], dtype=np.intp)
    vals = np.array([p[1] for p in pairs], dtype=_F64)
    if idx.min() < 0 or idx.max() >= d_sae:
        raise DimensionError(f"code index out of range for d_sae={d_sae}")
    return vals @ dec.fibers(idx, layer)


def decoder_fiber(dec: Weights3, i: int, layer: int) -> np.ndarray:
    return dec.fibers([i], layer)[0]
