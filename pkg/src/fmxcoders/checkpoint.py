"""FMXC1 checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       5     magic b"FMXC1"
    5       4     u32 format version (1)
    9       4     u32 variant tag (0 dense, 1 tr, 2 cp)
    13      12    u32 d, d_sae, L
    25      12    u32 rank slots (tr: R1 R2 R3; cp: R 0 0; dense: 0 0 0)
    37      4     u32 k
    41      8     f64 mask_p
    49      ...   f32 arrays, C order, in declaration order:
                  encoder factors, decoder factors, b_enc (d_sae), b_dec (L, d)

Factor order: dense ``w``; tr ``g1 g2 g3``; cp ``w u v``. Dense encoders are
``(d, d_sae, L)`` and dense decoders ``(d_sae, d, L)``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import CrosscoderModel
from .tensor_kernel import DECODER, ENCODER, CpFactors, DenseWeights3, TrFactors

MAGIC = b"FMXC1"
VERSION = 1
_HEADER = struct.Struct("<5sIIIIIIIIId")
_TAGS = {"dense": 0, "tr": 1, "cp": 2}
_VARIANTS = {v: k for k, v in _TAGS.items()}
_F32 = np.dtype("<f4")


def _shapes(variant, d, d_sae, L, ranks, role):
    if variant == "dense":
        return [("w", (d, d_sae, L) if role == ENCODER else (d_sae, d, L))]
    if variant == "tr":
        r1, r2, r3 = ranks
        return [("g1", (r1, d, r2)), ("g2", (r2, d_sae, r3)), ("g3", (r3, L, r1))]
    (r,) = ranks
    return [("w", (d, r)), ("u", (d_sae, r)), ("v", (L, r))]


def _build(variant, arrays, role):
    if variant == "dense":
        return DenseWeights3(arrays["w"], role)
    if variant == "tr":
        return TrFactors(arrays["g1"], arrays["g2"], arrays["g3"])
    return CpFactors(arrays["w"], arrays["u"], arrays["v"])


def to_bytes(m: CrosscoderModel) -> bytes:
    d, d_sae, L = m.dims
    slots = (list(m.ranks) + [0, 0, 0])[:3]
    header = _HEADER.pack(
        MAGIC, VERSION, _TAGS[m.variant], d, d_sae, L, *slots, int(m.k), float(m.mask_p)
    )
    parts = [header]
    for w in (m.encoder, m.decoder):
        for arr in w.arrays().values():
            parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    parts.append(np.ascontiguousarray(m.b_enc, dtype=_F32).tobytes())
    parts.append(np.ascontiguousarray(m.b_dec, dtype=_F32).tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> CrosscoderModel:
    if len(buf) < _HEADER.size:
        raise FormatError(f"checkpoint truncated: {len(buf)} bytes < header size {_HEADER.size}", len(buf))
    magic, version, tag, d, d_sae, L, s1, s2, s3, k, mask_p = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 5)
    if tag not in _VARIANTS:
        raise FormatError(f"unknown variant tag {tag}", 9)
    variant = _VARIANTS[tag]
    if min(d, d_sae, L) < 1:
        raise FormatError(f"nonpositive dims {(d, d_sae, L)}", 13)
    ranks = {"dense": (), "tr": (s1, s2, s3), "cp": (s1,)}[variant]
    if ranks and min(ranks) < 1:
        raise FormatError(f"nonpositive ranks {ranks}", 25)
    if not 0.0 <= mask_p <= 1.0:
        raise FormatError(f"mask_p {mask_p} outside [0, 1]", 41)

    layout = [(ENCODER, name, shape) for name, shape in _shapes(variant, d, d_sae, L, ranks, ENCODER)]
    layout += [(DECODER, name, shape) for name, shape in _shapes(variant, d, d_sae, L, ranks, DECODER)]
    layout += [(None, "b_enc", (d_sae,)), (None, "b_dec", (L, d))]
    expected = _HEADER.size + 4 * sum(int(np.prod(s)) for _, _, s in layout)
    if len(buf) != expected:
        raise FormatError(
            f"checkpoint payload length {len(buf)} does not match header dims (expected {expected})",
            min(len(buf), expected),
        )

    offset = _HEADER.size
    enc, dec, extra = {}, {}, {}
    for role, name, shape in layout:
        n = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype=_F32, count=n, offset=offset).reshape(shape).astype(np.float32)
        {ENCODER: enc, DECODER: dec, None: extra}[role][name] = arr
        offset += 4 * n
    try:
        return CrosscoderModel(
            encoder=_build(variant, enc, ENCODER),
            decoder=_build(variant, dec, DECODER),
            b_enc=extra["b_enc"],
            b_dec=extra["b_dec"],
            k=k,
            mask_p=mask_p,
        )
    except ValueError as exc:
        raise FormatError(f"checkpoint header describes an invalid model: {exc}", 0) from exc


def save_checkpoint(m: CrosscoderModel, path) -> None:
    Path(path).write_bytes(to_bytes(m))


def load_checkpoint(path) -> CrosscoderModel:
    return from_bytes(Path(path).read_bytes())
