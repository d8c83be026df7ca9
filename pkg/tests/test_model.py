import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import rel_err
from fmxcoders.errors import ConfigError, DimensionError
from fmxcoders.model import (
    CrosscoderModel,
    SparseCode,
    SparsifyMode,
    batch_topk,
    canonical_variant,
    encode,
    encode_chunked,
    forward,
    forward_token_reference,
    param_count,
    per_token_topk,
    preactivations,
    select_cp_rank,
    select_tr_ranks,
    sparsify_eval,
    threshold_code,
    weight_count,
)
from fmxcoders.tensor_kernel import DECODER, ENCODER, DenseWeights3, materialize
from fmxcoders.training import init_model

PUBLISHED_DIMS = {
    "gpt2-small": (768, 16384, 8),
    "pythia-410m": (1024, 16384, 8),
    "pythia-1.4b": (2048, 16384, 8),
    "gemma2-2b": (2304, 16384, 8),
}
PUBLISHED_TR = {
    "gpt2-small": (5, 244, 25),
    "pythia-410m": (7, 302, 27),
    "pythia-1.4b": (11, 501, 31),
    "gemma2-2b": (12, 545, 32),
}


def dense_equivalent(m):
    return CrosscoderModel(
        materialize(m.encoder, role=ENCODER),
        materialize(m.decoder, role=DECODER),
        m.b_enc,
        m.b_dec,
        m.k,
        m.mask_p,
    )


def test_variant_aliases():
    assert canonical_variant("crosscoder") == "dense"
    assert canonical_variant("TR") == "tr"
    with pytest.raises(ConfigError):
        canonical_variant("tucker")


def test_model_validation(rng):
    m = init_model((4, 8, 2), "dense", rng=rng, k=2)
    with pytest.raises(ConfigError):
        CrosscoderModel(m.encoder, m.decoder, m.b_enc, m.b_dec, k=9)
    with pytest.raises(ConfigError):
        CrosscoderModel(m.encoder, m.decoder, m.b_enc, m.b_dec, k=2, mask_p=1.5)
    with pytest.raises(DimensionError):
        CrosscoderModel(m.encoder, m.decoder, np.zeros(7), m.b_dec, k=2)
    with pytest.raises(DimensionError):
        CrosscoderModel(m.decoder, m.decoder, m.b_enc, m.b_dec, k=2)
    tr = init_model((4, 8, 2), "tr", ranks=(1, 2, 2), rng=rng, k=2)
    with pytest.raises(DimensionError):
        CrosscoderModel(m.encoder, tr.decoder, m.b_enc, m.b_dec, k=2)


# --- preactivations ---------------------------------------------------------------


def test_preactivations_zero_batch(rng):
    m = init_model((4, 8, 2), "tr", ranks=(1, 2, 2), rng=rng, k=2)
    assert not preactivations(m, np.zeros((3, 2, 4))).any()
    b = np.array([1.0, -1.0, 0.5, -0.2, 0.0, 2.0, -3.0, 0.1])
    m2 = CrosscoderModel(m.encoder, m.decoder, b, m.b_dec, k=2)
    np.testing.assert_array_equal(preactivations(m2, np.zeros((3, 2, 4))), np.tile(np.maximum(b, 0), (3, 1)))


def test_preactivations_match_materialized(rng):
    m = init_model((5, 12, 3), "cp", ranks=(4,), rng=rng, k=3, dtype=np.float64)
    x = rng.normal(size=(6, 3, 5))
    E = materialize(m.encoder).entries
    expect = np.maximum(np.einsum("tlj,jil->ti", x, E) + m.b_enc, 0)
    assert rel_err(preactivations(m, x), expect) < 1e-10
    with pytest.raises(DimensionError):
        preactivations(m, np.zeros((2, 3, 4)))


# --- sparsifiers --------------------------------------------------------------------


def test_batch_topk_worked_example():
    code = batch_topk(np.array([[3, 1, 0.5], [2, 0.2, 4]]), 1)
    np.testing.assert_array_equal(code.values, [[3, 0, 0], [0, 0, 4]])


def test_batch_topk_exact_count_keeps_all():
    pre = np.array([[1.0, 0.0, 2.0], [0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(batch_topk(pre, 1).values, pre)


def test_batch_topk_ties_prefer_lower_token_then_latent():
    pre = np.ones((2, 3))
    np.testing.assert_array_equal(batch_topk(pre, 1).values, [[1, 1, 0], [0, 0, 0]])


def test_batch_topk_rejects_zero_k():
    with pytest.raises(ConfigError):
        batch_topk(np.ones((1, 2)), 0)


def test_per_token_and_threshold_modes():
    np.testing.assert_array_equal(per_token_topk(np.array([[3, 1, 0.5]]), 2).values, [[3, 1, 0]])
    pre = np.array([[0.5, 0.0, 2.0], [1.0, 3.0, 0.2]])
    np.testing.assert_array_equal(per_token_topk(pre, 3).values, pre)
    np.testing.assert_array_equal(threshold_code(pre, 0.0).values, pre)
    np.testing.assert_array_equal(sparsify_eval(pre, "threshold:0.6", 1).values, [[0, 0, 2.0], [1.0, 3.0, 0]])
    with pytest.raises(ConfigError):
        sparsify_eval(pre, SparsifyMode("threshold", -0.1))
    with pytest.raises(ConfigError):
        SparsifyMode.parse("nearest")
    assert str(SparsifyMode.parse("threshold:0.25")) == "threshold:0.25"


preacts = st.integers(1, 12).flatmap(
    lambda T: st.integers(1, 20).flatmap(
        lambda n: st.tuples(
            st.lists(st.lists(st.floats(-2, 5, allow_nan=False), min_size=n, max_size=n), min_size=T, max_size=T),
            st.integers(1, n),
        )
    )
)


@given(preacts)
def test_batch_topk_properties(case):
    rows, k = case
    pre = np.maximum(np.array(rows), 0.0)
    code = batch_topk(pre, k)
    T = pre.shape[0]
    kept = code.values > 0
    n_pos = int((pre > 0).sum())
    assert kept.sum() == min(T * k, n_pos)
    assert np.all(code.values[kept] == pre[kept])
    dropped = (pre > 0) & ~kept
    if kept.any() and dropped.any():
        assert code.values[kept].min() >= pre[dropped].max()
    assert np.all(code.values >= 0)


@given(preacts)
def test_batch_topk_single_token_equals_per_token(case):
    rows, k = case
    pre = np.maximum(np.array(rows[:1]), 0.0)
    np.testing.assert_array_equal(batch_topk(pre, k).values, per_token_topk(pre, k).values)


@given(preacts, st.integers(0, 2**31))
def test_batch_topk_token_permutation_equivariance(case, seed):
    rows, k = case
    pre = np.maximum(np.array(rows), 0.0)
    pre = pre + np.random.default_rng(seed).random(pre.shape) * 1e-3 * (pre > 0)  # break ties
    perm = np.random.default_rng(seed).permutation(pre.shape[0])
    np.testing.assert_array_equal(batch_topk(pre[perm], k).values, batch_topk(pre, k).values[perm])


# --- forward ----------------------------------------------------------------------------


def test_forward_empty_code_gives_decoder_bias(rng):
    m = init_model((4, 8, 2), "dense", rng=rng, k=2)
    b_dec = rng.normal(size=(2, 4)).astype(np.float32)
    m = CrosscoderModel(m.encoder, m.decoder, np.full(8, -100.0, np.float32), b_dec, k=2)
    code, recon = forward(m, rng.normal(size=(3, 2, 4)) * 0.01)
    assert code.nnz == 0
    np.testing.assert_array_equal(recon, np.broadcast_to(b_dec, (3, 2, 4)))


def test_forward_identity_model_reproduces_one_hot():
    d, L = 4, 2
    enc = np.zeros((d, d, L))
    dec = np.zeros((d, d, L))
    for l in range(L):
        enc[:, :, l] = np.eye(d) / L
        dec[:, :, l] = np.eye(d)
    m = CrosscoderModel(DenseWeights3(enc, ENCODER), DenseWeights3(dec, DECODER), np.zeros(d), np.zeros((L, d)), k=d)
    x = np.zeros((1, L, d))
    x[0, :, 2] = 1.0
    _, recon = forward(m, x)
    np.testing.assert_allclose(recon, x)


@pytest.mark.parametrize("variant,ranks", [("tr", (2, 3, 2)), ("cp", (5,))])
def test_forward_matches_materialized(rng, variant, ranks):
    m = init_model((6, 16, 3), variant, ranks=ranks, rng=rng, k=3)
    m = m.with_params({**m.params(), "b_enc": rng.normal(size=16).astype(np.float32) * 0.1})
    x = rng.normal(size=(7, 3, 6)).astype(np.float32)
    code, recon = forward(m, x)
    code_d, recon_d = forward(dense_equivalent(m), x)
    assert rel_err(code.values, code_d.values) < 1e-5
    assert rel_err(recon, recon_d) < 1e-5


def test_forward_matches_fiber_reference(rng):
    m = init_model((5, 12, 3), "tr", ranks=(2, 2, 2), rng=rng, k=2, dtype=np.float64)
    x = rng.normal(size=(4, 3, 5))
    code, recon = forward(m, x)
    for t in range(4):
        np.testing.assert_allclose(recon[t], forward_token_reference(m, code, t), rtol=1e-10, atol=1e-12)


def test_sparse_code_invariants(rng):
    m = init_model((5, 12, 3), "cp", ranks=(3,), rng=rng, k=2)
    code = encode(m, rng.normal(size=(9, 3, 5)))
    assert code.nnz <= 9 * 2
    for t in range(9):
        idx = [i for i, _ in code.pairs(t)]
        assert len(idx) == len(set(idx))
        assert all(v > 0 for _, v in code.pairs(t))


def test_encode_chunked_per_token_equals_full(rng):
    m = init_model((5, 12, 3), "dense", rng=rng, k=2)
    x = rng.normal(size=(10, 3, 5))
    full = encode(m, x, "per_token_topk").values
    chunked = encode_chunked(m, x, "per_token_topk", chunk_size=3).values
    # GEMM blocking differs with batch size, so values may differ in the last ulp
    np.testing.assert_array_equal(chunked > 0, full > 0)
    np.testing.assert_allclose(chunked, full, rtol=1e-12)


# --- ranks and parameter counts -----------------------------------------------------------


def test_cp_rank_published_values():
    got = {name: select_cp_rank(*dims) for name, dims in PUBLISHED_DIMS.items()}
    assert got == {"gpt2-small": 5866, "pythia-410m": 7707, "pythia-1.4b": 14557, "gemma2-2b": 16153}


def test_cp_rank_infeasible():
    with pytest.raises(ConfigError):
        select_cp_rank(1, 1, 1, 2)


def test_tr_ranks_ratio_rule_reproduces_published_tuples():
    for name, dims in PUBLISHED_DIMS.items():
        assert select_tr_ranks(*dims, rule="ratio") == PUBLISHED_TR[name]
    full = 2 * 1024 * 16384 * 8
    reduced = [select_tr_ranks(*PUBLISHED_DIMS["pythia-410m"], param_budget=full * r, rule="ratio") for r in (0.5, 0.25, 0.125)]
    assert reduced == [(5, 214, 19), (3, 151, 13), (2, 107, 9)]


def test_tr_ranks_accept_explicit_tuple():
    assert select_tr_ranks(768, 16384, 8, ranks=(5, 244, 25)) == (5, 244, 25)
    with pytest.raises(ConfigError):
        select_tr_ranks(4, 4, 2, ranks=(0, 1, 1))


def test_tr_ranks_tiny_matches_enumeration_oracle():
    # frozen from a fine scan of the ratio ray, keeping the largest count <= 128
    assert select_tr_ranks(4, 16, 2, param_budget=256) == (1, 3, 2)
    r = select_tr_ranks(4, 16, 2, param_budget=256)
    assert weight_count("tr", (4, 16, 2), r) <= 128


def test_tr_ranks_budget_rule_never_exceeds_half_budget():
    for dims in [(32, 256, 8), (16, 64, 4), (8, 40, 3)]:
        for frac in (1, 0.5, 0.25):
            budget = 2 * dims[0] * dims[1] * dims[2] * frac
            r = select_tr_ranks(*dims, param_budget=budget)
            assert weight_count("tr", dims, r) <= budget / 2


def test_tr_ranks_infeasible():
    with pytest.raises(ConfigError):
        select_tr_ranks(4, 16, 2, param_budget=10)


def test_param_counts():
    gpt2 = (768, 16384, 8)
    assert 2 * weight_count("dense", gpt2) == 201_326_592
    tiny = init_model((1, 1, 1), "cp", ranks=(1,), k=1)
    assert param_count(tiny) == 2 * 3 + 1 + 1
    assert param_count(tiny, weights_only=True) == 6


@pytest.mark.parametrize("name", list(PUBLISHED_DIMS))
def test_published_configs_within_two_percent(name):
    dims = PUBLISHED_DIMS[name]
    dense = 2 * weight_count("dense", dims)
    cp = 2 * weight_count("cp", dims, (select_cp_rank(*dims),))
    assert 0.98 <= dense / cp <= 1.02
    tr = 2 * weight_count("tr", dims, select_tr_ranks(*dims, ranks=PUBLISHED_TR[name]))
    assert 0.98 <= dense / tr <= 1.02
    assert math.isclose(dense, 2 * dims[0] * dims[1] * dims[2])
