import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from odecorrect.dataset import PromptInstance, generate_corpus
from odecorrect.tokenizer import (EmbeddingConfig, Normalizer, TokenCategory as C, TokenEmbedding, build_mask,
                                  embed, prompt_error_scale, tokenize)

from helpers import permute_sequence, toy_instance


def test_compact_layout_token_count():
    inst = toy_instance(d=1, n_nodes=3, with_target=False)
    seq = tokenize(inst, 3, demo_queries=False)
    assert len(seq) == 12
    assert list(seq.category) == [C.COARSE] * 3 + [C.ERROR] * 3 + [C.COARSE] * 3 + [C.QUERY] * 3


def test_demo_queries_add_a_row_per_demo():
    inst = toy_instance(d=2, n_nodes=3)
    seq = tokenize(inst, 3)
    # demos: coarse+error+query, query block: coarse+error(targets)+query
    assert len(seq) == 3 * 3 * 3


def test_keys_shared_within_demo_and_scaled():
    seq = tokenize(toy_instance(d=2, n_nodes=4), 3)
    for b in range(3):
        keys = [seq.keys[(seq.demo == b) & (seq.category == c)] for c in C]
        assert np.array_equal(keys[0], keys[1]) and np.array_equal(keys[0], keys[2])
        assert np.all(np.diff(keys[0]) > 0)
    assert seq.keys.min() == 0.0 and seq.keys.max() == 1.0


def test_query_values_zero_and_padding():
    seq = tokenize(toy_instance(d=1, n_nodes=3, dim=2), 3)
    assert not np.any(seq.values[seq.category == C.QUERY])
    assert not np.any(seq.values[:, 2])


def test_lorenz_fills_width():
    corpus = generate_corpus("lorenz", "pretrain", 1, 2, n_coarse=3)
    recs = corpus.records
    seq = tokenize(PromptInstance([recs[0].demo()], recs[1].trajectory()), 3)
    assert seq.values.shape[1] == 3 and np.any(seq.values[seq.category == C.COARSE][:, 2])


def test_dim_too_large():
    corpus = generate_corpus("lorenz", "pretrain", 1, 1, n_coarse=2)
    with pytest.raises(ValueError):
        tokenize(PromptInstance([], corpus.records[0].trajectory()), 2)


def test_endpoint_target_masked():
    seq = tokenize(toy_instance(d=1, n_nodes=4), 3)
    q = (seq.category == C.QUERY)
    last = q & (seq.node == 3)
    assert not seq.target_mask[last].any()
    assert seq.target_mask[q & (seq.node < 3)][:, :2].all()


def test_seven_token_mask_example():
    inst = toy_instance(d=0, n_nodes=3)
    seq = tokenize(inst, 3, query_errors=True, query_nodes=[1])
    assert len(seq) == 7
    m = build_mask(seq)
    q = int(seq.final_queries[0])
    expected = np.zeros(7, dtype=bool)
    expected[seq.category == C.COARSE] = True
    expected[q] = True
    assert np.array_equal(m[q], expected)


def test_same_demo_queries_blocked():
    seq = tokenize(toy_instance(d=1, n_nodes=3), 3)
    m = build_mask(seq)
    qs = seq.final_queries
    assert not m[qs[0], qs[1]] and not m[qs[1], qs[0]]


def test_later_demo_sees_whole_earlier_demo():
    seq = tokenize(toy_instance(d=2, n_nodes=3), 3)
    m = build_mask(seq)
    rows = np.flatnonzero((seq.demo == 1) & (seq.category == C.COARSE))
    assert m[np.ix_(rows, np.flatnonzero(seq.demo == 0))].all()


def test_mask_deterministic():
    inst = toy_instance(d=2, n_nodes=3)
    assert np.array_equal(build_mask(tokenize(inst, 3)), build_mask(tokenize(inst, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 3), st.integers(2, 5), st.integers(0, 10_000))
def test_mask_permutation_equivariance(d, n, seed):
    seq = tokenize(toy_instance(d=d, n_nodes=n), 3)
    perm = permute_sequence(seq, np.random.default_rng(seed))
    m = build_mask(seq)
    assert np.array_equal(build_mask(seq.__class__(**{**seq.__dict__, **perm.fields})), m[np.ix_(perm.order,
                                                                                                    perm.order)])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 3), st.integers(2, 5))
def test_no_leak_to_final_targets(d, n):
    seq = tokenize(toy_instance(d=d, n_nodes=n), 3)
    m = build_mask(seq)
    errs = np.flatnonzero((seq.demo == d) & (seq.category == C.ERROR))
    assert errs.size and not m[np.ix_(seq.final_queries, errs)].any()


def test_prompt_scale_divides_labels():
    inst = toy_instance(d=2, n_nodes=3)
    plain = tokenize(inst, 3)
    scaled = tokenize(inst, 3, prompt_scale=True)
    f = prompt_error_scale([p.errors for p in inst.demos], Normalizer.identity(2))
    err = plain.category == C.ERROR
    np.testing.assert_allclose(scaled.values[err][:, :2] * f, plain.values[err][:, :2], rtol=1e-15)
    np.testing.assert_array_equal(scaled.err_factor, f)
    np.testing.assert_allclose(np.sqrt(np.mean(np.concatenate([p.errors for p in inst.demos]) ** 2 / f ** 2,
                                               axis=0)), 1.0)


def test_normalizer_round_trip():
    corpus = generate_corpus("van_der_pol", "pretrain", 2, 2, n_coarse=5)
    norm = Normalizer.fit(corpus.records)
    back = Normalizer.from_dict(norm.to_dict())
    e = corpus.records[0].errors
    np.testing.assert_array_equal(back.errors_inv(back.errors(e)), norm.errors_inv(norm.errors(e)))
    assert np.all(norm.err_scale > 0)


# --- embedding ---------------------------------------------------------------

def test_zero_weights_give_positional_rows():
    emb = TokenEmbedding(EmbeddingConfig(3, 16)).double()
    torch.nn.init.zeros_(emb.value_map.weight)
    torch.nn.init.zeros_(emb.value_map.bias)
    seq = tokenize(toy_instance(d=1, n_nodes=3), 3)
    out = embed(seq, emb)
    expected = emb.positional.detach()[torch.as_tensor(seq.category)]
    assert torch.equal(out.detach(), expected)


def test_identical_inputs_identical_rows():
    emb = TokenEmbedding(EmbeddingConfig(3, 16)).double()
    seq = tokenize(toy_instance(d=1, n_nodes=3), 3)
    qs = seq.final_queries
    # query tokens differ only by key; force equal keys
    seq.keys[qs[1]] = seq.keys[qs[0]]
    out = embed(seq, emb).detach()
    assert torch.equal(out[qs[0]], out[qs[1]])


def test_swap_queries_swaps_rows():
    emb = TokenEmbedding(EmbeddingConfig(3, 16)).double()
    seq = tokenize(toy_instance(d=1, n_nodes=3), 3)
    a = embed(seq, emb).detach()
    i, j = seq.final_queries[:2]
    order = np.arange(len(seq))
    order[[i, j]] = order[[j, i]]
    swapped = seq.__class__(**{**seq.__dict__, "keys": seq.keys[order], "values": seq.values[order],
                               "category": seq.category[order], "demo": seq.demo[order], "node": seq.node[order]})
    b = embed(swapped, emb).detach()
    assert torch.equal(a[order], b)


def test_per_node_positional_variant():
    emb = TokenEmbedding(EmbeddingConfig(3, 8, "category_position", max_nodes=16))
    seq = tokenize(toy_instance(d=1, n_nodes=3), 3)
    assert embed(seq, emb, torch.float32).shape == (len(seq), 8)
    with pytest.raises(ValueError):
        TokenEmbedding(EmbeddingConfig(3, 8, "rotary"))
