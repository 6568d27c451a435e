import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarcheck.data import MASK
from polarcheck.layers import LayerActivationCache
from polarcheck.models import AttentionModel, ModelSpec, linear_softmax_model
from polarcheck.perturb import (ATTENTION_MASK, DEFAULT_STRATEGIES, MASK_TOKEN, SLICE_OUT,
                                ReplacementStrategy, batch_probabilities, delta_confidence,
                                rank_by_magnitude, remove_tokens, top_fraction_indices)


def model(name, seed=0, **kw):
    base = dict(num_classes=2, vocab_size=30, embed_dim=6, hidden_dim=5, att_dim=4, seed=seed)
    base.update(kw)
    return AttentionModel(ModelSpec.from_zoo(name, **base))


def test_slice_out_drops_tokens():
    out = remove_tokens([5, 6, 7], [0], ReplacementStrategy(SLICE_OUT))
    assert out.ids.tolist() == [6, 7] and out.keep is None


def test_mask_token_preserves_length():
    out = remove_tokens([5, 6, 7], [1, 2], ReplacementStrategy(MASK_TOKEN))
    assert out.ids.tolist() == [5, MASK, MASK]


def test_attention_mask_all_but_one_renormalized():
    m = model("lstm+tanh")
    cache = LayerActivationCache()
    p = remove_tokens([4, 5, 6], [0, 2], ReplacementStrategy(ATTENTION_MASK, renormalize=True))
    m.forward(p.ids[None], keep=p.keep[None], renormalize=True, cache=cache)
    np.testing.assert_allclose(cache.attention[0].alpha.value[0], [0.0, 1.0, 0.0])


def test_removal_errors():
    s = ReplacementStrategy(SLICE_OUT)
    for bad in ([], [3], [-1], [0, 1, 2]):
        with pytest.raises(ValueError):
            remove_tokens([4, 5, 6], bad, s)
    with pytest.raises(ValueError):
        ReplacementStrategy("drop")


def test_strategy_names_round_trip():
    for s in DEFAULT_STRATEGIES + (ReplacementStrategy(ATTENTION_MASK, True),):
        assert ReplacementStrategy.parse(s.name) == s


@pytest.mark.parametrize("strategy", [ReplacementStrategy(MASK_TOKEN)])
def test_mask_on_mask_is_identity(strategy):
    m = model("cnn+dot")
    ids = np.array([4, MASK, 9, 12])
    out = delta_confidence(m, ids, [1], strategy)
    assert abs(out.delta) < 1e-12


def test_linear_softmax_closed_form_delta():
    rng = np.random.default_rng(3)
    emb = rng.normal(size=(10, 4))
    emb[MASK] = 0.0
    W = rng.normal(size=(4, 2))
    m = linear_softmax_model(W, emb)
    ids = np.array([3, 5, 8, 9])
    out = delta_confidence(m, ids, [2], ReplacementStrategy(MASK_TOKEN))

    def softmax(z):
        e = np.exp(z - z.max())
        return e / e.sum()

    full = softmax(emb[ids].sum(0) @ W)
    yhat = int(np.argmax(full))
    rest = softmax(emb[[3, 5, 9]].sum(0) @ W)
    assert out.predicted == yhat
    assert abs(out.delta - (full[yhat] - rest[yhat])) < 1e-14
    assert out.delta == out.original - out.perturbed


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(3, 29), min_size=2, max_size=9), st.integers(0, 2), st.data())
def test_delta_in_unit_interval(ids, kind, data):
    m = model("lstm+dot", seed=1)
    k = data.draw(st.integers(0, len(ids) - 2))
    out = delta_confidence(m, ids, list(range(k + 1)), DEFAULT_STRATEGIES[kind])
    assert -1.0 <= out.delta <= 1.0
    assert 0.0 <= out.perturbed <= 1.0


def test_top_fraction_rules():
    w = np.array([0.1, -0.9, 0.3, 0.2, 0.0, 0.05, -0.4, 0.6, 0.01, 0.02])
    assert top_fraction_indices(w, 0.1).tolist() == [1]
    assert top_fraction_indices(w, 0.05).tolist() == [1]
    for f in (0.05, 0.2, 0.5):
        rm = set(top_fraction_indices(w, f, "remove-top").tolist())
        keep = set(top_fraction_indices(w, f, "keep-top").tolist())
        assert rm.isdisjoint(keep) and rm | keep == set(range(10))
    with pytest.raises(ValueError):
        top_fraction_indices(w, 1.0)


def test_ties_resolve_to_ascending_index():
    assert rank_by_magnitude([0.5, -0.5, 0.2, 0.5]).tolist() == [0, 1, 3, 2]


@pytest.mark.parametrize("attention", ["tanh", "dot"])
def test_slice_out_matches_renormalized_mask_on_window_one_cnn(attention):
    rng = np.random.default_rng(0)
    for seed in range(20):
        m = model(f"cnn+{attention}", seed=seed, kernel_width=1)
        n = int(rng.integers(3, 8))
        ids = rng.integers(3, 30, size=n)
        drop = sorted(rng.choice(n, size=int(rng.integers(1, n)), replace=False).tolist())
        a = batch_probabilities(m, ids, [drop], ReplacementStrategy(SLICE_OUT))
        b = batch_probabilities(m, ids, [drop], ReplacementStrategy(ATTENTION_MASK, True))
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_transformer_mask_zeroes_removed_keys_everywhere():
    m = model("transformer", embed_dim=8, heads=2, layers=2)
    cache = LayerActivationCache()
    keep = np.array([[True, False, True, True]])
    m.forward(np.array([[4, 5, 6, 7]]), keep=keep, cache=cache)
    for rec in cache.attention:
        assert np.all(rec.alpha.value[..., 2] == 0)  # token 1 sits at position 2 after CLS


def test_batched_probabilities_match_single_passes():
    m = model("transformer", embed_dim=8, heads=2)
    ids = np.array([4, 5, 6, 7, 8])
    sets = [[0], [1, 3], [4], [0, 2]]
    for s in DEFAULT_STRATEGIES:
        batched = batch_probabilities(m, ids, sets, s)
        for row, rm in zip(batched, sets):
            p = remove_tokens(ids, rm, s)
            keep = None if p.keep is None else p.keep[None]
            np.testing.assert_allclose(row, m.probabilities(p.ids[None], keep=keep)[0], atol=1e-14)
