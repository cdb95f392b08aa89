import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spes.data import SyntheticCorpus, ShardSampler, gen_corpus, make_shards, split_heldout, stationary


def test_single_source_matches_stationary_distribution():
    c = gen_corpus(V=8, S=1000, C=1, sequences=1000, seed=3)
    assert c.tokens.size == 10**6
    freq = np.bincount(c.tokens.ravel(), minlength=8) / c.tokens.size
    pi = c.stationary(0)
    # eigenvector oracle: pi P = pi
    assert np.allclose(pi @ c.transitions[0], pi, atol=1e-12)
    assert np.max(np.abs(freq - pi) / pi) < 0.01
    assert 0.5 * np.abs(freq - pi).sum() < 0.01


def test_stationary_of_two_state_chain():
    P = np.array([[0.9, 0.1], [0.3, 0.7]])
    assert np.allclose(stationary(P), [0.75, 0.25])


def test_fixed_seed_is_bit_identical():
    a = gen_corpus(12, 20, 3, 50, seed=9)
    b = gen_corpus(12, 20, 3, 50, seed=9)
    assert a.tokens.tobytes() == b.tokens.tobytes()
    assert a.sources.tobytes() == b.sources.tobytes()
    assert a.transitions.tobytes() == b.transitions.tobytes()
    assert gen_corpus(12, 20, 3, 50, seed=10).tokens.tobytes() != a.tokens.tobytes()


def test_sources_are_retained_and_distinct():
    c = gen_corpus(10, 30, 4, 400, seed=1)
    assert set(np.unique(c.sources)) == {0, 1, 2, 3}
    assert c.tokens.min() >= 0 and c.tokens.max() < 10
    assert all(not np.allclose(c.transitions[0], c.transitions[k]) for k in range(1, 4))
    assert 0 < c.entropy_rate(0) < np.log(10)


@pytest.mark.parametrize("V,C", [(3, 4), (5, 0)])
def test_invalid_sizes(V, C):
    with pytest.raises(ValueError):
        gen_corpus(V, 10, C, 5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.sampled_from(["random", "by_source"]), st.integers(0, 100))
def test_shards_disjoint_and_covering(N, policy, seed):
    c = gen_corpus(6, 4, 3, 37, seed=seed)
    train, held = split_heldout(c, 0.2, seed)
    assert not set(train) & set(held) and len(train) + len(held) == 37
    shards = make_shards(c, N, policy, seed, indices=train)
    flat = np.concatenate(shards)
    assert len(flat) == len(set(flat.tolist())) == len(train)
    assert set(flat.tolist()) == set(train.tolist())


def test_by_source_shards_are_heterogeneous():
    c = gen_corpus(8, 10, 4, 400, seed=2)
    shards = make_shards(c, 4, "by_source")
    dominant = [np.bincount(c.sources[s], minlength=4).max() / len(s) for s in shards]
    assert min(dominant) >= 0.8  # equal-size chunks straddle at most one source boundary each
    rand = make_shards(c, 4, "random")
    assert max(np.bincount(c.sources[s], minlength=4).max() / len(s) for s in rand) < 0.5


def test_sampler_is_pure_and_stays_in_shard():
    c = gen_corpus(8, 10, 2, 100, seed=4)
    shards = make_shards(c, 2)
    s = ShardSampler(c, shards, batch=5, seed=1)
    assert s(1, 3, 2).tobytes() == s(1, 3, 2).tobytes()
    assert set(s.indices(0, 1, 0).tolist()) <= set(shards[0].tolist())
    assert s(0, 1, 0).shape == (5, 10)


def test_save_load_round_trip(tmp_path):
    c = gen_corpus(8, 10, 2, 20, seed=5)
    c.save(tmp_path / "c.npz")
    d = SyntheticCorpus.load(tmp_path / "c.npz")
    assert d.tokens.tobytes() == c.tokens.tobytes() and d.seed == 5
