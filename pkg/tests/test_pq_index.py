import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from profuse import pq_index as pq


def _units(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _recon_error(cb, x):
    return np.mean(np.sum((pq.decode_raw(cb, pq.encode(cb, x)) - x) ** 2, axis=1))


def test_one_hot_vectors_quantize_exactly():
    x = np.eye(256)
    cb = pq.train(x, m=1)
    assert _recon_error(cb, x) == pytest.approx(0, abs=1e-12)


def test_training_is_deterministic():
    x = _units(np.random.default_rng(0), 400, 16)
    a, b = pq.train(x, m=4, seed=3), pq.train(x, m=4, seed=3)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    assert pq.train(x, m=4, seed=3, workers=4).centroids.tobytes() == a.centroids.tobytes()


def test_finer_split_reconstructs_better():
    x = _units(np.random.default_rng(1), 1000, 16)
    e4, e1 = _recon_error(pq.train(x, m=4), x), _recon_error(pq.train(x, m=1), x)
    assert e4 <= e1
    # measured on this fixture: m=4 about 0.24, m=1 about 0.66
    assert e4 < 0.35


def test_small_training_set_shrinks_codebook():
    cb = pq.train(_units(np.random.default_rng(2), 40, 8), m=2)
    assert cb.k == 40 and cb.centroids.shape == (2, 40, 4)


def test_indivisible_dimension_is_rejected():
    with pytest.raises(ValueError, match="divisible"):
        pq.train(np.eye(10), m=3)
    with pytest.raises(ValueError):
        pq.default_m(10)
    assert pq.default_m(16) == 2 and pq.default_m(12) == 3


def test_empty_cluster_is_repaired():
    # four duplicated points and k=8: no centroid may be left unused on distinct data
    x = np.repeat(np.eye(4), 2, axis=0) + np.linspace(0, 0.01, 8)[:, None]
    c = pq.kmeans(x, 8, seed=0)
    assert len({tuple(np.round(r, 9)) for r in c}) == 8


@pytest.fixture(scope="module")
def codebook():
    x = _units(np.random.default_rng(4), 600, 16)
    return pq.train(x, m=4), x


def test_exact_codeword_round_trip(codebook):
    cb, _ = codebook
    codes = np.array([[3, 17, 0, 255 % cb.k]])
    x = pq.decode_raw(cb, codes)
    assert_array_equal(pq.encode(cb, x), codes)
    assert_allclose(pq.decode_raw(cb, pq.encode(cb, x)), x, atol=1e-6)


def test_decoded_rows_are_unit(codebook):
    cb, x = codebook
    assert_allclose(np.linalg.norm(pq.decode(cb, pq.encode(cb, x)), axis=1), 1, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_adc_equals_raw_decoded_dot(codebook, seed):
    cb, x = codebook
    q = _units(np.random.default_rng(seed), 1, 16)[0]
    codes = pq.encode(cb, x)
    assert_allclose(pq.adc_scores(cb, codes, q), pq.decode_raw(cb, codes) @ q, atol=1e-6)


def test_codeword_query_ranks_first(codebook):
    cb, x = codebook
    codes = pq.encode(cb, x)
    target = pq.decode_raw(cb, codes[7:8])[0]
    first = pq.search(cb, codes, target / np.linalg.norm(target), 1)[0]
    # rows sharing the same code tie; the lowest index wins
    assert first == np.flatnonzero((codes == codes[7]).all(1))[0]


def test_full_shortlist_is_permutation(codebook):
    cb, x = codebook
    codes = pq.encode(cb, x)
    sl = pq.search(cb, codes, x[0], len(x))
    assert sorted(sl.tolist()) == list(range(len(x)))


def test_rank_breaks_ties_by_index():
    assert pq.rank(np.array([0.5, 0.9, 0.5, 0.9])).tolist() == [1, 3, 0, 2]


def test_single_subspace_with_exact_codes_ranks_like_brute_force():
    rng = np.random.default_rng(5)
    x = _units(rng, 200, 8)
    cb = pq.train(x, m=1)
    codes = pq.encode(cb, x)
    for q in _units(rng, 5, 8):
        assert_array_equal(pq.search(cb, codes, q, 200), pq.rank(x @ q))


def test_synth_scene_quality(zero_noise_run):
    sc = zero_noise_run.registered
    lab = sc.labeled
    idx = pq.build_index(sc.descriptors, m=4, train_mask=lab)
    dec = pq.decode(idx.codebook, idx.codes)
    assert np.mean(np.sum(dec * sc.descriptors, axis=1)[lab]) >= 0.95
    # recall of the exact top 10 inside a 128 shortlist for every class query; ties at the 10th score count
    recalls = []
    for q in zero_noise_run.scene.truth.object_embeddings:
        exact = sc.descriptors @ q
        tenth = np.sort(exact)[::-1][9]
        sl = pq.search(idx.codebook, idx.codes, q, 128)
        recalls.append(min(10, int(np.sum(exact[sl] >= tenth - 1e-7))) / 10)
    assert np.mean(recalls) >= 0.95


def test_index_round_trip(tmp_path, codebook):
    cb, x = codebook
    index = pq.PQIndex(cb, pq.encode(cb, x))
    pq.save_index(tmp_path / "i.pf", index)
    back = pq.load_index(tmp_path / "i.pf")
    assert back.codebook.centroids.tobytes() == cb.centroids.tobytes()
    assert_array_equal(back.codes, index.codes)
