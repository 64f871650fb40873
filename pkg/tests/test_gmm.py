import numpy as np
import pytest
from scipy.stats import multivariate_normal

from owrcnn.gmm import GaussianMixturePerClass, GmmStore, fit_class_gmm, fit_gmms


def test_single_component_matches_gaussian(rng):
    x = rng.normal([1.0, -2.0, 0.5], [0.5, 1.0, 0.2], size=(200, 3))
    m = fit_class_gmm(7, x, components=1)
    np.testing.assert_allclose(m.means[0], x.mean(axis=0), atol=1e-8)
    np.testing.assert_allclose(m.covariances[0], np.cov(x.T, bias=True) + 1e-6 * np.eye(3), atol=1e-8)
    ref = multivariate_normal(x.mean(axis=0), np.cov(x.T, bias=True) + 1e-6 * np.eye(3)).logpdf(x[:5])
    np.testing.assert_allclose(m.log_likelihood(x[:5]), ref, atol=1e-8)


def test_floor_is_lowest_training_likelihood(rng):
    x = rng.normal(size=(50, 2))
    m = fit_class_gmm(1, x, components=2, seed=3)
    ll = m.log_likelihood(x)
    assert m.theta_like == pytest.approx(ll.min())
    # no training sample falls below the floor, a far-away point does
    assert (ll >= m.theta_like).all()
    assert m.log_likelihood(np.array([25.0, -25.0])) < m.theta_like
    assert isinstance(m.log_likelihood(x[0]), float)


def test_responsibilities_sum_to_one(rng):
    x = np.concatenate([rng.normal(-5, 1, (40, 2)), rng.normal(5, 1, (40, 2))])
    m = fit_class_gmm(1, x, components=2, seed=0)
    r = m.responsibilities(x)
    np.testing.assert_allclose(r.sum(axis=1), 1.0)
    assert sorted(np.round(m.weights, 1).tolist()) == [0.5, 0.5]


def test_fit_is_deterministic(rng):
    x = rng.normal(size=(60, 3))
    a = fit_class_gmm(1, x, components=3, seed=5)
    b = fit_class_gmm(1, x, components=3, seed=5)
    np.testing.assert_array_equal(a.means, b.means)
    assert a.theta_like == b.theta_like


def test_components_capped_by_distinct_samples():
    x = np.array([[0.0, 1.0]] * 5 + [[1.0, 0.0]] * 5)
    m = fit_class_gmm(1, x, components=4)
    assert len(m.weights) == 2


def test_small_classes_bypass(rng, caplog):
    store = fit_gmms({1: rng.normal(size=(20, 2)), 2: rng.normal(size=(3, 2))}, min_samples=10)
    assert set(store.models) == {1}
    assert 2 in store.bypassed and store.get(2) is None
    assert store.covers() == {1, 2}
    assert "bypasses" in caplog.text


def test_store_round_trip(tmp_path, rng):
    store = fit_gmms({1: rng.normal(size=(30, 3)), 4: rng.normal(size=(2, 3))}, components=2, min_samples=5)
    store.save(tmp_path / "g.json")
    back = GmmStore.load(tmp_path / "g.json")
    assert back.bypassed == store.bypassed
    m, n = store.get(1), back.get(1)
    for k in ("weights", "means", "covariances"):
        np.testing.assert_array_equal(getattr(m, k), getattr(n, k))
    assert n.theta_like == m.theta_like and n.sample_count == 30
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(m.log_likelihood(x), n.log_likelihood(x))


def test_hand_built_mixture():
    m = GaussianMixturePerClass(0, np.array([0.25, 0.75]), np.array([[0.0], [4.0]]), np.array([[[1.0]], [[1.0]]]))
    want = np.log(0.25 * np.exp(-0.5 * 4) + 0.75 * np.exp(-0.5 * 4)) - 0.5 * np.log(2 * np.pi)
    assert m.log_likelihood(np.array([2.0])) == pytest.approx(want, abs=1e-12)
