import numpy as np
import pytest

from nmenc.io import DataError
from nmenc.pca import PcaModel, pca_fit, pca_inverse_transform, pca_transform


def covariance_oracle(data, k):
    """Independent oracle: eigendecompose the sample covariance directly."""
    x = np.asarray(data, dtype=float)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    return eigvals[order][:k], eigvecs[:, order][:, :k].T


def test_variance_confined_to_one_axis():
    pts = np.array([[-2.0, 0.0], [-1.0, 0.0], [0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    m = pca_fit(pts, k=1)
    np.testing.assert_allclose(m.components, [[1.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(m.explained_variance, [2.5], atol=1e-12)
    np.testing.assert_allclose(m.mean, [0.0, 0.0], atol=1e-12)


def test_full_k_reconstruction():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(30, 5))
    m = pca_fit(x, k=5)
    back = pca_inverse_transform(m, pca_transform(m, x))
    np.testing.assert_allclose(back, x, atol=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_covariance_oracle_agreement(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(50, 4)) @ np.diag([3.0, 2.0, 1.0, 0.5])
    k = 4
    m = pca_fit(x, k)
    ev, comps = covariance_oracle(x, k)
    np.testing.assert_allclose(m.explained_variance, ev, atol=1e-8)
    for i in range(k):
        dot = abs(comps[i] @ m.components[i])
        assert dot == pytest.approx(1.0, abs=1e-8)  # up to sign


def test_transform_of_mean_is_zero():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(20, 3))
    m = pca_fit(x, 2)
    z = pca_transform(m, np.tile(m.mean, (6, 1)))
    np.testing.assert_allclose(z, 0.0, atol=1e-12)


def test_transform_variances_match_explained():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(40, 6))
    m = pca_fit(x, 4)
    z = pca_transform(m, x)
    np.testing.assert_allclose(z.var(axis=0, ddof=1), m.explained_variance,
                               atol=1e-8)


def test_transform_decorrelates_training_data():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(40, 5))
    m = pca_fit(x, 3)
    z = pca_transform(m, x)
    cov = np.cov(z, rowvar=False)
    off = cov - np.diag(np.diag(cov))
    assert np.max(np.abs(off)) <= 1e-8


def test_reconstruction_error_matches_discarded_variance():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(60, 6)) @ rng.normal(size=(6, 6))
    full = pca_fit(x, 6)
    total = full.explained_variance.sum()
    for k in (1, 3, 5):
        m = pca_fit(x, k)
        back = pca_inverse_transform(m, pca_transform(m, x))
        err = np.sum((x - back) ** 2) / (x.shape[0] - 1)
        expected = total - m.explained_variance.sum()
        assert err == pytest.approx(expected, rel=1e-6, abs=1e-12)


def test_row_order_invariance():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(25, 4))
    m1 = pca_fit(x, 3)
    m2 = pca_fit(x[rng.permutation(25)], 3)
    np.testing.assert_allclose(m1.components, m2.components, atol=1e-10)
    np.testing.assert_allclose(m1.explained_variance, m2.explained_variance,
                               atol=1e-10)


def test_bit_deterministic_sign_convention():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(30, 4))
    m1 = pca_fit(x, 4)
    m2 = pca_fit(x.copy(), 4)
    assert np.array_equal(m1.components, m2.components)
    # every component's largest-magnitude entry is positive
    anchors = np.argmax(np.abs(m1.components), axis=1)
    assert np.all(m1.components[np.arange(4), anchors] > 0)


def test_errors():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(10, 3))
    with pytest.raises(DataError):
        pca_fit(x, 0)
    with pytest.raises(DataError):
        pca_fit(x, 4)
    with pytest.raises(DataError):
        pca_fit(x[:1], 1)
    with pytest.raises(DataError):
        pca_fit(np.ones((5, 3)), 1)  # zero total variance
    m = pca_fit(x, 2)
    with pytest.raises(DataError):
        pca_transform(m, np.zeros((4, 5)))


def test_model_invariant_validation():
    with pytest.raises(DataError):
        PcaModel(mean=np.zeros(2), components=np.array([[1.0, 1.0]]),
                 explained_variance=np.array([1.0]))  # not orthonormal


def test_whiten_flag():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(50, 4)) * np.array([5.0, 1.0, 0.2, 0.1])
    m = pca_fit(x, 3, whiten=True)
    z = pca_transform(m, x)
    np.testing.assert_allclose(z.var(axis=0, ddof=1), 1.0, atol=1e-8)
    back = pca_inverse_transform(m, z)
    mw = pca_fit(x, 3)
    np.testing.assert_allclose(back, pca_inverse_transform(mw, pca_transform(mw, x)),
                               atol=1e-8)
