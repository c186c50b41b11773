import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uvae.baseline import PlsModel, pls_fit, pls_predict, pls_predict_composition, to_simplex


def linear_problem(seed, n=40, p=6, m=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    B = rng.normal(size=(p, m))
    return X, X @ B


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_exact_recovery_at_full_rank(seed):
    X, Y = linear_problem(seed)
    model = pls_fit(X, Y, k=6)
    assert np.max(np.abs(pls_predict(model, X) - Y)) < 1e-8
    T = model.scores
    gram = T.T @ T
    off = gram - np.diag(np.diag(gram))
    assert np.max(np.abs(off)) < 1e-8 * max(1.0, np.max(np.abs(gram)))


def test_first_weight_is_covariance_direction():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 5))
    y = X @ rng.normal(size=5) + 0.1 * rng.normal(size=30)
    w = pls_fit(X, y, k=1).weights[:, 0]
    ref = (X - X.mean(0)).T @ (y - y.mean())
    cos = abs(w @ ref) / (np.linalg.norm(w) * np.linalg.norm(ref))
    assert cos > 1 - 1e-10


def test_constant_response():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(20, 4))
    model = pls_fit(X, np.full((20, 2), 0.7), k=2)
    assert np.allclose(pls_predict(model, rng.normal(size=(5, 4))), 0.7, atol=1e-12)


def test_in_sample_and_centering():
    X, Y = linear_problem(3)
    Y = Y + np.random.default_rng(3).normal(size=Y.shape)
    model = pls_fit(X, Y, k=3)
    fitted = pls_predict(model, X)
    assert np.allclose(fitted - model.y_mean, model.scores @ model.y_loadings.T, atol=1e-10)
    assert np.allclose(pls_predict(model, model.x_mean[None]), model.y_mean[None], atol=1e-12)


def test_full_rank_matches_least_squares():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(50, 5))
    Y = rng.normal(size=(50, 2))
    model = pls_fit(X, Y, k=5)
    Xc = X - X.mean(0)
    beta, *_ = np.linalg.lstsq(Xc, Y - Y.mean(0), rcond=None)
    assert np.max(np.abs(model.coef - beta)) < 1e-6


def test_argument_checks():
    X, Y = linear_problem(5)
    with pytest.raises(ValueError):
        pls_fit(X, Y, k=0)
    with pytest.raises(ValueError):
        pls_fit(X, Y[:-1], k=2)
    with pytest.raises(ValueError):
        pls_fit(np.ones((10, 3)), Y[:10], k=1)
    model = pls_fit(X, Y, k=2)
    with pytest.raises(ValueError):
        pls_predict(model, X[:, :3])


def test_simplex_projection_and_serialization():
    out = to_simplex(np.array([[0.5, -0.1, 0.7], [-1.0, -2.0, -3.0]]))
    assert np.allclose(out[0], [0.5 / 1.2, 0.0, 0.7 / 1.2])
    assert np.allclose(out[1], 1 / 3)
    X, Y = linear_problem(6)
    model = pls_fit(X, Y, k=2)
    back = PlsModel.from_dict(model.to_dict())
    assert np.array_equal(pls_predict(back, X), pls_predict(model, X))
    assert np.allclose(pls_predict_composition(model, X).sum(1), 1.0)
