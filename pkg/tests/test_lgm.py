import numpy as np
import pytest
from scipy.stats import multivariate_normal

from safembrl.fastfood import DomainError, build_stack, features
from safembrl.lgm import (
    GridSpec,
    TrainingDataset,
    UndefinedEvidenceError,
    fit,
    load_checkpoint,
    log_evidence,
    predict,
    save_checkpoint,
    select_hyperparameters,
)


def linear_system(n, noise, seed=0):
    """x' = 0.9 x + u + eps; returns dataset and the noiseless map."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 2))
    truth = lambda Z: 0.9 * Z[:, :1] + Z[:, 1:]
    Y = truth(X) + noise * rng.normal(size=(n, 1))
    return TrainingDataset(X, Y), truth


def dense_posterior(Phi, y, sn2, ss2):
    M = Phi.shape[1]
    A = Phi.T @ Phi / sn2 + np.eye(M) / ss2
    Ainv = np.linalg.inv(A)
    return Ainv @ Phi.T @ y / sn2, Ainv


def test_fit_matches_dense_solve():
    rng = np.random.default_rng(3)
    X, Y = rng.normal(size=(40, 3)), rng.normal(size=(40, 2))
    stack = build_stack(3, 24, seed=1)
    sn2, ss2 = np.array([0.1, 0.02]), np.array([1.0, 2.0])
    model = fit(TrainingDataset(X, Y), stack, sn2, ss2)
    Phi = features(stack, X)
    xs = rng.normal(size=(7, 3))
    mean, var = predict(model, xs)
    phis = features(stack, xs)
    for i in range(2):
        w, Ainv = dense_posterior(Phi, Y[:, i], sn2[i], ss2[i])
        np.testing.assert_allclose(model.weights[i], w, atol=1e-10)
        np.testing.assert_allclose(mean[:, i], phis @ w, atol=1e-10)
        np.testing.assert_allclose(var[:, i], np.einsum("nm,mk,nk->n", phis, Ainv, phis), atol=1e-10)


def test_empty_dataset_gives_prior():
    stack = build_stack(2, 16, seed=0)
    model = fit(TrainingDataset.empty(2, 1), stack, 0.01, 2.5)
    assert model.num_samples == 0
    np.testing.assert_array_equal(model.weights, 0.0)
    x = np.array([[0.3, -0.2]])
    mean, var = predict(model, x)
    phi = features(stack, x)[0]
    assert mean[0, 0] == 0.0
    np.testing.assert_allclose(var[0, 0], 2.5 * phi @ phi, rtol=1e-12)


def test_linear_system_mean_within_three_noise_sd():
    sigma = 0.05
    data, truth = linear_system(500, sigma)
    hyp = select_hyperparameters(data, GridSpec(num_features=65))
    model = fit(data, build_stack(2, 65, hyp.lengthscales, 0), hyp.noise_vars, hyp.signal_vars)
    Xt = np.random.default_rng(99).uniform(-1, 1, size=(200, 2))
    mean, _ = predict(model, Xt)
    rmse = np.sqrt(np.mean((mean - truth(Xt)) ** 2))
    assert rmse < 3 * sigma
    assert sigma / 3 <= np.sqrt(hyp.noise_vars[0]) <= 3 * sigma


def test_near_interpolation_with_tiny_noise():
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, size=(20, 1))
    Y = np.sin(3 * X)
    stack = build_stack(1, 64, 0.5, seed=2)
    model = fit(TrainingDataset(X, Y), stack, 1e-12, 1.0)
    mean, _ = predict(model, X)
    assert np.max(np.abs(mean - Y)) < 1e-3


def test_variance_far_from_data_returns_to_prior():
    # With finite M a far-away feature vector still overlaps the span of the
    # training features by about rank / M, so the check uses M >> N.
    data, _ = linear_system(100, 0.05)
    stack = build_stack(2, 2048, 0.5, seed=0)
    model = fit(data, stack, 0.0025, 1.0)
    prior = fit(TrainingDataset.empty(2, 1), stack, 0.0025, 1.0)
    far = np.array([[10.0, -10.0], [12.0, 9.0]])    # >= 10 lengthscales from [-1, 1]^2
    _, v = predict(model, far)
    _, v0 = predict(prior, far)
    np.testing.assert_allclose(v, v0, rtol=0.1)


def test_adding_a_point_does_not_raise_variance_there():
    data, _ = linear_system(60, 0.05)
    stack = build_stack(2, 32, 1.0, seed=0)
    x_star = np.array([0.25, -0.4])
    before = predict(fit(data, stack, 0.01, 1.0), x_star)[1]
    after = predict(fit(data.append(x_star, [0.0]), stack, 0.01, 1.0), x_star)[1]
    assert after[0] <= before[0] + 1e-10


def test_log_evidence_matches_dense_gaussian():
    rng = np.random.default_rng(5)
    X, Y = rng.normal(size=(30, 2)), rng.normal(size=(30, 2))
    stack = build_stack(2, 16, seed=3)
    sn2, ss2 = np.array([0.3, 0.05]), np.array([1.5, 0.7])
    ev = log_evidence(TrainingDataset(X, Y), stack, sn2, ss2)
    Phi = features(stack, X)
    for i in range(2):
        cov = ss2[i] * Phi @ Phi.T + sn2[i] * np.eye(30)
        ref = multivariate_normal(np.zeros(30), cov).logpdf(Y[:, i])
        np.testing.assert_allclose(ev[i], ref, rtol=1e-9)


def test_evidence_drops_when_noise_is_underestimated():
    data, _ = linear_system(200, 0.1)
    stack = build_stack(2, 32, 2.0, seed=0)
    right = log_evidence(data, stack, 0.01, 1.0)
    small = log_evidence(data, stack, 0.01 / 100**2, 1.0)  # sigma_n 100x too small
    assert small[0] < right[0]


def test_grid_recovers_noise_within_one_step():
    noise_grid = tuple(np.logspace(-2, 0, 7))
    for true in (0.03, 0.2):
        data, _ = linear_system(400, true, seed=1)
        hyp = select_hyperparameters(data, GridSpec(noise_std=noise_grid, num_features=32))
        idx = int(np.argmin(np.abs(np.log(noise_grid) - np.log(true))))
        got = int(np.argmin(np.abs(np.array(noise_grid) - np.sqrt(hyp.noise_vars[0]))))
        assert abs(got - idx) <= 1


def test_grid_of_size_one_returns_it():
    data, _ = linear_system(50, 0.1)
    grid = GridSpec(noise_std=(0.2,), signal_std=(1.5,), lengthscale=(0.7,), num_features=16)
    hyp = select_hyperparameters(data, grid)
    np.testing.assert_allclose(hyp.noise_vars, [0.04])
    np.testing.assert_allclose(hyp.signal_vars, [2.25])
    np.testing.assert_allclose(hyp.lengthscales, [0.7, 0.7])


def test_selection_is_deterministic():
    data, _ = linear_system(120, 0.1)
    grid = GridSpec(num_features=16)
    a, b = select_hyperparameters(data, grid), select_hyperparameters(data, grid)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_evidence_and_selection_need_data():
    empty = TrainingDataset.empty(2, 1)
    with pytest.raises(UndefinedEvidenceError):
        log_evidence(empty, build_stack(2, 4), 0.1, 1.0)
    with pytest.raises(UndefinedEvidenceError):
        select_hyperparameters(empty)


def test_dataset_validation_and_append():
    with pytest.raises(ValueError):
        TrainingDataset(np.zeros((3, 2)), np.zeros((2, 1)))
    with pytest.raises(DomainError):
        TrainingDataset(np.array([[np.inf, 0.0]]), np.zeros((1, 1)))
    d = TrainingDataset.empty(2, 1).append([1.0, 2.0], [3.0])
    assert len(d) == 1 and d.inputs.shape == (1, 2)


def test_fit_rejects_nonpositive_variances():
    with pytest.raises(ValueError):
        fit(TrainingDataset.empty(2, 1), build_stack(2, 4), 0.0, 1.0)


def test_checkpoint_round_trip(tmp_path):
    data, _ = linear_system(50, 0.1)
    model = fit(data, build_stack(2, 16, [0.5, 2.0], seed=8), 0.01, 1.0)
    save_checkpoint(model, tmp_path / "m.npz")
    back = load_checkpoint(tmp_path / "m.npz")
    x = np.random.default_rng(0).normal(size=(5, 2))
    for a, b in zip(predict(model, x), predict(back, x)):
        np.testing.assert_array_equal(a, b)
    assert back.num_samples == 50
