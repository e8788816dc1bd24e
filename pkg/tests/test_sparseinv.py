import numpy as np
import pytest

from srcloc import sparseinv as sp
from srcloc.sparseinv import GroupLassoProblem, SparseInverseError

from test_lininv import orthonormal_lf, random_lf


def ista_oracle(L, y, lam, n_iter):
    # deliberately independent of the package: exact step from the SVD, no acceleration
    t = 1.0 / np.linalg.norm(L, 2) ** 2
    x = np.zeros(L.shape[1])
    for _ in range(n_iter):
        z = (x - t * (L.T @ (L @ x - y))).reshape(-1, 3)
        nz = np.linalg.norm(z, axis=1, keepdims=True)
        x = (z * np.maximum(0.0, 1.0 - lam * t / np.maximum(nz, 1e-300))).reshape(-1)
    x = x.reshape(-1, 3)
    r = y - L @ x.reshape(-1)
    return 0.5 * r @ r + lam * np.linalg.norm(x, axis=1).sum()


def test_negative_lambda_rejected():
    lf = random_lf(4, 6)
    with pytest.raises(SparseInverseError):
        GroupLassoProblem(lf, np.ones(4), -1.0)


def test_above_lambda_max_is_zero():
    lf = random_lf(4, 6, seed=1)
    y = np.random.default_rng(2).normal(size=4)
    lmax = sp.lambda_max(lf, y)
    for lam in (lmax, 3 * lmax):
        x, diag = sp.solve_group_lasso(GroupLassoProblem(lf, y, lam))
        assert np.all(x == 0)
        assert diag.kkt_residual <= 1e-12


def test_zero_lambda_orthonormal_fits_exactly():
    lf = orthonormal_lf(2, seed=4)
    y = np.random.default_rng(5).normal(size=6)
    x, _ = sp.solve_group_lasso(GroupLassoProblem(lf, y, 0.0, max_iter=10_000, tol=1e-15))
    assert np.linalg.norm(y - lf.gain @ x.reshape(-1)) < 1e-8


def test_matches_long_run_oracle():
    lf = random_lf(4, 6, seed=7)
    y = np.random.default_rng(8).normal(size=4)
    lam = 0.3 * sp.lambda_max(lf, y)
    f_ref = ista_oracle(lf.gain, y, lam, 1_000_000)
    x, diag = sp.solve_group_lasso(GroupLassoProblem(lf, y, lam, max_iter=100_000, tol=1e-15))
    assert abs(diag.objective - f_ref) < 1e-6
    assert diag.objective >= f_ref - 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_kkt_conditions(seed):
    lf = random_lf(8, 10, seed=seed)
    y = np.random.default_rng(100 + seed).normal(size=8)
    lam = 0.2 * sp.lambda_max(lf, y)
    x, diag = sp.solve_group_lasso(GroupLassoProblem(lf, y, lam, max_iter=200_000, tol=1e-16))
    L = lf.gain
    corr = (L.T @ (y - L @ x.reshape(-1))).reshape(-1, 3)
    norms = np.linalg.norm(x, axis=1)
    active = norms > 0
    assert active.any()
    assert np.abs(corr[active] - lam * x[active] / norms[active, None]).max() <= 1e-4 * lam
    if (~active).any():
        assert np.linalg.norm(corr[~active], axis=1).max() <= lam * (1 + 1e-4)
    assert diag.kkt_residual <= 1e-4


def test_ista_objective_monotone():
    lf = random_lf(6, 8, seed=3)
    y = np.random.default_rng(9).normal(size=6)
    lam = 0.1 * sp.lambda_max(lf, y)
    _, diag = sp.solve_group_lasso(GroupLassoProblem(lf, y, lam, max_iter=2000, tol=1e-14),
                                   accelerate=False, keep_history=True)
    h = np.array(diag.history)
    assert np.all(np.diff(h) <= 1e-12 * np.abs(h[:-1]))


def test_support_shrinks_with_lambda():
    lf = random_lf(6, 12, seed=10)
    y = np.random.default_rng(11).normal(size=6)
    lmax = sp.lambda_max(lf, y)
    supports = []
    for frac in (0.05, 0.2, 0.6):
        x, _ = sp.solve_group_lasso(GroupLassoProblem(lf, y, frac * lmax, max_iter=100_000, tol=1e-15))
        supports.append(set(np.flatnonzero(np.linalg.norm(x, axis=1) > 0)))
    assert supports[2] <= supports[1] <= supports[0]


def test_block_soft_threshold():
    z = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 0.0], [0.3, 0.0, 0.4]])
    out = sp.block_soft_threshold(z, 1.0)
    assert np.allclose(out[0], [2.4, 3.2, 0.0])
    assert np.all(out[1:] == 0)


def test_power_iteration_norm():
    L = np.random.default_rng(0).normal(size=(10, 30))
    assert abs(sp.lipschitz(L) / np.linalg.norm(L, 2) ** 2 - 1) < 1e-3


def test_single_source_gives_sparse_estimate(coarse_lf):
    y = coarse_lf.block(17) @ np.array([0.0, 0.0, 1e-8])
    lam = 0.3 * sp.lambda_max(coarse_lf, y)
    x, diag = sp.solve_group_lasso(GroupLassoProblem(coarse_lf, y, lam, max_iter=20_000))
    assert diag.converged
    assert diag.kkt_residual < 1e-3
    assert 0 < np.count_nonzero(np.linalg.norm(x, axis=1)) <= 10
