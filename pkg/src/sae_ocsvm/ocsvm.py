"""nu-one-class SVM with an RBF kernel, solved in the dual by SMO.

The dual problem is

    minimize    1/2 a^T K a
    subject to  0 <= a_i <= 1 / (nu * n),   sum(a) = 1

and the decision function is ``f(z) = sum_i a_i k(z_i, z) - rho``.  The
solver below works on a batch of independent problems of equal size at once,
which is what the per-voxel baseline needs; a single fit is a batch of one.
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DegenerateDataError, ShapeError


@dataclass(frozen=True)
class RbfKernel:
    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-6
    max_iterations: int = 1_000_000

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")


@dataclass(frozen=True)
class OcsvmModel:
    support_vectors: np.ndarray
    alphas: np.ndarray
    rho: float
    gamma: float
    nu: float
    n_train: int
    objective: float = float("nan")
    iterations: int = 0
    kkt_residual: float = 0.0

    def validate(self, atol=1e-5):
        """Check the dual constraints; raises ValueError if they fail."""
        c = 1.0 / (self.nu * self.n_train)
        a = np.asarray(self.alphas, dtype=np.float64)
        if a.ndim != 1 or len(a) != len(self.support_vectors):
            raise ShapeError("one dual coefficient per support vector is required")
        if np.any(a <= 0) or np.any(a > c * (1 + atol)):
            raise ValueError("dual coefficients violate 0 < alpha <= 1/(nu n)")
        if abs(a.sum() - 1.0) > atol:
            raise ValueError(f"dual coefficients sum to {a.sum()}, expected 1")
        if not self.gamma > 0 or not 0 < self.nu <= 1:
            raise ValueError("gamma must be > 0 and nu in (0, 1]")
        return self


def _sq_dists(a, b):
    """Pairwise squared distances between rows, computed by direct differences."""
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...ijk,...ijk->...ij", diff, diff)


def rbf_kernel(zi, zj, gamma):
    zi, zj = np.asarray(zi, dtype=np.float64), np.asarray(zj, dtype=np.float64)
    if zi.shape != zj.shape:
        raise ShapeError(f"kernel arguments differ in length: {zi.shape} vs {zj.shape}")
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    d = zi - zj
    return float(np.exp(-gamma * np.dot(d, d)))


def kernel_matrix(a, b, gamma):
    return np.exp(-gamma * _sq_dists(np.asarray(a, np.float64), np.asarray(b, np.float64)))


def auto_gamma(Z):
    """``1 / (d * Var(Z))`` with Var the mean per-dimension variance.

    Equivalently the reciprocal of the total variance of the training set.
    Works on (n, d) or on a batch (B, n, d), returning one gamma per problem.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[-2] < 2:
        raise DegenerateDataError("auto_gamma needs at least 2 vectors")
    total = Z.var(axis=-2).sum(axis=-1)
    constant = np.all(Z == Z[..., :1, :], axis=(-2, -1))
    if Z.ndim == 2:
        if constant or not total > 0:
            raise DegenerateDataError("all latent vectors are identical (zero variance)")
        return float(1.0 / total)
    gamma = np.full(total.shape, np.nan)
    ok = ~constant & (total > 0)
    gamma[ok] = 1.0 / total[ok]
    return gamma


def _initial_alphas(batch, n, c):
    # libsvm-style start: the first floor(1/c) points at the bound, the rest of
    # the unit mass on the next one
    a = np.zeros((batch, n))
    k = min(int(math.floor(1.0 / c + 1e-12)), n)
    a[:, :k] = c
    if k < n:
        a[:, k] = 1.0 - k * c
    return a


def smo_solve(K, c, tol=1e-6, max_iter=1_000_000):
    """Solve a batch of one-class duals with kernel matrices ``K`` (B, n, n).

    Uses maximal-violating-pair working-set selection; ties go to the lowest
    index.  Returns ``(alphas, gradients, iterations, residuals)`` where the
    gradient ``K a`` equals the decision value plus rho on training points.
    """
    K = np.asarray(K, dtype=np.float64)
    b, n, _ = K.shape
    if c * n < 1 - 1e-12:
        raise ValueError(f"infeasible box: n * C = {c * n} < 1")
    alpha = _initial_alphas(b, n, c)
    grad = np.einsum("bij,bj->bi", K, alpha)
    rows = np.arange(b)
    active = np.ones(b, dtype=bool)
    iters = np.zeros(b, dtype=np.int64)
    residual = np.zeros(b)
    diag = np.einsum("bii->bi", K)

    for it in range(max_iter + 1):
        up = alpha < c
        low = alpha > 0
        gu = np.where(up, grad, np.inf)
        gl = np.where(low, grad, -np.inf)
        i = np.argmin(gu, axis=1)
        j = np.argmax(gl, axis=1)
        gap = gl[rows, j] - gu[rows, i]
        residual = np.maximum(gap, 0.0)
        active &= gap >= tol
        if not active.any():
            break
        if it == max_iter:
            worst = float(residual[active].max())
            raise ConvergenceError(
                f"SMO did not converge in {max_iter} iterations (KKT residual {worst:.3g})",
                kkt_residual=worst,
                iterations=max_iter,
            )
        r = rows[active]
        ii, jj = i[active], j[active]
        eta = diag[r, ii] + diag[r, jj] - 2.0 * K[r, ii, jj]
        eta = np.maximum(eta, 1e-12)
        step = (grad[r, jj] - grad[r, ii]) / eta
        room_i = c - alpha[r, ii]
        room_j = alpha[r, jj]
        hit_i = room_i <= step
        hit_j = room_j <= np.minimum(step, room_i)
        step = np.minimum(step, np.minimum(room_i, room_j))
        new_i = np.where(hit_i & ~hit_j, c, alpha[r, ii] + step)
        new_j = np.where(hit_j, 0.0, alpha[r, jj] - step)
        alpha[r, ii] = new_i
        alpha[r, jj] = new_j
        grad[r] += step[:, None] * (K[r, :, ii] - K[r, :, jj])
        iters[r] += 1
    return alpha, grad, iters, residual


def _rho(alpha, grad, c):
    free = (alpha > 0) & (alpha < c)
    if free.any():
        return float(grad[free].mean())
    at_bound = alpha >= c
    at_zero = alpha <= 0
    lo = grad[at_bound].max() if at_bound.any() else -np.inf
    hi = grad[at_zero].min() if at_zero.any() else np.inf
    if not np.isfinite(hi):
        return float(lo)
    if not np.isfinite(lo):
        return float(hi)
    return float(0.5 * (lo + hi))


def _model_from_solution(Z, alpha, grad, gamma, nu, iters, residual):
    n = len(Z)
    c = 1.0 / (nu * n)
    sv = alpha > 0
    objective = 0.5 * float(alpha @ grad)
    return OcsvmModel(
        support_vectors=Z[sv].copy(),
        alphas=alpha[sv].copy(),
        rho=_rho(alpha, grad, c),
        gamma=float(gamma),
        nu=float(nu),
        n_train=n,
        objective=objective,
        iterations=int(iters),
        kkt_residual=float(residual),
    )


def _check_nu(nu, n):
    if not 0 < nu <= 1:
        raise ValueError(f"nu must be in (0, 1], got {nu}")
    if n < 2:
        raise DegenerateDataError("fit_ocsvm needs at least 2 training vectors")


def fit_ocsvm(Z, nu=0.03, kernel=None, solver=None):
    """Fit a one-class SVM; ``kernel=None`` picks gamma with :func:`auto_gamma`."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ShapeError(f"training set must be (n, d), got {Z.shape}")
    _check_nu(nu, len(Z))
    solver = solver or SolverConfig()
    gamma = auto_gamma(Z) if kernel is None else (kernel.gamma if isinstance(kernel, RbfKernel) else float(kernel))
    K = kernel_matrix(Z, Z, gamma)
    c = 1.0 / (nu * len(Z))
    alpha, grad, iters, residual = smo_solve(K[None], c, solver.tolerance, solver.max_iterations)
    return _model_from_solution(Z, alpha[0], grad[0], gamma, nu, iters[0], residual[0])


def fit_ocsvm_batch(Zs, nu=0.03, gammas=None, solver=None):
    """Fit one model per problem of a (B, n, d) stack.

    Problems with zero variance (auto gamma undefined) come back as None.
    """
    Zs = np.asarray(Zs, dtype=np.float64)
    b, n, _ = Zs.shape
    _check_nu(nu, n)
    solver = solver or SolverConfig()
    gammas = auto_gamma(Zs) if gammas is None else np.broadcast_to(np.asarray(gammas, np.float64), (b,))
    ok = np.isfinite(gammas) & (gammas > 0)
    models = [None] * b
    if not ok.any():
        return models
    idx = np.flatnonzero(ok)
    K = np.exp(-gammas[idx, None, None] * _sq_dists(Zs[idx], Zs[idx]))
    c = 1.0 / (nu * n)
    alpha, grad, iters, residual = smo_solve(K, c, solver.tolerance, solver.max_iterations)
    for k, p in enumerate(idx):
        models[p] = _model_from_solution(Zs[p], alpha[k], grad[k], gammas[p], nu, iters[k], residual[k])
    return models


def decision_function(model, z, chunk=8192):
    """``sum_i a_i k(sv_i, z) - rho`` for one vector (d,) or many (m, d)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    Z = z[None] if single else z
    d = model.support_vectors.shape[1]
    if Z.ndim != 2 or Z.shape[1] != d:
        raise ShapeError(f"expected latent vectors of length {d}, got shape {z.shape}")
    out = np.empty(len(Z))
    for lo in range(0, len(Z), chunk):
        k = kernel_matrix(Z[lo : lo + chunk], model.support_vectors, model.gamma)
        out[lo : lo + chunk] = k @ model.alphas - model.rho
    return float(out[0]) if single else out


def dual_objective(alpha, K):
    alpha = np.asarray(alpha, dtype=np.float64)
    return 0.5 * float(alpha @ K @ alpha)
