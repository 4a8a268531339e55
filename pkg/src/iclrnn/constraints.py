"""Weight projections that make a matrix non-negative and near-orthonormal.

The pipeline is spectral normalization (power iteration), Björck
orthonormalization, then clipping of negative entries. Clipping last keeps
the largest singular value below ``sqrt(rank)`` of the orthonormalized
matrix, since clipping can only shrink the Frobenius norm.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, PreconditionError, ScaleError
from .numerics import as_mat

SQRT3 = float(np.sqrt(3.0))
_FLUSH = 1e-200


@dataclass(frozen=True)
class ProjectionConfig:
    power_iters: int = 50
    power_tol: float = 1e-9
    bjorck_iters: int = 25
    bjorck_beta: float = 0.5
    clip_enabled: bool = True
    spectral_enabled: bool = True

    def __post_init__(self):
        if self.power_iters < 1 or self.bjorck_iters < 1:
            raise ParameterError("iteration counts must be >= 1")
        if not 0.0 < self.bjorck_beta <= 1.0:
            raise ParameterError(f"bjorck_beta must lie in (0, 1], got {self.bjorck_beta}")
        if self.power_tol <= 0:
            raise ParameterError("power_tol must be positive")


DEFAULT_PROJECTION = ProjectionConfig()


@dataclass(frozen=True)
class SpectralReport:
    sigma_max: float
    left_vector: np.ndarray
    right_vector: np.ndarray
    iterations_used: int
    converged: bool


def _start_vector(n):
    # Fixed pseudo-random start: deterministic, and almost surely not
    # orthogonal to the dominant right singular vector.
    v = np.random.Generator(np.random.PCG64(0x5EED)).standard_normal(n)
    return v / np.linalg.norm(v)


def power_iteration(a, cfg=DEFAULT_PROJECTION, init=None):
    """Estimate the largest singular value of ``a``.

    Iterates ``v <- AᵀA v`` and reports ``sigma = ||A v||``. Convergence is
    judged on the value only, so repeated top singular values are fine.
    """
    a = as_mat(a)
    m, n = a.shape
    if not np.any(a):
        u = np.zeros(m)
        u[0] = 1.0
        v = np.zeros(n)
        v[0] = 1.0
        return SpectralReport(0.0, u, v, 0, True)
    # work on a max-abs scaled copy so norms neither underflow nor overflow
    scale = float(np.max(np.abs(a)))
    a = a / scale
    v = _start_vector(n) if init is None else np.asarray(init, dtype=np.float64) / np.linalg.norm(init)
    sigma = 0.0
    converged = False
    it = 0
    for it in range(1, cfg.power_iters + 1):
        av = a @ v
        new_sigma = float(np.linalg.norm(av))
        w = a.T @ av
        wn = np.linalg.norm(w)
        if wn == 0.0:
            # start vector landed in the null space; restart on a basis vector
            v = np.zeros(n)
            v[it % n] = 1.0
            continue
        v = w / wn
        if abs(new_sigma - sigma) <= cfg.power_tol * new_sigma:
            sigma = new_sigma
            converged = True
            break
        sigma = new_sigma
    av = a @ v
    sigma = float(np.linalg.norm(av))
    u = av / sigma if sigma > 0 else av
    return SpectralReport(sigma * scale, u, v, it, converged)


def spectral_normalize(a, cfg=DEFAULT_PROJECTION):
    """Divide ``a`` by its power-iteration spectral norm (always, not only when > 1)."""
    a = as_mat(a)
    sigma = power_iteration(a, cfg).sigma_max
    if sigma == 0.0:
        return a.copy()
    return a / sigma


def _bjorck(a, iters, beta):
    m, n = a.shape
    for _ in range(iters):
        if m >= n:
            nxt = (1.0 + beta) * a - beta * (a @ (a.T @ a))
        else:
            nxt = (1.0 + beta) * a - beta * ((a @ a.T) @ a)
        # entries decaying toward zero would otherwise go subnormal and
        # slow every later matmul by an order of magnitude
        nxt[np.abs(nxt) < _FLUSH] = 0.0
        if np.array_equal(nxt, a):
            break
        a = nxt
    return a


def bjorck_orthonormalize(a, cfg=DEFAULT_PROJECTION):
    """Drive every nonzero singular value of ``a`` toward 1.

    Iterates ``A <- (1 + beta) A - beta A AᵀA``. Requires
    ``sigma_max(a) <= sqrt(3)``; above that the scalar map
    ``s -> (1 + beta) s - beta s^3`` no longer converges.
    """
    a = as_mat(a)
    if float(np.sqrt(np.sum(a * a))) > SQRT3:
        sigma = power_iteration(a, cfg).sigma_max
        if sigma > SQRT3 * (1.0 + 1e-12):
            raise PreconditionError(f"sigma_max = {sigma:.6g} exceeds sqrt(3); normalize first")
    return _bjorck(a, cfg.bjorck_iters, cfg.bjorck_beta)


def clip_nonnegative(a):
    return np.maximum(as_mat(a), 0.0)


def project_iclrnn(a, cfg=DEFAULT_PROJECTION):
    """Full projection: spectral normalize, orthonormalize, clip.

    Disabling ``spectral_enabled`` or ``clip_enabled`` in ``cfg`` skips the
    corresponding stage.
    """
    a = as_mat(a)
    if cfg.spectral_enabled:
        a = spectral_normalize(a, cfg)
        a = _bjorck(a, cfg.bjorck_iters, cfg.bjorck_beta)
    if cfg.clip_enabled:
        a = np.maximum(a, 0.0)
    return a


ORACLE_MAX_DIM = 64


def svd_oracle(a, sweeps=60):
    """Singular values of a small matrix by one-sided Jacobi rotations.

    Independent of LAPACK; intended as a test oracle. Returns the values
    in descending order.
    """
    a = as_mat(a)
    if min(a.shape) > ORACLE_MAX_DIM:
        raise ScaleError(f"svd_oracle limited to min(rows, cols) <= {ORACLE_MAX_DIM}, got {a.shape}")
    u = a.copy() if a.shape[0] >= a.shape[1] else a.T.copy()
    n = u.shape[1]
    for _ in range(sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gamma = u[:, p] @ u[:, q]
                if abs(gamma) <= 1e-15 * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                # the rotation angle would round to zero (and zeta overflow)
                if abs(beta - alpha) > 1e300 * abs(gamma):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.hypot(1.0, zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                up = u[:, p].copy()
                u[:, p] = c * up - s * u[:, q]
                u[:, q] = s * up + c * u[:, q]
        if not rotated:
            break
    sv = np.sqrt(np.sum(u * u, axis=0))
    return np.sort(sv)[::-1]


def numerical_rank(singular_values, rtol=1e-10):
    sv = np.asarray(singular_values)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rtol * sv[0]))
