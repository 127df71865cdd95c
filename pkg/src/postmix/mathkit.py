"""Self-contained numerical kernels used throughout the package.

Provides an SPD Cholesky factorization with an escalating jitter ladder,
a scaling-and-squaring matrix exponential, the Sobol low-discrepancy
sequence, the chi-square survival function, Mahalanobis distances, and a
nonnegative least-squares solver. Everything here is a pure function of
its inputs and safe for unrestricted concurrent use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from ._sobol_data import DIRECTION_NUMBERS
from .exceptions import SingularMatrixError

# Relative jitter ladder tried in order; factors multiply the mean
# diagonal magnitude trace(a)/d so the escalation is scale invariant.
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2)

SOBOL_MAX_DIM = 64
_SOBOL_BITS = 32


@dataclass(frozen=True)
class SpdMatrix:
    """A symmetric positive definite matrix with its Cholesky factor.

    Attributes
    ----------
    order : int
        Matrix dimension.
    matrix : ndarray, shape (d, d)
        The symmetrized input (without jitter).
    chol : ndarray, shape (d, d)
        Lower Cholesky factor of ``matrix + jitter_applied * I``.
    jitter_applied : float
        The smallest ladder value that produced a successful factorization.
    """

    order: int
    matrix: NDArray[np.float64]
    chol: NDArray[np.float64]
    jitter_applied: float


def cholesky_spd(a: NDArray, sym_tol: float = 1e-10) -> SpdMatrix:
    """Factor a symmetric matrix, escalating diagonal jitter until SPD.

    Parameters
    ----------
    a : ndarray, shape (d, d)
        Symmetric matrix; symmetry is required to ``sym_tol`` relative
        tolerance and enforced exactly by averaging with the transpose.
    sym_tol : float
        Maximum allowed relative asymmetry.

    Returns
    -------
    SpdMatrix
        Factorization of ``a + jitter * I`` for the smallest jitter in
        the ladder ``JITTER_LADDER * trace(a)/d`` that succeeds.

    Raises
    ------
    ValueError
        If ``a`` is not square or not symmetric within tolerance.
    SingularMatrixError
        If factorization fails at the maximum jitter level.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    scale = np.max(np.abs(a))
    asym = np.max(np.abs(a - a.T))
    if scale > 0 and asym > sym_tol * scale:
        raise ValueError(
            f"matrix is not symmetric: relative asymmetry {asym / scale:.3e}"
        )
    a = 0.5 * (a + a.T)
    d = a.shape[0]
    diag_scale = max(np.trace(a) / d, np.finfo(float).tiny)
    eye = np.eye(d)
    for factor in JITTER_LADDER:
        jitter = factor * diag_scale
        try:
            chol = np.linalg.cholesky(a + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        return SpdMatrix(order=d, matrix=a, chol=chol, jitter_applied=jitter)
    raise SingularMatrixError(
        f"Cholesky failed for {d}x{d} matrix even at jitter "
        f"{JITTER_LADDER[-1] * diag_scale:.3e}"
    )


# Pade-13 numerator coefficients for the matrix exponential and the
# scaling threshold theta_13 from Higham's analysis.
_PADE13_B = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_PADE13_THETA = 5.371920351148152


def matrix_exponential(a: NDArray) -> NDArray[np.float64]:
    """Compute ``exp(a)`` by scaling and squaring with a Pade-13 approximant.

    Parameters
    ----------
    a : ndarray, shape (d, d)
        Square matrix with finite entries.

    Returns
    -------
    ndarray, shape (d, d)
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix exponential requires finite entries")
    return _expm_batch(a[np.newaxis])[0]


def _expm_batch(a: NDArray) -> NDArray[np.float64]:
    """Pade-13 scaling-and-squaring applied over a stack of matrices.

    One scaling exponent (the largest needed in the stack) is shared by
    the whole batch; extra squarings of already-small blocks are benign.
    """
    a = np.asarray(a, dtype=float)
    d = a.shape[-1]
    norm1 = np.max(np.sum(np.abs(a), axis=-2), axis=-1)  # 1-norm per matrix
    max_norm = float(np.max(norm1)) if norm1.size else 0.0
    squarings = max(0, int(math.ceil(math.log2(max_norm / _PADE13_THETA))) if max_norm > _PADE13_THETA else 0)
    a = a / (2.0**squarings)

    b = _PADE13_B
    eye = np.broadcast_to(np.eye(d), a.shape)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (
        a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
        + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * eye
    )
    v = (
        a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
        + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * eye
    )
    r = np.linalg.solve(v - u, v + u)
    for _ in range(squarings):
        r = r @ r
    return r


def _sobol_direction_table(dim: int) -> NDArray[np.uint64]:
    """Direction integers ``V[j, k]``, k = 1.._SOBOL_BITS, for dims 1..dim."""
    v = np.zeros((dim, _SOBOL_BITS + 1), dtype=np.uint64)
    for k in range(1, _SOBOL_BITS + 1):
        v[0, k] = 1 << (_SOBOL_BITS - k)
    for j in range(1, dim):
        poly, m_init = DIRECTION_NUMBERS[j - 1]
        s = poly.bit_length() - 1
        m = list(m_init)
        for k in range(s + 1, _SOBOL_BITS + 1):
            new = m[k - s - 1] ^ (m[k - s - 1] << s)
            for t in range(1, s):
                if (poly >> (s - t)) & 1:
                    new ^= m[k - t - 1] << t
            m.append(new)
        for k in range(1, _SOBOL_BITS + 1):
            v[j, k] = m[k - 1] << (_SOBOL_BITS - k)
    return v


def sobol_points(dim: int, n: int, skip_initial: bool = True) -> NDArray[np.float64]:
    """Generate the first ``n`` points of the Sobol sequence in [0, 1)^dim.

    Uses the Joe-Kuo direction numbers with Gray-code ordering, so every
    block of ``2**m`` points (without skipping) is a (0, m)-net. The
    all-zeros initial point is skipped by default because optimizers and
    samplers rarely want an exact corner of the domain.

    Parameters
    ----------
    dim : int
        Dimension, between 1 and ``SOBOL_MAX_DIM``.
    n : int
        Number of points, at least 1.
    skip_initial : bool
        When set, drop the leading all-zeros point of the sequence.

    Returns
    -------
    ndarray, shape (n, dim)
    """
    if not 1 <= dim <= SOBOL_MAX_DIM:
        raise ValueError(f"dim must be in [1, {SOBOL_MAX_DIM}], got {dim}")
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    v = _sobol_direction_table(dim)
    total = n + 1 if skip_initial else n
    points = np.zeros((total, dim), dtype=np.uint64)
    x = np.zeros(dim, dtype=np.uint64)
    for i in range(1, total):
        # Gray-code step: flip with direction c, the rightmost zero bit of i-1.
        c = 1
        val = i - 1
        while val & 1:
            val >>= 1
            c += 1
        x = x ^ v[:, c]
        points[i] = x
    if skip_initial:
        points = points[1:]
    return points.astype(float) / 2.0**_SOBOL_BITS


def _lower_gamma_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) by power series."""
    if x <= 0.0:
        return 0.0
    term = 1.0 / a
    total = term
    k = a
    for _ in range(500):
        k += 1.0
        term *= x / k
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))

def _upper_gamma_cf(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) by continued fraction."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 500):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def chi_square_survival(x: float, dof: int) -> float:
    """Survival function P(Q >= x) of a chi-square variable.

    Evaluates the regularized upper incomplete gamma Q(dof/2, x/2), using
    the power series for the lower tail and a continued fraction for the
    upper tail (the usual split at x = a + 1).

    Parameters
    ----------
    x : float
        Nonnegative test statistic.
    dof : int
        Degrees of freedom, positive.

    Returns
    -------
    float in [0, 1]
    """
    if dof < 1:
        raise ValueError(f"dof must be a positive integer, got {dof}")
    if x < 0:
        raise ValueError(f"x must be nonnegative, got {x}")
    a = 0.5 * dof
    xs = 0.5 * x
    if xs == 0.0:
        return 1.0
    if xs < a + 1.0:
        return min(1.0, max(0.0, 1.0 - _lower_gamma_series(a, xs)))
    return min(1.0, max(0.0, _upper_gamma_cf(a, xs)))


def mahalanobis_distance(z: NDArray, mean: NDArray, chol_cov: NDArray) -> float:
    """Covariance-weighted distance sqrt((z-mu)^T Sigma^-1 (z-mu)).

    Computed from one triangular solve against the lower Cholesky factor
    of Sigma; no inverse is formed.
    """
    z = np.asarray(z, dtype=float)
    mean = np.asarray(mean, dtype=float)
    chol_cov = np.asarray(chol_cov, dtype=float)
    if z.shape != mean.shape:
        raise ValueError(f"shape mismatch: z {z.shape} vs mean {mean.shape}")
    from scipy.linalg import solve_triangular

    y = solve_triangular(chol_cov, z - mean, lower=True)
    return float(np.sqrt(y @ y))


def nnls(a: NDArray, b: NDArray, max_iter: int | None = None,
         tol: float | None = None) -> tuple[NDArray[np.float64], float]:
    """Solve ``min ||a x - b||_2`` subject to ``x >= 0``.

    Lawson-Hanson active-set iteration: variables enter the passive set by
    largest positive dual, and an inner feasibility loop retracts any
    passive variable a full least-squares step would drive negative. At
    termination the KKT conditions hold: the gradient of the objective is
    zero on the passive set and nonnegative on the active set.

    Parameters
    ----------
    a : ndarray, shape (m, n)
    b : ndarray, shape (m,)
    max_iter : int, optional
        Iteration cap, default ``3 * n``.
    tol : float, optional
        Dual tolerance for entering variables; defaults to a multiple of
        machine epsilon scaled by the problem data.

    Returns
    -------
    x : ndarray, shape (n,)
        The nonnegative solution.
    rnorm : float
        Residual two-norm ``||a x - b||_2``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2:
        raise ValueError("expected a 2-d design matrix")
    m, n = a.shape
    if b.shape != (m,):
        raise ValueError(f"incompatible shapes: a {a.shape}, b {b.shape}")
    if max_iter is None:
        max_iter = max(3 * n, 30)
    if tol is None:
        tol = 10 * np.finfo(float).eps * np.linalg.norm(a, 1) * (max(m, n) + 1)

    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = a.T @ b  # dual/gradient of -0.5*||ax-b||^2 at x = 0
    for iteration in range(max_iter + 1):
        if passive.all():
            break
        candidates = np.where(~passive)[0]
        j = candidates[np.argmax(w[candidates])]
        if w[j] <= tol:
            break
        if iteration == max_iter:
            raise RuntimeError(f"nnls failed to converge in {max_iter} iterations")
        passive[j] = True
        while True:
            idx = np.where(passive)[0]
            s = np.zeros(n)
            s[idx], *_ = np.linalg.lstsq(a[:, idx], b, rcond=None)
            if np.all(s[idx] > 0):
                x = s
                break
            # Retract along the segment between x and s to stay feasible.
            mask = s[idx] <= 0
            alpha = np.min(x[idx][mask] / (x[idx][mask] - s[idx][mask]))
            x = x + alpha * (s - x)
            passive[np.abs(x) < 1e-14] = False
            x[~passive] = 0.0
        w = a.T @ (b - a @ x)
    residual = b - a @ x
    return x, float(np.linalg.norm(residual))
