"""Gaussian-mixture posterior construction by global optimization and
local Laplace approximations.

The pipeline minimizes ``-log phi`` from many Sobol-distributed starts,
keeps the distinct converged minima (greedy Mahalanobis test), builds a
local Gaussian at each survivor from the regularized Hessian, fits the
component weights by nonnegative least squares against ``phi``, and
normalizes. The sum of the unnormalized weights is an estimate of the
normalizing constant of ``phi``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import solve_triangular

from .density import (
    GaussianComponent,
    MixtureModel,
    UnnormalizedTarget,
    eval_gradient,
    eval_hessian,
    eval_log_density,
    eval_log_density_batch,
    mixture_sample,
    mixture_to_dict,
)
from .exceptions import (
    DegenerateModeError,
    DerivativeError,
    NoModesFoundError,
    RejectedStartError,
    SingularMatrixError,
    WeightUnderflowError,
)
from .mathkit import chi_square_survival, cholesky_spd, mahalanobis_distance, nnls, sobol_points

_ARMIJO_C1 = 1e-4
_BACKTRACK = 0.5
_MAX_BACKTRACKS = 60


@dataclass(frozen=True)
class GolaConfig:
    """Tuning knobs for the pipeline.

    ``n_starts`` and ``n_weight_samples`` default to ``32 * dim`` and
    ``1024 * K`` respectively when left as None.
    """

    n_starts: Optional[int] = None
    max_local_iters: int = 500
    gradient_tol: float = 1e-8
    dedup_threshold: float = 0.01
    n_weight_samples: Optional[int] = None
    master_seed: int = 0
    method: str = "gd"  # "gd" (Armijo line-search descent) or "bfgs"
    workers: int = 1

    def __post_init__(self):
        if self.n_starts is not None and self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")
        if not 0.0 < self.dedup_threshold < 1.0:
            raise ValueError("dedup_threshold must lie in (0, 1)")
        if self.gradient_tol <= 0.0:
            raise ValueError("gradient_tol must be positive")
        if self.method not in ("gd", "bfgs"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass(frozen=True)
class LocalMinimum:
    """One converged (or abandoned) local search."""

    location: NDArray[np.float64]
    objective: float
    gradient_norm: float
    converged: bool
    start_index: int


@dataclass(frozen=True)
class DedupDecision:
    """Outcome of the distinctness test for one candidate minimum.

    ``survival`` is the largest chi-square survival probability of the
    squared Mahalanobis distance to any already-accepted component; the
    candidate is a duplicate when it is this typical under some existing
    component, i.e. when survival >= threshold. ``note`` records why a
    candidate was turned away ("duplicate" or "saddle").
    """

    candidate_index: int
    survival: float
    accepted: bool
    note: str = ""


@dataclass(frozen=True)
class GolaReport:
    """Fitted mixture plus evidence estimate and per-stage diagnostics."""

    mixture: MixtureModel
    evidence: float
    raw_minima: tuple[LocalMinimum, ...]
    dedup_log: tuple[DedupDecision, ...]
    weight_residual: float

    def to_dict(self) -> dict:
        return {
            "mixture": mixture_to_dict(self.mixture),
            "evidence": self.evidence,
            "weight_residual": self.weight_residual,
            "dedup_rule": "duplicate when chi-square survival of squared "
                          "Mahalanobis distance >= threshold",
            "dedup_log": [
                {"candidate": d.candidate_index, "survival": d.survival,
                 "accepted": d.accepted, "note": d.note}
                for d in self.dedup_log
            ],
            "raw_minima": [
                {"location": list(m.location), "objective": m.objective,
                 "gradient_norm": m.gradient_norm, "converged": m.converged,
                 "start_index": m.start_index}
                for m in self.raw_minima
            ],
        }


def _projected_gradient_norm(z, grad, lo, hi):
    """Norm of the box-projected gradient step; zero exactly at a KKT point."""
    return float(np.linalg.norm(z - np.clip(z - grad, lo, hi)))


def local_minimize(target: UnnormalizedTarget, start: NDArray,
                   cfg: GolaConfig, start_index: int = 0) -> LocalMinimum:
    """Descend ``-log phi`` from one start with a backtracking line search.

    Iterates stay clamped to the search box and the objective never
    increases across accepted steps. Trial step sizes follow a safeguarded
    Barzilai-Borwein estimate ("gd") or a BFGS direction ("bfgs").

    Raises
    ------
    RejectedStartError
        If the density is zero (log_phi = -inf) at the start point.
    """
    lo, hi = target.search_box[:, 0], target.search_box[:, 1]
    z = np.clip(np.asarray(start, dtype=float), lo, hi)
    f = -eval_log_density(target, z)
    if not np.isfinite(f):
        raise RejectedStartError(f"zero density at start point {z}")
    grad = -eval_gradient(target, z)
    hess_inv = np.eye(target.dim) if cfg.method == "bfgs" else None

    step = 1.0
    for _ in range(cfg.max_local_iters):
        pg_norm = _projected_gradient_norm(z, grad, lo, hi)
        if pg_norm <= cfg.gradient_tol:
            return LocalMinimum(z, f, pg_norm, True, start_index)

        if hess_inv is not None:
            direction = -hess_inv @ grad
            if direction @ grad >= 0.0:  # not a descent direction; reset
                hess_inv = np.eye(target.dim)
                direction = -grad
            trial = 1.0
        else:
            direction = -grad
            trial = step

        alpha = trial
        accepted = False
        for _ in range(_MAX_BACKTRACKS):
            z_new = np.clip(z + alpha * direction, lo, hi)
            decrease = float(grad @ (z - z_new))
            if decrease <= 0.0:
                alpha *= _BACKTRACK
                continue
            f_new = -eval_log_density(target, z_new)
            if np.isfinite(f_new) and f_new <= f - _ARMIJO_C1 * decrease:
                accepted = True
                break
            alpha *= _BACKTRACK
        if not accepted:
            # Line search stalled: report the point with its current status.
            return LocalMinimum(z, f, pg_norm, pg_norm <= cfg.gradient_tol,
                                start_index)

        grad_new = -eval_gradient(target, z_new)
        s = z_new - z
        y = grad_new - grad
        if hess_inv is not None:
            sy = float(s @ y)
            clamped = np.any(z_new == lo) or np.any(z_new == hi)
            if clamped:
                hess_inv = np.eye(target.dim)
            elif sy > 1e-12:
                rho = 1.0 / sy
                eye = np.eye(target.dim)
                left = eye - rho * np.outer(s, y)
                hess_inv = left @ hess_inv @ left.T + rho * np.outer(s, s)
        else:
            # Barzilai-Borwein trial step for the next iteration.
            sy = float(s @ y)
            step = float(s @ s) / sy if sy > 1e-16 else min(1.0, 2.0 * alpha)
            step = float(np.clip(step, 1e-12, 1e6))
        z, f, grad = z_new, f_new, grad_new

    pg_norm = _projected_gradient_norm(z, grad, lo, hi)
    return LocalMinimum(z, f, pg_norm, pg_norm <= cfg.gradient_tol, start_index)


def multistart_minimize(target: UnnormalizedTarget,
                        cfg: GolaConfig) -> list[LocalMinimum]:
    """Run local searches from Sobol points spread over the search box.

    Returns the converged minima sorted by objective (ties broken
    lexicographically by location), which makes the result independent of
    execution order. Starts that land on zero density or break the
    derivative stencils are skipped.
    """
    n_starts = cfg.n_starts if cfg.n_starts is not None else 32 * target.dim
    lo, hi = target.search_box[:, 0], target.search_box[:, 1]
    starts = lo + sobol_points(target.dim, n_starts) * (hi - lo)

    def attempt(item):
        idx, start = item
        try:
            return local_minimize(target, start, cfg, start_index=idx)
        except (RejectedStartError, DerivativeError):
            return None

    items = list(enumerate(starts))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(attempt, items))
    else:
        results = [attempt(item) for item in items]

    converged = [r for r in results if r is not None and r.converged]
    if not converged:
        raise NoModesFoundError(
            f"no converged minima from {n_starts} starts; "
            "widen the search box or increase max_local_iters"
        )
    converged.sort(key=lambda m: (m.objective, tuple(m.location)))
    return converged


def _component_from_hessian(mode: NDArray, hess: NDArray,
                            dim: int) -> GaussianComponent:
    """Covariance = inverse of the (regularized) Hessian, via triangular solves."""
    try:
        spd = cholesky_spd(hess)
    except SingularMatrixError as exc:
        raise DegenerateModeError(
            f"singular Hessian at mode {mode}", mode=mode
        ) from exc
    eye = np.eye(dim)
    half = solve_triangular(spd.chol, eye, lower=True)
    sigma = solve_triangular(spd.chol.T, half, lower=False)
    sigma = 0.5 * (sigma + sigma.T)
    try:
        chol_sigma = cholesky_spd(sigma)
    except SingularMatrixError as exc:
        raise DegenerateModeError(
            f"non-positive covariance at mode {mode}", mode=mode
        ) from exc
    return GaussianComponent(mean=mode, chol_cov=chol_sigma.chol)


def laplace_at_mode(target: UnnormalizedTarget,
                    mode: NDArray) -> GaussianComponent:
    """Local Gaussian at a mode: covariance = inverse Hessian of -log phi.

    The caller must supply a converged local minimum; the Hessian is
    regularized through the jitter ladder and inverted via two triangular
    solves, never an explicit matrix inverse.

    Raises
    ------
    DegenerateModeError
        If the Hessian cannot be regularized into an SPD matrix.
    """
    mode = np.asarray(mode, dtype=float)
    return _component_from_hessian(mode, eval_hessian(target, mode), target.dim)


def _is_indefinite(hess: NDArray) -> bool:
    """Negative curvature beyond rounding noise marks a saddle, not a mode."""
    eigenvalues = np.linalg.eigvalsh(hess)
    scale = max(1.0, float(np.max(np.abs(eigenvalues))))
    return float(eigenvalues[0]) < -1e-8 * scale


def dedup_modes(candidates: list[LocalMinimum], target: UnnormalizedTarget,
                threshold: float) -> tuple[list[GaussianComponent], list[DedupDecision]]:
    """Reduce candidate minima to distinct modes by a greedy Mahalanobis test.

    Candidates must arrive sorted by objective ascending so the deepest
    modes anchor the accepted set. For each candidate the squared
    Mahalanobis distance to every accepted component is referred to a
    chi-square with ``dim`` degrees of freedom; a candidate that is typical
    under any existing component (survival probability >= threshold) is a
    duplicate, and one improbably far from all of them is a new mode.

    Descent can legitimately stop on a saddle (any stationary start point
    converges in place), so distinct candidates whose Hessian shows
    negative curvature are turned away and logged rather than forwarded to
    the Laplace stage, whose contract requires a true minimum.
    """
    accepted: list[GaussianComponent] = []
    decisions: list[DedupDecision] = []
    for idx, cand in enumerate(candidates):
        survival = 0.0
        for comp in accepted:
            dist = mahalanobis_distance(cand.location, comp.mean, comp.chol_cov)
            survival = max(survival,
                           chi_square_survival(dist * dist, target.dim))
        if survival >= threshold:
            decisions.append(DedupDecision(idx, survival, False, "duplicate"))
            continue
        hess = eval_hessian(target, cand.location)
        if _is_indefinite(hess):
            decisions.append(DedupDecision(idx, survival, False, "saddle"))
            continue
        accepted.append(_component_from_hessian(cand.location, hess, target.dim))
        decisions.append(DedupDecision(idx, survival, True))
    return accepted, decisions


def solve_weights(target: UnnormalizedTarget,
                  components: list[GaussianComponent], n: int,
                  seed: int) -> tuple[NDArray[np.float64], float]:
    """Fit unnormalized component weights by nonnegative least squares.

    Draws ``n`` points from the equal-weight mixture over the components,
    evaluates ``phi`` there (shifted by its maximum log value so sharply
    peaked posteriors cannot underflow; the shift is undone on the returned
    weights), and solves ``min ||phi - M w||^2, w >= 0`` against the matrix
    of component densities.

    Returns
    -------
    pi_tilde : ndarray, shape (K,)
        Unnormalized weights; their sum estimates the integral of phi.
    rms_residual : float
        Root-mean-square fit residual, in units of max(phi) = 1.
    """
    k = len(components)
    if k < 1:
        raise ValueError("need at least one component")
    if n < k:
        raise ValueError(f"need at least K={k} samples, got {n}")
    sampler = MixtureModel(tuple(components), np.full(k, 1.0 / k))
    points = mixture_sample(sampler, n, seed)
    log_phi = eval_log_density_batch(target, points)
    offset = float(np.max(log_phi))
    if not np.isfinite(offset):
        raise WeightUnderflowError(
            "phi evaluated to zero at every sampled point; the components "
            "do not cover the target's support (log-offset recalibration "
            "would not help)"
        )
    y = np.exp(log_phi - offset)
    design = np.column_stack([np.exp(c.log_pdf(points)) for c in components])
    x, rnorm = nnls(design, y)
    pi_tilde = np.where(x > 0.0, np.exp(np.log(np.where(x > 0.0, x, 1.0)) + offset), 0.0)
    return pi_tilde, rnorm / np.sqrt(n)


def run_gola(target: UnnormalizedTarget, cfg: GolaConfig) -> GolaReport:
    """Run the full pipeline and assemble the report.

    Components whose normalized weight is tiny (below 1e-12) are retained
    rather than pruned, so the report reflects every distinct mode found.
    """
    minima = multistart_minimize(target, cfg)
    components, decisions = dedup_modes(minima, target, cfg.dedup_threshold)
    k = len(components)
    n_weight = cfg.n_weight_samples if cfg.n_weight_samples is not None else 1024 * k
    if n_weight < 10 * k:
        raise ValueError(
            f"n_weight_samples={n_weight} is too small for {k} components; "
            f"use at least {10 * k}"
        )
    seed = int(np.random.SeedSequence(cfg.master_seed).generate_state(1)[0])
    pi_tilde, residual = solve_weights(target, components, n_weight, seed)
    evidence = float(np.sum(pi_tilde))
    if evidence <= 0.0:
        raise WeightUnderflowError(
            "all fitted weights are zero; phi is negligible at every "
            "sampled point"
        )
    mixture = MixtureModel(tuple(components), pi_tilde / evidence)
    return GolaReport(
        mixture=mixture,
        evidence=evidence,
        raw_minima=tuple(minima),
        dedup_log=tuple(decisions),
        weight_residual=residual,
    )
