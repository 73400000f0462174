"""Box probabilities P(a < X <= b) for normal variance mixtures.

The d+1 dimensional probability is rewritten as an integral over
(0,1)^d: the first coordinate samples the mixing variable by inversion
and the rest drive a separation-of-variables recursion of conditional
normal probabilities.  A greedy variable reordering is applied first so
that early variables have the smallest expected conditional ranges, then
the integral is estimated by antithetic RQMC.  Rank-deficient scale
matrices are handled with a reduced r-dimensional recursion whose blocks
keep all d constraints active.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .linalg import ScaleFactor
from .mixtures import MixtureSpec, mean_sqrt_w, quantile
from .model import NvmModel
from .rqmc import RqmcConfig, RqmcResult, rqmc_estimate

__all__ = [
    "Hyperrectangle",
    "ReorderedProblem",
    "reorder",
    "integrand_g",
    "prob",
    "prob_singular",
]

# Probability clamps for quantile-transform arguments; the recursion can
# otherwise feed 0 or 1 into the normal quantile.
_P_LO = 1e-16
_P_HI = 1.0 - 1e-16
_U_LO = 1e-16
_U_HI = 1.0 - 1e-16

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class Hyperrectangle:
    """Integration limits; non-finite entries mean the one-sided limit."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if a.shape != b.shape or a.ndim != 1:
            raise ValueError("limits must be vectors of equal length")
        if not np.all(a < b):
            raise ValueError("lower limits must be strictly below upper limits")


@dataclass(frozen=True)
class ReorderedProblem:
    """Limits and Cholesky factor after greedy variable reordering."""

    a: np.ndarray
    b: np.ndarray
    factor: ScaleFactor
    perm: np.ndarray
    clamped_pivots: int = 0


def _phi(x: np.ndarray) -> np.ndarray:
    # Standard normal density with phi(+-inf) = 0.
    out = np.zeros_like(x)
    finite = np.isfinite(x)
    out[finite] = np.exp(-0.5 * x[finite] ** 2) / _SQRT_2PI
    return out


def reorder(a, b, sigma, mu_sqrt_w: float) -> ReorderedProblem:
    """Greedy variable reordering for the box-probability integrand.

    At stage j the variable with the smallest expected conditional
    probability mass Phi(b_hat) - Phi(a_hat) is selected, the partial
    Cholesky factor is extended, and the conditioned value of the chosen
    variable is replaced by its truncated-normal expectation.  The
    reordering changes only the integration order, never the value of
    the probability.
    """
    box = Hyperrectangle(a, b)
    a = box.a.copy()
    b = box.b.copy()
    sigma = np.asarray(sigma, dtype=float).copy()
    d = len(a)
    if sigma.shape != (d, d):
        raise ValueError("scale matrix does not match limit length")
    if not mu_sqrt_w > 0:
        raise ValueError("mu_sqrt_w must be positive")

    C = np.zeros((d, d))
    y = np.zeros(d)
    perm = np.arange(d)
    clamped = 0

    for j in range(d):
        # Expected conditional range for each remaining candidate.
        partial = C[j:, :j] @ y[:j]
        denom_sq = np.diag(sigma)[j:] - np.sum(C[j:, :j] ** 2, axis=1)
        denom = np.sqrt(np.clip(denom_sq, 1e-12, None))
        with np.errstate(invalid="ignore"):
            a_hat = (a[j:] / mu_sqrt_w - partial) / denom
            b_hat = (b[j:] / mu_sqrt_w - partial) / denom
        crit = ndtr(b_hat) - ndtr(a_hat)
        i = j + int(np.argmin(crit))

        if i != j:
            for arr in (a, b, y, perm):
                arr[[i, j]] = arr[[j, i]]
            sigma[[i, j], :] = sigma[[j, i], :]
            sigma[:, [i, j]] = sigma[:, [j, i]]
            C[[i, j], :] = C[[j, i], :]

        resid = sigma[j, j] - C[j, :j] @ C[j, :j]
        if resid <= 0.0:
            clamped += 1
        C[j, j] = np.sqrt(max(resid, 1e-12))
        if j + 1 < d:
            C[j + 1 :, j] = (sigma[j + 1 :, j] - C[j + 1 :, :j] @ C[j, :j]) / C[j, j]

        a_hat_j = (a[j] / mu_sqrt_w - C[j, :j] @ y[:j]) / C[j, j]
        b_hat_j = (b[j] / mu_sqrt_w - C[j, :j] @ y[:j]) / C[j, j]
        width = ndtr(b_hat_j) - ndtr(a_hat_j)
        if width > 1e-300:
            num = _phi(np.array([a_hat_j]))[0] - _phi(np.array([b_hat_j]))[0]
            y[j] = num / width
        else:
            # Numerically empty slice: fall back to a clamped midpoint.
            lo = a_hat_j if np.isfinite(a_hat_j) else b_hat_j
            hi = b_hat_j if np.isfinite(b_hat_j) else a_hat_j
            mid = 0.5 * (lo + hi)
            y[j] = float(np.clip(mid if np.isfinite(mid) else 0.0, -37.0, 37.0))

    factor = ScaleFactor(
        C=C,
        rank=d,
        perm=np.arange(d),
        row_scales=np.ones(d),
        block_heads=np.arange(d),
    )
    return ReorderedProblem(a=a, b=b, factor=factor, perm=perm, clamped_pivots=clamped)


class BoxIntegrand:
    """Vectorized separation-of-variables integrand on (0,1)^r.

    Rows are pre-scaled so each carries a unit coefficient on its block's
    pivot column; a block of size one per pivot reproduces the full-rank
    recursion, larger blocks take the max/min over their rows so that all
    d constraints stay active when the scale matrix is singular.
    """

    def __init__(self, lower, upper, coef, block_heads, spec: MixtureSpec, nu):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.coef = np.asarray(coef, dtype=float)
        self.block_heads = np.asarray(block_heads, dtype=int)
        self.rank = len(self.block_heads)
        self.n_rows = self.coef.shape[0]
        block_ends = np.append(self.block_heads[1:], self.n_rows)
        self.blocks = [
            slice(int(h), int(e)) for h, e in zip(self.block_heads, block_ends)
        ]
        self.spec = spec
        self.nu = np.atleast_1d(np.asarray(nu, dtype=float))

    @classmethod
    def from_reordered(cls, problem: ReorderedProblem, spec, nu) -> "BoxIntegrand":
        C = problem.factor.C
        diag = np.diag(C)
        return cls(
            lower=problem.a / diag,
            upper=problem.b / diag,
            coef=C / diag[:, None],
            block_heads=np.arange(len(problem.a)),
            spec=spec,
            nu=nu,
        )

    def __call__(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if u.shape[1] != self.rank:
            raise ValueError(f"points must have {self.rank} coordinates")
        n = u.shape[0]
        u0 = np.clip(u[:, 0], _U_LO, _U_HI)
        w = np.asarray(quantile(self.spec, u0, self.nu), dtype=float)
        inv_sqrt_w = 1.0 / np.sqrt(np.maximum(w, 1e-300))

        partial = np.zeros((n, self.n_rows))
        g = np.ones(n)
        with np.errstate(invalid="ignore"):
            for l, rows in enumerate(self.blocks):
                lo_terms = self.lower[rows][None, :] * inv_sqrt_w[:, None] - partial[:, rows]
                hi_terms = self.upper[rows][None, :] * inv_sqrt_w[:, None] - partial[:, rows]
                d_l = ndtr(np.max(lo_terms, axis=1))
                e_l = ndtr(np.min(hi_terms, axis=1))
                g = g * np.clip(e_l - d_l, 0.0, 1.0)
                if l + 1 < self.rank:
                    p = np.clip(d_l + u[:, l + 1] * (e_l - d_l), _P_LO, _P_HI)
                    z = ndtri(p)
                    partial = partial + z[:, None] * self.coef[:, l][None, :]
        return g


def integrand_g(u, problem: ReorderedProblem, spec: MixtureSpec, nu) -> np.ndarray | float:
    """Separation-of-variables integrand for a full-rank reordered problem.

    Accepts a single point in (0,1)^d or an (n, d) batch.
    """
    f = BoxIntegrand.from_reordered(problem, spec, nu)
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        return float(f(u[None, :])[0])
    return f(u)


def _antithetic(f):
    return lambda u: 0.5 * (f(u) + f(1.0 - u))


def _clamped(result: RqmcResult) -> RqmcResult:
    est = min(max(result.estimate, 0.0), 1.0)
    if est == result.estimate:
        return result
    return RqmcResult(
        estimate=est,
        error_estimate=result.error_estimate,
        n_per_randomization=result.n_per_randomization,
        iterations_used=result.iterations_used,
        converged=result.converged,
    )


def prob(a, b, model: NvmModel, cfg: RqmcConfig | None = None,
         seed: int | None = None) -> RqmcResult:
    """Estimate P(a < X <= b) for X following the given mixture model.

    Limits are shifted by the location, variables are greedily reordered,
    and the antithetic integrand (g(u) + g(1-u))/2 is fed to the
    iterative RQMC driver in dimension d.  Point counts in the result
    refer to u-points; each costs two integrand evaluations.
    """
    if cfg is None:
        cfg = RqmcConfig()
    box = Hyperrectangle(a, b)
    if len(box.a) != model.dim:
        raise ValueError("limit length does not match model dimension")
    if not model.is_full_rank:
        return prob_singular(a, b, model, cfg, seed)

    a0 = box.a - model.loc
    b0 = box.b - model.loc
    msw = mean_sqrt_w(model.spec, model.nu, n_pilot=1024)
    problem = reorder(a0, b0, model.scale, msw)
    g = BoxIntegrand.from_reordered(problem, model.spec, model.nu)
    result = rqmc_estimate(_antithetic(g), model.dim, cfg, seed)
    return _clamped(result)


def prob_singular(a, b, model: NvmModel, cfg: RqmcConfig | None = None,
                  seed: int | None = None) -> RqmcResult:
    """P(a < X <= b) when the scale matrix has rank r < d (also valid at
    full rank).

    The integration runs over (0,1)^r; within each pivot block the lower
    limits enter through a max and the upper limits through a min, so all
    d constraints remain active.  Zero-variance variables reduce to a
    feasibility check on their limits.
    """
    if cfg is None:
        cfg = RqmcConfig()
    box = Hyperrectangle(a, b)
    if len(box.a) != model.dim:
        raise ValueError("limit length does not match model dimension")
    factor = model.factor

    a0 = (box.a - model.loc)[factor.perm]
    b0 = (box.b - model.loc)[factor.perm]
    n_blocked = model.dim - len(factor.degenerate_rows)

    # Point-mass variables: the box either contains them or the
    # probability is zero.
    for i in range(n_blocked, model.dim):
        if not (a0[i] < 0.0 <= b0[i]):
            return RqmcResult(0.0, 0.0, 0, 0, True)

    # Normalize every row to a unit coefficient on its block column; the
    # staircase factor already is, a plain full-rank factor is not.
    block_ends = np.append(factor.block_heads[1:], n_blocked)
    block_of_row = np.empty(n_blocked, dtype=int)
    for l, (h, e) in enumerate(zip(factor.block_heads, block_ends)):
        block_of_row[h:e] = l
    pivot_entries = factor.C[np.arange(n_blocked), block_of_row]
    divisors = factor.row_scales[:n_blocked] * pivot_entries
    with np.errstate(invalid="ignore"):
        lo = a0[:n_blocked] / divisors
        hi = b0[:n_blocked] / divisors
    neg = divisors < 0
    lo[neg], hi[neg] = hi[neg], lo[neg]

    g = BoxIntegrand(
        lower=lo,
        upper=hi,
        coef=factor.C[:n_blocked, : factor.rank] / pivot_entries[:, None],
        block_heads=factor.block_heads,
        spec=model.spec,
        nu=model.nu,
    )
    result = rqmc_estimate(_antithetic(g), factor.rank, cfg, seed)
    return _clamped(result)
