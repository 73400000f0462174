"""Log-density estimation for normal variance mixtures.

The log-density is a one-dimensional integral over the mixing variable's
probability scale.  For small Mahalanobis distances a crude log-space
RQMC pass suffices; for large ones the integrand collapses onto a narrow
peak, so the adaptive path locates the peak by bisection (only quantile
evaluations are available), brackets the region where the integrand
exceeds a threshold ten orders below the peak, integrates that region by
rescaled RQMC and the negligible tails by a log-space trapezoid rule over
already-cached quantile knots.  The same machinery integrates any
integrand of the form c * w^(-k) * exp(-m/w), which covers the posterior
weights needed for fitting and the Mahalanobis-distance density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc, gammaln

from .linalg import mahalanobis_sq
from .mixtures import MixtureSpec, quantile
from .model import NvmModel
from .rqmc import (
    RqmcConfig,
    RqmcResult,
    _ShiftedSobolBank,
    _combine_log_means,
    log_mean_exp,
    lse,
    rqmc_log_estimate,
)

__all__ = [
    "DensityIntegrandParams",
    "QuantileCache",
    "log_h",
    "peak",
    "region_bounds",
    "log_integral_batch",
    "log_density_batch",
    "closed_log_density",
    "log_lower_incomplete_gamma",
]

_LOG_2PI = math.log(2.0 * math.pi)
_LN10 = math.log(10.0)
_U_EPS = 1e-16
_D2_ZERO = 1e-12


@dataclass(frozen=True)
class DensityIntegrandParams:
    """Parameters of the one-dimensional mixing integrand.

    The integrand is ``exp(log_coeff) * w^(-shift_k) * exp(-D2/(2w))``
    with ``w`` the mixing quantile.  ``shift_k = d/2`` gives the density
    of the mixture; ``d/2 + 1`` gives the numerator of the posterior
    mean of 1/W used by the fitting algorithm.  When ``log_coeff`` is
    omitted it defaults to the Gaussian normalizing constant
    ``-(d/2) log(2 pi) - log_det/2``.
    """

    D2: float
    d: int
    log_det: float
    shift_k: float
    log_coeff: float | None = None

    def __post_init__(self):
        if self.D2 < 0:
            raise ValueError("D2 must be non-negative")
        if not self.shift_k > 0:
            raise ValueError("shift_k must be positive")

    @property
    def m(self) -> float:
        return 0.5 * self.D2

    @property
    def prefactor(self) -> float:
        if self.log_coeff is not None:
            return self.log_coeff
        return -0.5 * self.d * _LOG_2PI - 0.5 * self.log_det


def _log_h_of_w(w, pref, k, m) -> np.ndarray:
    """log integrand from quantile values; broadcasts params against w."""
    w = np.asarray(w, dtype=float)
    safe = np.maximum(w, 1e-300)
    return np.where(w > 0.0, pref - k * np.log(safe) - m / safe, -np.inf)


def log_h(u, params: DensityIntegrandParams, spec: MixtureSpec, nu) -> np.ndarray | float:
    """Log of the mixing integrand at ``u`` in (0,1)."""
    w = quantile(spec, u, nu)
    w_arr = np.atleast_1d(np.asarray(w, dtype=float))
    if params.D2 <= 0.0 and np.any(w_arr == 0.0):
        raise ValueError("integrand diverges at w = 0 when D2 = 0")
    out = _log_h_of_w(w_arr, params.prefactor, params.shift_k, params.m)
    if np.isscalar(w):
        return float(out[0])
    return out


class QuantileCache:
    """Sorted store of (u, quantile(u)) pairs shared across bisections and
    trapezoid tails.

    Additions are buffered and merged lazily so that bisections (many
    small adds, few queries) stay cheap.
    """

    def __init__(self):
        self.us = np.empty(0)
        self.ws = np.empty(0)
        self._pend_u: list[float] = []
        self._pend_w: list[float] = []

    def __len__(self) -> int:
        return len(self.us) + len(self._pend_u)

    def add(self, us, ws) -> None:
        us = np.atleast_1d(np.asarray(us, dtype=float))
        ws = np.atleast_1d(np.asarray(ws, dtype=float))
        self._pend_u.extend(us.tolist())
        self._pend_w.extend(ws.tolist())

    def _consolidate(self) -> None:
        if not self._pend_u:
            return
        pu = np.asarray(self._pend_u)
        pw = np.asarray(self._pend_w)
        order = np.argsort(pu, kind="stable")
        pu, pw = pu[order], pw[order]
        idx = np.searchsorted(self.us, pu)
        self.us = np.insert(self.us, idx, pu)
        self.ws = np.insert(self.ws, idx, pw)
        self._pend_u.clear()
        self._pend_w.clear()

    def snapshot(self) -> "QuantileCache":
        """A private extension point: shares the consolidated arrays,
        further additions stay local to the copy."""
        self._consolidate()
        out = QuantileCache()
        out.us = self.us
        out.ws = self.ws
        return out

    def bracket_for_w(self, w_target: float) -> tuple[float | None, float | None]:
        """Cached u just below/above the u solving quantile(u) = w_target."""
        self._consolidate()
        if len(self.us) == 0:
            return None, None
        idx = int(np.searchsorted(self.ws, w_target))
        lo = float(self.us[idx - 1]) if idx > 0 else None
        hi = float(self.us[idx]) if idx < len(self.us) else None
        return lo, hi

    def knots_below(self, u_bound: float) -> tuple[np.ndarray, np.ndarray]:
        self._consolidate()
        idx = int(np.searchsorted(self.us, u_bound, side="right"))
        return self.us[:idx], self.ws[:idx]

    def knots_above(self, u_bound: float) -> tuple[np.ndarray, np.ndarray]:
        self._consolidate()
        idx = int(np.searchsorted(self.us, u_bound, side="left"))
        return self.us[idx:], self.ws[idx:]

    def min_u(self) -> float | None:
        self._consolidate()
        return float(self.us[0]) if len(self.us) else None

    def max_u(self) -> float | None:
        self._consolidate()
        return float(self.us[-1]) if len(self.us) else None


def _cached_quantile(u: float, spec, nu, cache: QuantileCache) -> float:
    w = float(quantile(spec, u, nu))
    cache.add([u], [w])
    return w


def _expand_left(w_star, spec, nu, cache, u_start):
    """Walk u toward 0 until quantile(u) <= w_star.

    Returns ``("found", u)``, ``("flat", deepest_u)`` when the quantile
    stops moving (support bounded away from w_star), or
    ``("exhausted", deepest_u)``.
    """
    u = u_start
    w_prev = None
    for _ in range(64):
        u *= 0.5
        if u < 1e-300:
            return "flat", u * 2.0
        w = _cached_quantile(u, spec, nu, cache)
        if w <= w_star:
            return "found", u
        if w_prev is not None and abs(w - w_prev) <= 1e-12 * max(abs(w), 1e-300):
            return "flat", u
        w_prev = w
    return "exhausted", u


def _expand_right(w_star, spec, nu, cache, u_start):
    u = u_start
    w_prev = None
    for _ in range(64):
        u = 1.0 - 0.5 * (1.0 - u)
        if 1.0 - u < 1e-17:
            return "flat", u
        w = _cached_quantile(u, spec, nu, cache)
        if w >= w_star:
            return "found", u
        if w_prev is not None and abs(w - w_prev) <= 1e-12 * max(abs(w), 1e-300):
            return "flat", u
        w_prev = w
    return "exhausted", u


def peak(params: DensityIntegrandParams, spec: MixtureSpec, nu,
         cache: QuantileCache | None = None,
         eps_bisec: float = 1e-6) -> tuple[float, float]:
    """Location and height of the integrand's peak.

    Solves ``quantile(u) = D2 / (2 shift_k)`` by bisection seeded from the
    cache.  The interior peak height has a closed form independent of the
    mixing distribution; when the quantile cannot reach the target (the
    mixing support is bounded on that side) the peak collapses to the
    boundary and the integrand is evaluated there instead.
    """
    if params.D2 <= _D2_ZERO:
        raise ValueError("peak undefined for D2 = 0; use the crude path")
    if cache is None:
        cache = QuantileCache()
    w_star = params.m / params.shift_k

    u_lo, u_hi = cache.bracket_for_w(w_star)
    if u_lo is None:
        start = u_hi if u_hi is not None else 0.5
        status, u = _expand_left(w_star, spec, nu, cache, start)
        if status == "found":
            u_lo = u
        elif status == "flat":
            return u, float(log_h(u, params, spec, nu))
        else:
            raise ValueError("failed to bracket the integrand peak after 64 expansions")
    if u_hi is None:
        status, u = _expand_right(w_star, spec, nu, cache, u_lo)
        if status == "found":
            u_hi = u
        elif status == "flat":
            return u, float(log_h(u, params, spec, nu))
        else:
            raise ValueError("failed to bracket the integrand peak after 64 expansions")

    while u_hi - u_lo > eps_bisec:
        mid = 0.5 * (u_lo + u_hi)
        if _cached_quantile(mid, spec, nu, cache) <= w_star:
            u_lo = mid
        else:
            u_hi = mid
    u_star = 0.5 * (u_lo + u_hi)
    k = params.shift_k
    log_h_max = params.prefactor - k * (math.log(params.m) - math.log(k)) - k
    return u_star, log_h_max


def _bisect_level(target_log, params, spec, nu, cache, lo, hi, increasing, eps_bisec):
    """Bisection for log_h(u) = target_log on a monotone stretch."""
    while hi - lo > eps_bisec:
        mid = 0.5 * (lo + hi)
        w = _cached_quantile(mid, spec, nu, cache)
        f_mid = float(_log_h_of_w(w, params.prefactor, params.shift_k, params.m))
        if (f_mid < target_log) == increasing:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def region_bounds(params: DensityIntegrandParams, spec: MixtureSpec, nu,
                  u_star: float, log_h_max: float, k_th: float = 10.0,
                  cache: QuantileCache | None = None,
                  eps_bisec: float = 1e-6) -> tuple[float, float]:
    """Bracket {u : log_h(u) > log_h_max - k_th * log 10}.

    Returns ``(u_l, u_r)`` with ``u_l <= u_star <= u_r``; a side on which
    the integrand never falls below the threshold collapses to 0 or 1.
    """
    if cache is None:
        cache = QuantileCache()
    log_th = log_h_max - k_th * _LN10

    def lh_of(ws):
        return _log_h_of_w(ws, params.prefactor, params.shift_k, params.m)

    # Left bound: the integrand increases toward the peak.
    us, ws = cache.knots_below(u_star)
    lhs = lh_of(ws)
    below = us[lhs <= log_th]
    u1 = float(below[-1]) if len(below) else None
    if u1 is None:
        probe = us[0] if len(us) else min(u_star, 0.5)
        for _ in range(64):
            probe *= 0.5
            if probe < 1e-300:
                break
            w = _cached_quantile(probe, spec, nu, cache)
            if float(lh_of(w)) <= log_th:
                u1 = probe
                break
    if u1 is None:
        u_l = 0.0
    else:
        us, ws = cache.knots_below(u_star)
        lhs = lh_of(ws)
        above = us[(lhs >= log_th) & (us >= u1)]
        u2 = float(above[0]) if len(above) else u_star
        u_l = _bisect_level(log_th, params, spec, nu, cache, u1, u2, True, eps_bisec)

    # Right bound: the integrand decreases after the peak.
    us, ws = cache.knots_above(u_star)
    lhs = lh_of(ws)
    below = us[lhs <= log_th]
    u4 = float(below[0]) if len(below) else None
    if u4 is None:
        probe = us[-1] if len(us) else max(u_star, 0.5)
        for _ in range(64):
            probe = 1.0 - 0.5 * (1.0 - probe)
            if 1.0 - probe < 1e-17:
                break
            w = _cached_quantile(probe, spec, nu, cache)
            if float(lh_of(w)) <= log_th:
                u4 = probe
                break
    if u4 is None:
        u_r = 1.0
    else:
        us, ws = cache.knots_above(u_star)
        lhs = lh_of(ws)
        above = us[(lhs >= log_th) & (us <= u4)]
        u3 = float(above[-1]) if len(above) else u_star
        u_r = _bisect_level(log_th, params, spec, nu, cache, u3, u4, False, eps_bisec)

    return u_l, u_r


def _log_trapezoid(us: np.ndarray, lhs: np.ndarray) -> float:
    """Log-space trapezoid rule over the given knots; -inf when there are
    fewer than two."""
    if len(us) < 2:
        return -np.inf
    widths = np.diff(us)
    keep = widths > 0
    if not np.any(keep):
        return -np.inf
    pair = np.logaddexp(lhs[:-1], lhs[1:])
    with np.errstate(divide="ignore"):
        panels = np.log(widths / 2.0) + pair
    return float(lse(panels[keep]))


def _phase1_crude(prefs, ks, ms, spec, nu, cfg, seed, n_batches):
    """Shared-realization crude pass over all inputs; returns the running
    per-randomization log-means, the bank (for continued draws) and the
    collected quantile pairs."""
    N = len(prefs)
    bank = _ShiftedSobolBank(1, cfg.B, seed)
    log_means = np.full((N, cfg.B), -np.inf)
    cache_u: list[np.ndarray] = []
    cache_w: list[np.ndarray] = []
    for it in range(n_batches):
        pts = bank.take(cfg.n0)[:, :, 0].reshape(-1)
        u = np.clip(pts, _U_EPS, 1.0 - _U_EPS)
        w = np.asarray(quantile(spec, u, nu), dtype=float)
        cache_u.append(u)
        cache_w.append(w)
        lh = _log_h_of_w(w[None, :], prefs[:, None], ks[:, None], ms[:, None])
        batch = log_mean_exp(lh.reshape(N, cfg.B, cfg.n0), axis=2)
        if it == 0:
            log_means = np.asarray(batch)
        else:
            log_means = _combine_log_means(log_means, it, batch)
    return log_means, bank, np.concatenate(cache_u), np.concatenate(cache_w)


def _row_errors(log_means: np.ndarray, cfg: RqmcConfig) -> np.ndarray:
    spread = np.ptp(log_means, axis=1)
    sd = log_means.std(axis=1, ddof=1)
    err = cfg.ci_mult * sd / math.sqrt(cfg.B)
    return np.where(spread == 0.0, 0.0, err)


def log_integral_batch(params_list, spec: MixtureSpec, nu,
                       cfg: RqmcConfig | None = None, seed: int | None = None,
                       *, k_th: float = 10.0, eps_bisec: float = 1e-6,
                       pilot_i_max: int = 4) -> list[RqmcResult]:
    """Estimate ``log int_0^1 h_i(u) du`` for a batch of mixing integrands.

    Phase 1 runs a crude log-space RQMC pass on all inputs with shared
    mixing realizations, capped at ``pilot_i_max`` batches; inputs that
    meet the tolerance return immediately.  The rest go through the
    adaptive peak/bracket/rescale path, each with a private extension of
    the shared quantile cache.  Inputs with (numerically) zero
    Mahalanobis distance have a monotone integrand and simply continue
    the crude pass.
    """
    if cfg is None:
        cfg = RqmcConfig()
    params_list = list(params_list)
    N = len(params_list)
    if N == 0:
        return []
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    prefs = np.array([p.prefactor for p in params_list])
    ks = np.array([p.shift_k for p in params_list])
    ms = np.array([p.m for p in params_list])

    seeds = np.random.SeedSequence(seed).spawn(N + 2)
    pilot_batches = min(pilot_i_max, cfg.i_max)
    log_means, bank, all_u, all_w = _phase1_crude(
        prefs, ks, ms, spec, nu, cfg, seeds[0], pilot_batches
    )
    errors = _row_errors(log_means, cfg)
    batches = pilot_batches

    results: list[RqmcResult | None] = [None] * N
    for i in range(N):
        if errors[i] <= cfg.tol:
            results[i] = RqmcResult(
                estimate=float(log_mean_exp(log_means[i])),
                error_estimate=float(errors[i]),
                n_per_randomization=batches * cfg.n0,
                iterations_used=batches,
                converged=True,
            )

    pending = [i for i in range(N) if results[i] is None]
    if not pending:
        return results

    # Zero-distance inputs: monotone integrand, keep the crude pass going
    # on the shared bank.
    crude_idx = [i for i in pending if params_list[i].D2 <= _D2_ZERO]
    if crude_idx:
        rows = np.array(crude_idx)
        means = log_means[rows]
        b = batches
        while b < cfg.i_max:
            pts = bank.take(cfg.n0)[:, :, 0].reshape(-1)
            u = np.clip(pts, _U_EPS, 1.0 - _U_EPS)
            w = np.asarray(quantile(spec, u, nu), dtype=float)
            lh = _log_h_of_w(w[None, :], prefs[rows, None], ks[rows, None], ms[rows, None])
            batch = log_mean_exp(lh.reshape(len(rows), cfg.B, cfg.n0), axis=2)
            means = _combine_log_means(means, b, batch)
            b += 1
            if np.all(_row_errors(means, cfg) <= cfg.tol):
                break
        errs = _row_errors(means, cfg)
        for j, i in enumerate(crude_idx):
            results[i] = RqmcResult(
                estimate=float(log_mean_exp(means[j])),
                error_estimate=float(errs[j]),
                n_per_randomization=b * cfg.n0,
                iterations_used=b,
                converged=bool(errs[j] <= cfg.tol),
            )

    shared_cache = QuantileCache()
    shared_cache.add(all_u, all_w)
    for i in pending:
        if results[i] is not None:
            continue
        p = params_list[i]
        cache = shared_cache.snapshot()
        u_star, lh_max = peak(p, spec, nu, cache, eps_bisec)
        u_l, u_r = region_bounds(p, spec, nu, u_star, lh_max, k_th, cache, eps_bisec)

        if u_l > 0.0:
            us_l, ws_l = cache.knots_below(u_l)
            tail_l = _log_trapezoid(us_l, _log_h_of_w(ws_l, p.prefactor, p.shift_k, p.m))
        else:
            tail_l = -np.inf
        if u_r < 1.0:
            us_r, ws_r = cache.knots_above(u_r)
            tail_r = _log_trapezoid(us_r, _log_h_of_w(ws_r, p.prefactor, p.shift_k, p.m))
        else:
            tail_r = -np.inf

        width = u_r - u_l

        def mid_log_g(v, _p=p, _lo=u_l, _w=width):
            u = np.clip(_lo + _w * v[:, 0], _U_EPS, 1.0 - _U_EPS)
            w = np.asarray(quantile(spec, u, nu), dtype=float)
            return _log_h_of_w(w, _p.prefactor, _p.shift_k, _p.m)

        mid = rqmc_log_estimate(mid_log_g, 1, cfg, seeds[i + 2])
        log_mid = math.log(width) + mid.estimate
        total = lse([tail_l, log_mid, tail_r])
        results[i] = RqmcResult(
            estimate=total,
            error_estimate=mid.error_estimate,
            n_per_randomization=(batches + mid.iterations_used) * cfg.n0,
            iterations_used=batches + mid.iterations_used,
            converged=mid.converged,
        )
    return results


def log_density_batch(X, model: NvmModel, cfg: RqmcConfig | None = None,
                      seed: int | None = None, *, k_th: float = 10.0,
                      eps_bisec: float = 1e-6) -> list[RqmcResult]:
    """Estimate log f(x_i) for the rows of ``X`` under the mixture model.

    Constant mixtures short-circuit to the exact Gaussian log-density.
    """
    if not model.is_full_rank:
        raise ValueError("log-density requires a full-rank scale matrix")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = model.dim
    if X.shape[1] != d:
        raise ValueError(f"points must have {d} columns")
    d2 = np.asarray(mahalanobis_sq(X, model.loc, model.factor), dtype=float)
    log_det = model.log_det

    if model.spec.kind == "constant":
        c = float(model.nu[0])
        vals = -0.5 * d * (_LOG_2PI + math.log(c)) - 0.5 * log_det - d2 / (2.0 * c)
        return [RqmcResult(float(v), 0.0, 0, 0, True) for v in vals]

    params = [
        DensityIntegrandParams(D2=float(v), d=d, log_det=log_det, shift_k=d / 2.0)
        for v in d2
    ]
    return log_integral_batch(
        params, model.spec, model.nu, cfg, seed, k_th=k_th, eps_bisec=eps_bisec
    )


def log_lower_incomplete_gamma(z: float, x) -> np.ndarray | float:
    """log of the (unregularized) lower incomplete gamma function.

    Uses the regularized routine where it has mass and the leading series
    where that underflows.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    with np.errstate(divide="ignore"):
        reg = gammainc(z, x)
        out = gammaln(z) + np.log(reg)
    small = (reg < 1e-290) & (x > 0)
    if np.any(small):
        xs = x[small]
        out[small] = z * np.log(xs) - math.log(z) + np.log1p(-z * xs / (z + 1.0))
    if scalar:
        return float(out[0])
    return out


def closed_log_density(model: NvmModel, x) -> np.ndarray | float:
    """Exact log-density for the constant, inverse-gamma and Pareto
    families."""
    if not model.is_full_rank:
        raise ValueError("density requires a full-rank scale matrix")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    d = model.dim
    d2 = np.asarray(mahalanobis_sq(X, model.loc, model.factor), dtype=float)
    log_det = model.log_det
    kind = model.spec.kind

    if kind == "constant":
        c = float(model.nu[0])
        out = -0.5 * d * (_LOG_2PI + math.log(c)) - 0.5 * log_det - d2 / (2.0 * c)
    elif kind == "inverse_gamma":
        nu = float(model.nu[0])
        out = (
            gammaln((nu + d) / 2.0)
            - gammaln(nu / 2.0)
            - 0.5 * d * math.log(nu * math.pi)
            - 0.5 * log_det
            - 0.5 * (nu + d) * np.log1p(d2 / nu)
        )
    elif kind == "pareto":
        alpha = float(model.nu[0])
        z = alpha + 0.5 * d
        base = -0.5 * d * _LOG_2PI - 0.5 * log_det
        out = np.empty(len(d2))
        zero = d2 <= 0.0
        # Limit at the center: E(W^{-d/2}) = alpha / (alpha + d/2).
        out[zero] = base + math.log(alpha / z)
        pos = ~zero
        half = d2[pos] / 2.0
        out[pos] = (
            base + math.log(alpha) - z * np.log(half)
            + log_lower_incomplete_gamma(z, half)
        )
    else:
        raise ValueError(f"no closed-form density for mixture kind {kind!r}")

    if single:
        return float(out[0])
    return out
