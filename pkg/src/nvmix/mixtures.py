"""Mixing-variable families described through their quantile functions.

Every operation in this package touches the mixing variable W only through
its quantile function, so a family is a kind tag plus a vectorized
quantile callback.  Built-in families: ``constant``, ``inverse_gamma``
(yielding the multivariate t), ``pareto`` (minimum fixed at 1, the scale
being redundant with the scale matrix), ``inverse_burr``, and a black-box
escape hatch for user-supplied quantile functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import gammaincinv

__all__ = [
    "MixtureSpec",
    "constant",
    "inverse_gamma",
    "pareto",
    "inverse_burr",
    "blackbox",
    "quantile",
    "mean_sqrt_w",
    "parse_mixture",
]


class InvalidMixtureError(ValueError):
    """A quantile callback produced a negative or NaN value."""


@dataclass(frozen=True)
class MixtureSpec:
    """A mixing-variable family; parameters are passed separately.

    Attributes
    ----------
    kind : str
        One of ``constant``, ``inverse_gamma``, ``pareto``,
        ``inverse_burr``, ``blackbox``.
    n_params : int
        Length of the parameter vector the quantile expects.
    support_hint : str
        ``unbounded-positive``, ``bounded`` or ``unknown``; black boxes
        default to ``unknown`` and are probed where the distinction
        matters.
    default_nu : tuple
        Fallback starting parameters for fitting.
    """

    kind: str
    n_params: int
    support_hint: str
    default_nu: tuple
    _quantile: Callable[[np.ndarray, np.ndarray], np.ndarray]

    @property
    def has_closed_forms(self) -> bool:
        """Whether density and posterior weights exist in closed form."""
        return self.kind in ("constant", "inverse_gamma", "pareto")


def _q_constant(u, nu):
    return np.full_like(np.asarray(u, dtype=float), float(nu[0]))


def _q_inverse_gamma(u, nu):
    half = 0.5 * float(nu[0])
    return half / gammaincinv(half, 1.0 - np.asarray(u, dtype=float))


def _q_pareto(u, nu):
    return (1.0 - np.asarray(u, dtype=float)) ** (-1.0 / float(nu[0]))


def _q_inverse_burr(u, nu):
    u = np.asarray(u, dtype=float)
    return (u ** (-1.0 / float(nu[1])) - 1.0) ** (-1.0 / float(nu[0]))


def constant() -> MixtureSpec:
    """W identically equal to nu[0]; the multivariate normal case."""
    return MixtureSpec("constant", 1, "bounded", (1.0,), _q_constant)


def inverse_gamma() -> MixtureSpec:
    """W ~ IG(nu/2, nu/2): the multivariate t with nu degrees of freedom."""
    return MixtureSpec("inverse_gamma", 1, "unbounded-positive", (5.0,), _q_inverse_gamma)


def pareto() -> MixtureSpec:
    """W ~ Par(alpha) with minimum 1; quantile (1-u)^(-1/alpha)."""
    return MixtureSpec("pareto", 1, "unbounded-positive", (2.0,), _q_pareto)


def inverse_burr() -> MixtureSpec:
    """W with quantile (u^(-1/nu2) - 1)^(-1/nu1)."""
    return MixtureSpec("inverse_burr", 2, "unbounded-positive", (2.0, 2.0), _q_inverse_burr)


def blackbox(quantile_fn, n_params: int, support_hint: str = "unknown",
             default_nu: tuple | None = None) -> MixtureSpec:
    """Wrap a user-supplied vectorized quantile function ``q(u, nu)``."""
    if default_nu is None:
        default_nu = (1.0,) * n_params
    return MixtureSpec("blackbox", n_params, support_hint, tuple(default_nu), quantile_fn)


def _check_params(spec: MixtureSpec, nu) -> np.ndarray:
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    if nu.shape[0] != spec.n_params:
        raise ValueError(
            f"{spec.kind} expects {spec.n_params} parameter(s), got {nu.shape[0]}"
        )
    if spec.kind != "blackbox" and not np.all(nu > 0):
        raise ValueError(f"{spec.kind} parameters must be positive, got {nu}")
    return nu


def quantile(spec: MixtureSpec, u, nu) -> np.ndarray | float:
    """Quantile of W at ``u`` in (0,1) for parameter vector ``nu``."""
    nu = _check_params(spec, nu)
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr <= 0.0) or np.any(u_arr >= 1.0):
        raise ValueError("u must lie strictly inside (0, 1)")
    w = np.asarray(spec._quantile(u_arr, nu), dtype=float)
    if spec.kind == "blackbox":
        if np.any(np.isnan(w)) or np.any(w < 0.0):
            raise InvalidMixtureError(
                "black-box quantile returned a negative or NaN value"
            )
    if np.isscalar(u) or u_arr.ndim == 0:
        return float(np.ravel(w)[0])
    return w


def mean_sqrt_w(spec: MixtureSpec, nu, n_pilot: int = 1024) -> float:
    """E(sqrt(W)), exactly for the constant family, otherwise by a
    midpoint rule on the quantile.

    The value only steers the variable-reordering heuristic, so a crude
    estimate is acceptable.
    """
    nu = _check_params(spec, nu)
    if spec.kind == "constant":
        return float(np.sqrt(nu[0]))
    if n_pilot < 1:
        raise ValueError("n_pilot must be >= 1")
    grid = (np.arange(n_pilot) + 0.5) / n_pilot
    w = quantile(spec, grid, nu)
    return float(np.mean(np.sqrt(w)))


_CLI_KINDS = {
    "constant": constant,
    "inverse.gamma": inverse_gamma,
    "pareto": pareto,
    "inverse.burr": inverse_burr,
}


def parse_mixture(text: str) -> tuple[MixtureSpec, np.ndarray | None]:
    """Parse CLI mixture syntax like ``inverse.gamma:2.5`` or ``pareto``.

    Returns the family and the parameter vector, or ``None`` when no
    parameters were given (e.g. for fitting).
    """
    name, _, params = text.partition(":")
    name = name.strip()
    if name not in _CLI_KINDS:
        raise ValueError(
            f"unknown mixture {name!r}; expected one of {sorted(_CLI_KINDS)}"
        )
    spec = _CLI_KINDS[name]()
    if not params:
        return spec, None
    values = np.array([float(p) for p in params.split(",")], dtype=float)
    _check_params(spec, values)
    return spec, values
