"""Indivisible-asset diffusion, scale-function change of variables, and
simulation of the transformed local martingale.

The asset price follows dY = Y [mu(Y) dt + sigma(Y) dB] on (0, inf).  The
scale function S (strictly increasing, unique once S(c)=0, S'(c)=1 or the
closed-form convention is fixed) turns Y into the driftless process
Z = S(Y) with dZ = sigma_tilde(Z) dB, sigma_tilde(z) = R(z) S'(R(z)) sigma(R(z)),
where R is the inverse of S.  All value-function work downstream happens in
the (x, z) variables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline


class MarketError(ValueError):
    """Invalid market / utility specification or domain violation."""


class DomainExitError(RuntimeError):
    """A simulated path left the z-domain; carries the offending step index."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class MarketSpec:
    """Diffusion coefficients of the indivisible asset.

    kind "gbm": constant drift ``mu`` and volatility ``sigma``.
    kind "general": callables ``mu_fn``, ``sigma_fn`` over y > 0 (caller
    asserts boundedness and local Lipschitz continuity on the window used).
    """

    kind: str
    mu: float = 0.0
    sigma: float = 0.0
    mu_fn: Callable[[float], float] | None = None
    sigma_fn: Callable[[float], float] | None = None

    def __post_init__(self):
        if self.kind == "gbm":
            if not self.sigma > 0.0:
                raise MarketError("GBM volatility must be positive")
        elif self.kind == "general":
            if self.mu_fn is None or self.sigma_fn is None:
                raise MarketError("general spec needs mu_fn and sigma_fn")
        else:
            raise MarketError(f"unknown market kind {self.kind!r}")

    @staticmethod
    def gbm(mu: float, sigma: float) -> "MarketSpec":
        return MarketSpec(kind="gbm", mu=mu, sigma=sigma)

    @staticmethod
    def general(mu_fn, sigma_fn) -> "MarketSpec":
        return MarketSpec(kind="general", mu_fn=mu_fn, sigma_fn=sigma_fn)

    def drift(self, y):
        return np.full_like(np.asarray(y, float), self.mu) if self.kind == "gbm" else self.mu_fn(y)

    def vol(self, y):
        if self.kind == "gbm":
            return np.full_like(np.asarray(y, float), self.sigma)
        return self.sigma_fn(y)


@dataclass(frozen=True)
class UtilitySpec:
    """Nondecreasing concave utility on (0, inf), finite on (0, inf).

    kind "power": U_p(v) = (v^(1-p) - 1)/(1-p) for p != 1, U_1 = ln.
    kind "custom": sampled profile (ys, us), interpolated monotonically.
    """

    kind: str
    p: float = 0.0
    ys: np.ndarray | None = None
    us: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "power":
            if not self.p > 0.0:
                raise MarketError("power utility needs p > 0")
        elif self.kind == "custom":
            ys = np.asarray(self.ys, float)
            us = np.asarray(self.us, float)
            if ys.ndim != 1 or ys.size < 2 or ys.size != us.size:
                raise MarketError("custom utility needs matching 1-d samples")
            if not np.all(np.diff(ys) > 0) or np.any(ys <= 0):
                raise MarketError("custom utility abscissae must be positive increasing")
            if np.any(np.diff(us) < 0):
                raise MarketError("custom utility must be nondecreasing")
            if np.any(np.diff(us, 2) > 1e-12 * max(1.0, np.abs(us).max())):
                raise MarketError("custom utility must be concave")
            object.__setattr__(self, "ys", ys)
            object.__setattr__(self, "us", us)
        else:
            raise MarketError(f"unknown utility kind {self.kind!r}")

    @staticmethod
    def power(p: float) -> "UtilitySpec":
        return UtilitySpec(kind="power", p=p)

    @staticmethod
    def custom(ys, us) -> "UtilitySpec":
        return UtilitySpec(kind="custom", ys=ys, us=us)

    def __call__(self, v):
        """Evaluate U(v) for v >= 0, vectorized.  v=0 takes the limit value;
        v=inf takes the supremum (finite only for p > 1)."""
        v = np.asarray(v, dtype=float)
        if self.kind == "power":
            p = self.p
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                if p == 1.0:
                    out = np.log(v)
                else:
                    out = (v ** (1.0 - p) - 1.0) / (1.0 - p)
            out = np.where(v == np.inf, np.inf if p <= 1.0 else 1.0 / (p - 1.0), out)
            out = np.where(v < 0.0, -np.inf, out)
            return out if out.ndim else float(out)
        lo, hi = self.ys[0], self.ys[-1]
        out = np.interp(np.clip(v, lo, hi), self.ys, self.us)
        # extend linearly with the end slopes outside the sampled range
        slope0 = (self.us[1] - self.us[0]) / (self.ys[1] - self.ys[0])
        slope1 = (self.us[-1] - self.us[-2]) / (self.ys[-1] - self.ys[-2])
        out = np.where(v < lo, self.us[0] + slope0 * (v - lo), out)
        out = np.where(v > hi, self.us[-1] + slope1 * (v - hi), out)
        out = np.where(v < 0.0, -np.inf, out)
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class ScaleTransform:
    """The scale function S, its inverse R, derivative S', and z-domain.

    ``gamma`` is 2*mu/sigma^2 when built from constant coefficients, else None.
    ``mode`` is "closed_form" (appendix convention S(y) = sgn(1-gamma) y^(1-gamma),
    S_1 = ln) or "numeric" (normalization S(c)=0, S'(c)=1, tabulated on a window).
    Numeric transforms refuse to extrapolate beyond their window.
    """

    s: Callable
    r: Callable
    s_prime: Callable
    z_domain: tuple[float, float]
    mode: str
    c: float | None = None
    gamma: float | None = None
    y_window: tuple[float, float] | None = None

    def check_z(self, z) -> None:
        z = np.asarray(z, float)
        lo, hi = self.z_domain
        if np.any(z < lo) or np.any(z > hi):
            raise MarketError(f"z outside domain [{lo}, {hi}]")


def gamma_of(spec: MarketSpec) -> float:
    """Drift-to-variance ratio 2*mu/sigma^2; defined for constant coefficients only."""
    if spec.kind != "gbm":
        raise MarketError("gamma is only defined for constant-coefficient (GBM) specs")
    return 2.0 * spec.mu / spec.sigma**2


def scale_closed_form(gamma: float) -> ScaleTransform:
    """Appendix-convention scale pair: S(y) = sgn(1-gamma) y^(1-gamma) for
    gamma != 1 (z-domain (0,inf) below 1, (-inf,0) above), S(y) = ln y at
    gamma = 1 (z-domain R)."""
    if gamma == 1.0:
        return ScaleTransform(
            s=np.log,
            r=np.exp,
            s_prime=lambda y: 1.0 / np.asarray(y, float),
            z_domain=(-np.inf, np.inf),
            mode="closed_form",
            gamma=1.0,
        )
    sgn = 1.0 if gamma < 1.0 else -1.0
    e = 1.0 - gamma

    def s(y):
        return sgn * np.asarray(y, float) ** e

    def r(z):
        z = np.asarray(z, float)
        with np.errstate(divide="ignore", over="ignore"):
            out = (sgn * z) ** (1.0 / e)
        return out if out.ndim else float(out)

    def s_prime(y):
        return abs(e) * np.asarray(y, float) ** (-gamma)

    z_domain = (0.0, np.inf) if gamma < 1.0 else (-np.inf, 0.0)
    return ScaleTransform(s=s, r=r, s_prime=s_prime, z_domain=z_domain, mode="closed_form", gamma=gamma)


def scale_numeric(
    spec: MarketSpec,
    c: float,
    window: tuple[float, float],
    n_nodes: int = 2400,
) -> ScaleTransform:
    """Scale function with S(c)=0, S'(c)=1 by adaptive quadrature, tabulated
    on ``window`` with cubic-spline interpolation between nodes (in log-y coordinates).

    S'(y) = exp(-int_c^y 2 mu(u) / (u sigma(u)^2) du); S(y) = int_c^y S'(u) du.
    The inverse R brackets on the table and polishes with Newton steps.
    Evaluation outside the window is a hard error (no extrapolation).
    """
    y_lo, y_hi = window
    if not (0.0 < y_lo < c < y_hi):
        raise MarketError("window must lie in (0, inf) and contain c")

    def integrand(u):
        sig = float(np.asarray(spec.vol(u), float))
        if sig <= 0.0:
            raise MarketError(f"sigma must be positive; got {sig} at y={u}")
        return 2.0 * float(np.asarray(spec.drift(u), float)) / (u * sig * sig)

    # tabulate in t = ln y, where the coefficient profiles stay smooth down
    # to the left edge; geometric nodes are uniform in t
    nodes = np.unique(np.concatenate([np.geomspace(y_lo, c, n_nodes // 2 + 1), np.geomspace(c, y_hi, n_nodes // 2 + 1)]))
    idx_c = int(np.argmin(np.abs(nodes - c)))
    nodes[idx_c] = c
    t_nodes = np.log(nodes)

    # cumulative I(y) = int_c^y integrand, then S' = exp(-I)
    incr = np.zeros(nodes.size)
    for k in range(nodes.size - 1):
        val, err = quad(integrand, nodes[k], nodes[k + 1], epsabs=1e-12, epsrel=1e-11, limit=200)
        if err > 1e-8:
            raise MarketError(f"quadrature for S' did not converge on [{nodes[k]}, {nodes[k+1]}]")
        incr[k + 1] = val
    cum = np.cumsum(incr)
    big_i = cum - cum[idx_c]
    if np.any(np.abs(big_i) > 700):
        raise MarketError("S' under/overflows on the window; truncate the domain")
    i_of_t = CubicSpline(t_nodes, big_i)

    def sp_fn(u):
        return np.exp(-i_of_t(np.log(u)))

    s_incr = np.zeros(nodes.size)
    for k in range(nodes.size - 1):
        val, err = quad(sp_fn, nodes[k], nodes[k + 1], epsabs=1e-13, epsrel=1e-11, limit=200)
        if err > 1e-8:
            raise MarketError(f"quadrature for S did not converge on [{nodes[k]}, {nodes[k+1]}]")
        s_incr[k + 1] = val
    s_cum = np.cumsum(s_incr)
    s_nodes = s_cum - s_cum[idx_c]
    s_of_t = CubicSpline(t_nodes, s_nodes)
    z_lo, z_hi = float(s_nodes[0]), float(s_nodes[-1])

    def s(y):
        y = np.asarray(y, float)
        if np.any(y < y_lo) or np.any(y > y_hi):
            raise MarketError("y outside the tabulated window")
        out = s_of_t(np.log(y))
        return out if out.ndim else float(out)

    def s_prime(y):
        y = np.asarray(y, float)
        if np.any(y < y_lo) or np.any(y > y_hi):
            raise MarketError("y outside the tabulated window")
        out = np.exp(-i_of_t(np.log(y)))
        return out if out.ndim else float(out)

    def r(z):
        z = np.asarray(z, float)
        if np.any(z < z_lo) or np.any(z > z_hi):
            raise MarketError("z outside the tabulated window")
        t = np.interp(z, s_nodes, t_nodes)
        # Newton polish on S(e^t) = z in the y variable; S' > 0
        y = np.exp(t)
        for _ in range(4):
            y = np.clip(y - (s_of_t(np.log(y)) - z) * np.exp(i_of_t(np.log(y))), y_lo, y_hi)
        return y if y.ndim else float(y)

    gamma = None
    if spec.kind == "gbm":
        gamma = gamma_of(spec)
    return ScaleTransform(
        s=s,
        r=r,
        s_prime=s_prime,
        z_domain=(z_lo, z_hi),
        mode="numeric",
        c=c,
        gamma=gamma,
        y_window=(y_lo, y_hi),
    )


def sigma_tilde(t: ScaleTransform, spec: MarketSpec, z):
    """Volatility of the transformed martingale: R(z) S'(R(z)) sigma(R(z))."""
    t.check_z(z)
    y = t.r(z)
    out = np.asarray(y * t.s_prime(y) * spec.vol(y), float)
    return out if out.ndim else float(out)


def sample_z_path(
    t: ScaleTransform,
    spec: MarketSpec,
    z0: float,
    dt: float,
    horizon: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Simulate one path of Z on [0, horizon] with step dt.

    Constant coefficients use exact increments (lognormal for gamma != 1,
    Gaussian for gamma = 1); general diffusions use Euler-Maruyama on
    dZ = sigma_tilde(Z) dB and raise DomainExitError if the path leaves the
    z-domain.
    """
    if dt <= 0.0 or horizon <= 0.0:
        raise MarketError("dt and horizon must be positive")
    t.check_z(z0)
    n = int(np.ceil(horizon / dt))
    g = rng.standard_normal(n)
    path = np.empty(n + 1)
    path[0] = z0
    if spec.kind == "gbm" and t.mode == "closed_form":
        gamma, sigma = t.gamma, spec.sigma
        if gamma == 1.0:
            path[1:] = z0 + sigma * np.sqrt(dt) * np.cumsum(g)
        else:
            nu = abs(1.0 - gamma) * sigma
            log_steps = nu * np.sqrt(dt) * g - 0.5 * nu * nu * dt
            path[1:] = z0 * np.exp(np.cumsum(log_steps))
        return path
    lo, hi = t.z_domain
    sq = np.sqrt(dt)
    z = z0
    for k in range(n):
        z = z + sigma_tilde(t, spec, z) * sq * g[k]
        if not (lo < z < hi):
            raise DomainExitError(f"path left z-domain at step {k + 1}", index=k + 1)
        path[k + 1] = z
    return path
