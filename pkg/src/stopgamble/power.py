"""Closed-form objects for constant-coefficient (GBM) markets with power
utility: case classification of (gamma, p), the critical ratio gamma_hat,
the contact/bridge constants xi0, xi1, xi2, and per-case evaluators for the
first two concavification iterates.

gamma = 2*mu/sigma^2 is the drift-to-variance ratio of the asset; p > 0 the
risk-aversion exponent of U_p(v) = (v^(1-p) - 1)/(1-p) (U_1 = ln).  All roots
are found by bracketed bisection or damped Newton with explicit sign-change
verification and residual checks; no closed form is trusted without one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .market import UtilitySpec, scale_closed_form

PLUS_INFINITY = np.inf


class PowerCaseError(ValueError):
    """Requested a constant that does not exist in the given (gamma, p) case."""


class RootError(RuntimeError):
    """A root search failed to bracket or converge; carries residuals."""


class PowerCase(Enum):
    """Partition of the (gamma, p) plane by what the value function is.

    NO_GAMBLING_NO_STOP_VALUE  gamma <= 0: limit = iterate 0 (already bi-concave)
    STOP_ONLY                  0 < gamma <= gamma_hat: limit = iterate 1
    STOP_AND_GAMBLE            gamma_hat < gamma < 1 and p: limit = iterate 2
    INFINITE_VALUE             gamma >= 1 and p, p <= 1: value = +inf
    GAMBLE_HIGH_GAMMA          p > 1, 1 <= gamma <= p: limit = iterate 2
    STOP_ONLY_HIGH_GAMMA       p > 1, gamma > p: limit = iterate 1
    """

    NO_GAMBLING_NO_STOP_VALUE = "no_gambling_no_stop_value"
    STOP_ONLY = "stop_only"
    STOP_AND_GAMBLE = "stop_and_gamble"
    INFINITE_VALUE = "infinite_value"
    GAMBLE_HIGH_GAMMA = "gamble_high_gamma"
    STOP_ONLY_HIGH_GAMMA = "stop_only_high_gamma"


#: cases whose value function is finite everywhere in the interior
FINITE_CASES = frozenset(
    {
        PowerCase.NO_GAMBLING_NO_STOP_VALUE,
        PowerCase.STOP_ONLY,
        PowerCase.STOP_AND_GAMBLE,
        PowerCase.GAMBLE_HIGH_GAMMA,
        PowerCase.STOP_ONLY_HIGH_GAMMA,
    }
)

#: fixed-point index of the limit surface per case (None when infinite)
FIXED_POINT_INDEX = {
    PowerCase.NO_GAMBLING_NO_STOP_VALUE: 0,
    PowerCase.STOP_ONLY: 1,
    PowerCase.STOP_AND_GAMBLE: 2,
    PowerCase.INFINITE_VALUE: None,
    PowerCase.GAMBLE_HIGH_GAMMA: 2,
    PowerCase.STOP_ONLY_HIGH_GAMMA: 1,
}


def big_g(gamma: float, p: float) -> float:
    """G(gamma) = (p-gamma)^p (p+1-gamma) - (2p-gamma)^p (1-gamma); its unique
    root in (0, p and 1) is gamma_hat."""
    return (p - gamma) ** p * (p + 1.0 - gamma) - (2.0 * p - gamma) ** p * (1.0 - gamma)


def theta(xi, gamma: float, p: float):
    """Tangency function whose positive root is xi0 (0 < gamma < 1 and p).

    p != 1:  ((1+xi)^(1-p) - 1)/(1-p) - xi (1+xi)^(-p) / (1-gamma)
    p == 1:  ln(1+xi) - xi / ((1-gamma)(1+xi))
    """
    xi = np.asarray(xi, float)
    if p == 1.0:
        out = np.log1p(xi) - xi / ((1.0 - gamma) * (1.0 + xi))
    else:
        out = ((1.0 + xi) ** (1.0 - p) - 1.0) / (1.0 - p) - xi / (1.0 - gamma) * (1.0 + xi) ** (-p)
    return out if out.ndim else float(out)


def _bisect(fn, lo: float, hi: float, tol: float = 1e-14, max_iter: int = 200) -> float:
    """Plain bracketed bisection with an explicit sign-change check."""
    f_lo, f_hi = fn(lo), fn(hi)
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    if np.sign(f_lo) == np.sign(f_hi):
        raise RootError(f"no sign change on [{lo}, {hi}]: f={f_lo}, {f_hi}")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = fn(mid)
        if f_mid == 0.0 or (hi - lo) < tol * max(1.0, abs(mid)):
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
    return 0.5 * (lo + hi)


_GAMMA_HAT_LOG_CACHE: dict[float, float] = {}


def gamma_hat(p: float) -> float:
    """Critical drift-to-variance ratio in (0, p and 1).

    Unique root of G for p != 1.  For p = 1 the displayed G vanishes
    identically, so the boundary is located by numeric inflection detection
    on the first iterate (low precision, ~1e-4; see gamma_hat_log_precision).
    """
    if not p > 0.0:
        raise PowerCaseError("p must be positive")
    if p == 1.0:
        return _gamma_hat_log()
    top = min(1.0, p)
    # G has one sign change strictly inside (0, top); nudge off the endpoints
    lo, hi = 1e-12, top - 1e-12
    root = _bisect(lambda g: big_g(g, p), lo, hi)
    scale = max(abs(big_g(lo, p)), abs(big_g(hi, p)), 1.0)
    if abs(big_g(root, p)) > 1e-10 * scale:
        raise RootError(f"gamma_hat residual too large: {big_g(root, p)}")
    return root


def _gamma_hat_log(n_x: int = 2001) -> float:
    """sup { gamma in (0,1) : the p=1 first iterate is concave in x }.

    Detected by discrete second differences of the closed-form iterate-1
    surface on a fine x-line (the x>0 tangent branch plus contact region),
    bisected to 1e-4.  Flagged low precision by gamma_hat_log_precision().
    """
    if 1.0 in _GAMMA_HAT_LOG_CACHE:
        return _GAMMA_HAT_LOG_CACHE[1.0]

    def x_convex_somewhere(gamma: float) -> bool:
        xs = np.linspace(0.05, 40.0, n_x)
        for z in (0.25, 1.0, 4.0):
            vals = ubar1_closed(xs, np.full_like(xs, z), gamma, 1.0)
            d2 = np.diff(vals, 2)
            h2 = (xs[1] - xs[0]) ** 2
            if np.any(d2 > 1e-9 * h2 * max(1.0, np.abs(vals).max())):
                return True
        return False

    lo, hi = 0.05, 0.95
    if x_convex_somewhere(lo) or not x_convex_somewhere(hi):
        raise RootError("p=1 inflection bracket failed")
    while hi - lo > 1e-4:
        mid = 0.5 * (lo + hi)
        if x_convex_somewhere(mid):
            hi = mid
        else:
            lo = mid
    root = 0.5 * (lo + hi)
    _GAMMA_HAT_LOG_CACHE[1.0] = root
    return root


def gamma_hat_log_precision() -> float:
    """Bisection tolerance of the p=1 boundary (numeric-detection fallback)."""
    return 1e-4


def classify(gamma: float, p: float) -> PowerCase:
    """Total classification of (gamma, p); boundary ties follow the
    inequality directions of the case table (e.g. gamma = gamma_hat is
    STOP_ONLY, gamma = p and 1 falls in the high-gamma branch)."""
    if not p > 0.0:
        raise PowerCaseError("p must be positive")
    if gamma <= 0.0:
        return PowerCase.NO_GAMBLING_NO_STOP_VALUE
    top = min(1.0, p)
    if gamma < top:
        return PowerCase.STOP_ONLY if gamma <= gamma_hat(p) else PowerCase.STOP_AND_GAMBLE
    if p <= 1.0:
        return PowerCase.INFINITE_VALUE
    return PowerCase.GAMBLE_HIGH_GAMMA if gamma <= p else PowerCase.STOP_ONLY_HIGH_GAMMA


def xi0(gamma: float, p: float) -> float:
    """Contact ratio: the tangency point of the z-envelope sits at
    z^(1/(1-gamma)) = x * xi0 (gamma < 1) or (-z)^(1/(1-gamma)) = -x * xi0
    (gamma > 1 > ... > p branch).

    Positive root of theta for 0 < gamma < 1 and p; closed form
    (gamma-1)/(gamma-p) for 1 < p < gamma.  Undefined otherwise.
    """
    if not p > 0.0:
        raise PowerCaseError("p must be positive")
    if 0.0 < gamma < min(1.0, p):
        # bracket the positive root: theta < 0 near 0+, > 0 far out
        lo = 1e-8
        if theta(lo, gamma, p) >= 0.0:
            raise RootError("theta not negative near zero; no tangency")
        hi = 1.0
        while theta(hi, gamma, p) <= 0.0:
            hi *= 2.0
            if hi > 1e12:
                raise RootError("theta never becomes positive; no tangency")
        root = _bisect(lambda t: theta(t, gamma, p), lo, hi)
        if abs(theta(root, gamma, p)) > 1e-12:
            raise RootError(f"xi0 residual too large: {theta(root, gamma, p)}")
        return root
    if gamma > 1.0 and 1.0 < p < gamma:
        return (gamma - 1.0) / (gamma - p)
    raise PowerCaseError(f"xi0 undefined for gamma={gamma}, p={p}")


def _ubar1_line(x, z, gamma: float, p: float, xi_0: float):
    """Tangent-line branch of the first iterate for 0 < gamma < 1 and p:
    U(x) + z * dU/dz evaluated at the tangency point."""
    x = np.asarray(x, float)
    z = np.asarray(z, float)
    coef = xi_0**gamma * (1.0 + xi_0) ** (-p) / (1.0 - gamma)
    if p == 1.0:
        return np.log(x) + z * x ** (gamma - 1.0) * coef
    return (x ** (1.0 - p) - 1.0) / (1.0 - p) + z * x ** (gamma - p) * coef


def _dx_ubar1_line(x, z, gamma: float, p: float, xi_0: float):
    """x-derivative of the tangent-line branch."""
    x = np.asarray(x, float)
    z = np.asarray(z, float)
    coef = xi_0**gamma * (1.0 + xi_0) ** (-p)
    if p == 1.0:
        return 1.0 / x - z * x ** (gamma - 2.0) * coef
    return x ** (-p) + (gamma - p) / (1.0 - gamma) * x ** (gamma - p - 1.0) * z * coef


def _newton_xi12(gamma: float, p: float, xi_0: float, max_iter: int = 200):
    """Damped Newton for the chord/tangency system at z = 1.

    Unknowns (x1, x2) with x1 <= 1/xi0 < x2:
        F1 = u1(x2) - u1(x1) - (x2 - x1) u1'(x2)     (chord = tangent at x2)
        F2 = u1'(x1) - u1'(x2)                        (slope match at x1)
    where u1 is the first iterate on the x-line (contact branch left of the
    junction, tangent-line branch right of it).
    """
    u = UtilitySpec.power(p)
    xj = 1.0 / xi_0

    def u1(x):
        return u(x + 1.0) if x <= xj else float(_ubar1_line(x, 1.0, gamma, p, xi_0))

    def du1(x):
        if x <= xj:
            return (x + 1.0) ** (-p)
        return float(_dx_ubar1_line(x, 1.0, gamma, p, xi_0))

    def resid(x1, x2):
        s2 = du1(x2)
        return np.array([u1(x2) - u1(x1) - (x2 - x1) * s2, du1(x1) - s2])

    x1, x2 = xj * 0.5, xj * 2.0
    f = resid(x1, x2)
    for _ in range(max_iter):
        if np.linalg.norm(f) < 1e-13:
            break
        h1 = max(1e-9, 1e-7 * abs(x1))
        h2 = max(1e-9, 1e-7 * abs(x2))
        j11 = (resid(x1 + h1, x2) - f) / h1
        j22 = (resid(x1, x2 + h2) - f) / h2
        jac = np.column_stack([j11, j22])
        try:
            step = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise RootError(f"singular Jacobian in xi12 at ({x1}, {x2})") from exc
        lam = 1.0
        for _ in range(60):
            c1, c2 = x1 + lam * step[0], x2 + lam * step[1]
            if 0.0 < c1 <= xj < c2:
                f_new = resid(c1, c2)
                if np.linalg.norm(f_new) < np.linalg.norm(f):
                    x1, x2, f = c1, c2, f_new
                    break
            lam *= 0.5
        else:
            raise RootError(f"xi12 Newton damping stalled; residuals {f}")
    if np.linalg.norm(f) > 1e-10:
        raise RootError(f"xi12 Newton did not converge; residuals {f}")
    return x1, x2, resid(x1, x2)


def xi12(gamma: float, p: float) -> tuple[float, float]:
    """Bridge ratios of the x-envelope: the affine bridge of the second
    iterate runs on x in (z^(1/(1-gamma))/xi1, z^(1/(1-gamma))/xi2].

    Defined in the stop-and-gamble case; at gamma = gamma_hat the bridge
    degenerates to xi1 = xi2 = xi0.
    """
    case = classify(gamma, p)
    gh = gamma_hat(p)
    if abs(gamma - gh) < 1e-12:
        x = xi0(gamma, p)
        return x, x
    if case is not PowerCase.STOP_AND_GAMBLE:
        raise PowerCaseError(f"xi12 undefined in case {case.name}")
    xi_0 = xi0(gamma, p)
    x1, x2, res = _newton_xi12(gamma, p, xi_0)
    if not (x1 <= 1.0 / xi_0 < x2):
        raise RootError(f"xi12 ordering violated: x1={x1}, junction={1.0/xi_0}, x2={x2}")
    if np.any(np.abs(res) > 1e-10):
        raise RootError(f"xi12 residuals too large: {res}")
    return 1.0 / x1, 1.0 / x2


@dataclass(frozen=True)
class PowerConstants:
    """Case classification plus every constant the case admits, with the
    residuals of the equations that produced them."""

    gamma: float
    p: float
    case: PowerCase
    gamma_hat: float | None = None
    xi0: float | None = None
    xi1: float | None = None
    xi2: float | None = None
    residuals: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "p": self.p,
            "case": self.case.value,
            "gamma_hat": self.gamma_hat,
            "xi0": self.xi0,
            "xi1": self.xi1,
            "xi2": self.xi2,
            "residuals": self.residuals,
        }


_CONSTANTS_CACHE: dict[tuple[float, float], PowerConstants] = {}


def power_constants(gamma: float, p: float) -> PowerConstants:
    """Classify and compute all defined constants for (gamma, p), cached."""
    key = (float(gamma), float(p))
    if key in _CONSTANTS_CACHE:
        return _CONSTANTS_CACHE[key]
    case = classify(gamma, p)
    gh = x0 = x1 = x2 = None
    residuals: dict = {}
    if p != 1.0 or 0.0 < gamma < 1.0:
        # for p = 1 the detection is expensive; only pay for it when the
        # classification actually needed the boundary
        gh = gamma_hat(p)
        if p != 1.0:
            residuals["G(gamma_hat)"] = float(big_g(gh, p))
    try:
        x0 = xi0(gamma, p)
        if 0.0 < gamma < min(1.0, p):
            residuals["Theta(xi0)"] = float(theta(x0, gamma, p))
    except PowerCaseError:
        x0 = None
    if case is PowerCase.STOP_AND_GAMBLE:
        x1v, x2v, res = _newton_xi12(gamma, p, x0)
        x1, x2 = 1.0 / x1v, 1.0 / x2v
        residuals["bridge_system"] = [float(res[0]), float(res[1])]
    out = PowerConstants(
        gamma=gamma, p=p, case=case, gamma_hat=gh, xi0=x0, xi1=x1, xi2=x2, residuals=residuals
    )
    _CONSTANTS_CACHE[key] = out
    return out


def _check_domain(x, z, gamma: float):
    t = scale_closed_form(gamma)
    t.check_z(z)
    with np.errstate(divide="ignore", over="ignore"):
        w = np.asarray(t.r(z), float)
    v = np.asarray(x, float) + w
    if np.any(v < -1e-12 * np.maximum(1.0, np.abs(w))):
        raise PowerCaseError("(x, z) outside the admissible domain x + R(z) >= 0")
    return w, np.maximum(v, 0.0)


def ubar1_closed(x, z, gamma: float, p: float):
    """First concavification iterate (the z-envelope of the transformed
    utility), per the case table.  Returns +inf where the value is infinite.
    Vectorized over broadcastable x, z."""
    u = UtilitySpec.power(p)
    x = np.asarray(x, float)
    z = np.asarray(z, float)
    w, v = _check_domain(x, z, gamma)
    x, z, w, v = np.broadcast_arrays(x, z, w, v)

    if gamma <= 0.0:
        out = u(v)
    elif gamma < 1.0 and gamma < p:
        xi_0 = xi0(gamma, p)
        line = x * xi_0 > w
        out = np.where(line, _ubar1_line(np.where(line, x, 1.0), z, gamma, p, xi_0), u(v))
    elif gamma < 1.0:
        # gamma in [p, 1) forces p <= gamma < 1, an infinite-value regime
        out = np.where(x > 0.0, PLUS_INFINITY, u(v)) if gamma == p else np.full(v.shape, PLUS_INFINITY)
    elif gamma == 1.0:
        if p < 1.0:
            out = np.full(v.shape, PLUS_INFINITY)
        elif p == 1.0:
            out = np.where(x > 0.0, PLUS_INFINITY, u(v))
        else:
            out = np.where(x > 0.0, 1.0 / (p - 1.0), u(v))
    else:
        if p <= 1.0:
            out = np.full(v.shape, PLUS_INFINITY)
        elif p < gamma:
            xi_0 = xi0(gamma, p)
            const = (p - 1.0) ** (-p) * (gamma - 1.0) ** (gamma - 1.0) / (gamma - p) ** (gamma - p)
            tangent = 1.0 / (p - 1.0) + z * np.where(x < 0.0, -x, 1.0) ** (gamma - p) * const
            out = np.where(x >= 0.0, 1.0 / (p - 1.0), np.where(-x * xi_0 > w, u(v), tangent))
        else:
            out = np.where(x > 0.0, 1.0 / (p - 1.0), u(v))
    out = np.asarray(out, float)
    return out if out.ndim else float(out)


def dx_ubar1_closed(x, z, gamma: float, p: float):
    """x-derivative of the first iterate where it is differentiable; used by
    the bridge construction (0 < gamma < 1 and p)."""
    if not 0.0 < gamma < min(1.0, p):
        raise PowerCaseError("dx_ubar1_closed only defined for 0 < gamma < 1 and p")
    xi_0 = xi0(gamma, p)
    x = np.asarray(x, float)
    z = np.asarray(z, float)
    w, v = _check_domain(x, z, gamma)
    line = x * xi_0 > w
    d_line = _dx_ubar1_line(np.where(line, x, 1.0), z, gamma, p, xi_0)
    d_contact = np.where(v > 0, v, np.nan) ** (-p)
    out = np.where(line, d_line, d_contact)
    return out if out.ndim else float(out)


def ubar2_closed(x, z, gamma: float, p: float):
    """Second concavification iterate (the x-envelope of the first), per the
    case table; equals the first iterate in the cases without an x-bridge."""
    case = classify(gamma, p)
    u = UtilitySpec.power(p)
    x = np.asarray(x, float)
    z = np.asarray(z, float)
    w, v = _check_domain(x, z, gamma)
    x, z, w, v = np.broadcast_arrays(x, z, w, v)

    if case in (PowerCase.STOP_ONLY, PowerCase.STOP_ONLY_HIGH_GAMMA):
        return ubar1_closed(x, z, gamma, p)
    if case is PowerCase.NO_GAMBLING_NO_STOP_VALUE:
        out = u(v)
        return out if np.ndim(out) else float(out)
    if case is PowerCase.INFINITE_VALUE:
        out = np.full(v.shape, PLUS_INFINITY)
        return out if out.ndim else float(out)
    if case is PowerCase.STOP_AND_GAMBLE:
        xi_1, xi_2 = xi12(gamma, p)
        x2s = w / xi_2
        bridge = ubar1_closed(x2s, z, gamma, p) + (x - x2s) * dx_ubar1_closed(x2s, z, gamma, p)
        out = np.where(
            x * xi_1 <= w,
            u(v),
            np.where(x * xi_2 >= w, ubar1_closed(x, z, gamma, p), bridge),
        )
        return out if out.ndim else float(out)
    # gamble-high-gamma: affine bridge from x0 = -R(z)/p up to the constant level
    wf = np.where(np.isfinite(w), w, 1.0)
    x0 = -wf / p
    v0 = wf * (1.0 - 1.0 / p)
    bridge = u(v0) + (x - x0) * v0 ** (-p)
    out = np.where(x <= x0, u(v), np.where(x >= 0.0, 1.0 / (p - 1.0), bridge))
    # at the z-domain edge R(z) = +inf the whole x-line sits at the supremum
    out = np.where(np.isfinite(w), out, 1.0 / (p - 1.0))
    return out if out.ndim else float(out)
