"""The explicit stopping / jump-martingale strategy built from the grid
iterates, and its Monte Carlo validation.

One round per concavification level, from the top down: run the martingale Z
with frozen wealth until it hits the contact set of the current z-pair (the
nearest contact nodes bracketing the state, exact two-point exit law by
optional stopping), then jump the wealth to the bracketing x-contacts of the
pair one level below, with the mean-preserving Bernoulli probability.  The
expected terminal utility telescopes exactly to the odd iterate at the start
point because every grid envelope is affine between consecutive contact
nodes.

Jump randomness is drawn from a stream independent of the z-exit stream (the
filtration-enrichment hypothesis), both derived from the master seed; results
are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .market import MarketSpec, ScaleTransform
from .solver import ValueGrid, value_scale

#: contact tolerance for strategy lookups, looser than the solver fixed-point
#: tolerance so a converged pair registers as all-contact
PLAN_CONTACT_TOL = 1e-7


class StrategyError(RuntimeError):
    """Contact lookup failed (window truncation) or inconsistent plan."""


@dataclass(frozen=True)
class JumpLaw:
    """Mean-preserving two-point jump law: lands at ``a`` (upper contact)
    with probability ``prob_a``, else at ``b``; prob_a solves
    u = prob_a * a + (1 - prob_a) * b exactly."""

    a: float
    b: float
    prob_a: float

    def mean(self) -> float:
        return self.prob_a * self.a + (1.0 - self.prob_a) * self.b


@dataclass(frozen=True)
class SimResult:
    """Monte Carlo estimate of the strategy payoff."""

    mean: float
    stderr: float
    n_paths: int
    mean_x_terminal: float
    stderr_x_terminal: float
    seed: int
    mode: str
    z_round_means: list = field(default_factory=list)


@dataclass(frozen=True)
class StrategyPlan:
    """Surfaces U^0 .. U^(2n+1) of a converged contact-mode solve, plus the
    market data needed to simulate Z paths."""

    surfaces: list
    n: int
    transform: ScaleTransform
    market: MarketSpec
    contact_tol: float = PLAN_CONTACT_TOL

    def __post_init__(self):
        if len(self.surfaces) < 2 * self.n + 2:
            raise StrategyError(
                f"plan needs surfaces up to iterate {2 * self.n + 1}; got {len(self.surfaces)}"
            )
        w = self.surfaces[0].window
        for g in self.surfaces[1 : 2 * self.n + 2]:
            if not g.window.same_geometry(w):
                raise StrategyError("plan surfaces must share one window")

    @property
    def window(self):
        return self.surfaces[0].window


def build_plan(
    history: list,
    n: int,
    transform: ScaleTransform,
    market: MarketSpec,
    contact_tol: float = PLAN_CONTACT_TOL,
) -> StrategyPlan:
    """Assemble a plan from an iterate history, padding with the fixed point
    when the iteration converged before reaching 2n+1 passes."""
    surfaces = list(history)
    while len(surfaces) < 2 * n + 2:
        last = surfaces[-1]
        surfaces.append(ValueGrid(window=last.window, values=last.values, n=last.n + 1))
    return StrategyPlan(
        surfaces=surfaces[: 2 * n + 2],
        n=n,
        transform=transform,
        market=market,
        contact_tol=contact_tol,
    )


def _contact_tables(upper: ValueGrid, lower: ValueGrid, axis: int, tol: float):
    """Nearest-contact index tables along ``axis``.

    Returns (lo, hi) int arrays: for each node, the index of the nearest
    contact at-or-below / at-or-above along the axis; -1 where none exists
    on that side (or the node is off the finite region).
    """
    u = upper.values
    low = lower.values
    scale = value_scale(low)
    finite = np.isfinite(low) & np.isfinite(u)
    contact = finite & (u - low <= tol * scale)
    if axis == 0:
        contact = contact.T
        finite = finite.T
    m, k = contact.shape
    idx = np.arange(k)[None, :]
    lo = np.where(contact, idx, -1)
    lo = np.maximum.accumulate(lo, axis=1)
    hi = np.where(contact, idx, k)
    hi = np.minimum.accumulate(hi[:, ::-1], axis=1)[:, ::-1]
    hi = np.where(hi == k, -1, hi)
    lo[~finite] = -1
    hi[~finite] = -1
    if axis == 0:
        lo, hi = lo.T, hi.T
    return lo, hi


def _node_index(axis: np.ndarray, value: float, name: str) -> int:
    i = int(np.argmin(np.abs(axis - value)))
    span = axis[-1] - axis[0]
    if abs(axis[i] - value) > 1e-9 * max(1.0, abs(span)):
        raise StrategyError(f"{name}={value} is not a grid node")
    return i


def z_contact_interval(
    upper: ValueGrid,
    lower: ValueGrid,
    x: float,
    z: float,
    tol: float = PLAN_CONTACT_TOL,
) -> tuple[float, float]:
    """Nearest z-contacts of the pair bracketing ``z`` on the row of ``x``;
    (z, z) when the state is already a contact point."""
    w = upper.window
    i = _node_index(w.x_axis, x, "x")
    j = _node_index(w.z_axis, z, "z")
    lo, hi = _contact_tables(upper, lower, axis=1, tol=tol)
    if lo[i, j] < 0 or hi[i, j] < 0:
        raise StrategyError(
            f"no z-contact bracketing (x={x}, z={z}); window too small for the contact set"
        )
    return float(w.z_axis[lo[i, j]]), float(w.z_axis[hi[i, j]])


def x_jump_law(
    upper: ValueGrid,
    lower: ValueGrid,
    u: float,
    v: float,
    tol: float = PLAN_CONTACT_TOL,
) -> JumpLaw:
    """Mean-preserving jump law to the nearest x-contacts of the pair at
    column z = v; degenerate (a = b = u) at a contact point.

    The upper surface is affine between the two contacts (it is a grid
    envelope chord there), which is what makes the payoff identity exact.
    """
    w = upper.window
    i = _node_index(w.x_axis, u, "x")
    j = _node_index(w.z_axis, v, "z")
    lo, hi = _contact_tables(upper, lower, axis=0, tol=tol)
    if lo[i, j] < 0 or hi[i, j] < 0:
        raise StrategyError(
            f"no x-contact bracketing (x={u}, z={v}); window too small for the contact set"
        )
    a = float(w.x_axis[hi[i, j]])
    b = float(w.x_axis[lo[i, j]])
    if hi[i, j] == lo[i, j]:
        return JumpLaw(a=a, b=b, prob_a=1.0)
    line = upper.values[lo[i, j] : hi[i, j] + 1, j]
    chord = np.interp(w.x_axis[lo[i, j] : hi[i, j] + 1], [b, a], [line[0], line[-1]])
    if np.max(np.abs(chord - line)) > 1e3 * tol * value_scale(lower.values):
        raise StrategyError(f"upper surface not affine between contacts at z={v}")
    return JumpLaw(a=a, b=b, prob_a=(u - b) / (a - b))


def sample_z_exit(z: float, z1: float, z2: float, rng: np.random.Generator) -> float:
    """Exact exit point of a martingale from [z1, z2] started at z:
    z2 with probability (z - z1)/(z2 - z1), else z1."""
    if not z1 <= z <= z2:
        raise StrategyError(f"need z1 <= z <= z2, got {z1}, {z}, {z2}")
    if z1 == z2:
        return z
    return z2 if rng.uniform() < (z - z1) / (z2 - z1) else z1


def _pathsim_exit(
    plan: StrategyPlan,
    z: np.ndarray,
    z1: np.ndarray,
    z2: np.ndarray,
    dt: float,
    rng: np.random.Generator,
    floor_frac: float,
    max_steps: int = 20_000_000,
) -> np.ndarray:
    """Simulate Z paths to their first exit of (z1, z2); returns +1 where the
    exit is at z2, 0 at z1.

    Constant-coefficient markets use exact increments.  A zero barrier is
    unreachable for the multiplicative dynamics; it is replaced by a small
    absorbing level (bias of order floor_frac, documented), all other exits
    are exact up to the O(sqrt(dt)) discrete-monitoring overshoot.
    """
    t, spec = plan.transform, plan.market
    gamma = t.gamma
    if spec.kind != "gbm" or gamma is None:
        raise StrategyError("path-simulation mode requires a constant-coefficient market")
    z = z.astype(float).copy()
    eps = floor_frac * max(float(np.abs(z).max(initial=0.0)), 1e-300)
    b_lo = np.where(z1 == 0.0, eps, z1)
    b_hi = np.where(z2 == 0.0, -eps, z2)
    up = np.zeros(z.shape, dtype=bool)
    active = (z > b_lo) & (z < b_hi)
    sq = np.sqrt(dt)
    sigma = spec.sigma
    nu = abs(1.0 - gamma) * sigma
    steps = 0
    while active.any():
        g = rng.standard_normal(int(active.sum()))
        if gamma == 1.0:
            z[active] = z[active] + sigma * sq * g
        else:
            z[active] = z[active] * np.exp(nu * sq * g - 0.5 * nu * nu * dt)
        hit_hi = active & (z >= b_hi)
        hit_lo = active & (z <= b_lo)
        up[hit_hi] = True
        active &= ~(hit_hi | hit_lo)
        steps += 1
        if steps > max_steps:
            raise StrategyError(f"path simulation did not exit after {max_steps} steps")
    return up


def simulate_strategy(
    plan: StrategyPlan,
    x0: float,
    z0: float,
    n_paths: int,
    master_seed: int,
    mode: str = "exact_exit",
    dt: float = 1e-3,
    floor_frac: float = 1e-3,
) -> SimResult:
    """Monte Carlo estimate of the terminal expected utility of the n-round
    strategy started on-grid at (x0, z0).

    Per path and per round (levels k = n .. 0): exit the z-contact interval
    of the pair (iterate 2k+1, iterate 2k) with frozen wealth, then for
    k >= 1 jump the wealth per the mean-preserving law of the pair
    (2k, 2k-1).  The payoff is iterate 0 at the stopped state; its
    expectation equals iterate 2n+1 at the start point.
    """
    if mode not in ("exact_exit", "path_sim"):
        raise StrategyError(f"unknown mode {mode!r}")
    w = plan.window
    ix0 = _node_index(w.x_axis, x0, "x0")
    iz0 = _node_index(w.z_axis, z0, "z0")
    if not np.isfinite(plan.surfaces[0].values[ix0, iz0]):
        raise StrategyError("(x0, z0) is not an interior on-mask node")

    z_tables = {}
    x_tables = {}
    for k in range(plan.n, -1, -1):
        z_tables[k] = _contact_tables(
            plan.surfaces[2 * k + 1], plan.surfaces[2 * k], axis=1, tol=plan.contact_tol
        )
        if k >= 1:
            x_tables[k] = _contact_tables(
                plan.surfaces[2 * k], plan.surfaces[2 * k - 1], axis=0, tol=plan.contact_tol
            )

    z_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([master_seed, 0])))
    jump_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([master_seed, 1])))

    ix = np.full(n_paths, ix0, dtype=np.int64)
    iz = np.full(n_paths, iz0, dtype=np.int64)
    z_round_means = []
    for k in range(plan.n, -1, -1):
        lo, hi = z_tables[k]
        lo_i = lo[ix, iz]
        hi_i = hi[ix, iz]
        if np.any(lo_i < 0) or np.any(hi_i < 0):
            bad = int(np.nonzero((lo_i < 0) | (hi_i < 0))[0][0])
            raise StrategyError(
                f"z-contact lookup failed at round {plan.n - k + 1}, "
                f"x={w.x_axis[ix[bad]]}, z={w.z_axis[iz[bad]]}"
            )
        z1 = w.z_axis[lo_i]
        z2 = w.z_axis[hi_i]
        zc = w.z_axis[iz]
        open_interval = lo_i != hi_i
        if mode == "exact_exit":
            with np.errstate(invalid="ignore", divide="ignore"):
                p_up = np.where(open_interval, (zc - z1) / (z2 - z1), 0.0)
            go_up = z_rng.uniform(size=n_paths) < p_up
        else:
            go_up = np.zeros(n_paths, dtype=bool)
            if open_interval.any():
                sel = np.nonzero(open_interval)[0]
                go_up[sel] = _pathsim_exit(
                    plan, zc[sel], z1[sel], z2[sel], dt, z_rng, floor_frac
                )
        iz = np.where(open_interval, np.where(go_up, hi_i, lo_i), iz)
        z_round_means.append(float(w.z_axis[iz].mean()))

        if k >= 1:
            lo_x, hi_x = x_tables[k]
            b_i = lo_x[ix, iz]
            a_i = hi_x[ix, iz]
            if np.any(b_i < 0) or np.any(a_i < 0):
                bad = int(np.nonzero((b_i < 0) | (a_i < 0))[0][0])
                raise StrategyError(
                    f"x-contact lookup failed at round {plan.n - k + 1}, "
                    f"x={w.x_axis[ix[bad]]}, z={w.z_axis[iz[bad]]}"
                )
            a = w.x_axis[a_i]
            b = w.x_axis[b_i]
            xc = w.x_axis[ix]
            jumps = a_i != b_i
            with np.errstate(invalid="ignore", divide="ignore"):
                p_a = np.where(jumps, (xc - b) / (a - b), 1.0)
            go_a = jump_rng.uniform(size=n_paths) < p_a
            ix = np.where(jumps, np.where(go_a, a_i, b_i), ix)

    payoff = plan.surfaces[0].values[ix, iz]
    if not np.isfinite(payoff).all():
        raise StrategyError("a path stopped at a non-finite payoff node")
    mean = float(payoff.mean())
    stderr = float(payoff.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    x_term = w.x_axis[ix]
    return SimResult(
        mean=mean,
        stderr=stderr,
        n_paths=n_paths,
        mean_x_terminal=float(x_term.mean()),
        stderr_x_terminal=float(x_term.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0,
        seed=master_seed,
        mode=mode,
        z_round_means=z_round_means,
    )
