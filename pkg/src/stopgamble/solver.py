"""Two-dimensional grid solver: builds the transformed utility surface on an
(x, z) window and alternates one-dimensional concave envelopes in z and in x
until the surface is a fixed point of both passes (the value function after
the scale change), or until progressive window widening certifies that the
value is identically infinite.

Truncation policy: the transformed domain is unbounded, the grid is not.  In
"contact" mode the outermost finite node of every line is a hard endpoint
(yielding a lower bound of the true envelope); in "closed_form" mode the
outermost node of each line is seeded from a caller-supplied evaluator of the
true iterate (used for power-utility verification).  A mandatory widening
check re-solves on a wider, node-aligned window: interior drift beyond
tolerance means the window truncation is visible, and interior values that
keep growing under widening certify divergence (the only alternative to a
locally bounded limit is identically +infinity).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .envelope import envelope_values
from .market import MarketError, ScaleTransform, UtilitySpec

MINUS_INFINITY = -np.inf


class SolverError(ValueError):
    """Bad window / grid input."""


class DivergingValueError(RuntimeError):
    """Value queried from a solve that certified an infinite value function."""


def value_scale(values: np.ndarray) -> float:
    """Robust value scale of a surface: top of the range minus the lower
    quartile of the finite entries (the near-boundary utility spike would
    otherwise dominate), floored at 1."""
    fin = values[np.isfinite(values)]
    if fin.size == 0:
        return 1.0
    return float(max(1.0, fin.max() - np.percentile(fin, 25.0)))


@dataclass(frozen=True)
class GridWindow:
    """Rectangular (x, z) grid with the admissibility mask x + R(z) >= 0.

    ``r_of_z`` caches R at the z nodes; a node at a finite closure point of
    the z-domain (e.g. z = 0 for the power scale) carries the limit of R
    there (0 or +inf), so the boundary behaviour of the utility is anchored
    exactly.  Every row and column of the mask is a contiguous run because R
    is increasing.
    """

    x_axis: np.ndarray
    z_axis: np.ndarray
    mask: np.ndarray
    r_of_z: np.ndarray

    @staticmethod
    def regular(
        transform: ScaleTransform,
        x_bounds: tuple[float, float],
        nx: int,
        z_bounds: tuple[float, float],
        nz: int,
    ) -> "GridWindow":
        if nx < 2 or nz < 2:
            raise SolverError("need at least a 2x2 grid")
        if not (x_bounds[0] < x_bounds[1] and z_bounds[0] < z_bounds[1]):
            raise SolverError("window bounds must be increasing")
        x_axis = np.linspace(x_bounds[0], x_bounds[1], nx)
        z_axis = np.linspace(z_bounds[0], z_bounds[1], nz)
        return GridWindow.from_axes(transform, x_axis, z_axis)

    @staticmethod
    def from_axes(transform: ScaleTransform, x_axis, z_axis) -> "GridWindow":
        x_axis = np.asarray(x_axis, float)
        z_axis = np.asarray(z_axis, float)
        if not (np.all(np.diff(x_axis) > 0) and np.all(np.diff(z_axis) > 0)):
            raise SolverError("axes must be strictly increasing")
        transform.check_z(z_axis)
        with np.errstate(divide="ignore", over="ignore"):
            r_of_z = np.asarray(transform.r(z_axis), float)
        mask = (x_axis[:, None] + r_of_z[None, :]) >= 0.0
        if not mask.any():
            raise SolverError("window does not intersect the admissible domain")
        return GridWindow(x_axis=x_axis, z_axis=z_axis, mask=mask, r_of_z=r_of_z)

    @property
    def nx(self) -> int:
        return self.x_axis.size

    @property
    def nz(self) -> int:
        return self.z_axis.size

    def same_geometry(self, other: "GridWindow") -> bool:
        return (
            self.x_axis.shape == other.x_axis.shape
            and np.array_equal(self.x_axis, other.x_axis)
            and np.array_equal(self.z_axis, other.z_axis)
        )


@dataclass(frozen=True)
class ValueGrid:
    """One surface of the concavification sequence; ``n`` is the iterate
    index (0 = transformed utility).  Off-mask nodes hold the sentinel."""

    window: GridWindow
    values: np.ndarray
    n: int = 0

    def finite_mask(self) -> np.ndarray:
        return np.isfinite(self.values)


@dataclass(frozen=True)
class BoundaryMode:
    """Window-truncation policy for envelope passes.

    kind "contact": hard endpoints at the outermost finite nodes.
    kind "closed_form": before each line is enveloped, its outermost finite
    node at each end is replaced by ``evaluator(n_target, x, z)``, the true
    value of the iterate being produced.
    """

    kind: str = "contact"
    evaluator: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("contact", "closed_form"):
            raise SolverError(f"unknown boundary mode {self.kind!r}")
        if self.kind == "closed_form" and self.evaluator is None:
            raise SolverError("closed_form mode needs an evaluator")


CONTACT = BoundaryMode()


def build_ubar(utility: UtilitySpec, transform: ScaleTransform, window: GridWindow) -> ValueGrid:
    """Iterate 0: U(x + R(z)) on-mask, sentinel off-mask."""
    v = window.x_axis[:, None] + window.r_of_z[None, :]
    vals = np.where(window.mask, utility(np.maximum(v, 0.0)), MINUS_INFINITY)
    if not np.isfinite(vals).any():
        raise SolverError("utility surface has no finite values on the window")
    return ValueGrid(window=window, values=vals, n=0)


def _finite_run(flags: np.ndarray) -> tuple[int, int] | None:
    """(lo, hi) inclusive bounds of the True run, or None if fewer than 2.
    The run must be contiguous (guaranteed by monotone U and R)."""
    idx = np.nonzero(flags)[0]
    if idx.size < 2:
        return None
    lo, hi = int(idx[0]), int(idx[-1])
    if idx.size != hi - lo + 1:
        raise SolverError("finite entries of a grid line are not contiguous")
    return lo, hi


def _concavify_lines(
    coords: np.ndarray,
    values: np.ndarray,
    n_target: int,
    boundary: BoundaryMode,
    line_points: Callable | None,
):
    """Envelope every row of ``values`` along ``coords`` in place-copy.

    ``line_points(i)`` must return the (x, z) arrays of row i's endpoints for
    the closed-form evaluator; only consulted in closed_form mode.
    """
    out = values.copy()
    finite = np.isfinite(values)
    for i in range(values.shape[0]):
        run = _finite_run(finite[i])
        if run is None:
            continue
        lo, hi = run
        line = values[i, lo : hi + 1]
        if boundary.kind == "closed_form":
            line = line.copy()
            (x_lo, z_lo), (x_hi, z_hi) = line_points(i, lo, hi)
            line[0] = boundary.evaluator(n_target, x_lo, z_lo)
            line[-1] = boundary.evaluator(n_target, x_hi, z_hi)
            if not np.isfinite(line[[0, -1]]).all():
                raise SolverError("closed-form boundary evaluator returned a non-finite value")
        env = envelope_values(coords[lo : hi + 1], line)
        np.maximum(env, values[i, lo : hi + 1], out=out[i, lo : hi + 1])
    return out


def concavify_z(g: ValueGrid, boundary: BoundaryMode = CONTACT) -> ValueGrid:
    """Replace each x-row by its concave envelope in z; iterate index +1."""
    w = g.window

    def line_points(i, lo, hi):
        return (w.x_axis[i], w.z_axis[lo]), (w.x_axis[i], w.z_axis[hi])

    vals = _concavify_lines(w.z_axis, g.values, g.n + 1, boundary, line_points)
    return ValueGrid(window=w, values=vals, n=g.n + 1)


def concavify_x(g: ValueGrid, boundary: BoundaryMode = CONTACT) -> ValueGrid:
    """Replace each z-column by its concave envelope in x; iterate index +1."""
    w = g.window

    def line_points(j, lo, hi):
        return (w.x_axis[lo], w.z_axis[j]), (w.x_axis[hi], w.z_axis[j])

    vals = _concavify_lines(w.x_axis, g.values.T, g.n + 1, boundary, line_points).T
    return ValueGrid(window=w, values=np.ascontiguousarray(vals), n=g.n + 1)


def _sup_delta(new: np.ndarray, old: np.ndarray) -> float:
    """Per-node relative sup change; envelope passes never decrease values."""
    both = np.isfinite(new) & np.isfinite(old)
    if not both.any():
        return 0.0
    d = (new[both] - old[both]) / np.maximum(1.0, np.abs(old[both]))
    return float(d.max(initial=0.0))


@dataclass(frozen=True)
class IterationReport:
    """Outcome of the alternating-envelope loop.

    status: "converged" | "diverging" | "max_iterations"
    n_final: index of the first iterate equal to the fixed point (0 means the
        initial surface was already bi-concave)
    sup_deltas: per-round relative sup-norm changes
    cap_hits: on-mask nodes above the divergence cap at the last round
    """

    status: str
    n_final: int
    sup_deltas: list
    cap_hits: int = 0


#: pass-delta threshold separating a genuine new iterate from envelope noise
DETECT_TOL = 1e-6


def iterate_to_fixed_point(
    g0: ValueGrid,
    fp_tol: float = 1e-9,
    max_iter: int = 64,
    cap: float = 1e12,
    boundary: BoundaryMode = CONTACT,
    detect_tol: float = DETECT_TOL,
) -> tuple[ValueGrid, IterationReport, list[ValueGrid]]:
    """Alternate conc_z / conc_x from iterate 0 until a full round changes
    nothing (fixed point of both partial envelopes), values blow past ``cap``
    with growing round deltas, or ``max_iter`` rounds elapse.

    Returns the last surface, the report, and the full iterate history
    [U^0, U^1, ..., U^last].
    """
    if g0.n != 0:
        raise SolverError("iteration must start from iterate 0")
    history = [g0]
    pass_deltas: list[float] = []
    sup_deltas: list[float] = []
    status = "max_iterations"
    g = g0
    for _ in range(max_iter):
        g_z = concavify_z(g, boundary)
        d_z = _sup_delta(g_z.values, g.values)
        g_x = concavify_x(g_z, boundary)
        d_x = _sup_delta(g_x.values, g_z.values)
        history.extend([g_z, g_x])
        pass_deltas.extend([d_z, d_x])
        sup_deltas.append(max(d_z, d_x))
        g = g_x
        fin = g.values[np.isfinite(g.values)]
        cap_hits = int((fin > cap).sum())
        if cap_hits and len(sup_deltas) >= 3 and sup_deltas[-1] > sup_deltas[-2] > sup_deltas[-3]:
            status = "diverging"
            break
        if sup_deltas[-1] <= fp_tol:
            status = "converged"
            break
    n_final = 0
    for k, d in enumerate(pass_deltas, start=1):
        if d > detect_tol:
            n_final = k
    fin = g.values[np.isfinite(g.values)]
    report = IterationReport(
        status=status,
        n_final=n_final,
        sup_deltas=sup_deltas,
        cap_hits=int((fin > cap).sum()),
    )
    return g, report, history


def no_trade_value(g0: ValueGrid, boundary: BoundaryMode = CONTACT) -> ValueGrid:
    """The no-trade (pure stopping) value surface: one z-concavification."""
    if g0.n != 0:
        raise SolverError("no-trade value starts from iterate 0")
    return concavify_z(g0, boundary)


def gambling_benefit(uinf: ValueGrid, u1: ValueGrid, tol: float = DETECT_TOL) -> np.ndarray:
    """True where dynamic trading strictly improves on pure stopping:
    limit surface > first iterate + tol * scale."""
    if not uinf.window.same_geometry(u1.window):
        raise SolverError("benefit comparison needs identical windows")
    scale = value_scale(u1.values)
    both = np.isfinite(uinf.values) & np.isfinite(u1.values)
    out = np.zeros_like(both)
    out[both] = uinf.values[both] > u1.values[both] + tol * scale
    return out


def v_of_xy(uinf: ValueGrid, transform: ScaleTransform, x: float, y: float) -> float:
    """Value at a market point (x, y): bilinear interpolation of the limit
    surface at (x, S(y)); all four surrounding nodes must be on-mask."""
    z = float(transform.s(y))
    w = uinf.window
    if not (w.x_axis[0] <= x <= w.x_axis[-1] and w.z_axis[0] <= z <= w.z_axis[-1]):
        raise SolverError(f"({x}, z={z}) outside the solved window")
    i = int(np.clip(np.searchsorted(w.x_axis, x) - 1, 0, w.nx - 2))
    j = int(np.clip(np.searchsorted(w.z_axis, z) - 1, 0, w.nz - 2))
    corners = uinf.values[i : i + 2, j : j + 2]
    if not np.isfinite(corners).all():
        raise SolverError(f"({x}, {y}) too close to the domain boundary to interpolate")
    tx = (x - w.x_axis[i]) / (w.x_axis[i + 1] - w.x_axis[i])
    tz = (z - w.z_axis[j]) / (w.z_axis[j + 1] - w.z_axis[j])
    top = corners[0, 0] * (1 - tz) + corners[0, 1] * tz
    bot = corners[1, 0] * (1 - tz) + corners[1, 1] * tz
    return float(top * (1 - tx) + bot * tx)


# --------------------------------------------------------------------------
# solve driver: iteration + widening check + divergence certification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowBounds:
    """Grid bounds plus which z-edges sit at finite closure points of the
    z-domain (natural edges are never extended by widening)."""

    x_min: float
    x_max: float
    nx: int
    z_min: float
    z_max: float
    nz: int
    z_min_natural: bool = False
    z_max_natural: bool = False

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        dx = (self.x_max - self.x_min) / (self.nx - 1)
        dz = (self.z_max - self.z_min) / (self.nz - 1)
        return self.x_min + dx * np.arange(self.nx), self.z_min + dz * np.arange(self.nz)

    def widened(self, factor: float) -> tuple["WindowBounds", int, int]:
        """Node-aligned extension: each non-natural edge is pushed outward,
        keeping the spacing, until the total span is ``factor`` times the
        original.  Returns the new bounds plus the (x, z) index offsets of
        the original origin inside the new grid."""
        dx = (self.x_max - self.x_min) / (self.nx - 1)
        dz = (self.z_max - self.z_min) / (self.nz - 1)
        extra_x = int(np.ceil((factor - 1.0) * (self.nx - 1) / 2.0))
        new_x_min = self.x_min - extra_x * dx
        new_x_max = self.x_max + extra_x * dx
        nx = self.nx + 2 * extra_x
        extra_total_z = int(np.ceil((factor - 1.0) * (self.nz - 1)))
        if self.z_min_natural and self.z_max_natural:
            lo_z = hi_z = 0
        elif self.z_min_natural:
            lo_z, hi_z = 0, extra_total_z
        elif self.z_max_natural:
            lo_z, hi_z = extra_total_z, 0
        else:
            lo_z = extra_total_z // 2
            hi_z = extra_total_z - lo_z
        new_z_min = self.z_min - lo_z * dz
        new_z_max = self.z_max + hi_z * dz
        nz = self.nz + lo_z + hi_z
        out = WindowBounds(
            x_min=new_x_min,
            x_max=new_x_max,
            nx=nx,
            z_min=new_z_min,
            z_max=new_z_max,
            nz=nz,
            z_min_natural=self.z_min_natural,
            z_max_natural=self.z_max_natural,
        )
        return out, extra_x, lo_z


@dataclass(frozen=True)
class SolverParams:
    fp_tol: float = 1e-9
    max_iter: int = 64
    cap: float = 1e12
    detect_tol: float = DETECT_TOL
    widening_factor: float = 1.5
    widening_rounds: int = 3
    widening_tol: float = 1e-6
    growth_decay: float = 0.85


@dataclass
class SolveResult:
    """Everything a solve produces: the iterate-0/no-trade/limit surfaces,
    the iteration report, and the widening diagnostics."""

    status: str
    u0: ValueGrid
    u1: ValueGrid
    uinf: ValueGrid
    report: IterationReport
    history: list = field(default_factory=list)
    widening: dict = field(default_factory=dict)
    scale: float = 1.0

    def value_at(self, transform: ScaleTransform, x: float, y: float) -> float:
        if self.status == "diverging":
            raise DivergingValueError("value function is +infinity on the interior")
        return v_of_xy(self.uinf, transform, x, y)

    def benefit(self, tol: float | None = None) -> np.ndarray:
        return gambling_benefit(self.uinf, self.u1, tol if tol is not None else DETECT_TOL)


def _window_from_bounds(transform: ScaleTransform, b: WindowBounds) -> GridWindow:
    x_axis, z_axis = b.axes()
    return GridWindow.from_axes(transform, x_axis, z_axis)


def _central_indices(n: int) -> slice:
    return slice(n // 4, n - n // 4)


def solve(
    utility: UtilitySpec,
    transform: ScaleTransform,
    bounds: WindowBounds,
    params: SolverParams = SolverParams(),
    boundary: BoundaryMode = CONTACT,
    widening_check: bool = True,
) -> SolveResult:
    """Full solve: iterate to a fixed point on the window, then (contact mode)
    re-solve on progressively wider node-aligned windows.

    The first widening measures truncation drift on the central 50%
    sub-window.  If interior values keep growing by non-decaying increments
    across all widening rounds (or blow past the cap), the run is certified
    diverging: a partially-concave limit that is not locally bounded is
    identically +infinity.
    """
    window = _window_from_bounds(transform, bounds)
    g0 = build_ubar(utility, transform, window)
    uinf, report, history = iterate_to_fixed_point(
        g0, params.fp_tol, params.max_iter, params.cap, boundary, params.detect_tol
    )
    u1 = history[1] if len(history) > 1 else uinf
    scale = value_scale(g0.values)
    result = SolveResult(
        status=report.status,
        u0=g0,
        u1=u1,
        uinf=uinf,
        report=report,
        history=history,
        widening={},
        scale=scale,
    )
    if report.status != "converged" or not widening_check or boundary.kind != "contact":
        return result

    ci, cj = _central_indices(bounds.nx), _central_indices(bounds.nz)
    central_ok = np.isfinite(uinf.values[ci, cj])
    prev_central = uinf.values[ci, cj]
    sups = [float(prev_central[central_ok].max())]
    drifts: list[float] = []
    growth: list[float] = []
    diverged = False
    for k in range(1, params.widening_rounds + 1):
        wide_b, off_x, off_z = bounds.widened(params.widening_factor**k)
        wide_win = _window_from_bounds(transform, wide_b)
        wide_g0 = build_ubar(utility, transform, wide_win)
        wide_uinf, wide_rep, _ = iterate_to_fixed_point(
            wide_g0, params.fp_tol, params.max_iter, params.cap, boundary, params.detect_tol
        )
        sub = wide_uinf.values[off_x + np.arange(bounds.nx)[:, None], off_z + np.arange(bounds.nz)[None, :]]
        cur_central = sub[ci, cj]
        both = central_ok & np.isfinite(cur_central)
        drifts.append(float(np.abs(cur_central[both] - prev_central[both]).max(initial=0.0) / scale))
        s_k = float(cur_central[both].max(initial=0.0))
        growth.append((s_k - sups[-1]) / scale)
        sups.append(s_k)
        prev_central = cur_central
        if wide_rep.status == "diverging" or s_k > params.cap:
            diverged = True
            break
    floor = 10.0 * params.fp_tol
    if not diverged and len(growth) >= params.widening_rounds:
        nondecaying = all(
            growth[i] > floor and growth[i] >= params.growth_decay * growth[i - 1]
            for i in range(1, len(growth))
        )
        diverged = nondecaying and growth[0] > floor
    result.widening = {
        "drift": drifts[0] if drifts else None,
        "drifts": drifts,
        "interior_sups": sups,
        "interior_growth": growth,
        "passed": bool(drifts and drifts[0] <= params.widening_tol),
    }
    if diverged:
        result.status = "diverging"
        result.report = replace(report, status="diverging")
    return result


# --------------------------------------------------------------------------
# file output
# --------------------------------------------------------------------------


def write_grid_csv(path, result: SolveResult) -> None:
    """One line per on-mask node: x,z,u0,m,uinf,benefit with shortest
    round-trip decimal formatting."""
    w = result.u0.window
    benefit = result.benefit()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,z,u0,m,uinf,benefit\n")
        for i in range(w.nx):
            for j in range(w.nz):
                if not w.mask[i, j]:
                    continue
                fh.write(
                    f"{w.x_axis[i]!r},{w.z_axis[j]!r},{result.u0.values[i, j]!r},"
                    f"{result.u1.values[i, j]!r},{result.uinf.values[i, j]!r},"
                    f"{int(benefit[i, j])}\n"
                )


def summary_dict(result: SolveResult) -> dict:
    return {
        "status": result.status,
        "n_final": result.report.n_final,
        "sup_deltas": [float(d) for d in result.report.sup_deltas],
        "cap_hits": result.report.cap_hits,
        "widening_check": result.widening,
        "scale": result.scale,
    }


def write_summary_json(path, result: SolveResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary_dict(result), fh, indent=2)
        fh.write("\n")
