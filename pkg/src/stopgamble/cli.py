"""Batch front-end: solve / classify / no-trade / simulate / verify /
envelope commands over a JSON config with flag overrides.

Exit codes: 0 success, 1 verification failure, 2 mathematical divergence
(the value function is +infinity), 3 usage or configuration error.
All output is UTF-8; numbers are formatted shortest-round-trip.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import power
from .envelope import SampledFunction, concave_envelope_1d
from .market import MarketSpec, UtilitySpec, scale_closed_form, scale_numeric
from .power import FIXED_POINT_INDEX, PowerCase, classify, power_constants
from .solver import (
    BoundaryMode,
    SolverParams,
    WindowBounds,
    solve,
    summary_dict,
    write_grid_csv,
    write_summary_json,
)
from .strategy import build_plan, simulate_strategy

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_DIVERGING = 2
EXIT_USAGE = 3


class ConfigError(ValueError):
    pass


def auto_window_bounds(gamma: float, p: float, nx: int, nz: int, z_top: float = 4.0) -> WindowBounds:
    """Case-aware window for constant-coefficient power problems.

    Chooses bounds so that for the finite compact cases the contact and
    bridge loci of the central region lie strictly inside the window, and
    anchors the grid at a finite natural z-edge where one exists (z = 0 for
    gamma below 1; gamma above 1 has its finite edge at z = 0 when the
    utility supremum is finite).
    """
    case = classify(gamma, p)
    if gamma < 1.0:
        r_top = z_top ** (1.0 / (1.0 - gamma))
        x_max = 4.0 * r_top
        if case in (PowerCase.STOP_ONLY, PowerCase.STOP_AND_GAMBLE):
            xi_0 = power.xi0(gamma, p)
            # keep row tangencies of the whole x-range inside the z-window
            x_max = (0.8 * z_top) ** (1.0 / (1.0 - gamma)) / xi_0
        x_min = -min(2.0, 0.5 * r_top)
        return WindowBounds(x_min, x_max, nx, 0.0, z_top, nz, z_min_natural=True)
    if gamma == 1.0:
        half = z_top
        r_top = float(np.exp(half))
        return WindowBounds(-0.9 * r_top, 4.0 * r_top, nx, -half, half, nz)
    # gamma above 1: z-domain is the negative half-line; the z=0 edge carries
    # the utility supremum, finite only for p above 1
    z_lo = -6.0
    r_lo = (-z_lo) ** (1.0 / (1.0 - gamma))
    x_span = max(1.0, 4.0 * (-1.0 / z_lo) ** (1.0 / (gamma - 1.0)))
    if p > 1.0:
        return WindowBounds(-0.9 * r_lo, x_span, nx, z_lo, 0.0, nz, z_max_natural=True)
    return WindowBounds(-0.9 * r_lo, x_span, nx, z_lo, -1e-3, nz)


DEFAULT_CONFIG = {
    "market": {"kind": "gbm", "mu": 0.125, "sigma": 1.0},
    "utility": {"kind": "power", "p": 2.0},
    "window": "auto",
    "solver": {
        "fp_tol": 1e-9,
        "max_iter": 64,
        "cap": 1e12,
        "boundary_mode": "contact",
        "widening_rounds": 3,
    },
    "sim": {"n_paths": 100_000, "mode": "exact_exit", "rounds": 0, "dt": 1e-3},
    "output": {"dir": ".", "formats": ["csv", "json"]},
}


def _deep_update(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = DEFAULT_CONFIG
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = _deep_update(cfg, json.load(fh))
    return _deep_update(cfg, overrides)


def _build_problem(cfg: dict):
    market_cfg = cfg["market"]
    if market_cfg.get("kind", "gbm") != "gbm":
        raise ConfigError("only constant-coefficient markets are configurable from the CLI")
    spec = MarketSpec.gbm(float(market_cfg["mu"]), float(market_cfg["sigma"]))
    util_cfg = cfg["utility"]
    if util_cfg.get("kind", "power") != "power":
        raise ConfigError("only power utilities are configurable from the CLI")
    utility = UtilitySpec.power(float(util_cfg["p"]))
    gamma = 2.0 * spec.mu / spec.sigma**2
    scale_cfg = cfg.get("scale", {"mode": "closed_form"})
    if scale_cfg.get("mode", "closed_form") == "closed_form":
        transform = scale_closed_form(gamma)
    else:
        transform = scale_numeric(
            spec, float(scale_cfg.get("c", 1.0)), tuple(scale_cfg.get("y_window", (1e-6, 64.0)))
        )
    return spec, utility, transform, gamma


def _window_bounds(cfg: dict, gamma: float, p: float) -> WindowBounds:
    win = cfg["window"]
    if win == "auto":
        n_default = 257
        return auto_window_bounds(gamma, p, n_default, n_default)
    nx, nz = int(win["nx"]), int(win["nz"])
    if nx < 16 or nz < 16:
        raise ConfigError("nx and nz must be at least 16")
    if not (win["x_min"] < win["x_max"] and win["z_min"] < win["z_max"]):
        raise ConfigError("window bounds must be increasing")
    return WindowBounds(
        float(win["x_min"]),
        float(win["x_max"]),
        nx,
        float(win["z_min"]),
        float(win["z_max"]),
        nz,
        z_min_natural=bool(win.get("z_min_natural", False)),
        z_max_natural=bool(win.get("z_max_natural", False)),
    )


def _solver_params(cfg: dict) -> SolverParams:
    s = cfg["solver"]
    return SolverParams(
        fp_tol=float(s.get("fp_tol", 1e-9)),
        max_iter=int(s.get("max_iter", 64)),
        cap=float(s.get("cap", 1e12)),
        widening_rounds=int(s.get("widening_rounds", 3)),
    )


def _boundary(cfg: dict, gamma: float, p: float) -> BoundaryMode:
    mode = cfg["solver"].get("boundary_mode", "contact")
    if mode == "contact":
        return BoundaryMode()
    if mode == "closed_form":
        return closed_form_boundary(gamma, p)
    raise ConfigError(f"unknown boundary mode {mode!r}")


def closed_form_boundary(gamma: float, p: float) -> BoundaryMode:
    """Boundary evaluator from the power closed forms: iterate 1 for the
    first z-pass, iterate 2 (the fixed point in every finite case) after."""

    def evaluator(n_target, x, z):
        if n_target <= 1:
            return power.ubar1_closed(x, z, gamma, p)
        return power.ubar2_closed(x, z, gamma, p)

    return BoundaryMode(kind="closed_form", evaluator=evaluator)


def cmd_solve(args) -> int:
    cfg = load_config(args.config, _cli_overrides(args))
    spec, utility, transform, gamma = _build_problem(cfg)
    p = utility.p
    bounds = _window_bounds(cfg, gamma, p)
    result = solve(utility, transform, bounds, _solver_params(cfg), _boundary(cfg, gamma, p))
    out_dir = Path(cfg["output"]["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_summary_json(out_dir / "summary.json", result)
    if result.status == "diverging":
        print(
            json.dumps(
                {
                    "status": "diverging",
                    "explanation": "interior values grow without decay under window widening; "
                    "a partially concave limit that is not locally bounded is identically +infinity",
                    "interior_sups": result.widening.get("interior_sups", []),
                }
            )
        )
        return EXIT_DIVERGING
    write_grid_csv(out_dir / "grid.csv", result)
    print(json.dumps(summary_dict(result)))
    return EXIT_OK


def cmd_classify(args) -> int:
    constants = power_constants(args.gamma, args.p)
    payload = constants.as_dict()
    if args.p == 1.0 and constants.gamma_hat is not None:
        payload["gamma_hat_precision"] = power.gamma_hat_log_precision()
        payload["gamma_hat_low_precision"] = True
    print(json.dumps(payload))
    return EXIT_OK


def cmd_no_trade(args) -> int:
    cfg = load_config(args.config, _cli_overrides(args))
    spec, utility, transform, gamma = _build_problem(cfg)
    bounds = _window_bounds(cfg, gamma, utility.p)
    result = solve(
        utility,
        transform,
        bounds,
        _solver_params(cfg),
        _boundary(cfg, gamma, utility.p),
        widening_check=False,
    )
    out_dir = Path(cfg["output"]["dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    w = result.u0.window
    path = out_dir / "no_trade.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,z,u0,m\n")
        for i in range(w.nx):
            for j in range(w.nz):
                if w.mask[i, j]:
                    fh.write(
                        f"{w.x_axis[i]!r},{w.z_axis[j]!r},"
                        f"{result.u0.values[i, j]!r},{result.u1.values[i, j]!r}\n"
                    )
    print(json.dumps({"status": result.status, "file": str(path)}))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, _cli_overrides(args))
    if args.seed is None:
        raise ConfigError("--seed is required for simulate (reproducibility is a contract)")
    spec, utility, transform, gamma = _build_problem(cfg)
    bounds = _window_bounds(cfg, gamma, utility.p)
    result = solve(
        utility, transform, bounds, _solver_params(cfg), widening_check=False
    )
    if result.status != "converged":
        print(json.dumps({"status": result.status}))
        return EXIT_DIVERGING
    sim_cfg = cfg["sim"]
    rounds = int(args.rounds if args.rounds is not None else sim_cfg.get("rounds", 0))
    plan = build_plan(result.history, rounds, transform, spec)
    w = plan.window
    x0 = args.x0 if args.x0 is not None else float(w.x_axis[3 * w.nx // 4])
    z0 = args.z0 if args.z0 is not None else float(w.z_axis[w.nz // 2])
    x0 = float(w.x_axis[int(np.argmin(np.abs(w.x_axis - x0)))])
    z0 = float(w.z_axis[int(np.argmin(np.abs(w.z_axis - z0)))])
    sim = simulate_strategy(
        plan,
        x0,
        z0,
        int(args.paths if args.paths is not None else sim_cfg.get("n_paths", 100_000)),
        int(args.seed),
        mode=str(args.mode if args.mode is not None else sim_cfg.get("mode", "exact_exit")),
        dt=float(args.dt if args.dt is not None else sim_cfg.get("dt", 1e-3)),
    )
    i0 = int(np.argmin(np.abs(w.x_axis - x0)))
    j0 = int(np.argmin(np.abs(w.z_axis - z0)))
    target = float(plan.surfaces[2 * rounds + 1].values[i0, j0])
    payload = {
        "mean": sim.mean,
        "stderr": sim.stderr,
        "n_paths": sim.n_paths,
        "target": target,
        "z_sigma_level": abs(sim.mean - target) / sim.stderr if sim.stderr > 0 else 0.0,
        "martingale_residual": sim.mean_x_terminal - x0,
        "x0": x0,
        "z0": z0,
        "seed": sim.seed,
        "mode": sim.mode,
    }
    print(json.dumps(payload))
    return EXIT_OK


def cmd_verify(args) -> int:
    gamma, p = args.gamma, args.p
    case = classify(gamma, p)
    if FIXED_POINT_INDEX[case] is None:
        raise ConfigError("verify compares closed forms; the requested case has infinite value")
    nx = args.nx or 257
    nz = args.nz or 257
    utility = UtilitySpec.power(p)
    transform = scale_closed_form(gamma)
    bounds = auto_window_bounds(gamma, p, nx, nz)
    result = solve(
        utility,
        transform,
        bounds,
        SolverParams(),
        closed_form_boundary(gamma, p),
        widening_check=False,
    )
    w = result.u0.window
    ci = slice(w.nx // 4, w.nx - w.nx // 4)
    cj = slice(w.nz // 4, w.nz - w.nz // 4)
    xg = w.x_axis[ci][:, None]
    zg = w.z_axis[cj][None, :]
    ref1 = power.ubar1_closed(np.broadcast_to(xg, (xg.size, zg.size)), np.broadcast_to(zg, (xg.size, zg.size)), gamma, p)
    ref2 = power.ubar2_closed(np.broadcast_to(xg, (xg.size, zg.size)), np.broadcast_to(zg, (xg.size, zg.size)), gamma, p)
    sub_mask = w.mask[ci, cj] & np.isfinite(ref1) & np.isfinite(ref2)
    err1 = _max_rel_err(result.u1.values[ci, cj], ref1, sub_mask)
    err2 = _max_rel_err(result.uinf.values[ci, cj], ref2, sub_mask)
    ok = err1 <= 0.01 and err2 <= 0.01
    print(
        json.dumps(
            {
                "case": case.value,
                "max_rel_err_u1": err1,
                "max_rel_err_uinf": err2,
                "tolerance": 0.01,
                "pass": ok,
            }
        )
    )
    return EXIT_OK if ok else EXIT_VERIFY_FAIL


def _max_rel_err(got: np.ndarray, ref: np.ndarray, mask: np.ndarray) -> float:
    denom = np.maximum(np.abs(ref[mask]), 1.0)
    return float(np.max(np.abs(got[mask] - ref[mask]) / denom, initial=0.0))


def cmd_envelope(args) -> int:
    data = np.loadtxt(args.input, delimiter=",", ndmin=2) if args.input else np.loadtxt(
        sys.stdin, delimiter=",", ndmin=2
    )
    f = SampledFunction(data[:, 0], data[:, 1])
    res = concave_envelope_1d(f)
    out = sys.stdout if args.output is None else open(args.output, "w", encoding="utf-8")
    try:
        out.write("x,f,env,contact\n")
        for x, v, e, c in zip(f.xs, f.fs, res.env, res.contact):
            out.write(f"{x!r},{v!r},{e!r},{int(c)}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _cli_overrides(args) -> dict:
    over: dict = {}
    if getattr(args, "gamma", None) is not None:
        sigma = getattr(args, "sigma", None) or 1.0
        over["market"] = {"kind": "gbm", "mu": args.gamma * sigma**2 / 2.0, "sigma": sigma}
    if getattr(args, "p", None) is not None:
        over["utility"] = {"kind": "power", "p": args.p}
    if getattr(args, "out", None) is not None:
        over["output"] = {"dir": args.out}
    if getattr(args, "boundary", None) is not None:
        over["solver"] = {"boundary_mode": args.boundary}
    if getattr(args, "window", None) is not None:
        if args.window == "auto":
            over["window"] = "auto"
        else:
            keys = ("x_min", "x_max", "nx", "z_min", "z_max", "nz")
            vals = args.window.split(",")
            if len(vals) != 6:
                raise ConfigError("--window needs x_min,x_max,nx,z_min,z_max,nz")
            win = {k: float(v) for k, v in zip(keys, vals)}
            win["nx"], win["nz"] = int(win["nx"]), int(win["nz"])
            over["window"] = win
    return over


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stopgamble", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override its fields")
        sp.add_argument("--gamma", type=float, help="drift-to-variance ratio 2*mu/sigma^2")
        sp.add_argument("--sigma", type=float, help="volatility (with --gamma fixes mu)")
        sp.add_argument("--p", type=float, help="power-utility exponent")
        sp.add_argument("--window", help="'auto' or x_min,x_max,nx,z_min,z_max,nz")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--boundary", choices=["contact", "closed_form"])

    sp = sub.add_parser("solve", help="solve for the value surface; writes grid.csv + summary.json")
    common(sp)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("classify", help="case classification and constants as JSON")
    sp.add_argument("--gamma", type=float, required=True)
    sp.add_argument("--p", type=float, required=True)
    sp.set_defaults(func=cmd_classify)

    sp = sub.add_parser("no-trade", help="no-trade (pure stopping) value surface")
    common(sp)
    sp.set_defaults(func=cmd_no_trade)

    sp = sub.add_parser("simulate", help="Monte Carlo strategy validation")
    common(sp)
    sp.add_argument("--seed", type=int, help="master seed (required)")
    sp.add_argument("--paths", type=int)
    sp.add_argument("--rounds", type=int)
    sp.add_argument("--x0", type=float)
    sp.add_argument("--z0", type=float)
    sp.add_argument("--mode", choices=["exact_exit", "path_sim"])
    sp.add_argument("--dt", type=float)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("verify", help="grid solver vs closed forms on the interior")
    sp.add_argument("--gamma", type=float, required=True)
    sp.add_argument("--p", type=float, required=True)
    sp.add_argument("--nx", type=int)
    sp.add_argument("--nz", type=int)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("envelope", help="debug: envelope one sampled line (CSV in/out)")
    sp.add_argument("--input", help="CSV file of x,f rows (default stdin)")
    sp.add_argument("--output", help="CSV output path (default stdout)")
    sp.set_defaults(func=cmd_envelope)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
