"""Solver for the mixed optimal-stopping / optimal-investment problem of an
indivisible asset: value function via alternating one-dimensional concave
envelopes, closed-form power-utility benchmarks, and Monte Carlo validation
of the explicit maximizing strategy."""

from .envelope import (
    MINUS_INFINITY,
    EnvelopeResult,
    SampledFunction,
    concave_envelope_1d,
    concave_envelope_oracle,
    contact_points,
)
from .market import (
    MarketSpec,
    ScaleTransform,
    UtilitySpec,
    gamma_of,
    sample_z_path,
    scale_closed_form,
    scale_numeric,
    sigma_tilde,
)
from .power import (
    PowerCase,
    PowerConstants,
    classify,
    gamma_hat,
    power_constants,
    ubar1_closed,
    ubar2_closed,
    xi0,
    xi12,
)
from .solver import (
    BoundaryMode,
    GridWindow,
    IterationReport,
    SolveResult,
    SolverParams,
    ValueGrid,
    WindowBounds,
    build_ubar,
    concavify_x,
    concavify_z,
    gambling_benefit,
    iterate_to_fixed_point,
    no_trade_value,
    solve,
    v_of_xy,
)
from .strategy import (
    JumpLaw,
    SimResult,
    StrategyPlan,
    sample_z_exit,
    simulate_strategy,
    x_jump_law,
    z_contact_interval,
)

__version__ = "0.1.0"
