"""Monte Carlo solvers for forward-backward SDEs driven by continuous
martingales with quadratic-growth drivers, with checks of the Markov and
control representations and an indifference-hedging application."""

from .bsde import (
    BsdeSolution,
    Driver,
    SolverOptions,
    TerminalCondition,
    bmo_norm_estimate,
    constant_terminal,
    entropic_driver,
    exp_transform,
    inverse_exp_transform,
    linear_driver,
    rho,
    solve_lipschitz,
    solve_quadratic,
    transformed_driver_g,
    truncate_driver,
    write_convergence_csv,
    zero_driver,
)
from .errors import (
    BlowUpError,
    CapacityError,
    ConfigurationError,
    InconsistencyError,
    IterationLimitError,
    MarketDegenerateError,
    ModelDomainError,
    NumericalError,
    QfbsdeError,
    SamplingError,
    ShapeError,
    TruncationBindingError,
    ValidationError,
)
from .forward import ForwardSolution, SdeCoefficients, bump_restart, simulate_forward, simulate_variational, with_variational
from .hedging import (
    HedgeReport,
    MarketSpec,
    build_utility_driver,
    delta_hedge,
    hedge_backtest,
    indifference_price,
    price_partials,
)
from .markov import (
    FbsdeProblem,
    MarkovSurface,
    appendix_a3_oracle,
    bracket_check,
    build_surface,
    derivative_bsde_solve,
    estimate_u,
    finite_diff_partials,
    representation_check,
)
from .mrp import MrpTransform, mrp_transform, solve_quadratic_with_orthogonal
from .paths import (
    MartingaleModel,
    PathBundle,
    TimeGrid,
    compute_clock,
    discrete_covariation,
    generate_paths,
    q_density,
)
from .regression import RegressionBasis, RegressionFit, regress_conditional

__version__ = "0.1.0"
