"""Equilibrium solvers for time-inconsistent mean-field stochastic LQ control.

Typical use::

    from mixedlq import builtin_example, mixed_backward, build_policy
    spec = builtin_example()
    tables = mixed_backward(spec, gains)
    policy = build_policy(tables)
"""

__version__ = "0.1.0"

from .equilibrium import (  # noqa: E402
    EquilibriumPolicy, ExistenceReport, assumption_H_check, build_policy, classify_existence,
    stationarity_residual, uniqueness_check,
)
from .linalg import Tolerances, in_range, is_psd, min_eig_sym, pinv  # noqa: E402
from .model import (  # noqa: E402
    CompositeCoeffs, ProblemError, ProblemSpec, builtin_example, composites, dump_problem,
    load_problem, make_problem,
)
from .recursions import BackwardTables, feedback_backward, mixed_backward, open_loop_backward  # noqa: E402
from .simulate import (  # noqa: E402
    NoiseModel, NoiseTree, build_noise_tree, moment_propagation, simulate_closed_loop, tree_cost,
)
from .verify import (  # noqa: E402
    check_cost_difference, check_definition_inequality, check_Jtilde_identity, cross_check_reductions,
)
