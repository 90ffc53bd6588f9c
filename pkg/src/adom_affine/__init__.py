"""Dual accelerated gossip methods for linearly coupled quadratic problems on changing graphs."""

from .accel import ChebyshevOperator, MultiConsensusSource, condition_of, transform_constraints
from .adom import AdomParams, AdomState, Trace, contraction_rate, default_params, lyapunov, params_for, run, step
from .graphs import (
    GossipMatrix,
    WeightedGraph,
    laplacian,
    metropolis_gossip,
    random_ring_source,
    reweighted_line_graph,
    spectrum,
    star_source,
)
from .lowerbounds import build_static_instance, build_tv_instance, nesterov_residual, span_progress
from .problems import (
    CostCounter,
    DualProblem,
    QuadraticProblem,
    build_dual,
    generate_constraints,
    generate_quadratic,
    grad_H,
    kkt_solve,
    make_problem,
)

__version__ = "0.1.0"
