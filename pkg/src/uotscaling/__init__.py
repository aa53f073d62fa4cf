"""Entropic unbalanced optimal transport by diagonal scaling."""

from .barycenter import (
    BarycenterProblem,
    BarycenterSolution,
    barycenter_h,
    proxdiv_shared,
    solve_barycenter,
)
from .color import (
    LabHistogram,
    apply_color_map,
    barycentric_map,
    image_to_histogram,
    lab_to_srgb,
    srgb_to_lab,
)
from .divergences import (
    DivergenceSpec,
    Kind,
    divergence_conjugate_value,
    divergence_value,
    proxdiv,
)
from .extensions import (
    PushforwardProblem,
    gamma_k,
    pushforward,
    solve_generalized,
    solve_with_mass,
)
from .flows import FlowEnergy, FlowTrajectory, flow_proxdiv, flow_recover_next, run_flow
from .geometry import (
    CostMatrix,
    DiscreteSpace,
    Kernel,
    build_cost_quadratic,
    build_cost_wf,
    gibbs_kernel,
    kernel_apply,
    kernel_apply_transpose,
    stabilized_kernel,
)
from .scaling import (
    Plan,
    ScalingOptions,
    SolveReport,
    SolverError,
    dual_value,
    epsilon_schedule,
    pd_gap,
    primal_value,
    solve_plain,
    solve_stabilized,
    thompson_distance,
)

__version__ = "0.1.0"
