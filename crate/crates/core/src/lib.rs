//! Monte Carlo and finite-difference tools for stochastic control problems
//! driven by forward-backward SDEs with regular and singular controls:
//! least-squares BSDE solvers, adjoint processes, first- and second-order
//! variations, necessary-condition checks, Malliavin-derivative estimators and
//! an HJB variational-inequality solver.

pub mod adjoint;
pub mod conditions;
pub mod error;
pub mod export;
pub mod hjb;
pub mod malliavin;
pub mod model;
pub mod paths;
pub mod problem_file;
pub mod regression;
pub mod rng;
pub mod simulate;
pub mod variation;

pub use adjoint::{
    check_ratio_identity, solve_classical_adjoints, solve_singular_adjoint, ClassicalAdjoints, SingularAdjoint,
};
pub use conditions::{
    check_classical_singularity, check_singular_optimality, duality_check, eval_hamiltonians, pointwise_m1,
    pointwise_m2, variational_inequality_value, AdjointPoint, ConditionReport, HamiltonianRecord, MalliavinInputs,
};
pub use error::{FbsdeError, Result};
pub use hjb::{solve_hjb_vi, SpatialGrid, ValueGrid};
pub use malliavin::{martingale_kernel, nabla, KernelEstimate, MalliavinConfig, WienerFunctional};
pub use model::{
    worked_example, CoefficientSet, ControlRegion, Problem, RegularControl, SingularControl, SingularControlPath,
    TimeGrid,
};
pub use paths::PathTensor;
pub use problem_file::{builtin_problem, load_problem, parse_problem, ProblemSpec};
pub use simulate::{evaluate_cost, simulate_forward, solve_bsde, BackwardPaths, CostEstimate, ForwardPaths, McConfig};
pub use variation::{convergence_study, Perturbation, StudyResult};
