//! Data-enabled policy optimization (DeePO) for the discrete-time LQR problem.
//!
//! From one batch of persistently exciting input-state data `(U_-, X_-, X_+)`
//! the LQR gain is parameterized as `K = U_- G` with `X_- G = I_n`, and `G` is
//! found by projected gradient descent on the closed-loop cost, using exact
//! gradients computed from the data alone.
//!
//! Modules:
//! * [`linalg`]: Lyapunov/Riccati solvers, pseudoinverses, projectors
//! * [`data`]: systems, trajectories, the data batch and its file format
//! * [`policy`] and [`optimizer`]: the objective, its derivatives and the iteration
//! * [`regularized`]: certainty-equivalence and robustness regularization
//! * [`certificates`]: convex reparameterization checks and numerical oracles
//! * [`experiment`]: configuration, runs, comparisons and the verify suite

pub mod certificates;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod optimizer;
pub mod policy;
pub mod regularized;

pub use data::{DataMatrices, SystemModel, Trajectory};
pub use error::{Error, Result};
pub use linalg::{Projector, SymMatrix};
pub use optimizer::{run_deepo, OptimizerConfig, OptimizerTrace, StepRule, StopReason};
pub use policy::{ClosedLoopEval, LqrProblem, PolicyG};
pub use regularized::Regularization;
