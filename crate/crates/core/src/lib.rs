//! Multi-agent graph patrolling: simulator, graph-network actor, critic,
//! MAPPO trainer, heuristic baselines and experiment tooling.

pub mod baselines;
pub mod critic;
pub mod env;
pub mod experiment;
pub mod graph;
pub mod policy;
pub mod trainer;
