//! Server side: weighted aggregation and the server optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Tensor};

/// Weighted mean `Σ w_s·θ_s / Σ w_s`. Weights are normalized before summing
/// and members are summed in the given order, which callers keep ascending by
/// client id.
pub fn aggregate(members: &[(&[Tensor], f64)]) -> Result<Vec<Tensor>> {
    let total: f64 = members.iter().map(|(_, w)| *w).sum();
    if members.is_empty() || total <= 0.0 || total.is_nan() || members.iter().any(|(_, w)| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Aggregation(format!(
            "weights must be nonnegative with a positive sum, got total {total} over {} members",
            members.len()
        )));
    }
    let shapes: Vec<&[usize]> = members[0].0.iter().map(Tensor::shape).collect();
    for (theta, _) in members {
        if theta.len() != shapes.len() || theta.iter().zip(&shapes).any(|(t, s)| t.shape() != *s) {
            return Err(Error::Aggregation("member parameter shapes differ".into()));
        }
    }
    let mut out: Vec<Tensor> = members[0].0.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (theta, w) in members {
        let w = w / total;
        for (acc, t) in out.iter_mut().zip(theta.iter()) {
            *acc = acc.zip_map(t, "aggregate", |a, b| a + w * b)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServerKind {
    /// Adam on the pseudo-gradient `θ_prev − θ_agg`.
    FedAdam,
    /// `θ_next = θ_agg` (plain FedAvg).
    PassThrough,
}

pub const FEDADAM_BETA1: f64 = 0.9;
pub const FEDADAM_BETA2: f64 = 0.99;
pub const FEDADAM_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum ServerOptimizer {
    FedAdam(AdamState),
    PassThrough,
}

impl ServerOptimizer {
    pub fn new(kind: ServerKind, lr: f64, params: &[Tensor]) -> Self {
        match kind {
            ServerKind::PassThrough => ServerOptimizer::PassThrough,
            ServerKind::FedAdam => ServerOptimizer::FedAdam(AdamState::new(
                AdamConfig {
                    lr,
                    beta1: FEDADAM_BETA1,
                    beta2: FEDADAM_BETA2,
                    eps: FEDADAM_EPS,
                },
                params,
            )),
        }
    }

    /// Produces the next cluster model from the previous one and the
    /// aggregate of its members.
    pub fn step(&mut self, prev: &[Tensor], aggregated: Vec<Tensor>) -> Result<Vec<Tensor>> {
        match self {
            ServerOptimizer::PassThrough => Ok(aggregated),
            ServerOptimizer::FedAdam(state) => fedadam_step(prev, &aggregated, state),
        }
    }
}

/// Adam step on `θ_prev` using the pseudo-gradient `θ_prev − θ_agg`.
pub fn fedadam_step(prev: &[Tensor], aggregated: &[Tensor], state: &mut AdamState) -> Result<Vec<Tensor>> {
    if prev.len() != aggregated.len() {
        return Err(Error::Aggregation(format!(
            "{} previous tensors, {} aggregated",
            prev.len(),
            aggregated.len()
        )));
    }
    let delta = prev
        .iter()
        .zip(aggregated)
        .map(|(p, a)| p.sub(a))
        .collect::<Result<Vec<_>>>()?;
    let mut next = prev.to_vec();
    state.step(&mut next, &delta)?;
    Ok(next)
}
