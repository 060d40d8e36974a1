//! ERM and IRMv1 risks and the full training objective
//! `risk (+ λ·IRM) + R + α·S1 + β·S2`.

use serde::{Deserialize, Serialize};

use crate::data::EnvironmentBatch;
use crate::error::{Error, Result};
use crate::masking::{mask_probability, MaskMode};
use crate::modreg::{reuse_penalty, specialization_penalty, GroupSpec, RegWeights};
use crate::nn::{l2_penalty, BoundModel, Model};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Base {
    Erm,
    Irm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub base: Base,
    /// Ignored for ERM.
    pub irm_lambda: f64,
    pub irm_anneal_steps: u64,
    pub reg: RegWeights,
    pub weight_decay: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            base: Base::Erm,
            irm_lambda: 1e4,
            irm_anneal_steps: 500,
            reg: RegWeights::default(),
            weight_decay: 0.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.reg.validate()?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "objective.weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.base == Base::Irm && !(self.irm_lambda >= 0.0 && self.irm_lambda.is_finite()) {
            return Err(Error::Config(format!(
                "objective.irm_lambda must be finite and >= 0, got {}",
                self.irm_lambda
            )));
        }
        Ok(())
    }

    /// Penalty weight in force at `step`: 1 during the warm-up, then λ.
    pub fn lambda_eff(&self, step: u64) -> f64 {
        if step >= self.irm_anneal_steps {
            self.irm_lambda
        } else {
            1.0
        }
    }
}

/// Mean cross-entropy of `logits` (batch × classes) against `labels`.
pub fn cross_entropy_risk(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// IRMv1: `Σ_e D_e²`, where `D_e` is the derivative of environment e's risk
/// with respect to a scalar multiplier on its logits, taken at 1.
pub fn irm_penalty(tape: &mut Tape, per_env: &[(Var, &[usize])]) -> Result<Var> {
    if per_env.is_empty() {
        return Err(Error::Data("IRM penalty needs at least one environment".into()));
    }
    let mut total: Option<Var> = None;
    for &(logits, labels) in per_env {
        if labels.is_empty() {
            return Err(Error::Data("IRM penalty got an empty environment".into()));
        }
        let d = tape.dummy_scale_gradient(logits, labels)?;
        let sq = tape.square(d)?;
        total = Some(match total {
            Some(t) => tape.add(t, sq)?,
            None => sq,
        });
    }
    Ok(total.expect("at least one environment"))
}

/// Every term of one objective evaluation, unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub risk: f64,
    pub irm: f64,
    pub l2: f64,
    pub s1: f64,
    pub s2: f64,
    /// λ in force for the IRM term (0 for ERM).
    pub lambda_eff: f64,
    /// Overall factor on the sum; `1/λ_eff` once λ_eff exceeds 1.
    pub scale: f64,
    pub total: f64,
}

impl Components {
    /// `scale · (risk + λ_eff·irm + l2 + α·S1 + β·S2)`.
    pub fn recombine(&self, reg: &RegWeights) -> f64 {
        self.scale
            * (self.risk + self.lambda_eff * self.irm + self.l2 + reg.alpha * self.s1 + reg.beta * self.s2)
    }
}

/// Output of [`total_objective`]: the scalar loss node and its breakdown.
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: Var,
    pub components: Components,
    /// Per-environment logits, in batch order.
    pub logits: Vec<Var>,
}

/// Runs one forward pass over all batches (one mask sample shared by the whole
/// step) and assembles the loss. ERM pools every example into a single mean;
/// IRM averages per-environment risks and adds the penalty. When λ_eff > 1 the
/// loss is divided by λ_eff.
#[allow(clippy::too_many_arguments)]
pub fn total_objective(
    tape: &mut Tape,
    model: &Model,
    bound: &BoundModel,
    batches: &[EnvironmentBatch],
    cfg: &ObjectiveConfig,
    specs: &[GroupSpec],
    mode: &MaskMode,
    step: u64,
) -> Result<Objective> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::Data("objective needs at least one environment batch".into()));
    }
    if let Some(b) = batches.iter().find(|b| b.is_empty()) {
        return Err(Error::Data(format!("environment `{}` gave an empty batch", b.env_id)));
    }

    let inputs = stack_rows(batches)?;
    let x = tape.constant(inputs);
    let logits = model.forward(tape, bound, x, mode)?;
    let mut per_env = Vec::with_capacity(batches.len());
    let mut start = 0;
    for b in batches {
        per_env.push(tape.narrow_rows(logits, start, b.len())?);
        start += b.len();
    }

    let (risk, irm, lambda_eff) = match cfg.base {
        Base::Erm => {
            let labels: Vec<usize> = batches.iter().flat_map(|b| b.labels.iter().copied()).collect();
            (cross_entropy_risk(tape, logits, &labels)?, None, 0.0)
        }
        Base::Irm => {
            let mut sum: Option<Var> = None;
            for (&l, b) in per_env.iter().zip(batches) {
                let r = cross_entropy_risk(tape, l, &b.labels)?;
                sum = Some(match sum {
                    Some(s) => tape.add(s, r)?,
                    None => r,
                });
            }
            let risk = tape.scale(sum.expect("non-empty"), 1.0 / batches.len() as f64)?;
            let pairs: Vec<(Var, &[usize])> = per_env
                .iter()
                .zip(batches)
                .map(|(&l, b)| (l, b.labels.as_slice()))
                .collect();
            let pen = irm_penalty(tape, &pairs)?;
            (risk, Some(pen), cfg.lambda_eff(step))
        }
    };

    let l2 = l2_penalty(tape, bound, cfg.weight_decay)?;
    let probs = bound
        .layers
        .iter()
        .map(|l| mask_probability(tape, l.mask_logits))
        .collect::<Result<Vec<_>>>()?;
    let s1 = specialization_penalty(tape, &probs, specs)?;
    let s2 = reuse_penalty(tape, &probs, specs)?;

    let mut loss = tape.add(risk, l2)?;
    if let Some(pen) = irm {
        let weighted = tape.scale(pen, lambda_eff)?;
        loss = tape.add(loss, weighted)?;
    }
    let a = tape.scale(s1, cfg.reg.alpha)?;
    let b = tape.scale(s2, cfg.reg.beta)?;
    loss = tape.add(loss, a)?;
    loss = tape.add(loss, b)?;
    let scale = if lambda_eff > 1.0 { 1.0 / lambda_eff } else { 1.0 };
    if scale != 1.0 {
        loss = tape.scale(loss, scale)?;
    }

    let value = |v: Var| tape.value(v).item();
    let components = Components {
        risk: value(risk),
        irm: irm.map_or(0.0, value),
        l2: value(l2),
        s1: value(s1),
        s2: value(s2),
        lambda_eff,
        scale,
        total: value(loss),
    };
    Ok(Objective {
        loss,
        components,
        logits: per_env,
    })
}

fn stack_rows(batches: &[EnvironmentBatch]) -> Result<Tensor> {
    let first = batches[0].inputs.shape();
    let mut data = Vec::with_capacity(batches.iter().map(|b| b.inputs.len()).sum());
    for b in batches {
        if b.inputs.shape()[1..] != first[1..] {
            return Err(Error::dim(
                "total_objective",
                format!(
                    "environment `{}` has inputs {:?}, expected rows of {:?}",
                    b.env_id,
                    b.inputs.shape(),
                    &first[1..]
                ),
            ));
        }
        data.extend_from_slice(b.inputs.data());
    }
    let mut shape = first.to_vec();
    shape[0] = batches.iter().map(EnvironmentBatch::len).sum();
    Tensor::new(shape, data)
}
