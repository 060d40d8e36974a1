//! Specialization and reuse penalties over per-feature groups of mask
//! probabilities.
//!
//! A feature's group is the set of its outgoing weights into the next layer.
//! With `G` ranging over all groups of all masked layers:
//!
//! * specialization `S1 = Σ_G (Σ_{i∈G} π_i)²`
//! * reuse `S2 = Σ_G sqrt(ε + Σ_{i∈G} π_i²)`, the group-lasso form that can
//!   drive a whole group to zero.
//!
//! Groups never overlap.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Smoothing inside the reuse square root; keeps an all-zero group
/// differentiable at a bias of at most 1e-6 per group.
pub const REUSE_EPSILON: f64 = 1e-12;

/// Partition of one layer's mask entries into per-source-feature groups.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSpec {
    pub layer_id: String,
    groups: Vec<Vec<usize>>,
    assignment: Arc<[usize]>,
}

impl GroupSpec {
    /// Groups must be non-empty, pairwise disjoint, and cover `0..entries`.
    pub fn new(layer_id: impl Into<String>, groups: Vec<Vec<usize>>, entries: usize) -> Result<Self> {
        let layer_id = layer_id.into();
        let mut assignment = vec![usize::MAX; entries];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Config(format!("`{layer_id}`: group {g} is empty")));
            }
            for &i in members {
                let slot = assignment.get_mut(i).ok_or_else(|| {
                    Error::Contract(format!(
                        "`{layer_id}`: group {g} index {i} outside 0..{entries}"
                    ))
                })?;
                if *slot != usize::MAX {
                    return Err(Error::Contract(format!(
                        "`{layer_id}`: entry {i} in groups {} and {g}",
                        *slot
                    )));
                }
                *slot = g;
            }
        }
        if let Some(missing) = assignment.iter().position(|&g| g == usize::MAX) {
            return Err(Error::Contract(format!(
                "`{layer_id}`: entry {missing} belongs to no group"
            )));
        }
        Ok(GroupSpec {
            layer_id,
            groups,
            assignment: assignment.into(),
        })
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Number of mask entries the spec partitions.
    pub fn entries(&self) -> usize {
        self.assignment.len()
    }

    /// `assignment()[i]` is the group of entry `i`.
    pub fn assignment(&self) -> &Arc<[usize]> {
        &self.assignment
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }
}

fn check_dims(dims: &[(&str, usize)]) -> Result<()> {
    match dims.iter().find(|(_, d)| *d == 0) {
        Some((name, _)) => Err(Error::Config(format!("{name} must be at least 1"))),
        None => Ok(()),
    }
}

/// Dense out×in weight (row-major): feature `p` owns column `p`.
pub fn build_group_spec_dense(
    layer_id: impl Into<String>,
    out_dim: usize,
    in_dim: usize,
) -> Result<GroupSpec> {
    check_dims(&[("out_dim", out_dim), ("in_dim", in_dim)])?;
    let groups = (0..in_dim)
        .map(|p| (0..out_dim).map(|o| o * in_dim + p).collect())
        .collect();
    GroupSpec::new(layer_id, groups, out_dim * in_dim)
}

/// Conv kernel out×in×kh×kw: input channel `c` owns every kernel entry that
/// reads it.
pub fn build_group_spec_conv(
    layer_id: impl Into<String>,
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
) -> Result<GroupSpec> {
    check_dims(&[("out_ch", out_ch), ("in_ch", in_ch), ("kh", kh), ("kw", kw)])?;
    let taps = kh * kw;
    let groups = (0..in_ch)
        .map(|c| {
            (0..out_ch)
                .flat_map(|o| {
                    let start = (o * in_ch + c) * taps;
                    start..start + taps
                })
                .collect()
        })
        .collect();
    GroupSpec::new(layer_id, groups, out_ch * in_ch * taps)
}

/// Dense layer reading a flattened C×H×W map: every spatial column of channel
/// `c` belongs to group `c`.
pub fn build_group_spec_channel_blocks(
    layer_id: impl Into<String>,
    out_dim: usize,
    channels: usize,
    block: usize,
) -> Result<GroupSpec> {
    check_dims(&[("out_dim", out_dim), ("channels", channels), ("block", block)])?;
    let in_dim = channels * block;
    let groups = (0..channels)
        .map(|c| {
            (0..out_dim)
                .flat_map(|o| {
                    let start = o * in_dim + c * block;
                    start..start + block
                })
                .collect()
        })
        .collect();
    GroupSpec::new(layer_id, groups, out_dim * in_dim)
}

/// Non-negative weights of the two penalties.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegWeights {
    pub alpha: f64,
    pub beta: f64,
}

/// Calibrated on the Colored MNIST MLP. S1 sums squared group totals over
/// groups of hundreds of entries, so its gradient dwarfs S2's at equal
/// weights; larger `alpha` empties whole layers under the default mask rate.
impl Default for RegWeights {
    fn default() -> Self {
        RegWeights { alpha: 1e-8, beta: 1e-5 }
    }
}

impl RegWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let rw = RegWeights { alpha, beta };
        rw.validate()?;
        Ok(rw)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("reg.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0
    }
}

fn check_coverage(tape: &Tape, probs: &[Var], specs: &[GroupSpec]) -> Result<()> {
    if probs.len() != specs.len() {
        return Err(Error::Contract(format!(
            "{} probability tensors but {} group specs",
            probs.len(),
            specs.len()
        )));
    }
    for (&p, spec) in probs.iter().zip(specs) {
        let n = tape.value(p).len();
        if n != spec.entries() {
            return Err(Error::Contract(format!(
                "group spec `{}` indexes {} entries, tensor has {n}",
                spec.layer_id,
                spec.entries()
            )));
        }
    }
    Ok(())
}

fn sum_layers(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let mut iter = terms.into_iter();
    let Some(mut total) = iter.next() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    for t in iter {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// `S1 = Σ_layers Σ_groups (Σ_{i∈group} π_i)²`.
pub fn specialization_penalty(tape: &mut Tape, probs: &[Var], specs: &[GroupSpec]) -> Result<Var> {
    check_coverage(tape, probs, specs)?;
    let mut terms = Vec::with_capacity(probs.len());
    for (&p, spec) in probs.iter().zip(specs) {
        let sums = tape.segment_sum(p, spec.assignment.clone(), spec.num_groups())?;
        let squared = tape.square(sums)?;
        terms.push(tape.sum(squared)?);
    }
    sum_layers(tape, terms)
}

/// `S2 = Σ_layers Σ_groups sqrt(ε + Σ_{i∈group} π_i²)`.
pub fn reuse_penalty(tape: &mut Tape, probs: &[Var], specs: &[GroupSpec]) -> Result<Var> {
    check_coverage(tape, probs, specs)?;
    let mut terms = Vec::with_capacity(probs.len());
    for (&p, spec) in probs.iter().zip(specs) {
        let squared = tape.square(p)?;
        let sums = tape.segment_sum(squared, spec.assignment.clone(), spec.num_groups())?;
        let smoothed = tape.add_scalar(sums, REUSE_EPSILON)?;
        let norms = tape.sqrt(smoothed)?;
        terms.push(tape.sum(norms)?);
    }
    sum_layers(tape, terms)
}

/// `α·S1 + β·S2`.
pub fn total_mask_regularizer(
    tape: &mut Tape,
    probs: &[Var],
    specs: &[GroupSpec],
    rw: &RegWeights,
) -> Result<Var> {
    rw.validate()?;
    let s1 = specialization_penalty(tape, probs, specs)?;
    let s2 = reuse_penalty(tape, probs, specs)?;
    let a = tape.scale(s1, rw.alpha)?;
    let b = tape.scale(s2, rw.beta)?;
    tape.add(a, b)
}
