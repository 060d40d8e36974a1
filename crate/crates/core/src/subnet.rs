//! The extracted subnetwork as a JSON artifact, plus structural diagnostics.
//!
//! Weights are stored unmasked next to a separate 0/1 mask, so nothing about
//! what was pruned is lost.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::extract_final_mask;
use crate::modreg::GroupSpec;
use crate::nn::{forward_layers, predict_in_chunks, LayerPlan, LayerView, Model, ModelConfig};
use crate::tensor::{Tape, Tensor, Var};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_MAX_UNITS: usize = 512;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArtifactMeta {
    pub seed: Option<u64>,
    /// SHA-256 of the resolved configuration text.
    pub config_hash: Option<String>,
    pub final_metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
    pub mask: Vec<u8>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetworkArtifact {
    pub format_version: u32,
    pub arch: ModelConfig,
    pub layers: Vec<LayerRecord>,
    #[serde(default)]
    pub meta: ArtifactMeta,
}

/// Snapshot of `model` with masks fixed to `l > 0`.
pub fn extract(model: &Model, meta: ArtifactMeta) -> SubnetworkArtifact {
    let layers = model
        .layer_names()
        .into_iter()
        .zip(&model.layers)
        .map(|(name, l)| LayerRecord {
            name,
            shape: l.param().weights.shape().to_vec(),
            weights: l.param().weights.data().to_vec(),
            mask: extract_final_mask(l.param()).data().iter().map(|&b| b as u8).collect(),
            bias: l.bias().data().to_vec(),
        })
        .collect();
    SubnetworkArtifact {
        format_version: FORMAT_VERSION,
        arch: model.config.clone(),
        layers,
        meta,
    }
}

/// Extracts and writes the artifact to `path`.
pub fn export_subnetwork(model: &Model, meta: ArtifactMeta, path: &Path) -> Result<SubnetworkArtifact> {
    let artifact = extract(model, meta);
    artifact.write(path)?;
    Ok(artifact)
}

pub fn load_subnetwork(path: &Path) -> Result<SubnetworkArtifact> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SubnetworkArtifact::from_json(&text)
}

/// SHA-256 hex digest, used to fingerprint configurations.
pub fn sha256_hex(text: &str) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(text.as_bytes())
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
}

impl SubnetworkArtifact {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("artifact serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: SubnetworkArtifact = serde_json::from_str(text).map_err(|e| Error::Format(format!("subnetwork artifact: {e}")))?;
        a.validate()?;
        Ok(a)
    }

    /// Checks version, layer layout against the architecture, and mask bits.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let plan = self
            .arch
            .layer_plan()
            .map_err(|e| Error::Format(format!("artifact architecture is invalid: {e}")))?;
        if plan.len() != self.layers.len() {
            return Err(Error::Format(format!(
                "architecture has {} masked layers, artifact stores {}",
                plan.len(),
                self.layers.len()
            )));
        }
        for (p, l) in plan.iter().zip(&self.layers) {
            let n: usize = p.weight_shape.iter().product();
            if l.shape != p.weight_shape {
                return Err(Error::Format(format!(
                    "layer `{}`: shape {:?}, architecture needs {:?}",
                    l.name, l.shape, p.weight_shape
                )));
            }
            if l.weights.len() != n || l.mask.len() != l.weights.len() {
                return Err(Error::Format(format!(
                    "layer `{}`: {} weights and {} mask bits for shape {:?}",
                    l.name,
                    l.weights.len(),
                    l.mask.len(),
                    l.shape
                )));
            }
            if let Some(bad) = l.mask.iter().find(|&&b| b > 1) {
                return Err(Error::Format(format!("layer `{}`: mask bit {bad} is not 0 or 1", l.name)));
            }
            if l.bias.len() != p.out_features() {
                return Err(Error::Format(format!(
                    "layer `{}`: {} biases for {} outputs",
                    l.name,
                    l.bias.len(),
                    p.out_features()
                )));
            }
        }
        Ok(())
    }

    fn plan(&self) -> Vec<LayerPlan> {
        self.arch.layer_plan().expect("validated artifact")
    }

    /// Logits of the frozen subnetwork.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let mut views = Vec::with_capacity(self.layers.len());
        for (p, l) in self.plan().iter().zip(&self.layers) {
            let w = tape.constant(Tensor::new(l.shape.clone(), l.weights.clone())?);
            let m = tape.constant(Tensor::new(
                l.shape.clone(),
                l.mask.iter().map(|&b| b as f64).collect(),
            )?);
            views.push(LayerView {
                kind: p.kind,
                weight: tape.mul(w, m)?,
                bias: tape.constant(Tensor::vector(l.bias.clone())),
            });
        }
        forward_layers(tape, &self.arch, &views, input)
    }

    pub fn predict_logits(&self, inputs: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        predict_in_chunks(inputs, n, chunk, self.arch.num_classes, |tape, x| self.forward(tape, x))
    }

    pub fn analyze(&self) -> AnalysisReport {
        let layers = self
            .plan()
            .iter()
            .zip(&self.layers)
            .map(|(p, l)| {
                let alive = l.mask.iter().filter(|&&b| b == 1).count();
                let spec = p.group_spec().expect("validated artifact");
                let reuse_counts = reuse_counts(&spec, &l.mask);
                let pruned_features = reuse_counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c == 0)
                    .map(|(i, _)| i)
                    .collect();
                LayerReport {
                    name: l.name.clone(),
                    alive,
                    total: l.mask.len(),
                    density: alive as f64 / l.mask.len() as f64,
                    reuse_counts,
                    pruned_features,
                    incoming_jaccard: incoming_jaccard(&l.mask, p.out_features()),
                }
            })
            .collect();
        AnalysisReport { layers }
    }

    /// Layered graph in DOT: nodes are the features feeding each layer plus
    /// the outputs, one edge per alive weight.
    pub fn dot_export(&self, max_units: usize) -> Result<String> {
        let plan = self.plan();
        let mut widths = vec![plan[0].in_features()];
        widths.extend(plan.iter().map(LayerPlan::out_features));
        let units: usize = widths.iter().sum();
        if units > max_units {
            return Err(Error::ResourceLimit(format!(
                "graph would have {units} units, limit is {max_units} (raise --max-units)"
            )));
        }
        let mut out = String::from("digraph subnet {\n  rankdir=LR;\n  node [shape=circle];\n");
        for (rank, &w) in widths.iter().enumerate() {
            out.push_str("  { rank=same;");
            for f in 0..w {
                write!(out, " \"{rank}/{f}\"").unwrap();
            }
            out.push_str(" }\n");
        }
        for (k, (p, l)) in plan.iter().zip(&self.layers).enumerate() {
            let spec = p.group_spec().expect("validated artifact");
            let per_out = l.mask.len() / p.out_features();
            for (i, &bit) in l.mask.iter().enumerate() {
                if bit == 1 {
                    let src = spec.assignment()[i];
                    let dst = i / per_out;
                    writeln!(out, "  \"{k}/{src}\" -> \"{}/{dst}\";", k + 1).unwrap();
                }
            }
        }
        out.push_str("}\n");
        Ok(out)
    }
}

fn reuse_counts(spec: &GroupSpec, mask: &[u8]) -> Vec<usize> {
    let mut counts = vec![0; spec.num_groups()];
    for (&g, &b) in spec.assignment().iter().zip(mask) {
        counts[g] += b as usize;
    }
    counts
}

/// Jaccard overlap of the alive incoming index sets of every pair of output
/// units. Two units with no alive inputs at all score 0.
fn incoming_jaccard(mask: &[u8], outputs: usize) -> Vec<Vec<f64>> {
    let per_out = mask.len() / outputs;
    let rows: Vec<&[u8]> = mask.chunks(per_out).collect();
    let sizes: Vec<usize> = rows.iter().map(|r| r.iter().filter(|&&b| b == 1).count()).collect();
    let mut m = vec![vec![0.0; outputs]; outputs];
    for a in 0..outputs {
        for b in a..outputs {
            let inter = rows[a].iter().zip(rows[b]).filter(|(&x, &y)| x == 1 && y == 1).count();
            let union = sizes[a] + sizes[b] - inter;
            let j = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            m[a][b] = j;
            m[b][a] = j;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub alive: usize,
    pub total: usize,
    pub density: f64,
    /// Alive outgoing entries of each input feature.
    pub reuse_counts: Vec<usize>,
    /// Input features with reuse count 0.
    pub pruned_features: Vec<usize>,
    /// `outputs × outputs` Jaccard overlap of incoming alive sets.
    pub incoming_jaccard: Vec<Vec<f64>>,
}

impl LayerReport {
    /// Mean off-diagonal Jaccard overlap.
    pub fn mean_overlap(&self) -> f64 {
        let n = self.incoming_jaccard.len();
        if n < 2 {
            return 0.0;
        }
        let total: f64 = (0..n)
            .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
            .map(|(a, b)| self.incoming_jaccard[a][b])
            .sum();
        total / (n * (n - 1)) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    pub layers: Vec<LayerReport>,
}

impl AnalysisReport {
    /// Alive fraction over every mask entry.
    pub fn overall_density(&self) -> f64 {
        let (a, t) = self.layers.iter().fold((0, 0), |(a, t), l| (a + l.alive, t + l.total));
        a as f64 / t as f64
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            writeln!(
                s,
                "layer {}: density {:.4} ({}/{} alive), pruned features {}/{}, mean incoming overlap {:.4}",
                l.name,
                l.density,
                l.alive,
                l.total,
                l.pruned_features.len(),
                l.reuse_counts.len(),
                l.mean_overlap()
            )
            .unwrap();
        }
        writeln!(s, "overall density {:.4}", self.overall_density()).unwrap();
        s
    }
}
