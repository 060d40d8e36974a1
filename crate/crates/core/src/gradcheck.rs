//! Central finite-difference verification of tape gradients, plus the
//! gradient/oracle suite behind `modnet gradcheck`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::EnvironmentBatch;
use crate::error::{Error, Result};
use crate::masking::{mask_probability, MaskMode};
use crate::modreg::{build_group_spec_conv, build_group_spec_dense, reuse_penalty, specialization_penalty, RegWeights};
use crate::nn::{collect_group_specs, init_parameters, BoundLayer, BoundModel, ModelConfig};
use crate::objectives::{irm_penalty, total_objective, Base, ObjectiveConfig};
use crate::tensor::{Padding, Tape, Tensor, Var};

/// Max over entries of `|analytic - central| / max(1, |analytic|)` for a scalar
/// function of one tensor.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Same as [`finite_difference_check`], jointly over several input tensors.
pub fn finite_difference_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_with_sign(f, xs, eps, 1.0)
}

/// `sign` multiplies the analytic gradient; -1 simulates a backward pass with
/// a flipped sign.
fn check_with_sign<F>(f: F, xs: &[Tensor], eps: f64, sign: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.wrt(v).cloned())
        .collect::<Result<_>>()?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut worst = 0.0_f64;
    let mut probe = xs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..xs[t].len() {
            let original = xs[t].data()[i];
            probe[t].data_mut()[i] = original + eps;
            let plus = eval(&probe)?;
            probe[t].data_mut()[i] = original - eps;
            let minus = eval(&probe)?;
            probe[t].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = sign * grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err.is_nan() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Deliberate defects for exercising the suite itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the gradient of the reuse penalty S2.
    S2SignFlip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            eps: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub passed: bool,
}

type Check = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// `Σ op(x) ⊙ r` with a fixed random `r`, so every output entry matters.
fn weighted(rng: &mut ChaCha8Rng, op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Check {
    let seed: u64 = rng.random();
    Box::new(move |t: &mut Tape, xs: &[Var]| {
        let y = op(t, xs)?;
        let shape = t.value(y).shape().to_vec();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0)));
        let p = t.mul(y, w)?;
        t.sum(p)
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values at least `gap` away from zero, for kinks at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(gap..2.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Finite-difference checks of every tape op, both regularizers, the IRM
/// penalty and the full objective on a 6→8→3 masked MLP with batch 4.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cases: Vec<(String, Check, Vec<Tensor>, f64)> = Vec::new();
    let mut op = |name: &str, check: Check, inputs: Vec<Tensor>| cases.push((format!("op:{name}"), check, inputs, 1.0));

    let a = uniform(&mut rng, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut rng, &[4], -2.0, 2.0);
    op("add", weighted(&mut rng, |t, x| t.add(x[0], x[1])), vec![a.clone(), b.clone()]);
    op("sub", weighted(&mut rng, |t, x| t.sub(x[0], x[1])), vec![a.clone(), b.clone()]);
    op("mul", weighted(&mut rng, |t, x| t.mul(x[0], x[1])), vec![a.clone(), b]);
    op("scale", weighted(&mut rng, |t, x| t.scale(x[0], -1.7)), vec![a.clone()]);
    op("add_scalar", weighted(&mut rng, |t, x| t.add_scalar(x[0], 0.3)), vec![a.clone()]);
    let m = uniform(&mut rng, &[4, 2], -2.0, 2.0);
    op("matmul", weighted(&mut rng, |t, x| t.matmul(x[0], x[1])), vec![a.clone(), m]);
    let n = uniform(&mut rng, &[5, 4], -2.0, 2.0);
    op("matmul_nt", weighted(&mut rng, |t, x| t.matmul_nt(x[0], x[1])), vec![a.clone(), n]);
    let img = uniform(&mut rng, &[2, 2, 5, 5], -2.0, 2.0);
    let k = uniform(&mut rng, &[3, 2, 3, 3], -2.0, 2.0);
    let kb = uniform(&mut rng, &[3], -2.0, 2.0);
    op(
        "conv2d_same",
        weighted(&mut rng, |t, x| t.conv2d(x[0], x[1], Some(x[2]), Padding::Same)),
        vec![img.clone(), k.clone(), kb],
    );
    op("conv2d_valid", weighted(&mut rng, |t, x| t.conv2d(x[0], x[1], None, Padding::Valid)), vec![img, k]);
    op("relu", weighted(&mut rng, |t, x| t.relu(x[0])), vec![away_from_zero(&mut rng, &[3, 4], 0.05)]);
    op("sigmoid", weighted(&mut rng, |t, x| t.sigmoid(x[0])), vec![a.clone()]);
    op("square", weighted(&mut rng, |t, x| t.square(x[0])), vec![a.clone()]);
    op("sqrt", weighted(&mut rng, |t, x| t.sqrt(x[0])), vec![uniform(&mut rng, &[3, 4], 0.2, 2.0)]);
    op("sum", weighted(&mut rng, |t, x| t.sum(x[0])), vec![a.clone()]);
    op("sum_axis", weighted(&mut rng, |t, x| t.sum_axis(x[0], 1)), vec![a.clone()]);
    op("mean", weighted(&mut rng, |t, x| t.mean(x[0])), vec![a.clone()]);
    // A permutation of well-separated values keeps every pooling window's max unique.
    let mut vals: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| i as f64 * 0.05 - 2.0).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    op("max_pool2x2", weighted(&mut rng, |t, x| t.max_pool2x2(x[0])), vec![Tensor::new(vec![2, 3, 4, 4], vals)?]);
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let l2 = labels.clone();
    op("softmax_cross_entropy", Box::new(move |t, x| t.softmax_cross_entropy(x[0], &labels)), vec![a.clone()]);
    op("dummy_scale_gradient", Box::new(move |t, x| t.dummy_scale_gradient(x[0], &l2)), vec![a.clone()]);
    op("reshape", weighted(&mut rng, |t, x| t.reshape(x[0], &[2, 6])), vec![a.clone()]);
    op("concat", weighted(&mut rng, |t, x| t.concat(&[x[0], x[1]], 0)), vec![a.clone(), uniform(&mut rng, &[2, 4], -2.0, 2.0)]);
    op("narrow_rows", weighted(&mut rng, |t, x| t.narrow_rows(x[0], 1, 2)), vec![a.clone()]);
    let assignment: Arc<[usize]> = (0..12).map(|i| i % 5).collect::<Vec<_>>().into();
    op("segment_sum", weighted(&mut rng, move |t, x| t.segment_sum(x[0], assignment.clone(), 5)), vec![a]);

    // Regularizers through σ on the logits, dense and conv grouping together.
    let specs = vec![build_group_spec_dense("d", 3, 4)?, build_group_spec_conv("c", 2, 3, 3, 3)?];
    let logits = vec![uniform(&mut rng, &[3, 4], -3.0, 3.0), uniform(&mut rng, &[2, 3, 3, 3], -3.0, 3.0)];
    let s1_specs = specs.clone();
    cases.push((
        "modreg:S1".into(),
        Box::new(move |t, x| {
            let p = x.iter().map(|&v| mask_probability(t, v)).collect::<Result<Vec<_>>>()?;
            specialization_penalty(t, &p, &s1_specs)
        }),
        logits.clone(),
        1.0,
    ));
    let s2_sign = if opts.fault == Some(Fault::S2SignFlip) { -1.0 } else { 1.0 };
    cases.push((
        "modreg:S2".into(),
        Box::new(move |t, x| {
            let p = x.iter().map(|&v| mask_probability(t, v)).collect::<Result<Vec<_>>>()?;
            reuse_penalty(t, &p, &specs)
        }),
        logits,
        s2_sign,
    ));

    let irm_labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
    cases.push((
        "objectives:irm_penalty".into(),
        Box::new(move |t, x| {
            let e0 = t.narrow_rows(x[0], 0, 2)?;
            let e1 = t.narrow_rows(x[0], 2, 3)?;
            irm_penalty(t, &[(e0, &irm_labels[..2]), (e1, &irm_labels[2..])])
        }),
        vec![uniform(&mut rng, &[5, 3], -2.0, 2.0)],
        1.0,
    ));

    for (name, base, mode) in [
        ("objective:erm_deterministic", Base::Erm, MaskMode::Deterministic),
        ("objective:irm_deterministic", Base::Irm, MaskMode::Deterministic),
        ("objective:irm_relaxed", Base::Irm, MaskMode::Relaxed { temperature: 0.7, stream: opts.seed }),
    ] {
        let (check, inputs) = full_objective_case(&mut rng, base, mode)?;
        cases.push((name.into(), check, inputs, 1.0));
    }

    cases
        .into_iter()
        .map(|(name, f, inputs, sign)| {
            let max_error = check_with_sign(f, &inputs, opts.eps, sign)?;
            Ok(CheckResult {
                passed: max_error < opts.tolerance,
                name,
                max_error,
            })
        })
        .collect()
}

/// Risk + IRM + R + α·S1 + β·S2 on a 6→8→3 masked MLP, batch 4 per
/// environment, as a function of every weight, logit and bias.
fn full_objective_case(rng: &mut ChaCha8Rng, base: Base, mode: MaskMode) -> Result<(Check, Vec<Tensor>)> {
    let mut model = init_parameters(&ModelConfig::mlp(&[6], &[8], 3), rng.random())?;
    for l in &mut model.layers {
        // Logits spread around 0 but clear of it, so the hard mask is mixed
        // and no finite-difference probe crosses the threshold.
        let shape = l.param().mask_logits.shape().to_vec();
        l.param_mut().mask_logits = away_from_zero(rng, &shape, 0.1);
        let bias_len = l.bias().len();
        *l.bias_mut() = uniform(rng, &[bias_len], -0.5, 0.5);
    }
    let specs = collect_group_specs(&model)?;
    let batches: Vec<EnvironmentBatch> = (0..2)
        .map(|e| EnvironmentBatch {
            env_id: format!("e{e}"),
            inputs: uniform(rng, &[4, 6], -2.0, 2.0),
            labels: (0..4).map(|_| rng.random_range(0..3)).collect(),
        })
        .collect();
    let cfg = ObjectiveConfig {
        base,
        irm_lambda: 10.0,
        irm_anneal_steps: 0,
        reg: RegWeights { alpha: 0.05, beta: 0.1 },
        weight_decay: 0.01,
    };
    let inputs: Vec<Tensor> = model.named_parameters().into_iter().map(|(_, t)| t.clone()).collect();
    let check: Check = Box::new(move |t, x| {
        let bound = BoundModel {
            layers: x
                .chunks(3)
                .map(|c| BoundLayer {
                    weights: c[0],
                    mask_logits: c[1],
                    bias: c[2],
                })
                .collect(),
        };
        Ok(total_objective(t, &model, &bound, &batches, &cfg, &specs, &mode, 1)?.loss)
    });
    Ok((check, inputs))
}
