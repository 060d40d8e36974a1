//! Joint Adam optimization of weights, biases and mask logits, with the
//! temperature schedule, evaluation and metrics logging.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::TrainConfig;
use crate::data::{epoch_order, Environment, EnvironmentBatch, Role};
use crate::error::{Error, Result};
use crate::masking::MaskMode;
use crate::nn::{collect_group_specs, init_parameters, Model};
use crate::objectives::{total_objective, Components};
use crate::seed::{derive, lane};
use crate::tensor::{Tape, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for a fixed list of parameters, each with its own learning
/// rate.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub lrs: Vec<f64>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(shapes: &[&[usize]], lrs: Vec<f64>) -> Self {
        assert_eq!(shapes.len(), lrs.len());
        OptimizerState {
            t: 0,
            lrs,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }
}

/// One Adam update. All gradients are checked before anything changes, so a
/// non-finite gradient leaves parameters and state untouched.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], names: &[String], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || names.len() != params.len() {
        return Err(Error::Contract(format!(
            "adam: {} params, {} grads, {} names, {} moment slots",
            params.len(),
            grads.len(),
            names.len(),
            state.m.len()
        )));
    }
    for (((p, g), name), m) in params.iter().zip(grads).zip(names).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("`{name}`: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: name.clone(),
                step: state.t + 1,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let lr = state.lrs[i];
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Geometric anneal from `tau0` to `tau_min` over `anneal_steps`, then flat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub tau_min: f64,
    pub anneal_steps: u64,
}

impl TemperatureSchedule {
    pub fn at(&self, step: u64) -> f64 {
        let frac = if self.anneal_steps == 0 {
            1.0
        } else {
            (step as f64 / self.anneal_steps as f64).min(1.0)
        };
        self.tau0 * (self.tau_min / self.tau0).powf(frac)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub risk: f64,
    pub irm: f64,
    pub l2: f64,
    pub s1: f64,
    pub s2: f64,
    pub temperature: f64,
    /// `(env_id, accuracy)` for every environment, train and test.
    pub accuracies: Vec<(String, f64)>,
    /// `(layer, fraction of mask logits > 0)`.
    pub densities: Vec<(String, f64)>,
}

impl MetricsRow {
    pub fn accuracy(&self, env_id: &str) -> Option<f64> {
        self.accuracies.iter().find(|(e, _)| e == env_id).map(|&(_, a)| a)
    }
}

/// CSV with header `step,risk,irm,l2,s1,s2,temperature,acc_<env>…,density_<layer>…`.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,risk,irm,l2,s1,s2,temperature");
    if let Some(first) = rows.first() {
        for (e, _) in &first.accuracies {
            write!(out, ",acc_{e}").unwrap();
        }
        for (l, _) in &first.densities {
            write!(out, ",density_{l}").unwrap();
        }
    }
    out.push('\n');
    for r in rows {
        write!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.risk, r.irm, r.l2, r.s1, r.s2, r.temperature
        )
        .unwrap();
        for (_, a) in &r.accuracies {
            write!(out, ",{a}").unwrap();
        }
        for (_, d) in &r.densities {
            write!(out, ",{d}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Fraction of argmax-correct predictions under deterministic masks; ties go
/// to the lowest class index.
pub fn evaluate(model: &Model, env: &Environment, batch_size: usize) -> Result<f64> {
    evaluate_prefix(model, env, batch_size, 0)
}

/// [`evaluate`] on the first `limit` examples (all when `limit` is 0).
pub fn evaluate_prefix(model: &Model, env: &Environment, batch_size: usize, limit: usize) -> Result<f64> {
    let n = if limit == 0 { env.len() } else { limit.min(env.len()) };
    let logits = model.predict_logits_prefix(&env.inputs, n, batch_size)?;
    let predictions = argmax_rows(&logits);
    let correct = predictions.iter().zip(&env.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / n as f64)
}

/// Row-wise argmax, first maximum wins.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Endless supply of equal-size batches from one environment: consecutive
/// seeded epochs, skipping an epoch's short tail unless the environment is
/// smaller than one batch.
struct BatchStream<'a> {
    env: &'a Environment,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchStream<'a> {
    fn new(env: &'a Environment, batch_size: usize, seed: u64) -> Self {
        BatchStream {
            env,
            batch_size: batch_size.min(env.len()),
            seed,
            epoch: 0,
            order: epoch_order(env, seed, 0),
            pos: 0,
        }
    }

    fn next_batch(&mut self) -> Result<EnvironmentBatch> {
        if self.pos + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.order = epoch_order(self.env, self.seed, self.epoch);
            self.pos = 0;
        }
        let idx = &self.order[self.pos..self.pos + self.batch_size];
        self.pos += self.batch_size;
        self.env.batch(idx)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
}

impl TrainOutcome {
    pub fn final_row(&self) -> &MetricsRow {
        self.metrics.last().expect("training logs at least one row")
    }
}

/// Builds the configured environments and trains on them.
pub fn train(cfg: &TrainConfig) -> Result<(TrainOutcome, Vec<Environment>)> {
    cfg.validate()?;
    let envs = cfg.data.build(cfg.train.seed)?;
    let outcome = train_on(cfg, &envs)?;
    Ok((outcome, envs))
}

/// Trains on prepared environments. Environments with role train supply one
/// batch each per step, in list order.
pub fn train_on(cfg: &TrainConfig, envs: &[Environment]) -> Result<TrainOutcome> {
    train_with_observer(cfg, envs, |_| {})
}

/// [`train_on`], calling `observe` with every metrics row as it is logged.
pub fn train_with_observer(
    cfg: &TrainConfig,
    envs: &[Environment],
    mut observe: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config()?;
    let objective = cfg.objective_config();
    let t = &cfg.train;
    let train_envs: Vec<&Environment> = envs.iter().filter(|e| e.role == Role::Train).collect();
    if train_envs.is_empty() {
        return Err(Error::Config("no environment with role train".into()));
    }
    for e in envs {
        if e.inputs.len() / e.len().max(1) != model_cfg.input_len() {
            return Err(Error::dim(
                "train",
                format!(
                    "environment `{}` has inputs {:?}, model expects {:?}",
                    e.env_id,
                    e.inputs.shape(),
                    model_cfg.input_shape
                ),
            ));
        }
    }

    let mut model = init_parameters(&model_cfg, t.seed)?;
    let specs = collect_group_specs(&model)?;
    let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
    let lrs: Vec<f64> = names
        .iter()
        .map(|n| {
            if n.ends_with(".mask_logits") {
                t.mask_lr
            } else {
                t.lr
            }
        })
        .collect();
    let mut state = {
        let params = model.named_parameters();
        let shapes: Vec<&[usize]> = params.iter().map(|(_, p)| p.shape()).collect();
        OptimizerState::new(&shapes, lrs)
    };
    let schedule = TemperatureSchedule {
        tau0: t.tau0,
        tau_min: t.tau_min,
        anneal_steps: cfg.tau_anneal_steps(),
    };
    let mut streams: Vec<BatchStream> = train_envs
        .iter()
        .map(|e| BatchStream::new(e, t.batch_size, t.seed))
        .collect();

    let mut metrics = Vec::new();
    for step in 0..t.steps {
        let batches = streams
            .iter_mut()
            .map(BatchStream::next_batch)
            .collect::<Result<Vec<_>>>()?;
        let temperature = schedule.at(step);
        let mode = MaskMode::stochastic(temperature, derive(t.seed, &[lane::MASK, step]))?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let obj = total_objective(&mut tape, &model, &bound, &batches, &objective, &specs, &mode, step)?;
        let grads = tape.backward(obj.loss)?;
        let grad_list = bound
            .vars()
            .into_iter()
            .map(|v| grads.wrt(v))
            .collect::<Result<Vec<_>>>()?;
        {
            let mut params = model.parameters_mut();
            adam_step(&mut params, &grad_list, &names, &mut state).map_err(|e| match e {
                Error::NonFiniteGradient { param, .. } => Error::NonFiniteGradient { param, step },
                other => other,
            })?;
        }

        let last = step + 1 == t.steps;
        if step % t.eval_interval == 0 || last {
            let limit = if last { 0 } else { t.eval_limit };
            let row = metrics_row(&model, envs, step, temperature, &obj.components, t.eval_batch_size, limit)?;
            observe(&row);
            metrics.push(row);
        }
    }
    Ok(TrainOutcome { model, metrics })
}

fn metrics_row(
    model: &Model,
    envs: &[Environment],
    step: u64,
    temperature: f64,
    c: &Components,
    batch_size: usize,
    limit: usize,
) -> Result<MetricsRow> {
    let accuracies = envs
        .iter()
        .map(|e| Ok((e.env_id.clone(), evaluate_prefix(model, e, batch_size, limit)?)))
        .collect::<Result<Vec<_>>>()?;
    let densities = model.layer_names().into_iter().zip(model.mask_densities()).collect();
    Ok(MetricsRow {
        step,
        risk: c.risk,
        irm: c.irm,
        l2: c.l2,
        s1: c.s1,
        s2: c.s2,
        temperature,
        accuracies,
        densities,
    })
}
