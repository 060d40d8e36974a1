//! Probabilistic binary weight masks.
//!
//! Each masked weight `w_i` carries an unconstrained logit `l_i`; the keep
//! probability is `π_i = σ(l_i)`. Training samples a hard 0/1 mask through a
//! Gumbel-Sigmoid relaxation with a straight-through estimator, so the forward
//! pass only ever sees binary masks while logits still receive gradient.
//! After training the mask is fixed to `l_i > 0`.

use rand::distr::Open01;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Initial logit, σ(2.1972) ≈ 0.9.
pub const INITIAL_MASK_LOGIT: f64 = 2.1972;

/// A weight tensor and the same-shape logits of its keep probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedParameter {
    pub name: String,
    pub weights: Tensor,
    pub mask_logits: Tensor,
}

impl MaskedParameter {
    pub fn new(name: impl Into<String>, weights: Tensor, mask_logits: Tensor) -> Result<Self> {
        let name = name.into();
        if weights.shape() != mask_logits.shape() {
            return Err(Error::dim(
                "masked_parameter",
                format!(
                    "`{name}`: weights {:?} vs mask logits {:?}",
                    weights.shape(),
                    mask_logits.shape()
                ),
            ));
        }
        Ok(MaskedParameter {
            name,
            weights,
            mask_logits,
        })
    }

    /// Mask logits start at [`INITIAL_MASK_LOGIT`].
    pub fn with_initial_logits(name: impl Into<String>, weights: Tensor) -> Self {
        let mask_logits = Tensor::full(weights.shape(), INITIAL_MASK_LOGIT);
        MaskedParameter {
            name: name.into(),
            weights,
            mask_logits,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskMode {
    /// Fresh Gumbel-Sigmoid sample per forward call. `stream` keys the noise.
    Stochastic { temperature: f64, stream: u64 },
    /// `l_i > 0`; consumes no randomness.
    Deterministic,
    /// The continuous relaxation itself, without binarizing. Smooth in the
    /// logits; used to verify the gradient path the straight-through
    /// estimator borrows.
    Relaxed { temperature: f64, stream: u64 },
}

impl MaskMode {
    pub fn stochastic(temperature: f64, stream: u64) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(MaskMode::Stochastic {
            temperature,
            stream,
        })
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "mask temperature must be positive and finite, got {temperature}"
        )))
    }
}

pub fn mask_probability(tape: &mut Tape, mask_logits: Var) -> Result<Var> {
    tape.sigmoid(mask_logits)
}

/// Logistic noise `log u - log(1 - u)`, `u ~ Uniform(0, 1)`: the difference
/// of two standard Gumbel draws, one uniform per entry.
pub fn logistic_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let u: f64 = rng.sample(Open01);
        (u / (1.0 - u)).ln()
    })
}

/// `σ((l + noise) / τ)` with the noise held fixed.
pub fn relaxed_mask_with_noise(
    tape: &mut Tape,
    mask_logits: Var,
    noise: Tensor,
    temperature: f64,
) -> Result<Var> {
    check_temperature(temperature)?;
    let noise = tape.constant(noise);
    let shifted = tape.add(mask_logits, noise)?;
    let scaled = tape.scale(shifted, 1.0 / temperature)?;
    tape.sigmoid(scaled)
}

pub fn sample_relaxed_mask<R: Rng + ?Sized>(
    tape: &mut Tape,
    mask_logits: Var,
    temperature: f64,
    rng: &mut R,
) -> Result<Var> {
    check_temperature(temperature)?;
    let noise = logistic_noise(tape.value(mask_logits).shape(), rng);
    relaxed_mask_with_noise(tape, mask_logits, noise, temperature)
}

/// Hard `x > 0.5` forward, identity backward.
pub fn binarize_straight_through(tape: &mut Tape, relaxed: Var) -> Result<Var> {
    tape.straight_through(relaxed)
}

/// The weights the network actually uses under `mode`.
pub fn effective_weights<R: Rng + ?Sized>(
    tape: &mut Tape,
    weights: Var,
    mask_logits: Var,
    mode: &MaskMode,
    rng: &mut R,
) -> Result<Var> {
    let mask = match *mode {
        MaskMode::Stochastic { temperature, .. } => {
            let relaxed = sample_relaxed_mask(tape, mask_logits, temperature, rng)?;
            binarize_straight_through(tape, relaxed)?
        }
        MaskMode::Deterministic => {
            let hard = binary_mask_from_logits(tape.value(mask_logits));
            tape.constant(hard)
        }
        MaskMode::Relaxed { temperature, .. } => sample_relaxed_mask(tape, mask_logits, temperature, rng)?,
    };
    tape.mul(weights, mask)
}

fn binary_mask_from_logits(logits: &Tensor) -> Tensor {
    logits.map(|l| if l > 0.0 { 1.0 } else { 0.0 })
}

/// Final binary mask: 1 iff `l_i > 0` (equivalently `π_i > 0.5`).
pub fn extract_final_mask(p: &MaskedParameter) -> Tensor {
    binary_mask_from_logits(&p.mask_logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::substream;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prob_of(logit: f64) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::vector(vec![logit]));
        let p = mask_probability(&mut tape, l).unwrap();
        tape.value(p).item()
    }

    #[test]
    fn probability_closed_forms() {
        assert_eq!(prob_of(0.0), 0.5);
        assert!((prob_of(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!((prob_of(20.0) - 1.0).abs() < 1e-8);
        assert!((prob_of(INITIAL_MASK_LOGIT) - 0.9).abs() < 1e-4);
    }

    fn relaxed_at(logit: f64, u: f64, temperature: f64) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::vector(vec![logit]));
        let noise = Tensor::vector(vec![(u / (1.0 - u)).ln()]);
        let s = relaxed_mask_with_noise(&mut tape, l, noise, temperature).unwrap();
        tape.value(s).item()
    }

    #[test]
    fn relaxed_sample_at_zero_noise() {
        assert_eq!(relaxed_at(0.0, 0.5, 1.0), 0.5);
        assert!((relaxed_at(2.0, 0.5, 1.0) - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::vector(vec![0.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                sample_relaxed_mask(&mut tape, l, t, &mut rng),
                Err(Error::Config(_))
            ));
        }
        assert!(MaskMode::stochastic(0.0, 1).is_err());
    }

    #[test]
    fn hard_sample_frequency_matches_probability() {
        // P(l + logistic > 0) = σ(l); 1e5 draws give a binomial sd below 0.0016.
        let mut rng = substream(99, &[1]);
        for logit in [-2.0, 0.0, 0.5, 3.0] {
            let n = 100_000;
            let mut tape = Tape::new();
            let l = tape.param(Tensor::full(&[n], logit));
            let s = sample_relaxed_mask(&mut tape, l, 0.7, &mut rng).unwrap();
            let m = binarize_straight_through(&mut tape, s).unwrap();
            let ones = tape.value(m).data().iter().filter(|&&v| v == 1.0).count();
            let freq = ones as f64 / n as f64;
            let expected = 1.0 / (1.0 + (-logit).exp());
            assert!((freq - expected).abs() < 0.01, "logit {logit}: {freq} vs {expected}");
            assert!(tape.value(m).data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn relaxed_sample_is_increasing_in_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = logistic_noise(&[64], &mut rng);
        for temperature in [5.0, 1.0, 0.1] {
            let mut tape = Tape::new();
            let l = tape.param(Tensor::from_fn(&[64], |i| -3.0 + 0.1 * i as f64));
            let s = relaxed_mask_with_noise(&mut tape, l, noise.clone(), temperature).unwrap();
            let total = tape.sum(s).unwrap();
            let g = tape.backward(total).unwrap();
            let z = tape.value(l).data().iter().zip(noise.data()).map(|(l, n)| (l + n) / temperature);
            for (d, z) in g.wrt(l).unwrap().data().iter().zip(z) {
                // Far in the tails σ'(z) underflows to exactly zero.
                if z.abs() < 30.0 {
                    assert!(*d > 0.0, "z = {z}");
                } else {
                    assert!(*d >= 0.0);
                }
            }
        }
    }

    #[test]
    fn effective_weights_deterministic() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![2.0, -3.0]));
        let l = tape.param(Tensor::vector(vec![1.0, -1.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let before = rng.clone();
        let e = effective_weights(&mut tape, w, l, &MaskMode::Deterministic, &mut rng).unwrap();
        assert_eq!(tape.value(e).data(), &[2.0, 0.0]);
        // No randomness consumed.
        assert_eq!(rng, before);
    }

    #[test]
    fn saturated_logits_keep_every_weight() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![2.0, -3.0, 0.5]));
        let l = tape.param(Tensor::full(&[3], 10.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = effective_weights(&mut tape, w, l, &MaskMode::Deterministic, &mut rng).unwrap();
        assert_eq!(tape.value(e).data(), &[2.0, -3.0, 0.5]);
    }

    #[test]
    fn strongly_negative_logits_prune_almost_surely() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 20_000;
        let mut tape = Tape::new();
        let w = tape.param(Tensor::full(&[n], 1.0));
        let l = tape.param(Tensor::full(&[n], -10.0));
        let mode = MaskMode::stochastic(1.0, 0).unwrap();
        let e = effective_weights(&mut tape, w, l, &mode, &mut rng).unwrap();
        let alive = tape.value(e).data().iter().filter(|&&v| v != 0.0).count();
        assert!((alive as f64 / n as f64) < 1e-3, "{alive}");
    }

    #[test]
    fn stochastic_weights_send_gradient_to_logits() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![2.0, -3.0]));
        let l = tape.param(Tensor::vector(vec![0.0, 0.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mode = MaskMode::stochastic(1.0, 0).unwrap();
        let e = effective_weights(&mut tape, w, l, &mode, &mut rng).unwrap();
        let s = tape.sum(e).unwrap();
        let g = tape.backward(s).unwrap();
        let gl = g.wrt(l).unwrap().data();
        // d/dl [w * ST(s)] = w * s(1-s)/τ, same sign as w.
        assert!(gl[0] > 0.0 && gl[1] < 0.0);
    }

    #[test]
    fn extraction_uses_logit_sign_with_ties_pruned() {
        let p = MaskedParameter::new(
            "layer",
            Tensor::vector(vec![1.0, 1.0, 1.0]),
            Tensor::vector(vec![0.3, -0.3, 0.0]),
        )
        .unwrap();
        let m = extract_final_mask(&p);
        assert_eq!(m.data(), &[1.0, 0.0, 0.0]);
        assert_eq!(extract_final_mask(&p), m);

        let mut tape = Tape::new();
        let w = tape.constant(p.weights.clone());
        let l = tape.constant(p.mask_logits.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = effective_weights(&mut tape, w, l, &MaskMode::Deterministic, &mut rng).unwrap();
        let support: Vec<f64> = tape
            .value(e)
            .data()
            .iter()
            .map(|&v| if v != 0.0 { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(support, m.data());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        assert!(MaskedParameter::new("x", Tensor::zeros(&[2, 3]), Tensor::zeros(&[3, 2])).is_err());
    }
}
