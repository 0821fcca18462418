//! Conditional denoiser `x̂₀ = f(x_t, t, g)` and the diffusion losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gem::sampled_softmax_loss;
use crate::model::{DamVars, ModelParams};
use crate::numerics::{Tape, Tensor, Var};

/// Sinusoidal step encoding: slot `2i` is `sin(t / 10000^(2i/d))`, slot
/// `2i+1` the matching cosine.
pub fn step_embedding(t: usize, d: usize) -> Result<Vec<f64>> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("step embedding needs an even dimension, got {d}")));
    }
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let freq = 10000f64.powf((2 * i) as f64 / d as f64);
        let angle = t as f64 / freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// Tape handles for one denoiser pass.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserVars {
    pub x0_hat: Var,
    pub raw: Var,
}

/// Runs the MLP over `concat(x_t, step(t), flatten(g))`. With `spherical`
/// the output is projected onto the unit sphere; otherwise `x0_hat == raw`.
pub fn denoise(tape: &mut Tape, x_t: Var, t: usize, g: Var, dam: &DamVars, spherical: bool) -> Result<DenoiserVars> {
    let d = tape.value(x_t).len();
    let step = tape.constant(Tensor::vector(step_embedding(t, d)?));
    let input = tape.concat(&[x_t, step, g]);
    let width = tape.value(input).len();
    let input = tape.reshape(input, &[1, width])?;
    let h = tape.matmul(input, dam.w1)?;
    let h = tape.add_bias(h, dam.b1)?;
    let h = tape.tanh(h);
    let h = tape.matmul(h, dam.w2)?;
    let h = tape.add_bias(h, dam.b2)?;
    let h = tape.tanh(h);
    let out = tape.matmul(h, dam.w3)?;
    let out = tape.add_bias(out, dam.b3)?;
    let raw = tape.reshape(out, &[d])?;
    let x0_hat = if spherical { tape.l2_normalize(raw)? } else { raw };
    Ok(DenoiserVars { x0_hat, raw })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    pub x0_hat: Vec<f64>,
    pub raw: Vec<f64>,
}

/// Value-level denoiser pass on frozen parameters.
pub fn denoise_values(
    params: &ModelParams,
    x_t: &[f64],
    t: usize,
    guidance: &Tensor,
    spherical: bool,
) -> Result<DenoiserOutput> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let xv = tape.constant(Tensor::vector(x_t.to_vec()));
    let gv = tape.constant(guidance.clone());
    let out = denoise(&mut tape, xv, t, gv, &vars.dam, spherical)?;
    Ok(DenoiserOutput {
        x0_hat: tape.value(out.x0_hat).data().to_vec(),
        raw: tape.value(out.raw).data().to_vec(),
    })
}

/// `‖x0 − x̂0‖²`.
pub fn recon_loss(tape: &mut Tape, x0_hat: Var, x0: Var) -> Result<Var> {
    let diff = tape.sub(x0, x0_hat)?;
    Ok(tape.sum_squares(diff))
}

/// Sampled softmax of `x̂₀` against raw embeddings; row 0 of `candidates`
/// is the target item.
pub fn ssm_loss(tape: &mut Tape, x0_hat: Var, candidates: Var) -> Result<Var> {
    sampled_softmax_loss(tape, x0_hat, candidates)
}

/// Per-component loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub gem: f64,
    pub recon: f64,
    pub ssm: f64,
}

impl LossParts {
    /// `L_gem + λ·L_recon + μ·L_ssm`.
    pub fn total(&self, lambda: f64, mu: f64) -> f64 {
        total_loss(self.gem, self.recon, self.ssm, lambda, mu)
    }
}

pub fn total_loss(gem: f64, recon: f64, ssm: f64, lambda: f64, mu: f64) -> f64 {
    gem + lambda * recon + mu * ssm
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::gem::GemKind;
    use crate::model::ModelConfig;
    use crate::numerics::{dot, normalized};
    use crate::rng::{gaussian_vec, stream};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn params(d: usize, k: usize, seed: u64) -> ModelParams {
        ModelParams::init(
            ModelConfig {
                item_count: 10,
                dim: d,
                interests: k,
                max_len: 5,
                gem: GemKind::SelfAttentive,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn step_embedding_examples() {
        assert_eq!(step_embedding(0, 6).unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(step_embedding(7, 8).unwrap(), step_embedding(7, 8).unwrap());
        let e = step_embedding(1, 4).unwrap();
        let expected = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in e.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(matches!(step_embedding(1, 5), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_output_bias() {
        let mut p = params(4, 2, 1);
        for w in [&mut p.dam.w1, &mut p.dam.w2, &mut p.dam.w3] {
            *w = Tensor::zeros(w.shape());
        }
        p.dam.b3 = Tensor::vector(vec![3.0, 0.0, 4.0, 0.0]);
        let g = Tensor::new(vec![2, 4], vec![0.5; 8]).unwrap();
        let out = denoise_values(&p, &[1.0, 0.0, 0.0, 0.0], 3, &g, true).unwrap();
        assert_eq!(out.raw, vec![3.0, 0.0, 4.0, 0.0]);
        assert_abs_diff_eq!(out.x0_hat[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(out.x0_hat[2], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn x_t_block_zeroed_makes_output_independent_of_x_t() {
        let mut p = params(4, 2, 2);
        for r in 0..4 {
            p.dam.w1.row_mut(r).fill(0.0);
        }
        let g = Tensor::new(vec![2, 4], gaussian_vec(&mut stream(1, &[]), 8)).unwrap();
        let a = denoise_values(&p, &[1.0, 0.0, 0.0, 0.0], 5, &g, true).unwrap();
        let b = denoise_values(&p, &[0.0, -0.6, 0.8, 0.0], 5, &g, true).unwrap();
        assert_eq!(a, b);
    }

    /// Hand-scripted forward pass for d=2, K=1.
    #[test]
    fn matches_scripted_forward_pass() {
        let p = params(2, 1, 3);
        let x_t = [0.6, -0.8];
        let t = 4;
        let g = Tensor::vector(vec![0.3, 0.1]);
        let out = denoise_values(&p, &x_t, t, &Tensor::new(vec![1, 2], g.data().to_vec()).unwrap(), true).unwrap();

        let mut input = x_t.to_vec();
        input.extend([4f64.sin(), 4f64.cos()]);
        input.extend(g.data());
        let layer = |x: &[f64], w: &Tensor, b: &Tensor, act: bool| -> Vec<f64> {
            (0..w.cols())
                .map(|j| {
                    let s = b.data()[j] + (0..x.len()).map(|i| x[i] * w.row(i)[j]).sum::<f64>();
                    if act {
                        s.tanh()
                    } else {
                        s
                    }
                })
                .collect()
        };
        let h1 = layer(&input, &p.dam.w1, &p.dam.b1, true);
        let h2 = layer(&h1, &p.dam.w2, &p.dam.b2, true);
        let raw = layer(&h2, &p.dam.w3, &p.dam.b3, false);
        let n = (raw[0] * raw[0] + raw[1] * raw[1]).sqrt();
        for j in 0..2 {
            assert_abs_diff_eq!(out.raw[j], raw[j], epsilon = 1e-12);
            assert_abs_diff_eq!(out.x0_hat[j], raw[j] / n, epsilon = 1e-12);
        }
    }

    fn recon_value(a: &[f64], b: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(Tensor::vector(a.to_vec())), tape.constant(Tensor::vector(b.to_vec())));
        let l = recon_loss(&mut tape, av, bv).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn recon_loss_examples() {
        assert_eq!(recon_value(&[0.6, 0.8], &[0.6, 0.8]), 0.0);
        assert_abs_diff_eq!(recon_value(&[0.6, 0.8], &[-0.6, -0.8]), 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(recon_value(&[1.0, 0.0], &[0.0, 1.0]), 2.0, epsilon = 1e-15);
    }

    fn ssm_value(q: &[f64], cands: &[Vec<f64>]) -> f64 {
        let mut tape = Tape::new();
        let qv = tape.constant(Tensor::vector(q.to_vec()));
        let cv = tape.constant(Tensor::from_rows(cands).unwrap());
        let l = ssm_loss(&mut tape, qv, cv).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn ssm_loss_examples() {
        assert_abs_diff_eq!(
            ssm_value(&[0.6, 0.8], &[vec![1.0, 1.0], vec![1.0, 1.0]]),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert!(ssm_value(&[1.0, 0.0], &[vec![500.0, 0.0], vec![0.0, 3.0]]) < 1e-100);
        // shared oracle: direct log-sum-exp
        let q = [0.6, -0.8];
        let c = [vec![0.3, 0.2], vec![-1.0, 0.5], vec![0.7, 0.7]];
        let logits: Vec<f64> = c.iter().map(|r| dot(&q, r)).collect();
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        assert_abs_diff_eq!(ssm_value(&q, &c), lse - logits[0], epsilon = 1e-14);
    }

    #[test]
    fn ssm_gradient_matches_finite_differences() {
        let mut rng = stream(12, &[]);
        let c = Tensor::new(vec![5, 6], gaussian_vec(&mut rng, 30)).unwrap();
        let eval = |q: &[f64]| ssm_value(q, &(0..5).map(|r| c.row(r).to_vec()).collect::<Vec<_>>());
        for _ in 0..20 {
            let q = Tensor::vector(gaussian_vec(&mut rng, 6));
            let mut tape = Tape::new();
            let qv = tape.param(&q, 0);
            let cv = tape.constant(c.clone());
            let l = ssm_loss(&mut tape, qv, cv).unwrap();
            let g = tape.backward(l).unwrap().get(0).unwrap().to_dense(6);
            for i in 0..6 {
                let mut plus = q.data().to_vec();
                plus[i] += 1e-5;
                let mut minus = q.data().to_vec();
                minus[i] -= 1e-5;
                let fd = (eval(&plus) - eval(&minus)) / 2e-5;
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                assert!(rel < 1e-4, "rel {rel}");
            }
        }
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.5, 2.0, 3.0, 0.0, 0.0), 1.5);
        assert_abs_diff_eq!(total_loss(1.0, 2.0, 3.0, 0.1, 10.0), 31.2, epsilon = 1e-12);
        let parts = LossParts { gem: 1.0, recon: 2.0, ssm: 3.0 };
        assert_abs_diff_eq!(parts.total(0.1, 1.0), 4.2, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn x0_hat_is_unit_and_recon_is_two_minus_two_cos(seed in any::<u64>(), t in 1usize..=20) {
            let p = params(8, 3, seed);
            let mut rng = stream(seed, &[1]);
            let x_t = normalized(&gaussian_vec(&mut rng, 8)).unwrap();
            let g = Tensor::new(vec![3, 8], gaussian_vec(&mut rng, 24)).unwrap();
            let out = denoise_values(&p, &x_t, t, &g, true).unwrap();
            let n: f64 = out.x0_hat.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
            let x0 = normalized(&gaussian_vec(&mut rng, 8)).unwrap();
            let r = recon_value(&out.x0_hat, &x0);
            prop_assert!((r - (2.0 - 2.0 * dot(&out.x0_hat, &x0))).abs() < 1e-12);
            prop_assert_eq!(&out, &denoise_values(&p, &x_t, t, &g, true).unwrap());
        }

        #[test]
        fn total_loss_is_linear(g in -5.0f64..5.0, r in 0.0f64..4.0, s in 0.0f64..10.0,
                                lambda in 0.0f64..5.0, mu in 0.0f64..5.0, c in 0.1f64..3.0) {
            let base = total_loss(g, r, s, lambda, mu);
            prop_assert!((total_loss(g, r + c, s, lambda, mu) - base - lambda * c).abs() < 1e-9);
            prop_assert!((total_loss(g, r, s + c, lambda, mu) - base - mu * c).abs() < 1e-9);
            prop_assert!((total_loss(g + c, r, s, lambda, mu) - base - c).abs() < 1e-9);
        }
    }
}
