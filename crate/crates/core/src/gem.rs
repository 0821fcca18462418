//! Guidance extraction: turns a behavior sequence into `K` interest vectors.
//!
//! Two extractors are provided. The rule-based one keeps the embeddings of the
//! latest `K` items. The self-attentive one scores every position with a
//! two-layer tanh MLP over `H + P`, softmaxes each interest column over the
//! sequence, and takes `g = Aᵀ H` over the raw encoded sequence `H`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GemVars, ModelParams};
use crate::numerics::{dot, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GemKind {
    #[default]
    SelfAttentive,
    RuleBased,
}

impl std::str::FromStr for GemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self_attentive" => Ok(Self::SelfAttentive),
            "rule_based" => Ok(Self::RuleBased),
            other => Err(Error::Config(format!("unknown gem kind `{other}`"))),
        }
    }
}

/// Encoded history: `h` is `H` (N×d), `hp` is `H + P`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub h: Var,
    pub hp: Var,
}

pub fn encode_history(tape: &mut Tape, table: Var, positional: Var, history: &[usize]) -> Result<Encoded> {
    let max_len = tape.value(positional).rows();
    if history.is_empty() {
        return Err(Error::Contract("empty history".into()));
    }
    if history.len() > max_len {
        return Err(Error::Contract(format!(
            "history of length {} exceeds max_len {max_len}",
            history.len()
        )));
    }
    let h = tape.gather(table, history)?;
    let positions: Vec<usize> = (0..history.len()).collect();
    let p = tape.gather(positional, &positions)?;
    let hp = tape.add(h, p)?;
    Ok(Encoded { h, hp })
}

/// Tape handles for an extracted guidance sequence.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceVars {
    /// K×d interests.
    pub g: Var,
    /// N×K attention, self-attentive extraction only.
    pub attention: Option<Var>,
}

pub fn self_attentive_guidance(tape: &mut Tape, encoded: Encoded, params: &GemVars) -> Result<GuidanceVars> {
    let hidden = tape.matmul(encoded.hp, params.w1)?;
    let hidden = tape.add_bias(hidden, params.b1)?;
    let hidden = tape.tanh(hidden);
    let scores = tape.matmul(hidden, params.w2)?;
    let scores = tape.add_bias(scores, params.b2)?;
    // each interest attends over the sequence positions
    let attention = tape.softmax(scores, 0)?;
    let at = tape.transpose(attention)?;
    let g = tape.matmul(at, encoded.h)?;
    Ok(GuidanceVars {
        g,
        attention: Some(attention),
    })
}

/// Indices of the latest `k` items, left-padded with the earliest item when
/// the history is shorter than `k`.
pub fn rule_based_slice(history: &[usize], k: usize) -> Result<Vec<usize>> {
    let first = *history
        .first()
        .ok_or_else(|| Error::Contract("empty history".into()))?;
    if history.len() >= k {
        return Ok(history[history.len() - k..].to_vec());
    }
    let mut out = vec![first; k - history.len()];
    out.extend_from_slice(history);
    Ok(out)
}

pub fn rule_based_guidance(tape: &mut Tape, table: Var, history: &[usize], k: usize) -> Result<GuidanceVars> {
    let ids = rule_based_slice(history, k)?;
    Ok(GuidanceVars {
        g: tape.gather(table, &ids)?,
        attention: None,
    })
}

/// Argmax of `g[k]·target`, lowest index on ties.
pub fn select_guidance(g: &Tensor, target: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for k in 0..g.rows() {
        let s = dot(g.row(k), target);
        if s > best_score {
            best = k;
            best_score = s;
        }
    }
    best
}

/// `-log(exp(q·c₀) / Σ_j exp(q·c_j))` where row 0 of `candidates` is the
/// positive and the rest are negatives.
pub fn sampled_softmax_loss(tape: &mut Tape, query: Var, candidates: Var) -> Result<Var> {
    let d = tape.value(query).len();
    let q = tape.reshape(query, &[d, 1])?;
    let logits = tape.matmul(candidates, q)?;
    let n = tape.value(logits).len();
    let logits = tape.reshape(logits, &[n])?;
    tape.sampled_softmax(logits)
}

/// The guidance loss for one instance: sampled softmax of the selected
/// interest against the target and its negatives.
pub fn gem_loss(tape: &mut Tape, g_u: Var, candidates: Var) -> Result<Var> {
    sampled_softmax_loss(tape, g_u, candidates)
}

/// Value-level guidance for serving and inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSequence {
    pub g: Tensor,
    pub attention: Option<Tensor>,
    pub selected_index: Option<usize>,
}

impl GuidanceSequence {
    /// Runs the configured extractor on frozen parameters.
    pub fn extract(params: &ModelParams, history: &[usize]) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let g = build_guidance(&mut tape, params, vars.item_embedding, vars.positional, &vars.gem, history)?;
        Ok(Self {
            g: tape.value(g.g).clone(),
            attention: g.attention.map(|a| tape.value(a).clone()),
            selected_index: None,
        })
    }

    /// Marks the interest most similar to `target`.
    pub fn select(mut self, target: &[f64]) -> Self {
        self.selected_index = Some(select_guidance(&self.g, target));
        self
    }
}

/// Guidance using whichever extractor `params.config.gem` names.
pub fn build_guidance(
    tape: &mut Tape,
    params: &ModelParams,
    table: Var,
    positional: Var,
    gem: &GemVars,
    history: &[usize],
) -> Result<GuidanceVars> {
    match params.config.gem {
        GemKind::SelfAttentive => {
            let enc = encode_history(tape, table, positional, history)?;
            self_attentive_guidance(tape, enc, gem)
        }
        GemKind::RuleBased => rule_based_guidance(tape, table, history, params.config.interests),
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::matmul_values;
    use crate::rng::{gaussian_vec, stream};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn toy_params(kind: GemKind, seed: u64) -> ModelParams {
        ModelParams::init(
            ModelConfig {
                item_count: 12,
                dim: 4,
                interests: 3,
                max_len: 6,
                gem: kind,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn encode_with_zero_positional_is_raw_lookup() {
        let table = t(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let pos = Tensor::zeros(&[4, 2]);
        let mut tape = Tape::new();
        let (tv, pv) = (tape.frozen(&table), tape.frozen(&pos));
        let enc = encode_history(&mut tape, tv, pv, &[2, 0]).unwrap();
        assert_eq!(tape.value(enc.hp).data(), &[5.0, 6.0, 1.0, 2.0]);
        let one = encode_history(&mut tape, tv, pv, &[1]).unwrap();
        assert_eq!(tape.value(one.hp).shape(), &[1, 2]);
        assert!(matches!(encode_history(&mut tape, tv, pv, &[3]), Err(Error::Index { .. })));
        assert!(encode_history(&mut tape, tv, pv, &[0; 5]).is_err());
    }

    #[test]
    fn encode_tiny_tables_by_hand() {
        let table = t(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, -1.0]]);
        let pos = t(&[&[0.1, 0.2], &[0.3, 0.4], &[0.5, 0.6]]);
        let mut tape = Tape::new();
        let (tv, pv) = (tape.frozen(&table), tape.frozen(&pos));
        let enc = encode_history(&mut tape, tv, pv, &[2, 0, 1]).unwrap();
        let expected = [2.1, -0.8, 1.3, 0.4, 0.5, 1.6];
        for (a, b) in tape.value(enc.hp).data().iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_eq!(tape.value(enc.h).data(), &[2.0, -1.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn single_position_attention_is_all_ones() {
        let p = toy_params(GemKind::SelfAttentive, 3);
        let gs = GuidanceSequence::extract(&p, &[5]).unwrap();
        assert_eq!(gs.attention.as_ref().unwrap().data(), &[1.0, 1.0, 1.0]);
        for k in 0..3 {
            assert_eq!(gs.g.row(k), p.item_embedding.row(5));
        }
    }

    #[test]
    fn zero_output_layer_gives_mean_of_rows() {
        let mut p = toy_params(GemKind::SelfAttentive, 4);
        p.gem.w2 = Tensor::zeros(p.gem.w2.shape());
        let hist = [1, 7, 3, 3];
        let gs = GuidanceSequence::extract(&p, &hist).unwrap();
        for j in 0..4 {
            let mean: f64 = hist.iter().map(|&i| p.item_embedding.row(i)[j]).sum::<f64>() / 4.0;
            for k in 0..3 {
                assert_abs_diff_eq!(gs.g.row(k)[j], mean, epsilon = 1e-15);
            }
        }
    }

    /// Independent matrix script for d=2, N=3, K=2 with hand-set weights.
    #[test]
    fn self_attentive_matches_scripted_matrices() {
        let d = 2;
        let mut p = ModelParams::init(
            ModelConfig {
                item_count: 4,
                dim: d,
                interests: 2,
                max_len: 3,
                gem: GemKind::SelfAttentive,
            },
            0,
        )
        .unwrap();
        p.item_embedding = t(&[&[0.5, -0.2], &[0.1, 0.9], &[-0.7, 0.3], &[0.4, 0.4]]);
        p.positional = t(&[&[0.01, 0.02], &[-0.03, 0.05], &[0.0, -0.1]]);
        p.gem.w1 = Tensor::new(vec![2, 8], (0..16).map(|i| ((i as f64) * 0.37).sin()).collect()).unwrap();
        p.gem.b1 = Tensor::vector((0..8).map(|i| 0.05 * i as f64 - 0.2).collect());
        p.gem.w2 = Tensor::new(vec![8, 2], (0..16).map(|i| ((i as f64) * 0.91).cos()).collect()).unwrap();
        p.gem.b2 = Tensor::vector(vec![0.3, -0.1]);
        let hist = [2, 0, 1];
        let gs = GuidanceSequence::extract(&p, &hist).unwrap();

        // script
        let h: Vec<Vec<f64>> = hist.iter().map(|&i| p.item_embedding.row(i).to_vec()).collect();
        let hp: Vec<Vec<f64>> = (0..3)
            .map(|r| (0..2).map(|c| h[r][c] + p.positional.row(r)[c]).collect())
            .collect();
        let mut scores = [[0.0f64; 2]; 3];
        for r in 0..3 {
            let mut hidden = [0.0f64; 8];
            for (j, hv) in hidden.iter_mut().enumerate() {
                let mut s = p.gem.b1.data()[j];
                for c in 0..2 {
                    s += hp[r][c] * p.gem.w1.data()[c * 8 + j];
                }
                *hv = s.tanh();
            }
            for k in 0..2 {
                let mut s = p.gem.b2.data()[k];
                for j in 0..8 {
                    s += hidden[j] * p.gem.w2.data()[j * 2 + k];
                }
                scores[r][k] = s;
            }
        }
        for k in 0..2 {
            let z: f64 = (0..3).map(|r| scores[r][k].exp()).sum();
            let a: Vec<f64> = (0..3).map(|r| scores[r][k].exp() / z).collect();
            for c in 0..2 {
                let g: f64 = (0..3).map(|r| a[r] * h[r][c]).sum();
                assert_abs_diff_eq!(gs.g.row(k)[c], g, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn rule_based_slicing_and_padding() {
        let hist: Vec<usize> = (0..10).collect();
        assert_eq!(rule_based_slice(&hist, 4).unwrap(), vec![6, 7, 8, 9]);
        assert_eq!(rule_based_slice(&[3, 8], 4).unwrap(), vec![3, 3, 3, 8]);
        assert!(rule_based_slice(&[], 4).is_err());

        let p = toy_params(GemKind::RuleBased, 1);
        let mut rng = stream(2, &[]);
        for _ in 0..20 {
            use rand::Rng;
            let len = rng.random_range(1..=6);
            let hist: Vec<usize> = (0..len).map(|_| rng.random_range(0..12)).collect();
            let gs = GuidanceSequence::extract(&p, &hist).unwrap();
            assert!(gs.attention.is_none());
            let ids = rule_based_slice(&hist, 3).unwrap();
            for (k, id) in ids.iter().enumerate() {
                assert_eq!(gs.g.row(k), p.item_embedding.row(*id));
            }
        }
    }

    #[test]
    fn selection_cases() {
        let g = t(&[&[1.0, 0.0]]);
        assert_eq!(select_guidance(&g, &[-5.0, 2.0]), 0);
        let g = t(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(select_guidance(&g, &[0.5, 0.5]), 0);
        let mut rng = stream(8, &[]);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..4).map(|_| gaussian_vec(&mut rng, 5)).collect();
            let target = gaussian_vec(&mut rng, 5);
            let scores: Vec<f64> = rows.iter().map(|r| dot(r, &target)).collect();
            let brute = (0..4).fold(0, |b, k| if scores[k] > scores[b] { k } else { b });
            assert_eq!(select_guidance(&Tensor::from_rows(&rows).unwrap(), &target), brute);
        }
    }

    fn loss_value(q: &[f64], cands: &[Vec<f64>]) -> f64 {
        let qt = Tensor::vector(q.to_vec());
        let ct = Tensor::from_rows(cands).unwrap();
        let mut tape = Tape::new();
        let (qv, cv) = (tape.constant(qt), tape.constant(ct));
        let l = gem_loss(&mut tape, qv, cv).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn gem_loss_examples() {
        assert_abs_diff_eq!(
            loss_value(&[0.3, -0.2], &[vec![1.0, 2.0], vec![1.0, 2.0]]),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        let l = loss_value(&[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(l, -(e / (e + 1.0 + 1.0 / e)).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(l, 0.40761, epsilon = 1e-5);
        let far = loss_value(&[100.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(far < 1e-40);
    }

    #[test]
    fn gem_loss_rejects_non_finite_logits() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::vector(vec![f64::INFINITY, 0.0]));
        let c = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert!(matches!(gem_loss(&mut tape, q, c), Err(Error::NonFinite(_))));
    }

    #[test]
    fn k_one_has_no_selection_effect() {
        let p = ModelParams::init(
            ModelConfig {
                item_count: 10,
                dim: 4,
                interests: 1,
                max_len: 5,
                gem: GemKind::SelfAttentive,
            },
            6,
        )
        .unwrap();
        let gs = GuidanceSequence::extract(&p, &[1, 2, 3]).unwrap().select(&[1.0, -1.0, 0.5, 0.0]);
        assert_eq!(gs.selected_index, Some(0));
        assert_eq!(gs.g.rows(), 1);
    }

    proptest! {
        #[test]
        fn attention_columns_are_distributions(seed in any::<u64>(), len in 1usize..=6) {
            let p = toy_params(GemKind::SelfAttentive, seed);
            let hist: Vec<usize> = (0..len).map(|i| (seed as usize + i * 5) % 12).collect();
            let a = GuidanceSequence::extract(&p, &hist).unwrap().attention.unwrap();
            prop_assert_eq!(a.shape(), &[len, 3]);
            for k in 0..3 {
                let col: f64 = (0..len).map(|r| a.row(r)[k]).sum();
                prop_assert!((col - 1.0).abs() < 1e-10);
                prop_assert!((0..len).all(|r| a.row(r)[k] >= 0.0));
            }
        }

        #[test]
        fn selection_is_invariant_to_target_scale(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = stream(seed, &[]);
            let g = Tensor::new(vec![4, 6], gaussian_vec(&mut rng, 24)).unwrap();
            let target = gaussian_vec(&mut rng, 6);
            let scaled: Vec<f64> = target.iter().map(|v| v * c).collect();
            prop_assert_eq!(select_guidance(&g, &target), select_guidance(&g, &scaled));
        }

        #[test]
        fn gem_loss_decreases_with_positive_logit(seed in any::<u64>(), bump in 0.01f64..3.0) {
            let mut rng = stream(seed, &[]);
            let q = gaussian_vec(&mut rng, 4);
            let mut cands: Vec<Vec<f64>> = (0..4).map(|_| gaussian_vec(&mut rng, 4)).collect();
            let before = loss_value(&q, &cands);
            // move the positive along q: raises q·e_a, negatives unchanged
            let qn: f64 = q.iter().map(|v| v * v).sum::<f64>();
            prop_assume!(qn > 1e-6);
            for j in 0..4 {
                cands[0][j] += bump * q[j] / qn;
            }
            prop_assert!(loss_value(&q, &cands) < before);
        }
    }

    #[test]
    fn value_matmul_is_consistent() {
        assert_eq!(matmul_values(&[1.0, 2.0], &[3.0, 4.0], 1, 2, 1), vec![11.0]);
    }
}
