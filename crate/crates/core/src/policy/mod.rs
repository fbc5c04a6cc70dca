//! Action-token policy: vocabulary, binning and the decoder.

pub mod binning;
pub mod transformer;
pub mod vocab;

pub use binning::{ActionBinning, ACTION_DIM};
pub use transformer::{BatchLoss, Policy, PolicyConfig, PolicyInput};
pub use vocab::{Vocabulary, BOS, SEP};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::layers::{argmax, softmax_inplace};
use crate::nn::{self, GradCheck};
use crate::scene::Action;

/// Next-action-token distribution at action position `i` given the first
/// `i` action bins (later entries of `actions` are ignored by causality).
pub fn next_token_distribution(policy: &Policy, prefix: &[usize], visual: &[f64], actions: [usize; ACTION_DIM], i: usize) -> Result<Vec<f64>> {
    let cache = policy.forward(&[PolicyInput { prefix, visual, actions }])?;
    let b = policy.bins();
    let mut p = cache.logits[i * b..(i + 1) * b].to_vec();
    softmax_inplace(&mut p);
    Ok(p)
}

/// Greedy decoding of the 7 action tokens; argmax ties go to the lowest bin.
pub fn predict_bins(policy: &Policy, prefix: &[usize], visual: &[f64]) -> Result<[usize; ACTION_DIM]> {
    let b = policy.bins();
    let mut actions = [0; ACTION_DIM];
    for i in 0..ACTION_DIM {
        let cache = policy.forward(&[PolicyInput { prefix, visual, actions }])?;
        actions[i] = argmax(&cache.logits[i * b..(i + 1) * b]);
    }
    Ok(actions)
}

pub fn predict_action(policy: &Policy, prefix: &[usize], visual: &[f64], binning: &ActionBinning) -> Result<Action> {
    binning.decode(&predict_bins(policy, prefix, visual)?)
}

/// Teacher-forced per-token argmax accuracy over the action positions.
pub fn action_token_accuracy(policy: &Policy, inputs: &[PolicyInput], chunk: usize) -> Result<f64> {
    let (mut correct, mut total) = (0, 0);
    for batch in inputs.chunks(chunk.max(1)) {
        let r = policy.loss_and_grads(batch, None)?;
        correct += r.correct;
        total += r.total;
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Finite-difference check of the batch cross-entropy against the policy
/// parameters (including the projector).
pub fn policy_grad_check(policy: &Policy, inputs: &[PolicyInput], seed: u64, coords: usize) -> Result<GradCheck> {
    let mut grads = policy.params.zeros_like();
    policy.loss_and_grads(inputs, Some(&mut grads))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = nn::spot_coords(&policy.params, coords, &mut rng);
    let mut probe = policy.clone();
    let mut params = policy.params.clone();
    Ok(nn::finite_difference_check(&mut params, &grads, &picks, 1e-4, |p| {
        probe.params.values.copy_from_slice(&p.values);
        probe.loss_and_grads(inputs, None).map(|r| r.loss).unwrap_or(f64::NAN)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::Rng;

    fn tiny(seed: u64) -> Policy {
        let cfg = PolicyConfig {
            layers: 2,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            visual_dim: 6,
            max_len: 40,
            seed,
        };
        Policy::new(cfg, Vocabulary::for_grammar(8)).unwrap()
    }

    struct Owned {
        prefix: Vec<usize>,
        visual: Vec<f64>,
        actions: [usize; 7],
    }

    impl Owned {
        fn input(&self) -> PolicyInput<'_> {
            PolicyInput {
                prefix: &self.prefix,
                visual: &self.visual,
                actions: self.actions,
            }
        }
    }

    fn random_examples(n: usize, t: usize, seed: u64) -> Vec<Owned> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Vocabulary::for_grammar(8);
        (0..n)
            .map(|_| {
                let j = rng.gen_range(2..6);
                let mut prefix = vec![BOS];
                prefix.extend((0..j).map(|_| v.word_id(&v.words()[rng.gen_range(0..v.words().len())]).unwrap()));
                prefix.push(SEP);
                Owned {
                    prefix,
                    visual: (0..t * 6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    actions: std::array::from_fn(|_| rng.gen_range(0..8)),
                }
            })
            .collect()
    }

    #[test]
    fn future_perturbation_leaves_logits_bit_identical() {
        let p = tiny(1);
        let ex = random_examples(1, 5, 2).pop().unwrap();
        let base = p.forward(&[ex.input()]).unwrap().logits;
        for k in 0..7 {
            let mut changed = ex.input();
            changed.actions[k] = (changed.actions[k] + 3) % 8;
            let after = p.forward(&[changed]).unwrap().logits;
            // Logits at positions 0..=k do not see action k.
            assert_eq!(&base[..(k + 1) * 8], &after[..(k + 1) * 8]);
            if k < 6 {
                assert_ne!(&base[(k + 1) * 8..], &after[(k + 1) * 8..]);
            }
        }
    }

    #[test]
    fn batch_packing_matches_single() {
        let p = tiny(3);
        let exs = random_examples(4, 3, 4);
        let inputs: Vec<_> = exs.iter().map(|e| e.input()).collect();
        let packed = p.forward(&inputs).unwrap().logits;
        for (i, e) in exs.iter().enumerate() {
            let single = p.forward(&[e.input()]).unwrap().logits;
            for (a, b) in single.iter().zip(&packed[i * 56..(i + 1) * 56]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distribution_normalized() {
        let p = tiny(5);
        let ex = random_examples(1, 4, 6).pop().unwrap();
        for i in 0..7 {
            let d = next_token_distribution(&p, &ex.prefix, &ex.visual, ex.actions, i).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn overflow_is_error() {
        let p = tiny(0);
        let ex = random_examples(1, 30, 1).pop().unwrap();
        assert!(matches!(p.forward(&[ex.input()]), Err(Error::SequenceOverflow { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = tiny(7);
        let exs = random_examples(3, 4, 8);
        let inputs: Vec<_> = exs.iter().map(|e| e.input()).collect();
        let check = policy_grad_check(&p, &inputs, 0, 24).unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn visual_gradients_match_finite_differences() {
        let p = tiny(9);
        let exs = random_examples(2, 3, 10);
        let inputs: Vec<_> = exs.iter().map(|e| e.input()).collect();
        let mut g = p.params.zeros_like();
        let r = p.loss_and_grads(&inputs, Some(&mut g)).unwrap();
        for idx in [0, 5, 11, 17] {
            let f = |delta: f64| {
                let mut v = exs[1].visual.clone();
                v[idx] += delta;
                let ins = [inputs[0].clone(), PolicyInput { visual: &v, ..inputs[1].clone() }];
                p.loss_and_grads(&ins, None).unwrap().loss
            };
            let h = 1e-4;
            let n = (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h);
            assert!(nn::relative_error(r.dvisual[1][idx], n) < 1e-4);
        }
    }

    #[test]
    fn uniform_logits_pick_lowest_bin() {
        let mut p = tiny(2);
        for e in p.params.entries.clone() {
            if e.name.starts_with("head.") {
                p.params.values[e.range.range()].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let ex = random_examples(1, 2, 3).pop().unwrap();
        assert_eq!(predict_bins(&p, &ex.prefix, &ex.visual).unwrap(), [0; 7]);
    }

    #[test]
    fn predict_is_deterministic() {
        let p = tiny(4);
        let ex = random_examples(1, 3, 5).pop().unwrap();
        let binning = ActionBinning::from_ranges(8, [-1.0; 7], [1.0; 7]).unwrap();
        let a = predict_action(&p, &ex.prefix, &ex.visual, &binning).unwrap();
        let b = predict_action(&p, &ex.prefix, &ex.visual, &binning).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn accuracy_order_invariant_and_near_chance() {
        let p = tiny(6);
        let exs = random_examples(120, 3, 11);
        let mut inputs: Vec<_> = exs.iter().map(|e| e.input()).collect();
        let a = action_token_accuracy(&p, &inputs, 16).unwrap();
        inputs.reverse();
        assert_eq!(a, action_token_accuracy(&p, &inputs, 7).unwrap());
        // 840 tokens over 8 bins: chance 0.125, generous sampling band.
        assert!((a - 0.125).abs() < 0.08, "{a}");
    }
}
