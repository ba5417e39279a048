//! Direct preference optimization over completion pairs.
//!
//! A pair holds a rendered context plus winner and loser completions. The
//! policy is trained to widen the gap between the beta-scaled log-likelihood
//! ratios (policy over frozen reference) of winner and loser:
//! `loss = -log sigmoid(r_w - r_l)` with `r_y = beta * (log pi(y) - log
//! pi_ref(y))`. Likelihoods are unnormalized sums over completion tokens, the
//! loss is averaged over a batch, and `-log sigmoid(z)` is evaluated as
//! `softplus(-z)` for stability.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{
    apply_update, score_completion, LmError, LrSchedule, ModelParams, NamedTensors, OptimizerState,
    UpdateRule, Vocabulary,
};

#[derive(Debug, Error)]
pub enum DpoError {
    #[error("preference pair has an empty context")]
    EmptyContext,
    #[error("winner and loser encode to the same token sequence")]
    DegeneratePair,
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// Where a preference pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairOrigin {
    Stage1,
    TaskIteration(u32),
}

impl PairOrigin {
    pub fn as_string(&self) -> String {
        match self {
            PairOrigin::Stage1 => "stage1".to_string(),
            PairOrigin::TaskIteration(i) => format!("task-iteration-{i}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "stage1" {
            return Some(PairOrigin::Stage1);
        }
        s.strip_prefix("task-iteration-")
            .and_then(|rest| rest.parse().ok())
            .map(PairOrigin::TaskIteration)
    }
}

impl Serialize for PairOrigin {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.as_string())
    }
}

impl<'de> Deserialize<'de> for PairOrigin {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        PairOrigin::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("bad pair origin {s:?}")))
    }
}

/// A rendered context with preferred and rejected completions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context: String,
    pub winner: String,
    pub loser: String,
    pub origin: PairOrigin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub update_rule: UpdateRule,
    pub cosine_schedule: bool,
    pub seed: u64,
}

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_STAGE1_EPOCHS: usize = 5;
pub const DEFAULT_TASK_EPOCHS: usize = 10;

impl DpoConfig {
    /// Provider-construction defaults: 5 epochs.
    pub fn stage1_desk() -> Self {
        Self {
            beta: DEFAULT_BETA,
            epochs: DEFAULT_STAGE1_EPOCHS,
            learning_rate: 2e-3,
            batch_size: 8,
            update_rule: UpdateRule::adam_default(),
            cosine_schedule: true,
            seed: 0,
        }
    }

    /// Task-stage defaults: 10 epochs per iteration.
    pub fn task_desk() -> Self {
        Self {
            epochs: DEFAULT_TASK_EPOCHS,
            ..Self::stage1_desk()
        }
    }
}

/// `beta * (log pi_policy(y | x) - log pi_reference(y | x))`.
pub fn implicit_reward(
    policy: &ModelParams,
    reference: &ModelParams,
    vocab: &Vocabulary,
    context: &str,
    completion: &str,
    beta: f64,
) -> Result<f64, DpoError> {
    let lp = score_completion(policy, vocab, context, completion)?;
    let lr = score_completion(reference, vocab, context, completion)?;
    Ok(beta * (lp - lr))
}

/// The sigmoid argument `z = r_winner - r_loser`; swapping winner and loser
/// negates it.
pub fn pair_margin(
    policy: &ModelParams,
    reference: &ModelParams,
    vocab: &Vocabulary,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64, DpoError> {
    if pair.context.is_empty() {
        return Err(DpoError::EmptyContext);
    }
    let rw = implicit_reward(policy, reference, vocab, &pair.context, &pair.winner, beta)?;
    let rl = implicit_reward(policy, reference, vocab, &pair.context, &pair.loser, beta)?;
    Ok(rw - rl)
}

/// `-log sigmoid(z)` computed as `softplus(-z)`.
pub fn loss_from_margin(z: f64) -> f64 {
    softplus(-z)
}

fn softplus(x: f64) -> f64 {
    // max(x, 0) + ln(1 + exp(-|x|)) never overflows.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn dpo_loss(
    policy: &ModelParams,
    reference: &ModelParams,
    vocab: &Vocabulary,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64, DpoError> {
    Ok(loss_from_margin(pair_margin(
        policy, reference, vocab, pair, beta,
    )?))
}

/// Per-batch means tracked while training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoBatchStats {
    pub mean_loss: f64,
    pub mean_winner_reward: f64,
    pub mean_loser_reward: f64,
}

/// Gradient with respect to the policy of the mean DPO loss over `batch`.
/// The reference is a constant: no gradient is produced for it and its
/// parameters are left untouched.
pub fn dpo_gradients(
    policy: &ModelParams,
    reference: &ModelParams,
    vocab: &Vocabulary,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<(NamedTensors, DpoBatchStats), DpoError> {
    assert!(!batch.is_empty(), "batch must be non-empty");
    let mut grads = policy.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    let mut rw_sum = 0.0;
    let mut rl_sum = 0.0;
    for pair in batch {
        if pair.context.is_empty() {
            return Err(DpoError::EmptyContext);
        }
        let ctx_ids = vocab.encode_prompt(&pair.context)?;
        let winner_ids = vocab.encode_completion(&pair.winner)?;
        let loser_ids = vocab.encode_completion(&pair.loser)?;
        if winner_ids == loser_ids {
            return Err(DpoError::DegeneratePair);
        }
        let lp_w = policy.sequence_log_likelihood(&ctx_ids, &winner_ids)?;
        let lp_l = policy.sequence_log_likelihood(&ctx_ids, &loser_ids)?;
        let lr_w = reference.sequence_log_likelihood(&ctx_ids, &winner_ids)?;
        let lr_l = reference.sequence_log_likelihood(&ctx_ids, &loser_ids)?;
        let rw = beta * (lp_w - lr_w);
        let rl = beta * (lp_l - lr_l);
        let z = rw - rl;
        loss_sum += loss_from_margin(z);
        rw_sum += rw;
        rl_sum += rl;
        // d loss / d z = -sigmoid(-z); chain through z = beta * (ll_w - ll_l).
        let dz = -sigmoid(-z);
        let coeff = scale * dz * beta;
        policy.accumulate_loglik_grad(&ctx_ids, &winner_ids, coeff, &mut grads)?;
        policy.accumulate_loglik_grad(&ctx_ids, &loser_ids, -coeff, &mut grads)?;
    }
    Ok((
        grads,
        DpoBatchStats {
            mean_loss: loss_sum * scale,
            mean_winner_reward: rw_sum * scale,
            mean_loser_reward: rl_sum * scale,
        },
    ))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-epoch metrics; epoch 0 is an evaluation pass before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoEpochMetrics {
    pub epoch: usize,
    #[serde(flatten)]
    pub stats: DpoBatchStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoMetrics {
    pub per_epoch: Vec<DpoEpochMetrics>,
    /// Extremes of the per-pair loss during the epoch-0 evaluation; NaN when
    /// there are no pairs.
    pub initial_loss_min: f64,
    pub initial_loss_max: f64,
}

/// Train `policy` on `pairs` against a frozen `reference`. With an empty pair
/// list the policy is returned unchanged.
pub fn train_dpo(
    policy: &mut ModelParams,
    reference: &ModelParams,
    vocab: &Vocabulary,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<DpoMetrics, DpoError> {
    let mut per_epoch = Vec::new();
    let mut initial_min = f64::NAN;
    let mut initial_max = f64::NAN;
    if pairs.is_empty() {
        return Ok(DpoMetrics {
            per_epoch,
            initial_loss_min: initial_min,
            initial_loss_max: initial_max,
        });
    }

    // Epoch 0: evaluate without updating.
    let mut loss_sum = 0.0;
    let mut rw_sum = 0.0;
    let mut rl_sum = 0.0;
    for pair in pairs {
        let rw = implicit_reward(
            policy,
            reference,
            vocab,
            &pair.context,
            &pair.winner,
            cfg.beta,
        )?;
        let rl = implicit_reward(
            policy,
            reference,
            vocab,
            &pair.context,
            &pair.loser,
            cfg.beta,
        )?;
        let loss = loss_from_margin(rw - rl);
        initial_min = if initial_min.is_nan() {
            loss
        } else {
            initial_min.min(loss)
        };
        initial_max = if initial_max.is_nan() {
            loss
        } else {
            initial_max.max(loss)
        };
        loss_sum += loss;
        rw_sum += rw;
        rl_sum += rl;
    }
    let n = pairs.len() as f64;
    per_epoch.push(DpoEpochMetrics {
        epoch: 0,
        stats: DpoBatchStats {
            mean_loss: loss_sum / n,
            mean_winner_reward: rw_sum / n,
            mean_loser_reward: rl_sum / n,
        },
    });

    let batches_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let schedule = if cfg.cosine_schedule {
        LrSchedule::CosineToZero {
            total_steps: (cfg.epochs * batches_per_epoch) as u64,
        }
    } else {
        LrSchedule::Constant
    };
    let mut opt = OptimizerState::new(policy, cfg.update_rule, schedule, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut rw_sum = 0.0;
        let mut rl_sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PreferencePair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let (grads, stats) = dpo_gradients(policy, reference, vocab, &batch, cfg.beta)?;
            apply_update(policy, &grads, &mut opt)?;
            loss_sum += stats.mean_loss * batch.len() as f64;
            rw_sum += stats.mean_winner_reward * batch.len() as f64;
            rl_sum += stats.mean_loser_reward * batch.len() as f64;
            count += batch.len();
        }
        per_epoch.push(DpoEpochMetrics {
            epoch,
            stats: DpoBatchStats {
                mean_loss: loss_sum / count as f64,
                mean_winner_reward: rw_sum / count as f64,
                mean_loser_reward: rl_sum / count as f64,
            },
        });
    }
    Ok(DpoMetrics {
        per_epoch,
        initial_loss_min: initial_min,
        initial_loss_max: initial_max,
    })
}

/// Write pairs as JSONL (`{"context", "winner", "loser", "origin"}`).
pub fn save_pairs_jsonl(pairs: &[PreferencePair], path: &std::path::Path) -> std::io::Result<()> {
    use std::io::Write as _;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for pair in pairs {
        serde_json::to_writer(&mut out, pair)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn load_pairs_jsonl(path: &std::path::Path) -> std::io::Result<Vec<PreferencePair>> {
    use std::io::BufRead as _;
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut pairs = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(&line)?);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{ModelHyper, T_LOGITS};
    use rand::Rng as _;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["a b c d e f g h"])
    }

    fn pair(context: &str, winner: &str, loser: &str) -> PreferencePair {
        PreferencePair {
            context: context.to_string(),
            winner: winner.to_string(),
            loser: loser.to_string(),
            origin: PairOrigin::Stage1,
        }
    }

    fn random_bigram(v: usize, seed: u64) -> ModelParams {
        let mut params = ModelParams::new_bigram(v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in params.tensor_mut(T_LOGITS).unwrap().data_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        params
    }

    #[test]
    fn identical_models_give_ln2_loss_and_zero_rewards() {
        let v = vocab();
        for policy in [
            random_bigram(v.size(), 3),
            ModelParams::new_kgram_mlp(ModelHyper::kgram_mlp(v.size(), 3, 4, 6), 5),
        ] {
            let reference = policy.clone();
            let p = pair("a b", "c d", "e f");
            let loss = dpo_loss(&policy, &reference, &v, &p, 0.1).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() <= 1e-12);
            let r = implicit_reward(&policy, &reference, &v, "a b", "c d", 0.1).unwrap();
            assert_eq!(r, 0.0);
        }
    }

    #[test]
    fn reward_scales_linearly_in_beta() {
        let v = vocab();
        let policy = random_bigram(v.size(), 1);
        let reference = random_bigram(v.size(), 2);
        let r1 = implicit_reward(&policy, &reference, &v, "a", "b c", 0.1).unwrap();
        let r5 = implicit_reward(&policy, &reference, &v, "a", "b c", 0.5).unwrap();
        assert!((r5 - 5.0 * r1).abs() < 1e-12);
    }

    #[test]
    fn reward_matches_likelihood_difference() {
        let v = vocab();
        let policy = random_bigram(v.size(), 7);
        let reference = random_bigram(v.size(), 8);
        let beta = 0.1;
        let got = implicit_reward(&policy, &reference, &v, "a b", "c", beta).unwrap();
        let want = beta
            * (score_completion(&policy, &v, "a b", "c").unwrap()
                - score_completion(&reference, &v, "a b", "c").unwrap());
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn loss_at_known_margin() {
        // beta 0.1, winner ratio +1, loser ratio -1 -> z = 0.2.
        // High-precision value of ln(1 + exp(-0.2)).
        let expect = 0.598_138_869_381_592_2_f64;
        assert!((loss_from_margin(0.2) - expect).abs() < 1e-15);
        assert!((DEFAULT_BETA - 0.1).abs() == 0.0);
    }

    #[test]
    fn margin_negates_when_pair_swapped() {
        let v = vocab();
        let policy = random_bigram(v.size(), 11);
        let reference = random_bigram(v.size(), 12);
        let p = pair("a b", "c d", "e");
        let swapped = pair("a b", "e", "c d");
        let z = pair_margin(&policy, &reference, &v, &p, 0.1).unwrap();
        let zs = pair_margin(&policy, &reference, &v, &swapped, 0.1).unwrap();
        assert!((z + zs).abs() < 1e-14);
    }

    #[test]
    fn loss_decreases_in_winner_likelihood() {
        let v = vocab();
        let reference = random_bigram(v.size(), 3);
        let p = pair("a", "b", "c");
        let base = random_bigram(v.size(), 4);
        let low = dpo_loss(&base, &reference, &v, &p, 0.1).unwrap();
        let mut boosted = base.clone();
        // Raise the winner token's logit after "a".
        let a = v.id("a").unwrap();
        let b = v.id("b").unwrap();
        boosted.tensor_mut(T_LOGITS).unwrap().row_mut(a)[b] += 2.0;
        let high = dpo_loss(&boosted, &reference, &v, &p, 0.1).unwrap();
        assert!(high < low);
    }

    #[test]
    fn symmetric_start_gradient_is_half_beta_scaled_difference() {
        // With policy == reference, z = 0 and sigma(0) = 1/2, so the batch
        // gradient is -beta/2 * (grad ll(winner) - grad ll(loser)).
        let v = vocab();
        let policy = random_bigram(v.size(), 21);
        let reference = policy.clone();
        let beta = 0.1;
        let p = pair("a b", "c d", "e f");
        let (grads, stats) = dpo_gradients(&policy, &reference, &v, &[p.clone()], beta).unwrap();
        assert!((stats.mean_loss - std::f64::consts::LN_2).abs() < 1e-12);
        let ctx = v.encode_prompt(&p.context).unwrap();
        let w = v.encode_completion(&p.winner).unwrap();
        let l = v.encode_completion(&p.loser).unwrap();
        let mut expect = policy.zeros_like();
        policy
            .accumulate_loglik_grad(&ctx, &w, -beta / 2.0, &mut expect)
            .unwrap();
        policy
            .accumulate_loglik_grad(&ctx, &l, beta / 2.0, &mut expect)
            .unwrap();
        for (name, t) in &grads {
            for (a, b) in t.data().iter().zip(expect[name].data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let v = vocab();
        let policy = random_bigram(v.size(), 31);
        let reference = random_bigram(v.size(), 32);
        let batch = vec![pair("a b", "c d", "e"), pair("b", "f", "g h")];
        let beta = 0.1;
        let (grads, _) = dpo_gradients(&policy, &reference, &v, &batch, beta).unwrap();
        let mean_loss = |p: &ModelParams| -> f64 {
            batch
                .iter()
                .map(|pr| dpo_loss(p, &reference, &v, pr, beta).unwrap())
                .sum::<f64>()
                / batch.len() as f64
        };
        let eps = 1e-5;
        let g = &grads[T_LOGITS];
        for i in (0..g.len()).step_by(5) {
            let mut plus = policy.clone();
            plus.tensor_mut(T_LOGITS).unwrap().data_mut()[i] += eps;
            let mut minus = policy.clone();
            minus.tensor_mut(T_LOGITS).unwrap().data_mut()[i] -= eps;
            let fd = (mean_loss(&plus) - mean_loss(&minus)) / (2.0 * eps);
            let a = g.data()[i];
            let denom = (a.abs() + fd.abs()).max(1e-8);
            assert!(
                (a - fd).abs() < 1e-10 || (a - fd).abs() / denom < 1e-4,
                "logits[{i}]: {a} vs {fd}"
            );
        }
    }

    #[test]
    fn reference_is_constant_through_training() {
        let v = vocab();
        let mut policy = random_bigram(v.size(), 41);
        let reference = random_bigram(v.size(), 42);
        let ref_fp = reference.fingerprint();
        let pairs = vec![pair("a", "b c", "d"), pair("c", "e", "f g")];
        let cfg = DpoConfig {
            epochs: 3,
            ..DpoConfig::stage1_desk()
        };
        train_dpo(&mut policy, &reference, &v, &pairs, &cfg).unwrap();
        assert_eq!(reference.fingerprint(), ref_fp);
    }

    #[test]
    fn empty_pair_list_is_a_no_op() {
        let v = vocab();
        let mut policy = random_bigram(v.size(), 51);
        let before = policy.fingerprint();
        let reference = policy.clone();
        let metrics =
            train_dpo(&mut policy, &reference, &v, &[], &DpoConfig::stage1_desk()).unwrap();
        assert_eq!(policy.fingerprint(), before);
        assert!(metrics.per_epoch.is_empty());
        assert!(metrics.initial_loss_min.is_nan());
    }

    #[test]
    fn single_pair_training_separates_rewards() {
        let v = vocab();
        let mut policy = random_bigram(v.size(), 61);
        let reference = policy.clone();
        let pairs = vec![pair("a b", "c d", "e f")];
        let cfg = DpoConfig {
            epochs: 30,
            learning_rate: 0.05,
            cosine_schedule: false,
            ..DpoConfig::stage1_desk()
        };
        let metrics = train_dpo(&mut policy, &reference, &v, &pairs, &cfg).unwrap();
        let last = metrics.per_epoch.last().unwrap();
        assert!(last.stats.mean_winner_reward > 0.0);
        assert!(last.stats.mean_loser_reward < 0.0);
        assert!(last.stats.mean_loss < std::f64::consts::LN_2);
        // Epoch 0 started at exactly ln 2.
        assert!((metrics.initial_loss_max - std::f64::consts::LN_2).abs() <= 1e-12);
        assert!((metrics.initial_loss_min - std::f64::consts::LN_2).abs() <= 1e-12);
    }

    #[test]
    fn stage_epoch_defaults() {
        assert_eq!(DEFAULT_STAGE1_EPOCHS, 5);
        assert_eq!(DEFAULT_TASK_EPOCHS, 10);
        assert_eq!(DpoConfig::stage1_desk().epochs, 5);
        assert_eq!(DpoConfig::task_desk().epochs, 10);
        assert_eq!(DpoConfig::task_desk().beta, 0.1);
    }

    #[test]
    fn degenerate_pair_rejected() {
        let v = vocab();
        let policy = random_bigram(v.size(), 71);
        let reference = policy.clone();
        let bad = pair("a", "b c", "b c");
        assert!(matches!(
            dpo_gradients(&policy, &reference, &v, &[bad], 0.1),
            Err(DpoError::DegeneratePair)
        ));
    }

    #[test]
    fn pairs_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let pairs = vec![
            pair("a", "b", "c"),
            PreferencePair {
                origin: PairOrigin::TaskIteration(2),
                ..pair("d", "e", "f")
            },
        ];
        save_pairs_jsonl(&pairs, &path).unwrap();
        let loaded = load_pairs_jsonl(&path).unwrap();
        assert_eq!(loaded, pairs);
    }
}
