//! Greedy and temperature decoding.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::ModelParams;
use super::vocab::TokenId;
use super::LmError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeKind {
    /// Argmax at every step (ties broken toward the lowest token id).
    Greedy,
    /// Sample from `softmax(logprobs / temperature)`.
    Temperature(f64),
}

/// How to decode: strategy, generation cap, and the stop token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodingPolicy {
    pub kind: DecodeKind,
    pub max_len: usize,
    pub stop_token: TokenId,
}

impl DecodingPolicy {
    pub fn greedy(max_len: usize, stop_token: TokenId) -> Result<Self, LmError> {
        Self::new(DecodeKind::Greedy, max_len, stop_token)
    }

    pub fn temperature(tau: f64, max_len: usize, stop_token: TokenId) -> Result<Self, LmError> {
        Self::new(DecodeKind::Temperature(tau), max_len, stop_token)
    }

    pub fn new(kind: DecodeKind, max_len: usize, stop_token: TokenId) -> Result<Self, LmError> {
        if max_len < 1 {
            return Err(LmError::InvalidPolicy(
                "max length must be >= 1".to_string(),
            ));
        }
        if let DecodeKind::Temperature(tau) = kind {
            if !(tau > 0.0) {
                return Err(LmError::InvalidPolicy(format!(
                    "temperature must be positive, got {tau}"
                )));
            }
        }
        Ok(Self {
            kind,
            max_len,
            stop_token,
        })
    }
}

impl ModelParams {
    /// Generate tokens after `prompt` until the stop token or `max_len`.
    /// The stop token is not included in the output. Greedy decoding ignores
    /// the seed; temperature decoding is a pure function of `(params, prompt,
    /// policy, seed)`.
    pub fn sample(
        &self,
        prompt: &[TokenId],
        policy: &DecodingPolicy,
        seed: u64,
    ) -> Result<Vec<TokenId>, LmError> {
        if prompt.is_empty() {
            return Err(LmError::EmptyContext);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..policy.max_len {
            let lp = self.next_token_logprobs(&ctx)?;
            let next = match policy.kind {
                DecodeKind::Greedy => argmax(&lp),
                DecodeKind::Temperature(tau) => sample_index(&lp, tau, &mut rng),
            };
            if next == policy.stop_token {
                break;
            }
            out.push(next);
            ctx.push(next);
        }
        Ok(out)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index(logprobs: &[f64], tau: f64, rng: &mut ChaCha8Rng) -> usize {
    let m = logprobs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logprobs.iter().map(|lp| ((lp - m) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut dart = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        dart -= w;
        if dart <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::model::T_LOGITS;

    /// Bigram whose greedy path from BOS(=0) is 4 -> 5 -> EOS(=1).
    fn chain_bigram() -> ModelParams {
        let mut params = ModelParams::new_bigram(6);
        let t = params.tensor_mut(T_LOGITS).unwrap();
        t.row_mut(0)[4] = 5.0;
        t.row_mut(4)[5] = 5.0;
        t.row_mut(5)[1] = 5.0;
        params
    }

    #[test]
    fn greedy_follows_argmax_chain() {
        let params = chain_bigram();
        let policy = DecodingPolicy::greedy(10, 1).unwrap();
        let out = params.sample(&[0], &policy, 0).unwrap();
        assert_eq!(out, vec![4, 5]);
    }

    #[test]
    fn low_temperature_agrees_with_greedy() {
        let params = chain_bigram();
        let greedy = DecodingPolicy::greedy(10, 1).unwrap();
        let cold = DecodingPolicy::temperature(1e-6, 10, 1).unwrap();
        for seed in 0..20 {
            assert_eq!(
                params.sample(&[0], &cold, seed).unwrap(),
                params.sample(&[0], &greedy, 0).unwrap()
            );
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let params = ModelParams::new_bigram(8);
        let policy = DecodingPolicy::temperature(1.0, 16, 1).unwrap();
        let a = params.sample(&[0], &policy, 42).unwrap();
        let b = params.sample(&[0], &policy, 42).unwrap();
        let c = params.sample(&[0], &policy, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn max_len_caps_generation() {
        // Uniform bigram rarely emits the stop token early; cap at 3.
        let params = ModelParams::new_bigram(50);
        let policy = DecodingPolicy::temperature(1.0, 3, 1).unwrap();
        let out = params.sample(&[0], &policy, 7).unwrap();
        assert!(out.len() <= 3);
    }

    #[test]
    fn policy_validation() {
        assert!(DecodingPolicy::greedy(0, 1).is_err());
        assert!(DecodingPolicy::temperature(0.0, 4, 1).is_err());
        assert!(DecodingPolicy::temperature(-1.0, 4, 1).is_err());
    }

    #[test]
    fn empirical_frequencies_match_model() {
        // Sanity-scale frequency check; the full 100k-draw version lives in
        // the acceptance suite.
        let mut params = ModelParams::new_bigram(4);
        let t = params.tensor_mut(T_LOGITS).unwrap();
        t.row_mut(0).copy_from_slice(&[0.3, -0.8, 1.2, 0.0]);
        let lp = params.next_token_logprobs(&[0]).unwrap();
        let policy = DecodingPolicy::temperature(1.0, 1, 99).unwrap();
        let n = 20_000usize;
        let mut counts = [0usize; 4];
        for seed in 0..n {
            let out = params.sample(&[0], &policy, seed as u64).unwrap();
            counts[out[0]] += 1;
        }
        for j in 0..4 {
            let p = lp[j].exp();
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let dev = (counts[j] as f64 - n as f64 * p).abs();
            assert!(dev <= 4.0 * sigma, "token {j}: dev {dev} vs sigma {sigma}");
        }
    }
}
