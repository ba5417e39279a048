//! Model parameters, next-token scoring, sequence log-likelihoods, and the
//! analytic gradient of a sequence log-likelihood with respect to parameters.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::vocab::TokenId;
use super::LmError;

/// Named parameter (or gradient) tensors, ordered by name.
pub type NamedTensors = BTreeMap<String, Tensor>;

pub const T_LOGITS: &str = "logits";
pub const T_EMBED: &str = "embed";
pub const T_W1: &str = "w1";
pub const T_B1: &str = "b1";
pub const T_W2: &str = "w2";
pub const T_B2: &str = "b2";

/// Token id used to left-pad short contexts in the k-gram model; pinned by
/// the vocabulary's fixed special ordering.
const PAD_ID: TokenId = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// `V x V` logit table indexed by the last context token.
    Bigram,
    /// Concatenated embeddings of the last `k` tokens through one tanh layer.
    KgramMlp,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Bigram => "bigram",
            ModelKind::KgramMlp => "kgram-mlp",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "bigram" => Some(ModelKind::Bigram),
            "kgram-mlp" => Some(ModelKind::KgramMlp),
            _ => None,
        }
    }
}

/// Structural hyperparameters; `embed_dim`/`hidden_dim` are zero for bigram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelHyper {
    pub vocab_size: usize,
    pub context_k: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl ModelHyper {
    pub fn bigram(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_k: 1,
            embed_dim: 0,
            hidden_dim: 0,
        }
    }

    pub fn kgram_mlp(
        vocab_size: usize,
        context_k: usize,
        embed_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        Self {
            vocab_size,
            context_k,
            embed_dim,
            hidden_dim,
        }
    }
}

/// A trainable model: kind tag, hyperparameters, and named tensors.
///
/// `Clone` produces a deep, independent copy. Scoring methods are pure reads,
/// so shared references can be used concurrently from many threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    kind: ModelKind,
    hyper: ModelHyper,
    tensors: NamedTensors,
}

impl ModelParams {
    /// Tabular bigram with an all-zero logit table (the uniform model).
    pub fn new_bigram(vocab_size: usize) -> Self {
        let mut tensors = NamedTensors::new();
        tensors.insert(
            T_LOGITS.to_string(),
            Tensor::zeros(&[vocab_size, vocab_size]),
        );
        Self {
            kind: ModelKind::Bigram,
            hyper: ModelHyper::bigram(vocab_size),
            tensors,
        }
    }

    /// k-gram MLP with small uniform random weights (seeded).
    pub fn new_kgram_mlp(hyper: ModelHyper, seed: u64) -> Self {
        assert!(hyper.context_k >= 1 && hyper.embed_dim >= 1 && hyper.hidden_dim >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = hyper.vocab_size;
        let k = hyper.context_k;
        let d = hyper.embed_dim;
        let h = hyper.hidden_dim;
        let mut tensors = NamedTensors::new();
        tensors.insert(T_EMBED.to_string(), uniform_tensor(&mut rng, &[v, d], 0.1));
        let s1 = (6.0 / (k * d + h) as f64).sqrt();
        tensors.insert(T_W1.to_string(), uniform_tensor(&mut rng, &[h, k * d], s1));
        tensors.insert(T_B1.to_string(), Tensor::zeros(&[h]));
        let s2 = (6.0 / (h + v) as f64).sqrt();
        tensors.insert(T_W2.to_string(), uniform_tensor(&mut rng, &[v, h], s2));
        tensors.insert(T_B2.to_string(), Tensor::zeros(&[v]));
        Self {
            kind: ModelKind::KgramMlp,
            hyper,
            tensors,
        }
    }

    pub fn from_parts(
        kind: ModelKind,
        hyper: ModelHyper,
        tensors: NamedTensors,
    ) -> Result<Self, LmError> {
        let params = Self {
            kind,
            hyper,
            tensors,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn hyper(&self) -> &ModelHyper {
        &self.hyper
    }

    pub fn vocab_size(&self) -> usize {
        self.hyper.vocab_size
    }

    pub fn tensors(&self) -> &NamedTensors {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, LmError> {
        self.tensors
            .get(name)
            .ok_or_else(|| LmError::MissingTensor(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor, LmError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| LmError::MissingTensor(name.to_string()))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Zeroed gradient buffer with the same names and shapes as the params.
    pub fn zeros_like(&self) -> NamedTensors {
        self.tensors
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape())))
            .collect()
    }

    /// Check tensor names, shapes, and finiteness against the kind and hyper.
    pub fn validate(&self) -> Result<(), LmError> {
        let expected = expected_shapes(self.kind, &self.hyper);
        if self.tensors.len() != expected.len() {
            return Err(LmError::InvalidVocabulary(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in &expected {
            let t = self.tensor(name)?;
            if t.shape() != shape.as_slice() {
                return Err(LmError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(LmError::NonFiniteGradient(name.clone()));
            }
        }
        Ok(())
    }

    /// Log-probabilities over the next token given `context`; exponentiated
    /// entries sum to 1. Looks at the last `min(k, |context|)` tokens only.
    pub fn next_token_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        if context.is_empty() {
            return Err(LmError::EmptyContext);
        }
        let mut scratch = Scratch::new(&self.hyper);
        self.logits_into(context, &mut scratch);
        log_softmax_in_place(&mut scratch.logits);
        Ok(scratch.logits)
    }

    /// `sum_t log p(target_t | prompt ++ target_{<t})`; always <= 0.
    pub fn sequence_log_likelihood(
        &self,
        prompt: &[TokenId],
        target: &[TokenId],
    ) -> Result<f64, LmError> {
        if target.is_empty() {
            return Err(LmError::EmptyTarget);
        }
        if prompt.is_empty() {
            return Err(LmError::EmptyContext);
        }
        let mut full = Vec::with_capacity(prompt.len() + target.len());
        full.extend_from_slice(prompt);
        full.extend_from_slice(target);
        let mut scratch = Scratch::new(&self.hyper);
        let mut total = 0.0;
        for t in 0..target.len() {
            let ctx = &full[..prompt.len() + t];
            self.logits_into(ctx, &mut scratch);
            total += log_softmax_entry(&scratch.logits, target[t]);
        }
        Ok(total)
    }

    /// Accumulate `scale * d(log pi(target | prompt)) / d(theta)` into `grads`
    /// and return the sequence log-likelihood.
    pub fn accumulate_loglik_grad(
        &self,
        prompt: &[TokenId],
        target: &[TokenId],
        scale: f64,
        grads: &mut NamedTensors,
    ) -> Result<f64, LmError> {
        if target.is_empty() {
            return Err(LmError::EmptyTarget);
        }
        if prompt.is_empty() {
            return Err(LmError::EmptyContext);
        }
        let mut full = Vec::with_capacity(prompt.len() + target.len());
        full.extend_from_slice(prompt);
        full.extend_from_slice(target);
        let mut scratch = Scratch::new(&self.hyper);
        let mut total = 0.0;
        for t in 0..target.len() {
            let ctx = &full[..prompt.len() + t];
            total += self.step_grad(ctx, target[t], scale, grads, &mut scratch)?;
        }
        Ok(total)
    }

    fn logits_into(&self, context: &[TokenId], scratch: &mut Scratch) {
        match self.kind {
            ModelKind::Bigram => {
                let table = &self.tensors[T_LOGITS];
                let last = *context.last().expect("non-empty context");
                scratch.logits.copy_from_slice(table.row(last));
            }
            ModelKind::KgramMlp => {
                self.mlp_forward(context, scratch);
            }
        }
    }

    fn mlp_forward(&self, context: &[TokenId], scratch: &mut Scratch) {
        let k = self.hyper.context_k;
        let d = self.hyper.embed_dim;
        let h = self.hyper.hidden_dim;
        let v = self.hyper.vocab_size;
        let embed = &self.tensors[T_EMBED];
        let w1 = &self.tensors[T_W1];
        let b1 = &self.tensors[T_B1];
        let w2 = &self.tensors[T_W2];
        let b2 = &self.tensors[T_B2];

        fill_window(context, k, &mut scratch.window);
        for (slot, &tok) in scratch.window.iter().enumerate() {
            scratch.x[slot * d..(slot + 1) * d].copy_from_slice(embed.row(tok));
        }
        for j in 0..h {
            let row = w1.row(j);
            let mut z = b1.data()[j];
            for (xi, wi) in scratch.x.iter().zip(row) {
                z += xi * wi;
            }
            scratch.a1[j] = z.tanh();
        }
        for t in 0..v {
            let row = w2.row(t);
            let mut z = b2.data()[t];
            for (ai, wi) in scratch.a1.iter().zip(row) {
                z += ai * wi;
            }
            scratch.logits[t] = z;
        }
    }

    fn step_grad(
        &self,
        context: &[TokenId],
        target: TokenId,
        scale: f64,
        grads: &mut NamedTensors,
        scratch: &mut Scratch,
    ) -> Result<f64, LmError> {
        self.logits_into(context, scratch);
        let logprob = log_softmax_entry(&scratch.logits, target);
        // d logp(target)/d logit_j = 1{j == target} - p_j
        let lse = log_sum_exp(&scratch.logits);
        for (j, g) in scratch.g_logits.iter_mut().enumerate() {
            let p = (scratch.logits[j] - lse).exp();
            *g = scale * (if j == target { 1.0 } else { 0.0 } - p);
        }
        match self.kind {
            ModelKind::Bigram => {
                let last = *context.last().expect("non-empty context");
                let table = grads
                    .get_mut(T_LOGITS)
                    .ok_or_else(|| LmError::MissingTensor(T_LOGITS.to_string()))?;
                let row = table.row_mut(last);
                for (r, g) in row.iter_mut().zip(&scratch.g_logits) {
                    *r += g;
                }
            }
            ModelKind::KgramMlp => self.mlp_backward(grads, scratch)?,
        }
        Ok(logprob)
    }

    fn mlp_backward(&self, grads: &mut NamedTensors, scratch: &mut Scratch) -> Result<(), LmError> {
        let d = self.hyper.embed_dim;
        let h = self.hyper.hidden_dim;
        let v = self.hyper.vocab_size;
        let w1 = &self.tensors[T_W1];
        let w2 = &self.tensors[T_W2];

        // Output layer.
        {
            let g_b2 = grads
                .get_mut(T_B2)
                .ok_or_else(|| LmError::MissingTensor(T_B2.to_string()))?;
            for (gb, g) in g_b2.data_mut().iter_mut().zip(&scratch.g_logits) {
                *gb += g;
            }
        }
        {
            let g_w2 = grads
                .get_mut(T_W2)
                .ok_or_else(|| LmError::MissingTensor(T_W2.to_string()))?;
            for t in 0..v {
                let g = scratch.g_logits[t];
                if g == 0.0 {
                    continue;
                }
                let row = g_w2.row_mut(t);
                for (r, a) in row.iter_mut().zip(&scratch.a1) {
                    *r += g * a;
                }
            }
        }
        // Hidden layer.
        for j in 0..h {
            let mut acc = 0.0;
            for t in 0..v {
                acc += w2.row(t)[j] * scratch.g_logits[t];
            }
            scratch.g_z1[j] = acc * (1.0 - scratch.a1[j] * scratch.a1[j]);
        }
        {
            let g_b1 = grads
                .get_mut(T_B1)
                .ok_or_else(|| LmError::MissingTensor(T_B1.to_string()))?;
            for (gb, g) in g_b1.data_mut().iter_mut().zip(&scratch.g_z1) {
                *gb += g;
            }
        }
        {
            let g_w1 = grads
                .get_mut(T_W1)
                .ok_or_else(|| LmError::MissingTensor(T_W1.to_string()))?;
            for j in 0..h {
                let g = scratch.g_z1[j];
                if g == 0.0 {
                    continue;
                }
                let row = g_w1.row_mut(j);
                for (r, x) in row.iter_mut().zip(&scratch.x) {
                    *r += g * x;
                }
            }
        }
        // Input embeddings.
        for (i, gx) in scratch.g_x.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..h {
                acc += w1.row(j)[i] * scratch.g_z1[j];
            }
            *gx = acc;
        }
        {
            let g_embed = grads
                .get_mut(T_EMBED)
                .ok_or_else(|| LmError::MissingTensor(T_EMBED.to_string()))?;
            for (slot, &tok) in scratch.window.iter().enumerate() {
                let row = g_embed.row_mut(tok);
                for (r, g) in row.iter_mut().zip(&scratch.g_x[slot * d..(slot + 1) * d]) {
                    *r += g;
                }
            }
        }
        Ok(())
    }
}

fn expected_shapes(kind: ModelKind, hyper: &ModelHyper) -> Vec<(String, Vec<usize>)> {
    let v = hyper.vocab_size;
    match kind {
        ModelKind::Bigram => vec![(T_LOGITS.to_string(), vec![v, v])],
        ModelKind::KgramMlp => {
            let k = hyper.context_k;
            let d = hyper.embed_dim;
            let h = hyper.hidden_dim;
            vec![
                (T_B1.to_string(), vec![h]),
                (T_B2.to_string(), vec![v]),
                (T_EMBED.to_string(), vec![v, d]),
                (T_W1.to_string(), vec![h, k * d]),
                (T_W2.to_string(), vec![v, h]),
            ]
        }
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("matching length")
}

/// Last `k` tokens of `context`, left-padded with PAD when shorter.
fn fill_window(context: &[TokenId], k: usize, window: &mut [TokenId]) {
    let m = context.len().min(k);
    let pad = k - m;
    for w in window[..pad].iter_mut() {
        *w = PAD_ID;
    }
    window[pad..].copy_from_slice(&context[context.len() - m..]);
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

fn log_softmax_in_place(xs: &mut [f64]) {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x -= lse;
    }
}

fn log_softmax_entry(logits: &[f64], index: TokenId) -> f64 {
    logits[index] - log_sum_exp(logits)
}

struct Scratch {
    logits: Vec<f64>,
    g_logits: Vec<f64>,
    window: Vec<TokenId>,
    x: Vec<f64>,
    g_x: Vec<f64>,
    a1: Vec<f64>,
    g_z1: Vec<f64>,
}

impl Scratch {
    fn new(hyper: &ModelHyper) -> Self {
        let kd = hyper.context_k * hyper.embed_dim;
        Self {
            logits: vec![0.0; hyper.vocab_size],
            g_logits: vec![0.0; hyper.vocab_size],
            window: vec![0; hyper.context_k],
            x: vec![0.0; kd],
            g_x: vec![0.0; kd],
            a1: vec![0.0; hyper.hidden_dim],
            g_z1: vec![0.0; hyper.hidden_dim],
        }
    }
}
