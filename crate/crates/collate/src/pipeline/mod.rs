//! Orchestration of the full training recipe: provider construction,
//! diverse rationale generation, usefulness scoring, winner/eliminated
//! selection, sample filtration, iterative task-guided preference tuning,
//! provider selection, and SFT-based evaluation.

mod eval;
mod stage1;
mod task;

pub use eval::{
    evaluate_accuracy, perplexity, rationale_conditioned_sft, select_best_provider, AccuracyReport,
    ProviderSelection, SampleEval,
};
pub use stage1::{
    build_stage1_pairs, train_stage1, Stage1Config, Stage1Outcome, Stage1ProviderReport,
};
pub use task::{
    measure_task_stage, run_task_iteration, IterationReport, ProviderIterationStats,
    TaskStageConfig,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::dpo::DpoError;
use crate::ift::IftError;
use crate::lm::{DecodingPolicy, LmError, ModelParams, Vocabulary};
use crate::prompting::{PromptError, PromptMode, PromptTemplateSet};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("sample {id} lacks a rationale")]
    MissingRationale { id: u64 },
    #[error("score list is empty")]
    EmptyScores,
    #[error("validation set is empty")]
    EmptyValSet,
    #[error("need at least {min} providers, got {got}")]
    TooFewProviders { min: usize, got: usize },
    #[error("provider {provider} is at iteration {at}, expected {expected}")]
    ProviderIteration {
        provider: usize,
        at: u32,
        expected: u32,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Dpo(#[from] DpoError),
    #[error(transparent)]
    Ift(#[from] IftError),
}

/// Read-only collaborators shared by every pipeline stage: the vocabulary,
/// the prompt templates, the frozen instruction-tuned scorer, and the
/// decoding policy used for rationale generation.
pub struct PipelineContext<'a> {
    pub vocab: &'a Vocabulary,
    pub templates: &'a PromptTemplateSet,
    pub scorer: &'a ModelParams,
    pub decoding: DecodingPolicy,
}

/// How the candidate pool is diversified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiversityMode {
    /// One candidate per distinct provider (the default).
    Providers,
    /// Ablation: temperature samples from a single provider.
    Sampling { temperature: f64, candidates: usize },
}

impl DiversityMode {
    pub fn label(&self) -> &'static str {
        match self {
            DiversityMode::Providers => "providers",
            DiversityMode::Sampling { .. } => "sampling",
        }
    }
}

/// A rationale provider: its parameters, assigned split, task iteration, and
/// the checkpoint id its next preference round will use as reference.
#[derive(Debug, Clone)]
pub struct ProviderState {
    pub params: ModelParams,
    pub split_index: usize,
    pub iteration: u32,
    pub reference_id: String,
}

/// Clone the scorer into `s` independent providers at iteration 0.
pub fn init_providers(m_ift: &ModelParams, s: usize) -> Result<Vec<ProviderState>, PipelineError> {
    if s < 1 {
        return Err(PipelineError::TooFewProviders { min: 1, got: s });
    }
    Ok((0..s)
        .map(|split_index| ProviderState {
            params: m_ift.clone(),
            split_index,
            iteration: 0,
            reference_id: "m_ift".to_string(),
        })
        .collect())
}

/// One candidate rationale with its provider index and usefulness score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRationale {
    pub provider: usize,
    pub text: String,
    pub score: f64,
}

/// Winner and eliminated indices plus the full score list.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub winner: usize,
    pub eliminated: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    /// All scores equal (or a single candidate): no pair is emitted.
    Degenerate,
    Chosen(SelectionResult),
}

/// Generate one candidate per provider (or `candidates` temperature samples
/// from the first provider in the sampling ablation). Element `s` comes from
/// provider `s`, in provider order.
pub fn generate_candidates(
    providers: &[ProviderState],
    ctx: &PipelineContext,
    diversity: DiversityMode,
    instruction: &str,
    seed: u64,
) -> Result<Vec<String>, PipelineError> {
    let prompt = ctx
        .templates
        .render(PromptMode::InstructionToRationale, instruction, None)?;
    let prompt_ids = ctx.vocab.encode_prompt(&prompt)?;
    match diversity {
        DiversityMode::Providers => providers
            .iter()
            .enumerate()
            .map(|(s, p)| {
                let ids = p
                    .params
                    .sample(&prompt_ids, &ctx.decoding, mix_seed(seed, s as u64))?;
                Ok(ctx.vocab.decode(&ids)?)
            })
            .collect(),
        DiversityMode::Sampling {
            temperature,
            candidates,
        } => {
            let provider = providers
                .first()
                .ok_or(PipelineError::TooFewProviders { min: 1, got: 0 })?;
            let policy = DecodingPolicy::temperature(
                temperature,
                ctx.decoding.max_len,
                ctx.decoding.stop_token,
            )?;
            (0..candidates)
                .map(|j| {
                    let ids =
                        provider
                            .params
                            .sample(&prompt_ids, &policy, mix_seed(seed, j as u64))?;
                    Ok(ctx.vocab.decode(&ids)?)
                })
                .collect()
        }
    }
}

/// Usefulness score per candidate: log-likelihood of the ground-truth answer
/// under the frozen scorer given the instruction+rationale prompt. Empty
/// candidates score negative infinity and can never win.
pub fn usefulness_scores(
    ctx: &PipelineContext,
    instruction: &str,
    candidates: &[String],
    answer: &str,
) -> Result<Vec<f64>, PipelineError> {
    candidates
        .iter()
        .map(|cand| {
            if cand.trim().is_empty() {
                return Ok(f64::NEG_INFINITY);
            }
            let prompt = ctx.templates.render(
                PromptMode::InstructionRationaleToAnswer,
                instruction,
                Some(cand),
            )?;
            Ok(crate::lm::score_completion(
                ctx.scorer, ctx.vocab, &prompt, answer,
            )?)
        })
        .collect()
}

/// Generate one candidate per provider and attach its usefulness score.
pub fn scored_candidates(
    providers: &[ProviderState],
    ctx: &PipelineContext,
    diversity: DiversityMode,
    instruction: &str,
    answer: &str,
    seed: u64,
) -> Result<Vec<ScoredRationale>, PipelineError> {
    let candidates = generate_candidates(providers, ctx, diversity, instruction, seed)?;
    let scores = usefulness_scores(ctx, instruction, &candidates, answer)?;
    Ok(candidates
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(provider, (text, score))| ScoredRationale {
            provider,
            text,
            score,
        })
        .collect())
}

/// Winner = argmax (lowest index on ties), eliminated = argmin (highest index
/// on ties). All-equal score lists are degenerate and emit no pair.
pub fn select_winner_eliminated(scores: &[f64]) -> Result<Selection, PipelineError> {
    if scores.is_empty() {
        return Err(PipelineError::EmptyScores);
    }
    if scores.len() == 1 || scores.iter().all(|&x| x == scores[0]) {
        return Ok(Selection::Degenerate);
    }
    let mut winner = 0;
    let mut eliminated = 0;
    for (i, &x) in scores.iter().enumerate() {
        if x > scores[winner] {
            winner = i;
        }
        if x <= scores[eliminated] {
            eliminated = i;
        }
    }
    Ok(Selection::Chosen(SelectionResult {
        winner,
        eliminated,
        scores: scores.to_vec(),
    }))
}

/// Outcome of the likelihood filtration check for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOutcome {
    pub retain: bool,
    pub with_rationale: f64,
    pub without_rationale: f64,
}

/// Retain a sample only when the winning rationale strictly raises the
/// ground-truth answer's log-likelihood over the rationale-free prompt.
pub fn filter_sample(
    ctx: &PipelineContext,
    instruction: &str,
    answer: &str,
    winner_rationale: &str,
) -> Result<FilterOutcome, PipelineError> {
    let with_prompt = ctx.templates.render(
        PromptMode::InstructionRationaleToAnswer,
        instruction,
        Some(winner_rationale),
    )?;
    let without_prompt =
        ctx.templates
            .render(PromptMode::InstructionToAnswer, instruction, None)?;
    let with_rationale = crate::lm::score_completion(ctx.scorer, ctx.vocab, &with_prompt, answer)?;
    let without_rationale =
        crate::lm::score_completion(ctx.scorer, ctx.vocab, &without_prompt, answer)?;
    Ok(FilterOutcome {
        retain: with_rationale > without_rationale,
        with_rationale,
        without_rationale,
    })
}

/// Stable seed mixing for deriving per-stage and per-sample randomness from
/// one run seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in a.to_le_bytes().into_iter().chain(b.to_le_bytes()) {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Lowercase and collapse whitespace, for exact-match answer comparison.
pub fn canonicalize_answer(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{ModelHyper, T_LOGITS};

    pub(crate) fn test_vocab_and_templates() -> (Vocabulary, PromptTemplateSet) {
        let templates = PromptTemplateSet::compact();
        let data = crate::corpus::synth_arithmetic(40, 2, 5);
        let mut texts = templates.vocabulary_seed_texts();
        texts.extend(data.texts().map(str::to_string));
        (Vocabulary::build(&texts), templates)
    }

    fn ctx<'a>(
        vocab: &'a Vocabulary,
        templates: &'a PromptTemplateSet,
        scorer: &'a ModelParams,
    ) -> PipelineContext<'a> {
        PipelineContext {
            vocab,
            templates,
            scorer,
            decoding: DecodingPolicy::greedy(24, vocab.eos()).unwrap(),
        }
    }

    #[test]
    fn init_providers_are_identical_clones() {
        let (vocab, templates) = test_vocab_and_templates();
        let m_ift = ModelParams::new_kgram_mlp(ModelHyper::kgram_mlp(vocab.size(), 4, 4, 8), 3);
        let providers = init_providers(&m_ift, 3).unwrap();
        assert_eq!(providers.len(), 3);
        let c = ctx(&vocab, &templates, &m_ift);
        let outs = generate_candidates(
            &providers,
            &c,
            DiversityMode::Providers,
            "start with 3 ; add 2 ; result ?",
            0,
        )
        .unwrap();
        assert_eq!(outs.len(), 3);
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[1], outs[2]);
        for p in &providers {
            assert_eq!(p.iteration, 0);
            assert_eq!(p.reference_id, "m_ift");
            assert_eq!(p.params.fingerprint(), m_ift.fingerprint());
        }
    }

    #[test]
    fn candidates_follow_provider_order() {
        let (vocab, templates) = test_vocab_and_templates();
        let m_ift = ModelParams::new_kgram_mlp(ModelHyper::kgram_mlp(vocab.size(), 4, 4, 8), 3);
        let mut providers = init_providers(&m_ift, 2).unwrap();
        providers[1].params.tensor_mut("b2").unwrap().data_mut()[6] += 1.5;
        let c = ctx(&vocab, &templates, &m_ift);
        let instruction = "start with 3 ; add 2 ; result ?";
        let outs =
            generate_candidates(&providers, &c, DiversityMode::Providers, instruction, 0).unwrap();
        assert_eq!(outs.len(), 2);
        // Greedy decoding ignores the seed, so element s must equal what
        // provider s generates alone.
        let prompt = templates
            .render(PromptMode::InstructionToRationale, instruction, None)
            .unwrap();
        let prompt_ids = vocab.encode_prompt(&prompt).unwrap();
        for (s, out) in outs.iter().enumerate() {
            let solo = providers[s]
                .params
                .sample(&prompt_ids, &c.decoding, 0)
                .unwrap();
            assert_eq!(out, &vocab.decode(&solo).unwrap());
        }
        assert_ne!(outs[0], outs[1]);
    }

    #[test]
    fn sampling_mode_yields_requested_candidate_count() {
        let (vocab, templates) = test_vocab_and_templates();
        let m_ift = ModelParams::new_bigram(vocab.size());
        let providers = init_providers(&m_ift, 1).unwrap();
        let c = ctx(&vocab, &templates, &m_ift);
        let outs = generate_candidates(
            &providers,
            &c,
            DiversityMode::Sampling {
                temperature: 1.0,
                candidates: 4,
            },
            "start with 1 ; add 1 ; result ?",
            9,
        )
        .unwrap();
        assert_eq!(outs.len(), 4);
        // Same call is reproducible.
        let again = generate_candidates(
            &providers,
            &c,
            DiversityMode::Sampling {
                temperature: 1.0,
                candidates: 4,
            },
            "start with 1 ; add 1 ; result ?",
            9,
        )
        .unwrap();
        assert_eq!(outs, again);
    }

    #[test]
    fn selection_basics() {
        match select_winner_eliminated(&[-0.2, -0.9]).unwrap() {
            Selection::Chosen(r) => {
                assert_eq!(r.winner, 0);
                assert_eq!(r.eliminated, 1);
            }
            _ => panic!("expected selection"),
        }
        assert_eq!(
            select_winner_eliminated(&[-0.5, -0.5]).unwrap(),
            Selection::Degenerate
        );
        match select_winner_eliminated(&[-1.0, -0.1, -0.7]).unwrap() {
            Selection::Chosen(r) => {
                assert_eq!(r.winner, 1);
                assert_eq!(r.eliminated, 0);
            }
            _ => panic!("expected selection"),
        }
        assert!(matches!(
            select_winner_eliminated(&[]),
            Err(PipelineError::EmptyScores)
        ));
        assert_eq!(
            select_winner_eliminated(&[-1.0]).unwrap(),
            Selection::Degenerate
        );
    }

    #[test]
    fn selection_tie_breaks() {
        // Max tie: lowest index wins. Min tie: highest index eliminated.
        match select_winner_eliminated(&[-0.1, -0.1, -0.9, -0.9]).unwrap() {
            Selection::Chosen(r) => {
                assert_eq!(r.winner, 0);
                assert_eq!(r.eliminated, 3);
            }
            _ => panic!("expected selection"),
        }
    }

    #[test]
    fn selection_matches_brute_force_on_random_lists() {
        use rand::Rng as _;
        use rand_chacha::rand_core::SeedableRng as _;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n = rng.gen_range(1..6);
            // Coarse grid to force plenty of ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| -(rng.gen_range(0..4) as f64) / 2.0)
                .collect();
            let got = select_winner_eliminated(&scores).unwrap();
            // Brute force with the stated tie rules.
            let all_equal = scores.iter().all(|&x| x == scores[0]);
            if n == 1 || all_equal {
                assert_eq!(got, Selection::Degenerate, "scores {scores:?}");
                continue;
            }
            let mut w = 0;
            for i in 0..n {
                if scores[i] > scores[w] {
                    w = i;
                }
            }
            let mut e = 0;
            for i in 0..n {
                if scores[i] <= scores[e] {
                    e = i;
                }
            }
            match got {
                Selection::Chosen(r) => {
                    assert_eq!((r.winner, r.eliminated), (w, e), "scores {scores:?}");
                    assert_ne!(r.winner, r.eliminated);
                }
                Selection::Degenerate => panic!("unexpected degenerate for {scores:?}"),
            }
        }
    }

    #[test]
    fn usefulness_identical_candidates_identical_scores() {
        let (vocab, templates) = test_vocab_and_templates();
        let scorer = ModelParams::new_bigram(vocab.size());
        let c = ctx(&vocab, &templates, &scorer);
        let cands = vec!["3 plus 2 is 5".to_string(), "3 plus 2 is 5".to_string()];
        let scores = usefulness_scores(&c, "start with 3 ; add 2 ; result ?", &cands, "5").unwrap();
        assert_eq!(scores[0], scores[1]);
        assert!(scores[0].is_finite());
    }

    #[test]
    fn usefulness_empty_candidate_is_minus_infinity() {
        let (vocab, templates) = test_vocab_and_templates();
        let scorer = ModelParams::new_bigram(vocab.size());
        let c = ctx(&vocab, &templates, &scorer);
        let cands = vec![String::new(), "3 plus 2 is 5".to_string()];
        let scores = usefulness_scores(&c, "start with 3 ; add 2 ; result ?", &cands, "5").unwrap();
        assert_eq!(scores[0], f64::NEG_INFINITY);
        match select_winner_eliminated(&scores).unwrap() {
            Selection::Chosen(r) => assert_eq!(r.winner, 1),
            _ => panic!("expected selection"),
        }
    }

    #[test]
    fn usefulness_certain_answer_scores_zero() {
        let (vocab, templates) = test_vocab_and_templates();
        let mut scorer = ModelParams::new_bigram(vocab.size());
        // Make the answer chain deterministic after the response marker.
        let cand = "3 plus 2 is 5".to_string();
        let prompt = templates
            .render(
                PromptMode::InstructionRationaleToAnswer,
                "start with 3 ; add 2 ; result ?",
                Some(&cand),
            )
            .unwrap();
        let prompt_ids = vocab.encode_prompt(&prompt).unwrap();
        let target_ids = vocab.encode_completion("5").unwrap();
        let mut prev = *prompt_ids.last().unwrap();
        for &t in &target_ids {
            scorer.tensor_mut(T_LOGITS).unwrap().row_mut(prev)[t] = 1000.0;
            prev = t;
        }
        let c = ctx(&vocab, &templates, &scorer);
        let scores =
            usefulness_scores(&c, "start with 3 ; add 2 ; result ?", &[cand], "5").unwrap();
        assert_eq!(scores[0], 0.0);
    }

    #[test]
    fn usefulness_matches_chain_rule_oracle() {
        let (vocab, templates) = test_vocab_and_templates();
        let scorer = ModelParams::new_kgram_mlp(ModelHyper::kgram_mlp(vocab.size(), 4, 4, 8), 17);
        let c = ctx(&vocab, &templates, &scorer);
        let cands = vec!["3 plus 2 is 5".to_string(), "3 plus 2 is 6".to_string()];
        let scores = usefulness_scores(&c, "start with 3 ; add 2 ; result ?", &cands, "5").unwrap();
        for (cand, &score) in cands.iter().zip(&scores) {
            let prompt = templates
                .render(
                    PromptMode::InstructionRationaleToAnswer,
                    "start with 3 ; add 2 ; result ?",
                    Some(cand),
                )
                .unwrap();
            let mut full = vocab.encode_prompt(&prompt).unwrap();
            let target = vocab.encode_completion("5").unwrap();
            let mut oracle = 0.0;
            for &t in &target {
                let lp = scorer.next_token_logprobs(&full).unwrap();
                oracle += lp[t];
                full.push(t);
            }
            assert!((score - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn filtration_strict_inequality() {
        let (vocab, templates) = test_vocab_and_templates();
        // Uniform scorer: both prompts give identical answer likelihoods, so
        // the strict comparison drops the sample.
        let scorer = ModelParams::new_bigram(vocab.size());
        let c = ctx(&vocab, &templates, &scorer);
        let out =
            filter_sample(&c, "start with 3 ; add 2 ; result ?", "5", "3 plus 2 is 5").unwrap();
        assert_eq!(out.with_rationale, out.without_rationale);
        assert!(!out.retain);
    }

    #[test]
    fn filtration_covers_both_directions() {
        // Random k-gram scorers see different second-to-last prompt tokens
        // ("5 =>" vs "? =>"), so both orderings of the two likelihoods occur;
        // retain must track the strict comparison in each case.
        let (vocab, templates) = test_vocab_and_templates();
        let instruction = "start with 3 ; add 2 ; result ?";
        let mut saw_retain = false;
        let mut saw_drop = false;
        for seed in 0..40 {
            let scorer =
                ModelParams::new_kgram_mlp(ModelHyper::kgram_mlp(vocab.size(), 4, 4, 8), seed);
            let c = ctx(&vocab, &templates, &scorer);
            let out = filter_sample(&c, instruction, "5", "3 plus 2 is 5").unwrap();
            assert_eq!(out.retain, out.with_rationale > out.without_rationale);
            saw_retain |= out.retain;
            saw_drop |= !out.retain;
        }
        assert!(saw_retain && saw_drop);
    }

    #[test]
    fn filtration_matches_direct_comparison_on_random_models() {
        let (vocab, templates) = test_vocab_and_templates();
        let instruction = "start with 3 ; add 2 ; result ?";
        for seed in 0..20 {
            let scorer =
                ModelParams::new_kgram_mlp(ModelHyper::kgram_mlp(vocab.size(), 6, 4, 8), seed);
            let c = ctx(&vocab, &templates, &scorer);
            let out = filter_sample(&c, instruction, "5", "3 plus 2 is 5").unwrap();
            let with_prompt = templates
                .render(
                    PromptMode::InstructionRationaleToAnswer,
                    instruction,
                    Some("3 plus 2 is 5"),
                )
                .unwrap();
            let without_prompt = templates
                .render(PromptMode::InstructionToAnswer, instruction, None)
                .unwrap();
            let a = crate::lm::score_completion(&scorer, &vocab, &with_prompt, "5").unwrap();
            let b = crate::lm::score_completion(&scorer, &vocab, &without_prompt, "5").unwrap();
            assert_eq!(out.retain, a > b);
            assert_eq!(out.with_rationale, a);
            assert_eq!(out.without_rationale, b);
        }
    }

    #[test]
    fn canonicalization_for_answer_matching() {
        assert_eq!(canonicalize_answer("  A  "), "a");
        assert_eq!(canonicalize_answer("1 0"), "1 0");
        assert_eq!(canonicalize_answer("Yes\tno"), "yes no");
    }
}
