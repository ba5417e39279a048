//! Provider construction: clone the instruction-tuned model, give each clone
//! its own random data split, and push every clone toward the ground-truth
//! rationales of its split (and away from its own generations) by preference
//! optimization against the frozen instruction-tuned reference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_dataset, Dataset};
use crate::dpo::{train_dpo, DpoConfig, DpoMetrics, PairOrigin, PreferencePair};
use crate::lm::ModelParams;
use crate::prompting::PromptMode;

use super::{mix_seed, PipelineContext, PipelineError, ProviderState};

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    pub dpo: DpoConfig,
    pub split_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1ProviderReport {
    pub provider: usize,
    pub split_size: usize,
    pub pair_count: usize,
    pub dropped_exact_matches: usize,
    pub dpo: DpoMetrics,
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub split_seed: u64,
    pub reports: Vec<Stage1ProviderReport>,
    pub pairs_per_provider: Vec<Vec<PreferencePair>>,
}

/// One pair per split sample: context is the rationale-generation prompt,
/// winner the ground-truth rationale, loser the provider's own generation.
/// Samples whose generation exactly reproduces the ground truth are dropped.
pub fn build_stage1_pairs(
    provider: &ProviderState,
    split: &Dataset,
    ctx: &PipelineContext,
) -> Result<Vec<PreferencePair>, PipelineError> {
    let results: Vec<Option<PreferencePair>> = split
        .samples()
        .par_iter()
        .map(|sample| -> Result<Option<PreferencePair>, PipelineError> {
            let gt = sample
                .rationale
                .as_deref()
                .ok_or(PipelineError::MissingRationale { id: sample.id })?;
            let prompt = ctx.templates.render(
                PromptMode::InstructionToRationale,
                &sample.instruction,
                None,
            )?;
            let prompt_ids = ctx.vocab.encode_prompt(&prompt)?;
            let generated_ids = provider.params.sample(
                &prompt_ids,
                &ctx.decoding,
                mix_seed(sample.id, provider.split_index as u64),
            )?;
            let generated = ctx.vocab.decode(&generated_ids)?;
            if ctx.vocab.encode(gt)? == generated_ids {
                return Ok(None);
            }
            Ok(Some(PreferencePair {
                context: prompt,
                winner: gt.to_string(),
                loser: generated,
                origin: PairOrigin::Stage1,
            }))
        })
        .collect::<Result<_, _>>()?;
    Ok(results.into_iter().flatten().collect())
}

/// Split `d_rationale` into one part per provider and run each provider's
/// preference round against the frozen `m_ift` reference. Providers end at
/// iteration 0.
pub fn train_stage1(
    providers: &mut [ProviderState],
    m_ift: &ModelParams,
    d_rationale: &Dataset,
    ctx: &PipelineContext,
    cfg: &Stage1Config,
) -> Result<Stage1Outcome, PipelineError> {
    let assignment = split_dataset(d_rationale, providers.len(), cfg.split_seed)?;
    let mut reports = Vec::with_capacity(providers.len());
    let mut pairs_per_provider = Vec::with_capacity(providers.len());
    for (s, provider) in providers.iter_mut().enumerate() {
        provider.split_index = s;
        let subset = assignment.subset(d_rationale, s);
        let pairs = build_stage1_pairs(provider, &subset, ctx)?;
        let dpo_cfg = DpoConfig {
            seed: mix_seed(cfg.dpo.seed, s as u64),
            ..cfg.dpo.clone()
        };
        let metrics = train_dpo(&mut provider.params, m_ift, ctx.vocab, &pairs, &dpo_cfg)?;
        provider.iteration = 0;
        provider.reference_id = "m_ift".to_string();
        reports.push(Stage1ProviderReport {
            provider: s,
            split_size: subset.len(),
            pair_count: pairs.len(),
            dropped_exact_matches: subset.len() - pairs.len(),
            dpo: metrics,
        });
        pairs_per_provider.push(pairs);
    }
    Ok(Stage1Outcome {
        split_seed: cfg.split_seed,
        reports,
        pairs_per_provider,
    })
}
