//! Task-guided preferential tuning: per iteration, every provider proposes a
//! rationale for every task sample, candidates are ranked by the frozen
//! scorer's ground-truth answer likelihood, the winner/eliminated pair is
//! (optionally) filtered by the no-rationale baseline, and each provider is
//! tuned on the retained pairs of its own split with its previous-iteration
//! checkpoint as the preference reference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_dataset, Dataset};
use crate::dpo::{train_dpo, DpoConfig, PairOrigin, PreferencePair};

use super::{
    filter_sample, mix_seed, scored_candidates, select_winner_eliminated, DiversityMode,
    PipelineContext, PipelineError, ProviderState, Selection,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStageConfig {
    pub dpo: DpoConfig,
    pub split_seed: u64,
    /// Re-randomize the per-provider splits each iteration (default) instead
    /// of keeping one fixed assignment.
    pub resplit_each_iteration: bool,
    pub generation_seed: u64,
    /// Keep only samples whose winning rationale strictly beats the
    /// rationale-free baseline. Off reproduces the no-filtration ablation.
    pub filtration: bool,
    pub diversity: DiversityMode,
}

impl TaskStageConfig {
    pub fn desk() -> Self {
        Self {
            dpo: DpoConfig::task_desk(),
            split_seed: 0,
            resplit_each_iteration: true,
            generation_seed: 0,
            filtration: true,
            diversity: DiversityMode::Providers,
        }
    }
}

/// Per-provider bookkeeping for one pass over the task data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderIterationStats {
    pub provider: usize,
    /// Samples in this provider's split for which candidates were generated.
    pub generated: usize,
    /// Pairs surviving selection and filtration.
    pub retained: usize,
    /// Set when the provider had no retained pairs and passed through
    /// unchanged.
    pub no_pairs_warning: bool,
    pub final_mean_loss: Option<f64>,
    pub final_winner_reward: Option<f64>,
    pub final_loser_reward: Option<f64>,
}

/// Observability record for one pass (training iteration or measurement).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    /// Index of the pass: the iteration trained, or for a measurement-only
    /// pass the label supplied by the caller.
    pub iteration: u32,
    /// Iteration of the providers that generated the candidates.
    pub provider_iteration: u32,
    pub trained: bool,
    pub diversity: String,
    pub filtration_enabled: bool,
    pub per_provider: Vec<ProviderIterationStats>,
    pub total_generated: usize,
    pub total_retained: usize,
    pub degenerate_samples: usize,
    /// Mean usefulness score of the winning rationale over retained samples.
    pub mean_winner_score: Option<f64>,
    /// Same, normalized by answer token count before averaging.
    pub mean_winner_score_per_token: Option<f64>,
    /// Mean rationale-free answer log-likelihood over retained samples.
    pub mean_baseline_score: Option<f64>,
    /// Largest deviation of any pair's loss from ln 2 when training started
    /// (policy equals its fresh reference). Absent for measurement passes and
    /// when no provider had pairs.
    pub initial_dpo_loss_max_dev: Option<f64>,
}

struct SampleVerdict {
    split: usize,
    pair: Option<PreferencePair>,
    degenerate: bool,
    retained: bool,
    winner_score: f64,
    winner_score_per_token: f64,
    baseline_score: f64,
}

struct PassOutcome {
    pairs_per_provider: Vec<Vec<PreferencePair>>,
    generated_per_provider: Vec<usize>,
    degenerate_samples: usize,
    mean_winner_score: Option<f64>,
    mean_winner_score_per_token: Option<f64>,
    mean_baseline_score: Option<f64>,
}

fn collect_pass(
    providers: &[ProviderState],
    ctx: &PipelineContext,
    d_task: &Dataset,
    cfg: &TaskStageConfig,
    iteration: u32,
) -> Result<PassOutcome, PipelineError> {
    let split_count = providers.len();
    let split_seed = if cfg.resplit_each_iteration {
        mix_seed(cfg.split_seed, iteration as u64)
    } else {
        cfg.split_seed
    };
    let assignment = split_dataset(d_task, split_count, split_seed)?;
    let origin = PairOrigin::TaskIteration(iteration);

    let verdicts: Vec<SampleVerdict> = d_task
        .samples()
        .par_iter()
        .enumerate()
        .map(|(index, sample)| -> Result<SampleVerdict, PipelineError> {
            let split = assignment.split_of(index);
            let seed = mix_seed(cfg.generation_seed, mix_seed(iteration as u64, sample.id));
            let candidates = scored_candidates(
                providers,
                ctx,
                cfg.diversity,
                &sample.instruction,
                &sample.answer,
                seed,
            )?;
            let scores: Vec<f64> = candidates.iter().map(|c| c.score).collect();
            let selection = select_winner_eliminated(&scores)?;
            let (winner, eliminated) = match selection {
                Selection::Degenerate => {
                    return Ok(SampleVerdict {
                        split,
                        pair: None,
                        degenerate: true,
                        retained: false,
                        winner_score: 0.0,
                        winner_score_per_token: 0.0,
                        baseline_score: 0.0,
                    });
                }
                Selection::Chosen(r) => (r.winner, r.eliminated),
            };
            let winner_text = &candidates[winner].text;
            let eliminated_text = &candidates[eliminated].text;
            let outcome = filter_sample(ctx, &sample.instruction, &sample.answer, winner_text)?;
            let retained = if cfg.filtration { outcome.retain } else { true };
            let pair = if retained
                && ctx.vocab.encode(winner_text)? != ctx.vocab.encode(eliminated_text)?
            {
                Some(PreferencePair {
                    context: ctx.templates.render(
                        crate::prompting::PromptMode::InstructionToRationale,
                        &sample.instruction,
                        None,
                    )?,
                    winner: winner_text.clone(),
                    loser: eliminated_text.clone(),
                    origin,
                })
            } else {
                None
            };
            let answer_tokens = ctx.vocab.encode_completion(&sample.answer)?.len();
            Ok(SampleVerdict {
                split,
                retained: pair.is_some(),
                pair,
                degenerate: false,
                winner_score: scores[winner],
                winner_score_per_token: scores[winner] / answer_tokens as f64,
                baseline_score: outcome.without_rationale,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut pairs_per_provider: Vec<Vec<PreferencePair>> = vec![Vec::new(); split_count];
    let mut generated_per_provider = vec![0usize; split_count];
    let mut degenerate_samples = 0usize;
    let mut retained_count = 0usize;
    let mut winner_sum = 0.0;
    let mut winner_pt_sum = 0.0;
    let mut baseline_sum = 0.0;
    for verdict in verdicts {
        generated_per_provider[verdict.split] += 1;
        if verdict.degenerate {
            degenerate_samples += 1;
        }
        if verdict.retained {
            retained_count += 1;
            winner_sum += verdict.winner_score;
            winner_pt_sum += verdict.winner_score_per_token;
            baseline_sum += verdict.baseline_score;
        }
        if let Some(pair) = verdict.pair {
            pairs_per_provider[verdict.split].push(pair);
        }
    }
    let mean = |sum: f64| (retained_count > 0).then(|| sum / retained_count as f64);
    Ok(PassOutcome {
        pairs_per_provider,
        generated_per_provider,
        degenerate_samples,
        mean_winner_score: mean(winner_sum),
        mean_winner_score_per_token: mean(winner_pt_sum),
        mean_baseline_score: mean(baseline_sum),
    })
}

fn base_report(
    outcome: &PassOutcome,
    iteration: u32,
    provider_iteration: u32,
    cfg: &TaskStageConfig,
) -> IterationReport {
    IterationReport {
        iteration,
        provider_iteration,
        trained: false,
        diversity: cfg.diversity.label().to_string(),
        filtration_enabled: cfg.filtration,
        per_provider: outcome
            .generated_per_provider
            .iter()
            .enumerate()
            .map(|(s, &generated)| ProviderIterationStats {
                provider: s,
                generated,
                retained: outcome.pairs_per_provider[s].len(),
                no_pairs_warning: false,
                final_mean_loss: None,
                final_winner_reward: None,
                final_loser_reward: None,
            })
            .collect(),
        total_generated: outcome.generated_per_provider.iter().sum(),
        total_retained: outcome.pairs_per_provider.iter().map(Vec::len).sum(),
        degenerate_samples: outcome.degenerate_samples,
        mean_winner_score: outcome.mean_winner_score,
        mean_winner_score_per_token: outcome.mean_winner_score_per_token,
        mean_baseline_score: outcome.mean_baseline_score,
        initial_dpo_loss_max_dev: None,
    }
}

/// Run task iteration `iteration` (1-based): generate, score, select, filter,
/// and tune each provider on its split with its pre-update parameters as the
/// frozen reference. Providers advance to `iteration`; the report's score
/// statistics describe the providers as they were at `iteration - 1`.
pub fn run_task_iteration(
    providers: &mut [ProviderState],
    ctx: &PipelineContext,
    d_task: &Dataset,
    iteration: u32,
    cfg: &TaskStageConfig,
) -> Result<(IterationReport, Vec<Vec<PreferencePair>>), PipelineError> {
    assert!(iteration >= 1, "task iterations are 1-based");
    for (s, p) in providers.iter().enumerate() {
        if p.iteration != iteration - 1 {
            return Err(PipelineError::ProviderIteration {
                provider: s,
                at: p.iteration,
                expected: iteration - 1,
            });
        }
    }
    let outcome = collect_pass(providers, ctx, d_task, cfg, iteration)?;
    let mut report = base_report(&outcome, iteration, iteration - 1, cfg);
    report.trained = true;

    let ln2 = std::f64::consts::LN_2;
    let mut max_dev: Option<f64> = None;
    for (s, provider) in providers.iter_mut().enumerate() {
        let pairs = &outcome.pairs_per_provider[s];
        let stats = &mut report.per_provider[s];
        if pairs.is_empty() {
            stats.no_pairs_warning = true;
        } else {
            let reference = provider.params.clone();
            let dpo_cfg = DpoConfig {
                seed: mix_seed(cfg.dpo.seed, mix_seed(iteration as u64, s as u64)),
                ..cfg.dpo.clone()
            };
            let metrics = train_dpo(&mut provider.params, &reference, ctx.vocab, pairs, &dpo_cfg)?;
            let dev = (metrics.initial_loss_min - ln2)
                .abs()
                .max((metrics.initial_loss_max - ln2).abs());
            max_dev = Some(max_dev.map_or(dev, |d: f64| d.max(dev)));
            if let Some(last) = metrics.per_epoch.last() {
                stats.final_mean_loss = Some(last.stats.mean_loss);
                stats.final_winner_reward = Some(last.stats.mean_winner_reward);
                stats.final_loser_reward = Some(last.stats.mean_loser_reward);
            }
        }
        provider.iteration = iteration;
        provider.reference_id = format!("rp{s}_iter{}", iteration - 1);
    }
    report.initial_dpo_loss_max_dev = max_dev;
    Ok((report, outcome.pairs_per_provider))
}

/// Measurement-only pass: generate, score, and filter without touching the
/// providers. Used to record the final providers' statistics after the last
/// training iteration.
pub fn measure_task_stage(
    providers: &[ProviderState],
    ctx: &PipelineContext,
    d_task: &Dataset,
    label: u32,
    cfg: &TaskStageConfig,
) -> Result<IterationReport, PipelineError> {
    let outcome = collect_pass(providers, ctx, d_task, cfg, label)?;
    let provider_iteration = providers.first().map_or(0, |p| p.iteration);
    Ok(base_report(&outcome, label, provider_iteration, cfg))
}
