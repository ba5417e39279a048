//! Command-line entry point: dataset generation, instruction tuning,
//! provider construction, task-guided preference iterations, evaluation, and
//! run-directory reporting.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use collate::config::RunConfig;
use collate::corpus::{
    load_jsonl, partition_train_val_test, save_jsonl, synth_arithmetic, synth_mcq,
    verify_arithmetic_sample, verify_mcq_sample, Dataset, DatasetKind,
};
use collate::dpo::{save_pairs_jsonl, DpoConfig};
use collate::ift::{train_ift, IftConfig, ModeMix};
use collate::lm::{
    load_checkpoint, save_checkpoint, DecodingPolicy, ModelHyper, ModelParams, UpdateRule,
    Vocabulary,
};
use collate::pipeline::{
    evaluate_accuracy, init_providers, measure_task_stage, mix_seed, perplexity,
    rationale_conditioned_sft, run_task_iteration, select_best_provider, train_stage1,
    DiversityMode, IterationReport, PipelineContext, ProviderState, Stage1Config, TaskStageConfig,
};
use collate::prompting::PromptTemplateSet;
use collate::rundir::{
    read_evaluation_csv, read_jsonl, write_evaluation_csv, write_jsonl, EvaluationRow, RunDir,
};

#[derive(Parser)]
#[command(
    name = "collate",
    about = "Preferential rationale tuning on tiny built-in language models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Args)]
struct CommonArgs {
    /// Config file with `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (default: $COLLATE_RUN_DIR, then ./collate-run)
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Override one config value, e.g. --set dpo.beta=0.2 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Cap concurrent scoring workers (0 = all cores)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Commands {
    /// Generate a synthetic dataset and write train/val/test JSONL files
    GenSynthetic {
        /// Task family: arithmetic or mcq
        #[arg(long, default_value = "arithmetic")]
        task: String,
        /// Number of samples before the 80/10/10 split
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Maximum operations per arithmetic chain (1..=4)
        #[arg(long, default_value_t = 2)]
        ops: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output directory for train.jsonl, val.jsonl, test.jsonl
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Multi-mode instruction fine-tuning of the base model
    Ift(CommonArgs),
    /// Clone the tuned model into distinct rationale providers
    TrainProviders(CommonArgs),
    /// Iterative task-guided preference tuning of the providers
    TaskDpo(CommonArgs),
    /// SFT-based evaluation: accuracy and perplexity per provider iteration
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Also evaluate a baseline; accepted value: no-rationale
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Summarize a run directory into a CSV and a printed table
    Report {
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

// Stage labels mixed into the run seed to derive independent streams.
const SEED_BASE_MODEL: u64 = 1;
const SEED_IFT: u64 = 2;
const SEED_STAGE1_SPLIT: u64 = 3;
const SEED_STAGE1_DPO: u64 = 4;
const SEED_TASK_SPLIT: u64 = 5;
const SEED_TASK_DPO: u64 = 6;
const SEED_TASK_GEN: u64 = 7;
const SEED_SFT: u64 = 8;

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Commands::GenSynthetic {
            task,
            n,
            ops,
            seed,
            out,
        } => cmd_gen_synthetic(&task, n, ops, seed, &out),
        Commands::Ift(common) => with_env(&common, "ift", cmd_ift),
        Commands::TrainProviders(common) => {
            with_env(&common, "train-providers", cmd_train_providers)
        }
        Commands::TaskDpo(common) => with_env(&common, "task-dpo", cmd_task_dpo),
        Commands::Evaluate { common, baseline } => with_env(&common, "evaluate", |env| {
            cmd_evaluate(env, baseline.as_deref())
        }),
        Commands::Report { run_dir } => cmd_report(&RunDir::new(resolve_run_dir(run_dir))),
    }
}

struct Env {
    cfg: RunConfig,
    run: RunDir,
}

fn with_env(
    common: &CommonArgs,
    name: &str,
    f: impl FnOnce(&Env) -> Result<()> + Send,
) -> Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)
            .with_context(|| format!("loading config {}", path.display()))?;
    }
    for pair in &common.set {
        cfg.apply_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = common.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    let env = Env {
        run: RunDir::new(resolve_run_dir(common.run_dir.clone())),
        cfg,
    };
    println!("# collate {name}: effective configuration");
    println!("run-dir = {}", env.run.root().display());
    print!("{}", env.cfg.to_kv_string());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(env.cfg.workers)
        .build()
        .context("building worker pool")?;
    pool.install(|| f(&env))
}

fn resolve_run_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("COLLATE_RUN_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("collate-run"))
}

fn cmd_gen_synthetic(task: &str, n: usize, ops: usize, seed: u64, out: &PathBuf) -> Result<()> {
    if !(1..=4).contains(&ops) {
        bail!("--ops must be in 1..=4, got {ops}");
    }
    let data = match task {
        "arithmetic" => synth_arithmetic(n, ops, seed),
        "mcq" => synth_mcq(n, seed),
        other => bail!("unknown task {other:?} (expected arithmetic or mcq)"),
    };
    for sample in data.samples() {
        let check = match task {
            "arithmetic" => verify_arithmetic_sample(sample),
            _ => verify_mcq_sample(sample),
        };
        check.map_err(|e| anyhow!("generator self-check failed: {e}"))?;
    }
    let (train, val, test) = partition_train_val_test(&data);
    std::fs::create_dir_all(out)?;
    for (split, name) in [(&train, "train"), (&val, "val"), (&test, "test")] {
        let path = out.join(format!("{name}.jsonl"));
        save_jsonl(split, &path)?;
        println!("wrote {} ({} samples)", path.display(), split.len());
    }
    Ok(())
}

fn load_split(env: &Env, name: &str, kind: DatasetKind) -> Result<Dataset> {
    let path = env.cfg.data_dir.join(format!("{name}.jsonl"));
    load_jsonl(&path, name, kind).with_context(|| {
        format!(
            "loading {} (generate data with `collate gen-synthetic --out {}`)",
            path.display(),
            env.cfg.data_dir.display()
        )
    })
}

fn load_plain(env: &Env) -> Result<Dataset> {
    match &env.cfg.plain_data {
        Some(path) => load_jsonl(path, "plain", DatasetKind::IftGeneral)
            .with_context(|| format!("loading {}", path.display())),
        None => Ok(Dataset::new("plain", DatasetKind::IftGeneral, Vec::new())?),
    }
}

fn load_vocab(env: &Env) -> Result<Vocabulary> {
    Vocabulary::load(&env.run.vocab_path())
        .map_err(|e| anyhow!("{e}: run `collate ift` first to build the vocabulary"))
}

fn require_checkpoint(path: &std::path::Path, hint: &str) -> Result<ModelParams> {
    if !path.exists() {
        bail!("missing checkpoint {}: {hint}", path.display());
    }
    Ok(load_checkpoint(path)?)
}

fn templates_of(env: &Env) -> Result<PromptTemplateSet> {
    Ok(PromptTemplateSet::by_name(&env.cfg.templates)?)
}

fn init_model(cfg: &RunConfig, vocab_size: usize) -> ModelParams {
    match cfg.model_kind.as_str() {
        "bigram" => ModelParams::new_bigram(vocab_size),
        _ => ModelParams::new_kgram_mlp(
            ModelHyper::kgram_mlp(
                vocab_size,
                cfg.model_context,
                cfg.model_embed,
                cfg.model_hidden,
            ),
            mix_seed(cfg.seed, SEED_BASE_MODEL),
        ),
    }
}

fn decoding_of(cfg: &RunConfig, vocab: &Vocabulary) -> Result<DecodingPolicy> {
    Ok(DecodingPolicy::greedy(cfg.decode_max_len, vocab.eos())?)
}

/// Number of provider models: the sampling ablation keeps a single model and
/// treats `providers` as the candidate count.
fn provider_model_count(cfg: &RunConfig) -> usize {
    if cfg.diversity == "sampling" {
        1
    } else {
        cfg.providers
    }
}

fn diversity_of(cfg: &RunConfig) -> DiversityMode {
    if cfg.diversity == "sampling" {
        DiversityMode::Sampling {
            temperature: cfg.sampling_temperature,
            candidates: cfg.providers.max(2),
        }
    } else {
        DiversityMode::Providers
    }
}

fn snapshot_config(env: &Env) -> Result<()> {
    env.run.create_layout()?;
    std::fs::write(env.run.config_path(), env.cfg.to_kv_string())?;
    Ok(())
}

fn cmd_ift(env: &Env) -> Result<()> {
    snapshot_config(env)?;
    let templates = templates_of(env)?;
    let train = load_split(env, "train", DatasetKind::IftRationale)?;
    let val = load_split(env, "val", DatasetKind::TaskVal)?;
    let test = load_split(env, "test", DatasetKind::TaskTest)?;
    let plain = load_plain(env)?;

    let mut texts: Vec<String> = templates.vocabulary_seed_texts();
    for dataset in [&train, &val, &test, &plain] {
        texts.extend(dataset.texts().map(str::to_string));
    }
    let vocab = Vocabulary::build(&texts);
    vocab.save(&env.run.vocab_path())?;
    println!("vocabulary: {} tokens", vocab.size());

    let base = init_model(&env.cfg, vocab.size());
    save_checkpoint(&base, &env.run.base_checkpoint())?;
    println!("base model: {} parameters", base.param_count());

    let ift_cfg = IftConfig {
        epochs: env.cfg.ift_epochs,
        batch_size: env.cfg.ift_batch,
        learning_rate: env.cfg.ift_lr,
        mode_mix: ModeMix::AllModes,
        update_rule: UpdateRule::adam_default(),
        cosine_schedule: true,
        seed: mix_seed(env.cfg.seed, SEED_IFT),
    };
    let (m_ift, metrics) = train_ift(&base, &vocab, &templates, &train, &plain, &ift_cfg)?;
    save_checkpoint(&m_ift, &env.run.m_ift_checkpoint())?;
    write_jsonl(&env.run.ift_metrics_path(), &metrics)?;
    for row in metrics.iter().filter(|r| r.epoch == env.cfg.ift_epochs) {
        println!(
            "epoch {} {}: mean loss {:.4}",
            row.epoch, row.mode, row.mean_loss
        );
    }
    println!("wrote {}", env.run.m_ift_checkpoint().display());
    Ok(())
}

fn cmd_train_providers(env: &Env) -> Result<()> {
    snapshot_config(env)?;
    let templates = templates_of(env)?;
    let vocab = load_vocab(env)?;
    let m_ift = require_checkpoint(&env.run.m_ift_checkpoint(), "run `collate ift` first")?;
    let train = load_split(env, "train", DatasetKind::IftRationale)?;
    let ctx = PipelineContext {
        vocab: &vocab,
        templates: &templates,
        scorer: &m_ift,
        decoding: decoding_of(&env.cfg, &vocab)?,
    };
    let mut providers = init_providers(&m_ift, provider_model_count(&env.cfg))?;
    let cfg = Stage1Config {
        dpo: DpoConfig {
            beta: env.cfg.dpo_beta,
            epochs: env.cfg.stage1_epochs,
            learning_rate: env.cfg.stage1_lr,
            batch_size: env.cfg.stage1_batch,
            update_rule: UpdateRule::adam_default(),
            cosine_schedule: true,
            seed: mix_seed(env.cfg.seed, SEED_STAGE1_DPO),
        },
        split_seed: mix_seed(env.cfg.seed, SEED_STAGE1_SPLIT),
    };
    let outcome = train_stage1(&mut providers, &m_ift, &train, &ctx, &cfg)?;
    for (s, provider) in providers.iter().enumerate() {
        save_checkpoint(&provider.params, &env.run.provider_checkpoint(s, 0))?;
        save_pairs_jsonl(
            &outcome.pairs_per_provider[s],
            &env.run.stage1_pairs_path(s),
        )?;
    }
    write_jsonl(&env.run.stage1_report_path(), &outcome.reports)?;
    for report in &outcome.reports {
        println!(
            "provider {}: {} pairs from {} split samples ({} exact matches dropped)",
            report.provider, report.pair_count, report.split_size, report.dropped_exact_matches
        );
    }
    Ok(())
}

fn load_providers(env: &Env, iteration: u32, hint: &str) -> Result<Vec<ProviderState>> {
    let count = provider_model_count(&env.cfg);
    (0..count)
        .map(|s| {
            let params = require_checkpoint(&env.run.provider_checkpoint(s, iteration), hint)?;
            Ok(ProviderState {
                params,
                split_index: s,
                iteration,
                reference_id: if iteration == 0 {
                    "m_ift".to_string()
                } else {
                    format!("rp{s}_iter{}", iteration - 1)
                },
            })
        })
        .collect()
}

fn task_stage_config(env: &Env) -> TaskStageConfig {
    TaskStageConfig {
        dpo: DpoConfig {
            beta: env.cfg.dpo_beta,
            epochs: env.cfg.task_epochs,
            learning_rate: env.cfg.task_lr,
            batch_size: env.cfg.task_batch,
            update_rule: UpdateRule::adam_default(),
            cosine_schedule: true,
            seed: mix_seed(env.cfg.seed, SEED_TASK_DPO),
        },
        split_seed: mix_seed(env.cfg.seed, SEED_TASK_SPLIT),
        resplit_each_iteration: env.cfg.resplit_per_iteration,
        generation_seed: mix_seed(env.cfg.seed, SEED_TASK_GEN),
        filtration: env.cfg.filtration,
        diversity: diversity_of(&env.cfg),
    }
}

fn cmd_task_dpo(env: &Env) -> Result<()> {
    snapshot_config(env)?;
    let templates = templates_of(env)?;
    let vocab = load_vocab(env)?;
    let m_ift = require_checkpoint(&env.run.m_ift_checkpoint(), "run `collate ift` first")?;
    let mut providers = load_providers(env, 0, "run `collate train-providers` first")?;
    let train = load_split(env, "train", DatasetKind::TaskTrain)?;
    let ctx = PipelineContext {
        vocab: &vocab,
        templates: &templates,
        scorer: &m_ift,
        decoding: decoding_of(&env.cfg, &vocab)?,
    };
    let cfg = task_stage_config(env);
    let mut reports: Vec<IterationReport> = Vec::new();
    for i in 1..=env.cfg.iterations {
        let (report, pairs) = run_task_iteration(&mut providers, &ctx, &train, i, &cfg)?;
        for (s, provider) in providers.iter().enumerate() {
            save_checkpoint(&provider.params, &env.run.provider_checkpoint(s, i))?;
            save_pairs_jsonl(&pairs[s], &env.run.task_pairs_path(i, s))?;
        }
        for stats in &report.per_provider {
            if stats.no_pairs_warning {
                eprintln!(
                    "warning: provider {} had no retained pairs in iteration {i}; passed through unchanged",
                    stats.provider
                );
            }
        }
        println!(
            "iteration {i}: retained {}/{} samples ({} degenerate), mean winner score {:?}",
            report.total_retained,
            report.total_generated,
            report.degenerate_samples,
            report.mean_winner_score
        );
        reports.push(report);
    }
    // Measurement pass for the final providers.
    let final_report = measure_task_stage(&providers, &ctx, &train, env.cfg.iterations + 1, &cfg)?;
    println!(
        "final providers (iteration {}): retained {}/{}, mean winner score {:?}",
        final_report.provider_iteration,
        final_report.total_retained,
        final_report.total_generated,
        final_report.mean_winner_score
    );
    reports.push(final_report);
    write_jsonl(&env.run.task_reports_path(), &reports)?;
    Ok(())
}

fn cmd_evaluate(env: &Env, baseline: Option<&str>) -> Result<()> {
    snapshot_config(env)?;
    let templates = templates_of(env)?;
    let vocab = load_vocab(env)?;
    let m_ift = require_checkpoint(&env.run.m_ift_checkpoint(), "run `collate ift` first")?;
    let base = require_checkpoint(&env.run.base_checkpoint(), "run `collate ift` first")?;
    let final_iter = env.cfg.iterations;
    let providers = load_providers(
        env,
        final_iter,
        "run `collate task-dpo` first (or `collate train-providers` when iterations = 0)",
    )?;
    let train = load_split(env, "train", DatasetKind::TaskTrain)?;
    let val = load_split(env, "val", DatasetKind::TaskVal)?;
    let test = load_split(env, "test", DatasetKind::TaskTest)?;
    let ctx = PipelineContext {
        vocab: &vocab,
        templates: &templates,
        scorer: &m_ift,
        decoding: decoding_of(&env.cfg, &vocab)?,
    };

    let selection = select_best_provider(&providers, &ctx, &val)?;
    std::fs::write(
        env.run.selection_path(),
        serde_json::to_string_pretty(&selection)?,
    )?;
    println!(
        "selected provider {} (validation scores {:?})",
        selection.index, selection.mean_scores
    );

    let sft_cfg = IftConfig {
        epochs: env.cfg.sft_epochs,
        batch_size: env.cfg.sft_batch,
        learning_rate: env.cfg.sft_lr,
        mode_mix: ModeMix::AllModes, // overridden per variant inside SFT
        update_rule: UpdateRule::adam_default(),
        cosine_schedule: true,
        seed: mix_seed(env.cfg.seed, SEED_SFT),
    };

    let mut rows: Vec<EvaluationRow> = Vec::new();
    match baseline {
        Some("no-rationale") => {
            let (model, _) = rationale_conditioned_sft(&base, None, &ctx, &train, &sft_cfg)?;
            let acc = evaluate_accuracy(&model, None, &ctx, &test)?;
            let ppl = perplexity(&model, None, &ctx, &test)?;
            rows.push(EvaluationRow {
                method: "sft-no-rationale".to_string(),
                accuracy: acc.accuracy,
                perplexity: ppl,
            });
        }
        Some(other) => bail!("unknown baseline {other:?} (expected no-rationale)"),
        None => {}
    }
    for i in 0..=final_iter {
        let params = require_checkpoint(
            &env.run.provider_checkpoint(selection.index, i),
            "missing per-iteration provider checkpoint",
        )?;
        let (model, _) = rationale_conditioned_sft(&base, Some(&params), &ctx, &train, &sft_cfg)?;
        let acc = evaluate_accuracy(&model, Some(&params), &ctx, &test)?;
        let ppl = perplexity(&model, Some(&params), &ctx, &test)?;
        rows.push(EvaluationRow {
            method: format!("sft-rationale-iter{i}"),
            accuracy: acc.accuracy,
            perplexity: ppl,
        });
    }
    write_evaluation_csv(&env.run.evaluation_csv_path(), &rows)?;
    for row in &rows {
        println!(
            "{:<24} accuracy {:.4}  perplexity {:.4}",
            row.method, row.accuracy, row.perplexity
        );
    }
    println!("wrote {}", env.run.evaluation_csv_path().display());
    Ok(())
}

fn cmd_report(run: &RunDir) -> Result<()> {
    let eval_path = run.evaluation_csv_path();
    if !eval_path.exists() {
        bail!(
            "no evaluation found at {}: run `collate evaluate` first",
            eval_path.display()
        );
    }
    let rows = read_evaluation_csv(&eval_path)?;
    let task_reports: Vec<IterationReport> = if run.task_reports_path().exists() {
        read_jsonl(&run.task_reports_path())?
    } else {
        Vec::new()
    };

    let mut body = String::from("method,iteration,accuracy,perplexity,generated,retained\n");
    println!(
        "{:<24} {:>9} {:>9} {:>11} {:>10} {:>9}",
        "method", "iteration", "accuracy", "perplexity", "generated", "retained"
    );
    for row in &rows {
        let iteration = row.iteration();
        let counts = iteration.and_then(|i| {
            task_reports
                .iter()
                .find(|r| r.provider_iteration == i)
                .map(|r| (r.total_generated, r.total_retained))
        });
        let iter_str = iteration.map(|i| i.to_string()).unwrap_or_default();
        let (gen_str, ret_str) = counts
            .map(|(g, r)| (g.to_string(), r.to_string()))
            .unwrap_or_default();
        body.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.method, iter_str, row.accuracy, row.perplexity, gen_str, ret_str
        ));
        println!(
            "{:<24} {:>9} {:>9.4} {:>11.4} {:>10} {:>9}",
            row.method, iter_str, row.accuracy, row.perplexity, gen_str, ret_str
        );
    }
    if let Some(last) = task_reports.last() {
        println!(
            "toggles: diversity={} filtration={}",
            last.diversity,
            if last.filtration_enabled { "on" } else { "off" }
        );
    }
    std::fs::write(run.summary_csv_path(), body)?;
    println!("wrote {}", run.summary_csv_path().display());
    Ok(())
}
