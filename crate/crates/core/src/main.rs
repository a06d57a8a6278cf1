use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bandit_nmt::feedback::{
    attach_sbleu_feedback, filter_log, perturb_log, simulate_star_feedback, FeedbackLog, Predicate,
    StarNoise,
};
use bandit_nmt::harness::{
    approx_randomization_test, read_checkpoint, save_estimator, save_policy, ComparisonMetric,
    ExperimentConfig, HashCheck, ModelSpec, Pipeline, SentenceScores,
};
use bandit_nmt::policy::Policy;
use bandit_nmt::rewards::Matcher;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bandit-nmt", about = "Bandit and counterfactual learning experiments for NMT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; defaults to the first seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the out-of-domain baseline.
    Pretrain,
    /// Translate the log sources with the baseline and store the raw log.
    Log,
    /// Attach, simulate, filter or perturb feedback in a log file.
    Feedback {
        #[command(subcommand)]
        op: FeedbackOp,
    },
    /// Fine-tune the baseline as the named system of the configuration.
    Train {
        #[arg(long)]
        system: String,
    },
    /// Fit and evaluate a reward estimator on a named log.
    EstimateReward {
        #[arg(long)]
        log: String,
    },
    /// Evaluate a policy checkpoint on the test set.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Accept a checkpoint produced under a different configuration.
        #[arg(long)]
        override_hash: bool,
    },
    /// Approximate randomization test between two per-sentence score files.
    Significance {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum, default_value = "bleu")]
        metric: MetricArg,
        #[arg(long, default_value_t = 10_000)]
        rounds: usize,
    },
    /// Run the whole experiment and write the report.
    Report,
}

#[derive(Subcommand)]
enum FeedbackOp {
    /// Reward each entry with sentence BLEU against its reference.
    Attach {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Simulate star ratings.
    Simulate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        five_star_mass: f64,
        #[arg(long, default_value_t = 0.0)]
        rank_correlation: f64,
        #[arg(long, default_value_t = 0.3)]
        jitter: f64,
    },
    /// Keep entries that satisfy a predicate.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        predicate: PredicateArg,
        /// Threshold for `min-reward`.
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
        #[arg(long, value_enum, default_value = "exact")]
        matcher: MatcherArg,
    },
    /// Shuffle rewards across entries.
    Perturb {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Bleu,
    Recall,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredicateArg {
    FiveStar,
    FullRecall,
    MinReward,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatcherArg {
    Exact,
    Soft,
}

struct Ctx {
    pipeline: Pipeline,
    seed: u64,
    dir: PathBuf,
}

fn context(common: &Common) -> Result<Ctx> {
    let path = common.config.as_ref().context("--config is required for this command")?;
    let mut config = ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(out) = &common.out {
        config.out_dir = Some(out.clone());
    }
    let out = config.out_dir.clone().context("no output directory: pass --out or set out_dir")?;
    let seed = common.seed.unwrap_or(config.seeds[0]);
    if common.seed.is_some() {
        config.seeds = vec![seed];
    }
    let pipeline = Pipeline::new(config)?;
    let dir = out.join(format!("seed{seed}"));
    std::fs::create_dir_all(&dir)?;
    Ok(Ctx { pipeline, seed, dir })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn log_references(ctx: &Ctx, log: &FeedbackLog) -> Result<Vec<Vec<String>>> {
    let data = &ctx.pipeline.data().log;
    log.entries()
        .iter()
        .map(|e| {
            data.get(e.id as usize)
                .map(|p| p.target.clone())
                .with_context(|| format!("log id {} has no reference", e.id))
        })
        .collect()
}

fn feedback(common: &Common, op: &FeedbackOp) -> Result<()> {
    match op {
        FeedbackOp::Attach { input, output } => {
            let ctx = context(common)?;
            let log = FeedbackLog::load(input)?;
            let refs = log_references(&ctx, &log)?;
            attach_sbleu_feedback(&log, &refs)?.save(output)?;
        }
        FeedbackOp::Simulate {
            input,
            output,
            five_star_mass,
            rank_correlation,
            jitter,
        } => {
            let ctx = context(common)?;
            let log = FeedbackLog::load(input)?;
            let refs = log_references(&ctx, &log)?;
            let noise = StarNoise {
                five_star_mass: *five_star_mass,
                rank_correlation: *rank_correlation,
                jitter: *jitter,
                ..Default::default()
            };
            simulate_star_feedback(&log, &refs, &noise, ctx.seed)?.save(output)?;
        }
        FeedbackOp::Filter {
            input,
            output,
            predicate,
            threshold,
            matcher,
        } => {
            let matcher = match matcher {
                MatcherArg::Exact => Matcher::Exact,
                MatcherArg::Soft => Matcher::Soft,
            };
            let predicate = match predicate {
                PredicateArg::FiveStar => Predicate::FiveStar,
                PredicateArg::FullRecall => Predicate::FullRecall { matcher },
                PredicateArg::MinReward => Predicate::MinReward {
                    threshold: *threshold,
                },
            };
            let log = FeedbackLog::load(input)?;
            let kept = filter_log(&log, predicate)?;
            println!("kept {} of {} entries", kept.len(), log.len());
            kept.save(output)?;
        }
        FeedbackOp::Perturb { input, output } => {
            let seed = common.seed.unwrap_or(0);
            perturb_log(&FeedbackLog::load(input)?, seed)?.save(output)?;
        }
    }
    Ok(())
}

fn load_checked(ctx: &Ctx, path: &Path, override_hash: bool) -> Result<Policy> {
    let (header, params) = read_checkpoint(std::fs::File::open(path)?, HashCheck::Skip)?;
    let known = [
        ctx.pipeline.config_hash().to_string(),
        ctx.pipeline.config().baseline_hash(ctx.seed),
    ];
    if !known.contains(&header.config_hash) {
        if !override_hash {
            bail!(
                "checkpoint {} was produced under config {}, not this configuration (use --override-hash)",
                path.display(),
                header.config_hash
            );
        }
        eprintln!("warning: config hash mismatch for {}; continuing", path.display());
    }
    match header.model {
        ModelSpec::Policy {
            config,
            src_vocab,
            trg_vocab,
        } => Ok(Policy::from_parts(config, src_vocab, trg_vocab, params)?),
        ModelSpec::Estimator { .. } => bail!("{} is an estimator checkpoint", path.display()),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let common = &cli.common;
    match &cli.command {
        Command::Pretrain => {
            let ctx = context(common)?;
            let (_, curve) = ctx.pipeline.baseline(ctx.seed)?;
            for e in &curve.epochs {
                println!("epoch {:>3}  objective {:>10.4}  dev BLEU {:>6.2}", e.epoch, e.objective, e.dev_bleu);
            }
            println!("selected epoch {}", curve.selected_epoch);
        }
        Command::Log => {
            let ctx = context(common)?;
            let (bl, _) = ctx.pipeline.baseline(ctx.seed)?;
            let log = ctx.pipeline.base_log(&bl)?;
            std::fs::create_dir_all(ctx.dir.join("logs"))?;
            let path = ctx.dir.join("logs").join("base.jsonl");
            log.save(&path)?;
            println!("wrote {} entries to {}", log.len(), path.display());
        }
        Command::Feedback { op } => feedback(common, op)?,
        Command::Train { system } => {
            let ctx = context(common)?;
            let cfg = ctx.pipeline.config();
            let (index, spec) = cfg
                .systems
                .iter()
                .enumerate()
                .find(|(_, s)| &s.name == system)
                .with_context(|| format!("no system named {system}"))?;
            let (bl, _) = ctx.pipeline.baseline(ctx.seed)?;
            let logs = ctx.pipeline.build_logs(&bl, ctx.seed)?;
            let mut estimators = std::collections::BTreeMap::new();
            if let Some(l) = &spec.estimator_log {
                estimators.insert(l.clone(), ctx.pipeline.fit_estimator(&bl, &logs[l], ctx.seed)?);
            }
            let (policy, curve) =
                ctx.pipeline.train_system(&bl, spec, &logs, &estimators, ctx.seed, index + 1)?;
            for e in &curve.epochs {
                println!("epoch {:>3}  objective {:>10.4}  dev BLEU {:>6.2}", e.epoch, e.objective, e.dev_bleu);
            }
            let path = ctx.dir.join(format!("{system}.ckpt"));
            save_policy(&policy, ctx.pipeline.config_hash(), &path)?;
            println!("saved {}", path.display());
        }
        Command::EstimateReward { log } => {
            let ctx = context(common)?;
            let (bl, _) = ctx.pipeline.baseline(ctx.seed)?;
            let logs = ctx.pipeline.build_logs(&bl, ctx.seed)?;
            let l = logs.get(log).with_context(|| format!("no log named {log}"))?;
            let fitted = ctx.pipeline.fit_estimator(&bl, l, ctx.seed)?;
            let task = ctx.pipeline.task();
            let path = ctx.dir.join(format!("estimator-{log}.ckpt"));
            save_estimator(
                &fitted.estimator,
                task.src_vocab().len(),
                task.trg_vocab().len(),
                ctx.pipeline.config_hash(),
                &path,
            )?;
            println!("{}", serde_json::to_string_pretty(&fitted.eval)?);
        }
        Command::Evaluate {
            checkpoint,
            override_hash,
        } => {
            let ctx = context(common)?;
            let policy = load_checked(&ctx, checkpoint, *override_hash)?;
            let res = ctx.pipeline.evaluate(&policy)?;
            println!(
                "BLEU {:.2}  query recall {:.2}",
                res.bleu.unwrap_or_default(),
                100.0 * res.recall.unwrap_or_default()
            );
            let scores = SentenceScores {
                bleu: res.sentence_bleu,
                recall: res.sentence_recall,
            };
            let path = checkpoint.with_extension("scores.json");
            write_json(&path, &scores)?;
            println!("per-sentence scores in {}", path.display());
        }
        Command::Significance {
            a,
            b,
            metric,
            rounds,
        } => {
            let read = |p: &Path| -> Result<SentenceScores> { Ok(serde_json::from_slice(&std::fs::read(p)?)?) };
            let (sa, sb) = (read(a)?, read(b)?);
            let metric = match metric {
                MetricArg::Bleu => ComparisonMetric::Bleu,
                MetricArg::Recall => ComparisonMetric::Recall,
            };
            let pick = |s: SentenceScores| match metric {
                ComparisonMetric::Bleu => s.bleu,
                ComparisonMetric::Recall => s.recall,
            };
            let p = approx_randomization_test(&pick(sa), &pick(sb), *rounds, common.seed.unwrap_or(0))?;
            println!("p = {p:.6}");
        }
        Command::Report => {
            let path = common.config.as_ref().context("--config is required")?;
            let mut config = ExperimentConfig::load(path)?;
            if let Some(out) = &common.out {
                config.out_dir = Some(out.clone());
            }
            if let Some(seed) = common.seed {
                config.seeds = vec![seed];
            }
            let report = Pipeline::new(config)?.run()?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}
