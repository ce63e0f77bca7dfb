//! Command-line driver for the poster pipeline.

pub mod config;
pub mod ledger;
pub mod stages;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use posterforge_core::curriculum::CurriculumConfig;
use posterforge_core::imaging::load_png;
use posterforge_core::pairbuilder::TaskKind;
use posterforge_core::sampler::SampleRequest;

use config::{ConfigError, PipelineConfig};
use stages::{Ctx, MissingArtifact};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "posterforge", version, about = "Synthetic poster corpus, training and evaluation pipeline")]
pub struct Cli {
    /// Pipeline config (TOML). Environment variables POSTERFORGE_<BLOCK>__<KEY> override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; overrides `root` from the config.
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
    /// Skip completed stages and continue training from the last checkpoint.
    #[arg(long, global = true)]
    pub resume: bool,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    Ok((
        w.parse().map_err(|_| format!("bad width in {s:?}"))?,
        h.parse().map_err(|_| format!("bad height in {s:?}"))?,
    ))
}

fn parse_tasks(s: &str) -> Result<Vec<TaskKind>, String> {
    if s == "all" {
        return Ok(TaskKind::ALL.to_vec());
    }
    s.split(',')
        .map(|t| TaskKind::parse(t.trim()).ok_or_else(|| format!("unknown task {t:?}")))
        .collect()
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic poster corpus.
    Corpus {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_delimiter = ',', value_parser = parse_size)]
        buckets: Option<Vec<(u32, u32)>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// OCR and aesthetic gating.
    Filter {
        /// Corpus directory holding the images.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build (source, target) training pairs from kept posters.
    Pair {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "all", value_parser = parse_tasks)]
        tasks: ::std::vec::Vec<TaskKind>,
    },
    /// Glyph and layout captions for kept posters.
    Caption {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Curriculum training.
    Train {
        /// Curriculum TOML; replaces the config's `curriculum` block.
        #[arg(long)]
        curriculum: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after this many optimizer steps (checkpoints stay resumable).
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Sample one poster, or the demo set when no prompt is given.
    Sample {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        cond: Option<PathBuf>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, value_parser = parse_size)]
        size: Option<(u32, u32)>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg: Option<f64>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score sampled posters.
    Eval {
        #[arg(long)]
        outputs: Option<PathBuf>,
        #[arg(long)]
        requests: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the condition images as if they were the outputs.
        #[arg(long)]
        baseline: bool,
        /// JSON-lines issue annotations replacing the automatic issue counts.
        #[arg(long)]
        issues: Option<PathBuf>,
    },
    /// Normalized radar data across metric reports.
    Report {
        #[arg(long, num_args = 2.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        radar: Option<PathBuf>,
    },
    /// Every stage in order at desk scale.
    RunAll,
}

/// Exit status for an error: 2 for bad input or configuration, 3 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use posterforge_core::Error as E;
    fn core(e: &E) -> i32 {
        match e {
            E::Io { .. } | E::Image(_) => EXIT_RUNTIME,
            E::Stage { source, .. } => core(source),
            _ => EXIT_VALIDATION,
        }
    }
    for cause in err.chain() {
        if cause.is::<MissingArtifact>() || cause.is::<ConfigError>() || cause.is::<serde_json::Error>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return core(e);
        }
    }
    EXIT_RUNTIME
}

pub fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = &cli.root {
        cfg.root = r.clone();
    }
    cfg.resolve()
}

fn read_curriculum(path: &Path) -> anyhow::Result<CurriculumConfig> {
    stages::require(&[path])?;
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

const RUN_ALL_STAGES: [&str; 9] = [
    "corpus",
    "filter",
    "pair",
    "caption",
    "train",
    "sample",
    "eval",
    "eval-baseline",
    "report",
];

/// Runs every stage; with `resume`, stages whose ledger record matches
/// intact outputs are skipped.
pub fn run_all(ctx: &Ctx, resume: bool) -> anyhow::Result<Value> {
    let done = ledger::read(&ctx.ledger)?;
    if !done.is_empty() && !resume {
        bail!(ConfigError(format!(
            "{} already holds a run; pass --resume or choose another root",
            ctx.layout.root.display()
        )));
    }
    let l = ctx.layout.clone();
    let cfg = &ctx.cfg;
    let mut summary = serde_json::Map::new();
    for name in RUN_ALL_STAGES {
        if done.iter().any(|r| r.stage == name && r.outputs_intact(&l.root)) {
            log::info!("{name}: already complete");
            summary.insert(name.into(), json!("resumed"));
            continue;
        }
        log::info!("{name}: running");
        let result = match name {
            "corpus" => stages::corpus(ctx, cfg.corpus.count, &cfg.corpus.generator, &l.corpus()),
            "filter" => stages::filter(ctx, &l.corpus().join("manifest.jsonl"), &l.corpus(), cfg.filter.tau, &l.filtered()),
            "pair" => stages::pair(ctx, &l.filtered(), &l.corpus(), &cfg.pair.tasks, &l.pairs()),
            "caption" => stages::caption(ctx, &l.filtered(), &l.captions()),
            "train" => stages::train(ctx, &cfg.model, &cfg.curriculum, &l.pairs(), &l.train(), resume, None),
            "sample" => stages::sample_demo(ctx, &l.model(), &l.pairs(), &l.samples()),
            "eval" => stages::eval(
                ctx,
                &l.samples().join("requests.jsonl"),
                &l.samples(),
                false,
                None,
                &l.eval().join("model.json"),
            )
            .map(|r| json!({"prompt_following": r.prompt_following, "subject_preservation": r.subject_preservation, "design_sense": r.design_sense, "usability_rate": r.study.usability_rate, "satisfaction_rate": r.study.satisfaction_rate})),
            "eval-baseline" => stages::eval(
                ctx,
                &l.samples().join("requests.jsonl"),
                &l.samples(),
                true,
                None,
                &l.eval().join("baseline.json"),
            )
            .map(|r| json!({"prompt_following": r.prompt_following, "subject_preservation": r.subject_preservation})),
            "report" => stages::report(
                ctx,
                &[l.eval().join("model.json"), l.eval().join("baseline.json")],
                &l.radar(),
            )
            .map(|r| json!({"models": r.models})),
            _ => unreachable!(),
        };
        let value = result.with_context(|| format!("stage {name}"))?;
        summary.insert(name.into(), value);
    }
    let summary = Value::Object(summary);
    std::fs::write(l.root.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

pub fn execute(cli: Cli) -> anyhow::Result<Value> {
    let cfg = load_config(&cli)?;
    let ctx = Ctx::new(cfg);
    let l = ctx.layout.clone();
    let c = &ctx.cfg;
    match cli.command {
        Command::Corpus { count, buckets, out } => {
            let mut g = c.corpus.generator.clone();
            if let Some(b) = buckets {
                g.buckets = b;
            }
            g.check()?;
            stages::corpus(&ctx, count.unwrap_or(c.corpus.count), &g, &out.unwrap_or(l.corpus()))
        }
        Command::Filter { input, manifest, tau, out } => {
            let dir = input.unwrap_or(l.corpus());
            let manifest = manifest.unwrap_or(dir.join("manifest.jsonl"));
            stages::filter(&ctx, &manifest, &dir, tau.unwrap_or(c.filter.tau), &out.unwrap_or(l.filtered()))
        }
        Command::Pair { manifest, images, out, tasks } => stages::pair(
            &ctx,
            &manifest.unwrap_or(l.filtered()),
            &images.unwrap_or(l.corpus()),
            &tasks,
            &out.unwrap_or(l.pairs()),
        ),
        Command::Caption { manifest, out } => {
            stages::caption(&ctx, &manifest.unwrap_or(l.filtered()), &out.unwrap_or(l.captions()))
        }
        Command::Train { curriculum, pairs, out, max_steps } => {
            let cur = match curriculum {
                Some(p) => {
                    let mut cur = read_curriculum(&p)?;
                    cur.seed = c.seed;
                    cur.check(&c.model.group_labels())?;
                    cur
                }
                None => c.curriculum.clone(),
            };
            let out = out.unwrap_or(l.train());
            stages::train(&ctx, &c.model, &cur, &pairs.unwrap_or(l.pairs()), &out, cli.resume, max_steps)
        }
        Command::Sample { ckpt, cond, prompt, size, steps, cfg, pairs, out } => {
            let ckpt = ckpt.unwrap_or(l.model());
            match prompt {
                Some(prompt) => {
                    let cond = match cond {
                        Some(p) => {
                            stages::require(&[&p])?;
                            Some(load_png(&p)?)
                        }
                        None => None,
                    };
                    let (width, height) = size.unwrap_or(c.sampler.size);
                    let req = SampleRequest {
                        cond,
                        prompt,
                        width,
                        height,
                        steps: steps.unwrap_or(c.sampler.steps),
                        guidance: cfg.unwrap_or(c.sampler.guidance),
                        seed: c.seed,
                    };
                    stages::sample_one(&req, &ckpt, &out.unwrap_or_else(|| PathBuf::from("out.png")))
                }
                None => {
                    let mut ctx = ctx;
                    if let Some(s) = steps {
                        ctx.cfg.sampler.steps = s;
                    }
                    if let Some(g) = cfg {
                        ctx.cfg.sampler.guidance = g;
                    }
                    if let Some(s) = size {
                        ctx.cfg.sampler.size = s;
                    }
                    stages::sample_demo(&ctx, &ckpt, &pairs.unwrap_or(l.pairs()), &out.unwrap_or(l.samples()))
                }
            }
        }
        Command::Eval { outputs, requests, out, baseline, issues } => {
            let outputs = outputs.unwrap_or(l.samples());
            let requests = requests.unwrap_or(outputs.join("requests.jsonl"));
            let name = if baseline { "baseline.json" } else { "model.json" };
            let r = stages::eval(&ctx, &requests, &outputs, baseline, issues.as_deref(), &out.unwrap_or(l.eval().join(name)))?;
            Ok(json!({
                "prompt_following": r.prompt_following,
                "subject_preservation": r.subject_preservation,
                "design_sense": r.design_sense,
                "usability_rate": r.study.usability_rate,
                "satisfaction_rate": r.study.satisfaction_rate,
            }))
        }
        Command::Report { reports, radar } => {
            let data = stages::report(&ctx, &reports, &radar.unwrap_or(l.radar()))?;
            eprint!("{}", stages::format_reference_table());
            Ok(serde_json::to_value(data)?)
        }
        Command::RunAll => run_all(&ctx, cli.resume),
    }
}

/// Parses `args`, runs the command, prints its summary and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_and_task_parsing() {
        assert_eq!(parse_size("64x96"), Ok((64, 96)));
        assert!(parse_size("64").is_err());
        assert_eq!(parse_tasks("all").unwrap().len(), 5);
        assert_eq!(parse_tasks("text_addition,restyle").unwrap(), vec![TaskKind::TextAddition, TaskKind::Restyle]);
        assert!(parse_tasks("bogus").is_err());
    }

    #[test]
    fn exit_codes() {
        let missing: anyhow::Error = MissingArtifact("x".into()).into();
        assert_eq!(exit_code(&missing.context("stage pair")), EXIT_VALIDATION);
        let cfg: anyhow::Error = posterforge_core::Error::Config("bad".into()).into();
        assert_eq!(exit_code(&cfg), EXIT_VALIDATION);
        let io: anyhow::Error =
            posterforge_core::Error::io("f", std::io::Error::other("disk")).into();
        assert_eq!(exit_code(&io), EXIT_RUNTIME);
        assert_eq!(exit_code(&anyhow::anyhow!("boom")), EXIT_RUNTIME);
    }
}
