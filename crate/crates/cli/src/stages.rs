//! One function per pipeline stage. Each checks its declared inputs,
//! writes its outputs and appends a ledger record.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Value};

use posterforge_core::captioner::{parse_caption, quantize_spans, Captioner, GrammarCaptioner};
use posterforge_core::curriculum::{compose_prompt, CurriculumConfig, Example, Trainer};
use posterforge_core::evalharness::{
    emit_radar, read_issue_counts, score_item, study_report, EvalItem, MetricReport, RadarData, ReferenceRow,
    REFERENCE_TABLE,
};
use posterforge_core::filtering::{filter_record, FilterDecision, TemplateOcr};
use posterforge_core::imaging::{load_mask, load_png, save_mask, save_png};
use posterforge_core::mmdit::{read_checkpoint, write_checkpoint, Checkpoint, Mmdit, ModelConfig};
use posterforge_core::pairbuilder::{make_pairs, read_pairs, segment_by_color, write_pairs, TaskKind, TrainingPair};
use posterforge_core::sampler::{sample, sample_grid, SampleRequest};
use posterforge_core::synthcorpus::{generate_corpus, read_manifest, write_corpus, CorpusConfig, PosterRecord};
use posterforge_core::GlyphFont;

use crate::config::PipelineConfig;
use crate::ledger::{self, LedgerRecord};

/// An upstream artifact a stage needs is absent.
#[derive(Debug)]
pub struct MissingArtifact(pub PathBuf);

impl std::fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing upstream artifact {}", self.0.display())
    }
}

impl std::error::Error for MissingArtifact {}

pub fn require(paths: &[&Path]) -> anyhow::Result<()> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(MissingArtifact(p.to_path_buf()).into()),
        None => Ok(()),
    }
}

/// Default artifact locations under a run root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn filtered(&self) -> PathBuf {
        self.root.join("filter/filtered.jsonl")
    }
    pub fn pairs(&self) -> PathBuf {
        self.root.join("pairs/pairs.jsonl")
    }
    pub fn captions(&self) -> PathBuf {
        self.root.join("captions/captions.jsonl")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn model(&self) -> PathBuf {
        self.train().join("model.ckpt")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn radar(&self) -> PathBuf {
        self.root.join("report/radar.json")
    }
    pub fn ledger(&self) -> PathBuf {
        self.root.join("ledger.jsonl")
    }
}

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub layout: Layout,
    pub ledger: PathBuf,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig) -> Self {
        let layout = Layout { root: cfg.root.clone() };
        Self {
            ledger: layout.ledger(),
            layout,
            cfg,
        }
    }

    fn record<C: Serialize>(&self, stage: &str, config: &C, inputs: &[PathBuf], outputs: &[PathBuf]) -> anyhow::Result<()> {
        let r = LedgerRecord::new(&self.layout.root, stage, config, inputs, outputs)?;
        ledger::append(&self.ledger, &r)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    require(&[path])?;
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn parent(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

// ---- corpus ----

pub fn corpus(ctx: &Ctx, count: usize, generator: &CorpusConfig, out: &Path) -> anyhow::Result<Value> {
    let report = generate_corpus(ctx.cfg.seed, count, generator)?;
    for (i, reason) in &report.skipped {
        log::warn!("record {i} skipped: {reason}");
    }
    write_corpus(out, &report.items)?;
    ctx.record("corpus", &(ctx.cfg.seed, count, generator), &[], &[out.to_path_buf()])?;
    Ok(json!({"records": report.items.len(), "skipped": report.skipped.len()}))
}

// ---- filter ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredLine {
    pub id: String,
    pub decision: FilterDecision,
    pub record: PosterRecord,
}

pub fn filter(ctx: &Ctx, manifest: &Path, images: &Path, tau: f64, out: &Path) -> anyhow::Result<Value> {
    require(&[manifest, images])?;
    let records = read_manifest(manifest)?;
    let ocr = TemplateOcr {
        font: GlyphFont::builtin(),
        config: ctx.cfg.filter.ocr.clone(),
    };
    let weights = ctx.cfg.filter.weights;
    let lines: Vec<FilteredLine> = records
        .into_par_iter()
        .map(|record| {
            let img = load_png(&images.join(format!("{}.png", record.id)))?;
            let decision = filter_record(&img, tau, &ocr, &weights)?;
            Ok(FilteredLine { id: record.id.clone(), decision, record })
        })
        .collect::<anyhow::Result<_>>()?;
    write_jsonl(out, &lines)?;
    let kept = lines.iter().filter(|l| l.decision.keep).count();
    let cfg = (&ctx.cfg.filter, tau);
    ctx.record("filter", &cfg, &[manifest.to_path_buf(), images.to_path_buf()], &[out.to_path_buf()])?;
    Ok(json!({"records": lines.len(), "kept": kept, "keep_rate": kept as f64 / lines.len().max(1) as f64}))
}

// ---- pair ----

pub fn pair(ctx: &Ctx, filtered: &Path, images: &Path, tasks: &[TaskKind], out: &Path) -> anyhow::Result<Value> {
    require(&[filtered, images])?;
    let lines: Vec<FilteredLine> = read_jsonl(filtered)?;
    let mut cfg = ctx.cfg.pair.clone();
    cfg.tasks = tasks.to_vec();
    let reports = lines
        .par_iter()
        .filter(|l| l.decision.keep)
        .map(|l| {
            let img = load_png(&images.join(format!("{}.png", l.id)))?;
            Ok(make_pairs(&l.record, &img, &l.decision.ocr, l.decision.report.score, &cfg))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for r in reports {
        pairs.extend(r.pairs);
        skipped.extend(r.skipped);
    }
    let dir = parent(out);
    write_pairs(&dir, &pairs)?;
    if out.file_name() != Some("pairs.jsonl".as_ref()) {
        std::fs::rename(dir.join("pairs.jsonl"), out)?;
    }
    let skipped_path = dir.join("skipped.jsonl");
    write_jsonl(&skipped_path, &skipped)?;
    let mut per_task = serde_json::Map::new();
    for t in TaskKind::ALL {
        per_task.insert(t.as_str().into(), pairs.iter().filter(|p| p.pair.task == t).count().into());
    }
    ctx.record(
        "pair",
        &cfg,
        &[filtered.to_path_buf(), images.to_path_buf()],
        &[out.to_path_buf(), dir.join("images"), skipped_path],
    )?;
    Ok(json!({"pairs": pairs.len(), "skipped": skipped.len(), "per_task": per_task}))
}

// ---- caption ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub id: String,
    pub glyph_caption: String,
    pub layout_caption: String,
}

pub fn caption(ctx: &Ctx, filtered: &Path, out: &Path) -> anyhow::Result<Value> {
    let lines: Vec<FilteredLine> = read_jsonl(filtered)?;
    let captioner = GrammarCaptioner;
    let mut out_lines = Vec::new();
    let mut mismatches = Vec::new();
    for l in lines.iter().filter(|l| l.decision.keep) {
        let c = captioner.caption(&l.record)?;
        if ctx.cfg.captioner.verify && parse_caption(&c.glyph_caption)? != quantize_spans(&l.record) {
            mismatches.push(l.id.clone());
        }
        out_lines.push(CaptionLine {
            id: l.id.clone(),
            glyph_caption: c.glyph_caption,
            layout_caption: c.layout_caption,
        });
    }
    if !mismatches.is_empty() {
        bail!("caption round trip failed for {} records, first {}", mismatches.len(), mismatches[0]);
    }
    write_jsonl(out, &out_lines)?;
    ctx.record("caption", &ctx.cfg.captioner, &[filtered.to_path_buf()], &[out.to_path_buf()])?;
    Ok(json!({"captions": out_lines.len(), "mismatches": 0}))
}

// ---- train ----

#[derive(Serialize)]
struct TrainSettings<'a> {
    model: &'a ModelConfig,
    curriculum: &'a CurriculumConfig,
}

fn progress(ckpt: &Checkpoint) -> (u64, u64) {
    let x = &ckpt.extra;
    (x["stage"].as_u64().unwrap_or(0), x["step"].as_u64().unwrap_or(0))
}

/// The most advanced training checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> anyhow::Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<((u64, u64), PathBuf)> = None;
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    names.sort();
    for p in names.into_iter().filter(|p| p.extension().is_some_and(|e| e == "ckpt")) {
        let ck = read_checkpoint(&p)?;
        if ck.kind != "train" {
            continue;
        }
        let key = progress(&ck);
        if best.as_ref().is_none_or(|(b, _)| key > *b) {
            best = Some((key, p));
        }
    }
    Ok(best.map(|b| b.1))
}

pub fn load_examples(pairs: &Path, patch: usize) -> anyhow::Result<Vec<Example>> {
    require(&[pairs])?;
    let root = parent(pairs);
    read_pairs(pairs)?
        .into_par_iter()
        .map(|p| Ok(Example::load(&root, p, patch)?))
        .collect()
}

pub fn train(
    ctx: &Ctx,
    model_cfg: &ModelConfig,
    curriculum: &CurriculumConfig,
    pairs: &Path,
    out: &Path,
    resume: bool,
    max_steps: Option<usize>,
) -> anyhow::Result<Value> {
    let examples = load_examples(pairs, model_cfg.patch)?;
    std::fs::create_dir_all(out)?;
    let from = if resume { latest_checkpoint(out)? } else { None };
    let mut tr = match &from {
        Some(p) => {
            log::info!("resuming from {}", p.display());
            let ck = read_checkpoint(p)?;
            if &ck.config != model_cfg {
                bail!(crate::config::ConfigError("model config differs from the checkpoint".into()));
            }
            Trainer::resume(&ck, curriculum.clone(), &examples)?
        }
        None => Trainer::new(Mmdit::new(model_cfg.clone())?, curriculum.clone(), &examples)?,
    };
    let bs = curriculum.batch_size;
    let mut taken = 0usize;
    let start = std::time::Instant::now();
    while max_steps.is_none_or(|m| taken < m) && tr.step()? {
        taken += 1;
        if taken % 100 == 0 {
            let tail = &tr.trace[tr.trace.len() - 100 * bs..];
            let mean = tail.iter().map(|e| e.loss).sum::<f64>() / tail.len() as f64;
            log::info!("step {taken} stage {} loss {mean:.4} ({:.0?})", tr.stage, start.elapsed());
        }
        if tr.at_checkpoint() {
            let path = if tr.step == 0 {
                out.join(format!("stage{}-{}.ckpt", tr.stage, curriculum.stages[tr.stage - 1].name))
            } else {
                out.join("latest.ckpt")
            };
            write_checkpoint(&path, &tr.checkpoint())?;
        }
    }
    if !tr.done() {
        log::info!("stopped after {taken} steps at stage {} step {}", tr.stage, tr.step);
        return Ok(json!({"completed": false, "stage": tr.stage, "step": tr.step}));
    }
    let trace_path = out.join("trace.jsonl");
    write_jsonl(&trace_path, &tr.trace)?;
    let model_path = out.join("model.ckpt");
    write_checkpoint(&model_path, &tr.model.to_checkpoint("model", json!({"trace_entries": tr.trace.len()})))?;
    let first = tr.trace.iter().take(bs).map(|e| e.loss).sum::<f64>() / bs as f64;
    let last = tr.trace.iter().rev().take(bs).map(|e| e.loss).sum::<f64>() / bs as f64;
    let settings = TrainSettings { model: model_cfg, curriculum };
    ctx.record("train", &settings, &[pairs.to_path_buf(), parent(pairs).join("images")], &[out.to_path_buf()])?;
    Ok(json!({
        "completed": true,
        "params": tr.model.param_count(),
        "steps": curriculum.stages.iter().map(|s| s.steps).sum::<usize>(),
        "first_batch_loss": first,
        "last_batch_loss": last,
    }))
}

pub fn load_model(path: &Path) -> anyhow::Result<Mmdit<f32>> {
    require(&[path])?;
    Ok(Mmdit::from_checkpoint(&read_checkpoint(path)?)?)
}

// ---- sample ----

/// One scored demo sample; paths are relative to the requests file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub id: String,
    pub output: String,
    pub cond: String,
    pub subject_mask: String,
    pub prompt: String,
    pub texts: Vec<String>,
}

/// Strings a pair's target should show, read back from its glyph caption.
pub fn requested_texts(pair: &TrainingPair) -> anyhow::Result<Vec<String>> {
    Ok(parse_caption(&pair.glyph_caption)?.into_iter().map(|c| c.content).collect())
}

pub fn sample_demo(ctx: &Ctx, ckpt: &Path, pairs: &Path, out: &Path) -> anyhow::Result<Value> {
    require(&[ckpt, pairs])?;
    let model = load_model(ckpt)?;
    let sc = &ctx.cfg.sampler;
    let last = ctx.cfg.curriculum.stages.last().context("curriculum has no stages")?;
    let (glyph, layout) = (last.glyph_caption, last.layout_caption);
    let root = parent(pairs);
    let chosen: Vec<TrainingPair> = read_pairs(pairs)?
        .into_iter()
        .filter(|p| p.task == sc.task && p.target_dims == sc.size)
        .take(sc.count)
        .collect();
    if chosen.is_empty() {
        bail!(MissingArtifact(PathBuf::from(format!("{} pairs at {:?}", sc.task.as_str(), sc.size))));
    }
    for d in ["demo", "cond", "masks", "ratios"] {
        std::fs::create_dir_all(out.join(d))?;
    }
    let (w, h) = sc.size;
    let requests = chosen
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let cond = load_png(&root.join(&p.source_image))?;
            let req = SampleRequest {
                cond: Some(cond.clone()),
                prompt: compose_prompt(p, glyph, layout),
                width: w,
                height: h,
                steps: sc.steps,
                guidance: sc.guidance,
                seed: ctx.cfg.seed.wrapping_add(i as u64),
            };
            let img = sample(&model, &req)?;
            let r = EvalRequest {
                id: p.pair_id.clone(),
                output: format!("demo/{}.png", p.pair_id),
                cond: format!("cond/{}.png", p.pair_id),
                subject_mask: format!("masks/{}.png", p.pair_id),
                prompt: req.prompt,
                texts: requested_texts(p)?,
            };
            save_png(&img, &out.join(&r.output))?;
            save_png(&cond, &out.join(&r.cond))?;
            save_mask(&segment_by_color(&cond, 0).mask, &out.join(&r.subject_mask))?;
            Ok(r)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let requests_path = out.join("requests.jsonl");
    write_jsonl(&requests_path, &requests)?;

    let first = &chosen[0];
    let base = SampleRequest {
        cond: Some(load_png(&root.join(&first.source_image))?),
        prompt: requests[0].prompt.clone(),
        width: w,
        height: h,
        steps: sc.steps,
        guidance: sc.guidance,
        seed: ctx.cfg.seed,
    };
    let mut ratio_ok = 0;
    let mut ratio_errors = Vec::new();
    for (&(rw, rh), r) in sc.ratios.iter().zip(sample_grid(&model, &base, &sc.ratios)) {
        match r {
            Ok(img) => {
                save_png(&img, &out.join(format!("ratios/{rw}x{rh}.png")))?;
                ratio_ok += 1;
            }
            Err(e) => ratio_errors.push(format!("{rw}x{rh}: {e}")),
        }
    }
    write_json(&out.join("ratios/errors.json"), &ratio_errors)?;
    let cfg = (ctx.cfg.seed, sc, glyph, layout);
    ctx.record(
        "sample",
        &cfg,
        &[ckpt.to_path_buf(), pairs.to_path_buf(), root.join("images")],
        &[out.to_path_buf()],
    )?;
    Ok(json!({"samples": requests.len(), "ratios": ratio_ok, "ratio_errors": ratio_errors}))
}

pub fn sample_one(req: &SampleRequest, ckpt: &Path, out: &Path) -> anyhow::Result<Value> {
    let model = load_model(ckpt)?;
    let img = sample(&model, req)?;
    if let Some(d) = out.parent() {
        std::fs::create_dir_all(d)?;
    }
    save_png(&img, out)?;
    Ok(json!({"output": out, "dims": img.dimensions()}))
}

// ---- eval ----

/// Scores the outputs named in `requests`. With `baseline`, each condition
/// image stands in for its output.
pub fn eval(
    ctx: &Ctx,
    requests: &Path,
    outputs: &Path,
    baseline: bool,
    issues: Option<&Path>,
    out: &Path,
) -> anyhow::Result<MetricReport> {
    let reqs: Vec<EvalRequest> = read_jsonl(requests)?;
    if reqs.is_empty() {
        bail!(crate::config::ConfigError(format!("{} lists no samples", requests.display())));
    }
    let stride = ctx.cfg.model.patch as u32;
    let samples = reqs
        .par_iter()
        .map(|r| {
            let cond = load_png(&outputs.join(&r.cond))?;
            let output = if baseline { cond.clone() } else { load_png(&outputs.join(&r.output))? };
            let item = EvalItem {
                id: r.id.clone(),
                output,
                cond,
                subject: load_mask(&outputs.join(&r.subject_mask))?,
                requested: r.texts.clone(),
            };
            Ok(score_item(&item, stride)?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let k = ctx.cfg.eval.issue_threshold;
    let mut report = MetricReport::from_samples(samples, k)?;
    let mut inputs = vec![requests.to_path_buf(), outputs.to_path_buf()];
    if let Some(p) = issues {
        require(&[p])?;
        let ann = read_issue_counts(p)?;
        let counts = report
            .samples
            .iter()
            .map(|s| {
                ann.iter()
                    .find(|a| a.id == s.id)
                    .map(|a| a.issues)
                    .with_context(|| format!("no annotation for {}", s.id))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        report.study = study_report(counts, k)?;
        inputs.push(p.to_path_buf());
    }
    write_json(out, &report)?;
    let name = if baseline { "eval-baseline" } else { "eval" };
    ctx.record(name, &ctx.cfg.eval, &inputs, &[out.to_path_buf()])?;
    Ok(report)
}

// ---- report ----

#[derive(Debug, Clone, Serialize)]
pub struct RadarFile {
    #[serde(flatten)]
    pub radar: RadarData,
    /// Published figures, for display only.
    pub reference: Vec<ReferenceRow>,
}

pub fn report(ctx: &Ctx, reports: &[PathBuf], radar: &Path) -> anyhow::Result<RadarData> {
    let refs: Vec<&Path> = reports.iter().map(PathBuf::as_path).collect();
    require(&refs)?;
    let mut rows = Vec::new();
    for p in reports {
        let r: MetricReport = serde_json::from_slice(&std::fs::read(p)?)
            .with_context(|| format!("reading report {}", p.display()))?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push((name, r.axes()));
    }
    let data = emit_radar(&rows)?;
    write_json(
        radar,
        &RadarFile {
            radar: data.clone(),
            reference: REFERENCE_TABLE.to_vec(),
        },
    )?;
    ctx.record("report", &(), reports, &[radar.to_path_buf()])?;
    Ok(data)
}

pub fn format_reference_table() -> String {
    let mut s = String::from("published human-study figures (display only):\n");
    for r in REFERENCE_TABLE {
        let of5 = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}/5"));
        s.push_str(&format!(
            "  {:<18} usability {:>6.2}%  prompt {:>6}  subject {:>6}  design {:>6}\n",
            r.model,
            r.usability_pct,
            of5(r.prompt_following_of5),
            of5(r.subject_preservation_of5),
            of5(r.design_sense_of5)
        ));
    }
    s
}
