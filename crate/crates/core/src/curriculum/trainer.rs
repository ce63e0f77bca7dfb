use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{sample_batch, trainable_mask, AdamW, CurriculumConfig, TaskPools};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::mmdit::{
    encode_text, flow_interpolate, patchify, read_checkpoint, write_checkpoint, Checkpoint, Inputs, Mmdit,
    PatchTokens, TensorBlob,
};
use crate::pairbuilder::{load_pair_images, TaskKind, TrainingPair};

/// A training pair with both images already in token form.
#[derive(Debug, Clone)]
pub struct Example {
    pub pair: TrainingPair,
    pub cond: PatchTokens<f32>,
    pub target: PatchTokens<f32>,
}

impl Example {
    pub fn new(pair: TrainingPair, source: &Image, target: &Image, patch: usize) -> Result<Self> {
        Ok(Self {
            pair,
            cond: patchify(source, patch)?,
            target: patchify(target, patch)?,
        })
    }

    pub fn load(root: &Path, pair: TrainingPair, patch: usize) -> Result<Self> {
        let (s, t) = load_pair_images(root, &pair)?;
        Self::new(pair, &s, &t, patch)
    }
}

/// Instruction followed by whichever captions the stage enables.
pub fn compose_prompt(pair: &TrainingPair, glyph: bool, layout: bool) -> String {
    let mut out = pair.instruction.clone();
    if glyph {
        out.push(' ');
        out.push_str(&pair.glyph_caption);
    }
    if layout {
        out.push(' ');
        out.push_str(&pair.layout_caption);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: String,
    pub step: usize,
    pub task: TaskKind,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Mmdit<f32>,
    pub trace: Vec<TraceEntry>,
    /// Every checkpoint written, in order.
    pub checkpoints: Vec<PathBuf>,
}

struct StageState {
    pools: TaskPools,
    prompts: Vec<Vec<u32>>,
    mask: Vec<bool>,
}

/// Step-by-step curriculum driver. All randomness comes from one ChaCha
/// stream, so a resumed run replays the same draws.
pub struct Trainer<'a> {
    pub model: Mmdit<f32>,
    pub config: CurriculumConfig,
    pub stage: usize,
    pub step: usize,
    pub trace: Vec<TraceEntry>,
    examples: &'a [Example],
    pairs: Vec<TrainingPair>,
    opt: AdamW,
    rng: ChaCha8Rng,
    decay: Vec<bool>,
    current: Option<StageState>,
}

fn decays(name: &str) -> bool {
    name.ends_with(".weight") && name != "text_embed.weight" && name != "role_embed.weight"
}

impl<'a> Trainer<'a> {
    pub fn new(model: Mmdit<f32>, config: CurriculumConfig, examples: &'a [Example]) -> Result<Self> {
        config.check(&model.config.group_labels())?;
        let opt = AdamW::new(config.optimizer.clone(), &model.params);
        let decay = model.names.iter().map(|n| decays(n)).collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            pairs: examples.iter().map(|e| e.pair.clone()).collect(),
            model,
            config,
            stage: 0,
            step: 0,
            trace: Vec::new(),
            examples,
            opt,
            decay,
            current: None,
        })
    }

    pub fn done(&self) -> bool {
        self.stage >= self.config.stages.len()
    }

    fn enter_stage(&mut self) -> Result<()> {
        let s = &self.config.stages[self.stage];
        let wrap = |e: Error| Error::Stage { stage: s.name.clone(), source: Box::new(e) };
        let pools = TaskPools::new(s, &self.pairs).map_err(wrap)?;
        let labels = self.model.config.group_labels();
        let mask = trainable_mask(&self.model.names, s.trainable_groups.as_deref(), &labels).map_err(wrap)?;
        let len = self.model.config.text_len;
        let prompts = self
            .pairs
            .iter()
            .map(|p| encode_text(&compose_prompt(p, s.glyph_caption, s.layout_caption), len))
            .collect();
        self.current = Some(StageState { pools, prompts, mask });
        Ok(())
    }

    /// Runs one optimizer step. Returns `false` once every stage is done.
    pub fn step(&mut self) -> Result<bool> {
        if self.done() {
            return Ok(false);
        }
        if self.current.is_none() {
            self.enter_stage()?;
        }
        let stage = &self.config.stages[self.stage];
        let st = self.current.as_ref().expect("stage entered");
        let batch = sample_batch(&st.pools, self.config.batch_size, &mut self.rng);
        let draws: Vec<_> = batch
            .iter()
            .map(|&(task, i)| {
                let t: f32 = self.rng.random();
                let n = self.examples[i].target.data.len();
                let noise: Vec<f32> = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
                let drop_text = self.rng.random_bool(self.config.drop_text);
                let drop_cond = self.rng.random_bool(self.config.drop_cond);
                (task, i, t, noise, drop_text, drop_cond)
            })
            .collect();

        let model = &self.model;
        let results: Vec<Result<(f32, Vec<Vec<f32>>)>> = draws
            .par_iter()
            .map(|(_, i, t, noise, drop_text, drop_cond)| {
                let ex = &self.examples[*i];
                let ns = flow_interpolate(&ex.target.data, noise, *t);
                let target = ex.target.with_data(ns.x_t);
                let inp = Inputs {
                    cond: (!drop_cond).then_some(&ex.cond),
                    text: (!drop_text).then_some(st.prompts[*i].as_slice()),
                    target: &target,
                    t: *t,
                };
                let mut g = model.zero_grads();
                let loss = model.loss_and_grad(&inp, &ns.v_target, &mut g)?;
                Ok((loss, g))
            })
            .collect();

        let lr = stage.lr_at(self.step);
        let mut grads = self.model.zero_grads();
        for ((task, ..), r) in draws.iter().zip(results) {
            let (loss, g) = r?;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (a, &b) in acc.iter_mut().zip(gi) {
                    *a += b;
                }
            }
            self.trace.push(TraceEntry {
                stage: stage.name.clone(),
                step: self.step,
                task: *task,
                loss: loss as f64,
                lr,
            });
        }
        let k = 1.0 / draws.len() as f32;
        for (g, &keep) in grads.iter_mut().zip(&st.mask) {
            if keep {
                g.iter_mut().for_each(|v| *v *= k);
            } else {
                g.fill(0.0);
            }
        }
        if let Some(c) = self.config.grad_clip {
            super::clip_grad_norm(&mut grads, c);
        }
        self.opt.step(&mut self.model.params, &grads, &st.mask, &self.decay, lr);

        self.step += 1;
        if self.step == stage.steps {
            self.stage += 1;
            self.step = 0;
            self.current = None;
            self.opt = AdamW::new(self.config.optimizer.clone(), &self.model.params);
        }
        Ok(true)
    }

    /// True right after a stage boundary or a cadence step.
    pub fn at_checkpoint(&self) -> bool {
        if self.step == 0 {
            return self.stage > 0;
        }
        self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let extra = json!({
            "curriculum": self.config,
            "stage": self.stage,
            "step": self.step,
            "rng_word_pos": self.rng.get_word_pos().to_string(),
            "adam_steps": self.opt.steps,
            "trace": self.trace,
        });
        let mut ckpt = self.model.to_checkpoint("train", extra);
        for (prefix, moments) in [("adam.m", &self.opt.m), ("adam.v", &self.opt.v)] {
            for ((name, shape), data) in self.model.names.iter().zip(&self.model.shapes).zip(moments) {
                ckpt.tensors.push(TensorBlob {
                    name: format!("{prefix}.{name}"),
                    shape: shape.clone(),
                    data: data.clone(),
                });
            }
        }
        ckpt
    }

    /// Restores a trainer from a training checkpoint. The curriculum stored
    /// in the checkpoint must match `config`.
    pub fn resume(ckpt: &Checkpoint, config: CurriculumConfig, examples: &'a [Example]) -> Result<Self> {
        if ckpt.kind != "train" {
            return Err(Error::Checkpoint(format!("expected a training checkpoint, found {:?}", ckpt.kind)));
        }
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let x = &ckpt.extra;
        let stored: CurriculumConfig =
            serde_json::from_value(x["curriculum"].clone()).map_err(|_| bad("missing curriculum"))?;
        if stored != config {
            return Err(bad("curriculum differs from the one the checkpoint was trained with"));
        }
        let model = Mmdit::from_checkpoint(ckpt)?;
        let mut tr = Self::new(model, config, examples)?;
        tr.stage = x["stage"].as_u64().ok_or_else(|| bad("missing stage"))? as usize;
        tr.step = x["step"].as_u64().ok_or_else(|| bad("missing step"))? as usize;
        let pos: u128 = x["rng_word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing rng position"))?;
        tr.rng.set_word_pos(pos);
        tr.opt.steps = serde_json::from_value(x["adam_steps"].clone()).map_err(|_| bad("missing adam steps"))?;
        tr.trace = serde_json::from_value(x["trace"].clone()).map_err(|_| bad("missing trace"))?;
        let n = tr.model.names.len();
        if ckpt.tensors.len() != 3 * n || tr.opt.steps.len() != n {
            return Err(bad("optimizer state does not match the model"));
        }
        for (i, name) in tr.model.names.iter().enumerate() {
            let (m, v) = (&ckpt.tensors[n + i], &ckpt.tensors[2 * n + i]);
            if m.name != format!("adam.m.{name}") || v.name != format!("adam.v.{name}") {
                return Err(bad("optimizer tensors out of order"));
            }
            tr.opt.m[i] = m.data.clone();
            tr.opt.v[i] = v.data.clone();
        }
        Ok(tr)
    }
}

/// Runs the curriculum to completion (or `max_steps` more steps), writing
/// checkpoints under `dir` at the configured cadence and at every stage
/// boundary. With `resume`, training continues from that checkpoint.
pub fn train(
    model: Mmdit<f32>,
    config: CurriculumConfig,
    examples: &[Example],
    dir: Option<&Path>,
    resume: Option<&Path>,
    max_steps: Option<usize>,
) -> Result<TrainOutcome> {
    let mut tr = match resume {
        Some(p) => Trainer::resume(&read_checkpoint(p)?, config, examples)?,
        None => Trainer::new(model, config, examples)?,
    };
    let mut checkpoints = Vec::new();
    let mut taken = 0;
    while max_steps.is_none_or(|m| taken < m) && tr.step()? {
        taken += 1;
        if let (Some(d), true) = (dir, tr.at_checkpoint()) {
            let path = if tr.step == 0 {
                let name = &tr.config.stages[tr.stage - 1].name;
                d.join(format!("stage{}-{name}.ckpt", tr.stage))
            } else {
                d.join("latest.ckpt")
            };
            write_checkpoint(&path, &tr.checkpoint())?;
            log::info!("checkpoint {}", path.display());
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        model: tr.model,
        trace: tr.trace,
        checkpoints,
    })
}
