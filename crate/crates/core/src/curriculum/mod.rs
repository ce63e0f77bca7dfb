//! Staged multi-task training: per-stage task mixtures, data filters and
//! trainable parameter groups.

mod optim;
mod trainer;

use std::collections::BTreeMap;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use optim::{apply_freeze, clip_grad_norm, trainable_mask, AdamW, AdamWConfig};
pub use trainer::{compose_prompt, train, Example, TraceEntry, TrainOutcome, Trainer};

use crate::error::{Error, Result};
use crate::pairbuilder::{TaskKind, TrainingPair};

pub const DEFAULT_EXPERT_THRESHOLD: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub mixture: BTreeMap<TaskKind, f64>,
    /// Keeps only pairs whose poster scored at least this aesthetic value.
    #[serde(default)]
    pub min_aesthetic: Option<f64>,
    /// Parameter groups updated in this stage; absent means all.
    #[serde(default)]
    pub trainable_groups: Option<Vec<String>>,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup: usize,
    #[serde(default = "yes")]
    pub glyph_caption: bool,
    #[serde(default = "yes")]
    pub layout_caption: bool,
}

fn yes() -> bool {
    true
}

impl StageConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("stage {}: {m}", self.name)));
        if self.mixture.is_empty() {
            return bad("mixture is empty".into());
        }
        if self.mixture.values().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return bad("mixture weights must be finite and non-negative".into());
        }
        let total: f64 = self.mixture.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("mixture weights sum to {total}, not 1"));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive".into());
        }
        Ok(())
    }

    pub fn accepts(&self, pair: &TrainingPair) -> bool {
        self.mixture.get(&pair.task).is_some_and(|&w| w > 0.0)
            && self.min_aesthetic.is_none_or(|m| pair.aesthetic_score >= m)
    }

    /// Learning rate at `step`: linear warmup then cosine decay to 10%.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.learning_rate * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.steps - self.warmup).max(1) as f64;
        let x = (step - self.warmup) as f64 / span;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * x).cos());
        self.learning_rate * (0.1 + 0.9 * cos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub stages: Vec<StageConfig>,
    pub seed: u64,
    pub batch_size: usize,
    /// Checkpoint every this many steps within a stage; 0 keeps only the
    /// stage-boundary checkpoints.
    pub checkpoint_every: usize,
    pub drop_text: f64,
    pub drop_cond: f64,
    pub grad_clip: Option<f64>,
    pub optimizer: AdamWConfig,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        default_curriculum()
    }
}

impl CurriculumConfig {
    pub fn check(&self, group_labels: &[String]) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("curriculum has no stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.check()?;
            if self.stages[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Config(format!("duplicate stage name {:?}", s.name)));
            }
            if let Some(groups) = &s.trainable_groups {
                if let Some(g) = groups.iter().find(|g| !group_labels.contains(g)) {
                    return Err(Error::Config(format!("stage {}: unknown parameter group {g:?}", s.name)));
                }
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for p in [self.drop_text, self.drop_cond] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("drop probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Three stages: text addition alone, then a uniform five-task mix, then
/// the same mix restricted to high-aesthetic posters.
pub fn default_curriculum() -> CurriculumConfig {
    let uniform: BTreeMap<TaskKind, f64> = TaskKind::ALL.iter().map(|&t| (t, 0.2)).collect();
    let stage = |name: &str, mixture: BTreeMap<TaskKind, f64>, min_aesthetic, steps, lr| StageConfig {
        name: name.into(),
        mixture,
        min_aesthetic,
        trainable_groups: None,
        steps,
        learning_rate: lr,
        warmup: 0,
        glyph_caption: true,
        layout_caption: true,
    };
    CurriculumConfig {
        stages: vec![
            stage("text_addition", BTreeMap::from([(TaskKind::TextAddition, 1.0)]), None, 1000, 3e-4),
            stage("multi_task", uniform.clone(), None, 1000, 3e-4),
            stage("expert", uniform, Some(DEFAULT_EXPERT_THRESHOLD), 300, 1e-4),
        ],
        seed: 0,
        batch_size: 8,
        checkpoint_every: 200,
        drop_text: 0.1,
        drop_cond: 0.1,
        grad_clip: Some(1.0),
        optimizer: AdamWConfig::default(),
    }
}

/// Indices of the pairs a stage may draw, grouped by task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPools {
    tasks: Vec<TaskKind>,
    weights: WeightedIndex<f64>,
    pools: Vec<Vec<usize>>,
}

impl TaskPools {
    pub fn new(stage: &StageConfig, pairs: &[TrainingPair]) -> Result<Self> {
        stage.check()?;
        let (tasks, weights): (Vec<TaskKind>, Vec<f64>) =
            stage.mixture.iter().filter(|(_, &w)| w > 0.0).map(|(&t, &w)| (t, w)).unzip();
        let mut pools = vec![Vec::new(); tasks.len()];
        for (i, p) in pairs.iter().enumerate() {
            if stage.accepts(p) {
                let k = tasks.iter().position(|&t| t == p.task).expect("accepted task has weight");
                pools[k].push(i);
            }
        }
        if let Some(k) = pools.iter().position(Vec::is_empty) {
            return Err(Error::EmptyTaskPool(tasks[k].as_str().to_string()));
        }
        let weights = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { tasks, weights, pools })
    }

    pub fn len(&self, task: TaskKind) -> usize {
        self.tasks.iter().position(|&t| t == task).map_or(0, |k| self.pools[k].len())
    }
}

/// Draws `size` pair indices: a task from the mixture, then a pair uniformly
/// within that task.
pub fn sample_batch(pools: &TaskPools, size: usize, rng: &mut impl Rng) -> Vec<(TaskKind, usize)> {
    (0..size)
        .map(|_| {
            let k = pools.weights.sample(rng);
            let pool = &pools.pools[k];
            (pools.tasks[k], pool[rng.random_range(0..pool.len())])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn pair(task: TaskKind, score: f64, i: usize) -> TrainingPair {
        TrainingPair {
            pair_id: format!("p{i}-{}", task.as_str()),
            task,
            source_image: String::new(),
            target_image: String::new(),
            instruction: "x".into(),
            glyph_caption: "no text".into(),
            layout_caption: "y".into(),
            source_dims: (64, 64),
            target_dims: if task == TaskKind::MultiAspect { (64, 96) } else { (64, 64) },
            aesthetic_score: score,
        }
    }

    fn all_pairs() -> Vec<TrainingPair> {
        (0..40).map(|i| pair(TaskKind::ALL[i % 5], i as f64 / 40.0, i)).collect()
    }

    #[test]
    fn default_stages() {
        let c = default_curriculum();
        assert_eq!(c.stages.len(), 3);
        assert_eq!(c.stages[0].mixture.len(), 1);
        assert_eq!(c.stages[0].mixture[&TaskKind::TextAddition], 1.0);
        assert_eq!(c.stages[1].mixture.len(), 5);
        assert_eq!(c.stages[2].mixture, c.stages[1].mixture);
        assert_eq!(c.stages[2].min_aesthetic, Some(0.75));
        for s in &c.stages {
            s.check().unwrap();
        }
    }

    #[test]
    fn stage_one_is_pure_addition() {
        let c = default_curriculum();
        let pools = TaskPools::new(&c.stages[0], &all_pairs()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&pools, 500, &mut rng);
        assert!(batch.iter().all(|(t, _)| *t == TaskKind::TextAddition));
    }

    #[test]
    fn uniform_mixture_passes_chi_square() {
        let c = default_curriculum();
        let pools = TaskPools::new(&c.stages[1], &all_pairs()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let batch = sample_batch(&pools, n, &mut rng);
        let mut counts = [0f64; 5];
        for (t, _) in &batch {
            counts[TaskKind::ALL.iter().position(|x| x == t).unwrap()] += 1.0;
        }
        let expected = n as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&o| (o - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
    }

    #[test]
    fn same_rng_state_same_batch() {
        let c = default_curriculum();
        let pools = TaskPools::new(&c.stages[1], &all_pairs()).unwrap();
        let a = sample_batch(&pools, 64, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_batch(&pools, 64, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn empty_pool_names_the_task() {
        let c = default_curriculum();
        let only_add: Vec<_> = (0..5).map(|i| pair(TaskKind::TextAddition, 0.9, i)).collect();
        match TaskPools::new(&c.stages[1], &only_add) {
            Err(Error::EmptyTaskPool(t)) => assert_eq!(t, "text_modification"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn expert_filter_restricts_pool() {
        let c = default_curriculum();
        let pairs = all_pairs();
        let full = TaskPools::new(&c.stages[1], &pairs).unwrap();
        let expert = TaskPools::new(&c.stages[2], &pairs).unwrap();
        for t in TaskKind::ALL {
            assert!(expert.len(t) < full.len(t));
            assert!(expert.len(t) > 0);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = default_curriculum();
        let labels = crate::mmdit::ModelConfig::default().group_labels();
        c.check(&labels).unwrap();
        c.stages[1].name = "text_addition".into();
        assert!(c.check(&labels).is_err());
        let mut c = default_curriculum();
        c.stages[0].mixture.insert(TaskKind::Restyle, 0.5);
        assert!(c.check(&labels).is_err());
        let mut c = default_curriculum();
        c.stages[0].trainable_groups = Some(vec!["block.99".into()]);
        assert!(c.check(&labels).is_err());
    }

    #[test]
    fn lr_schedule_shape() {
        let mut s = default_curriculum().stages.remove(0);
        s.warmup = 10;
        assert!((s.lr_at(0) - s.learning_rate / 10.0).abs() < 1e-15);
        assert!((s.lr_at(10) - s.learning_rate).abs() < 1e-15);
        assert!(s.lr_at(s.steps - 1) < s.learning_rate * 0.11);
    }
}
