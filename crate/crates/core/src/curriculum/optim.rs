use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmdit::{group_of, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Which tensors a stage may update. `None` selects every group.
pub fn trainable_mask(names: &[String], groups: Option<&[String]>, labels: &[String]) -> Result<Vec<bool>> {
    let Some(groups) = groups else {
        return Ok(vec![true; names.len()]);
    };
    let set: BTreeSet<&str> = groups.iter().map(String::as_str).collect();
    if let Some(bad) = set.iter().find(|g| !labels.iter().any(|l| l == *g)) {
        return Err(Error::UnknownGroup(bad.to_string()));
    }
    Ok(names.iter().map(|n| set.contains(group_of(n).as_str())).collect())
}

/// Zeroes the gradients of every tensor outside `trainable_groups`.
pub fn apply_freeze<T: Scalar>(
    names: &[String],
    labels: &[String],
    trainable_groups: Option<&[String]>,
    grads: &mut [Vec<T>],
) -> Result<()> {
    let mask = trainable_mask(names, trainable_groups, labels)?;
    for (g, keep) in grads.iter_mut().zip(mask) {
        if !keep {
            g.fill(T::zero());
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = (max_norm / norm) as f32;
        for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v *= k;
        }
    }
    norm
}

/// AdamW with decoupled weight decay and a step counter per tensor, so
/// frozen tensors neither move nor advance their moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub steps: Vec<u64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[Vec<f32>]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: shapes.iter().map(|p| vec![0.0; p.len()]).collect(),
            steps: vec![0; shapes.len()],
        }
    }

    /// Updates the tensors whose `mask` entry is true. Weight decay applies
    /// to matrices only (tensors with `decay[i]`).
    pub fn step(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>], mask: &[bool], decay: &[bool], lr: f64) {
        let c = &self.config;
        for i in 0..params.len() {
            if !mask[i] {
                continue;
            }
            self.steps[i] += 1;
            let k = self.steps[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(k);
            let bc2 = 1.0 - c.beta2.powi(k);
            let wd = if decay[i] { c.weight_decay } else { 0.0 };
            let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
            for j in 0..params[i].len() {
                let g = grads[i][j];
                let m = b1 * self.m[i][j] + (1.0 - b1) * g;
                let v = b2 * self.v[i][j] + (1.0 - b2) * g * g;
                self.m[i][j] = m;
                self.v[i][j] = v;
                let mhat = m as f64 / bc1;
                let vhat = v as f64 / bc2;
                let p = params[i][j] as f64;
                params[i][j] = (p - lr * (mhat / (vhat.sqrt() + c.eps) + wd * p)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_matches_hand_computation() {
        let mut p = vec![vec![1.0f32, -2.0]];
        let g = vec![vec![0.5f32, 0.0]];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &g, &[true], &[true], 0.1);
        // first step: mhat = g, vhat = g², update = sign(g) (eps aside)
        let want0 = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0);
        let want1 = -2.0 - 0.1 * (0.0 + 0.01 * -2.0);
        assert!((p[0][0] as f64 - want0).abs() < 1e-6);
        assert!((p[0][1] as f64 - want1).abs() < 1e-6);
    }

    #[test]
    fn masked_tensor_is_untouched() {
        let mut p = vec![vec![1.0f32; 3], vec![2.0f32; 3]];
        let g = vec![vec![1.0f32; 3], vec![1.0f32; 3]];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &g, &[false, true], &[true, true], 0.1);
        assert_eq!(p[0], vec![1.0; 3]);
        assert_eq!(opt.m[0], vec![0.0; 3]);
        assert_eq!(opt.steps, vec![0, 1]);
        assert_ne!(p[1], vec![2.0; 3]);
    }

    #[test]
    fn freeze_rejects_unknown_label() {
        let names = vec!["role_embed.weight".to_string(), "block.0.ln1.gamma".to_string()];
        let labels = vec!["role_embed".to_string(), "block.0".to_string()];
        let mut g = vec![vec![1.0f32], vec![1.0f32]];
        apply_freeze(&names, &labels, None, &mut g).unwrap();
        assert_eq!(g, vec![vec![1.0], vec![1.0]]);
        apply_freeze(&names, &labels, Some(&["role_embed".to_string()]), &mut g).unwrap();
        assert_eq!(g, vec![vec![1.0], vec![0.0]]);
        assert!(matches!(
            apply_freeze(&names, &labels, Some(&["nope".to_string()]), &mut g),
            Err(Error::UnknownGroup(_))
        ));
        apply_freeze(&names, &labels, Some(&[]), &mut g).unwrap();
        assert_eq!(g, vec![vec![0.0], vec![0.0]]);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0f32, 4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-7 && (g[0][1] - 0.8).abs() < 1e-7);
    }
}
