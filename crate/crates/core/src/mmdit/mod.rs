//! Joint-sequence diffusion transformer: condition-image tokens, prompt
//! characters and noisy target tokens attend to each other in one
//! bidirectional sequence, trained with a rectified-flow objective.

mod checkpoint;
mod model;
mod scalar;
mod tokens;

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, TensorBlob, CHECKPOINT_MAGIC};
pub use model::{Cache, Inputs, Mmdit};
pub use scalar::{gemm, matmul, Scalar, View, ViewMut};
pub use tokens::{
    build_sequence, char_id, encode_text, flow_interpolate, patchify, pos2d, sincos_table,
    time_features, unpatchify, vocab_size, NoisedSample, PatchGrid, PatchTokens, Role,
    TokenPos, TokenSequence, PAD_ID, UNK_ID, VOCAB,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub vocab: usize,
    pub text_len: usize,
    pub max_grid_side: usize,
    pub mlp_ratio: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            width: 192,
            heads: 6,
            patch: 8,
            vocab: vocab_size(),
            text_len: 64,
            max_grid_side: 16,
            mlp_ratio: 4,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Depth-1, width-8 model used for gradient checks.
    pub fn micro() -> Self {
        Self {
            depth: 1,
            width: 8,
            heads: 2,
            text_len: 6,
            max_grid_side: 4,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.width % 4 != 0 {
            return bad(format!("width {} must be a multiple of 4", self.width));
        }
        if self.patch == 0 || self.vocab < 2 || self.max_grid_side == 0 || self.mlp_ratio == 0 {
            return bad("patch, vocab, max_grid_side and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn feature(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Every parameter-group label, in parameter order.
    pub fn group_labels(&self) -> Vec<String> {
        let mut v: Vec<String> = ["patch_embed", "text_embed", "role_embed", "null_embed", "time_embed"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend((0..self.depth).map(|i| format!("block.{i}")));
        v.push("final".into());
        v
    }
}

/// Parameter tensor names and shapes for a configuration, in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, h) = (cfg.width, cfg.feature(), cfg.width * cfg.mlp_ratio);
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("patch_embed.weight".into(), vec![f, d]),
        ("patch_embed.bias".into(), vec![d]),
        ("text_embed.weight".into(), vec![cfg.vocab, d]),
        ("role_embed.weight".into(), vec![3, d]),
        ("null_embed.text".into(), vec![d]),
        ("time_embed.fc1.weight".into(), vec![d, d]),
        ("time_embed.fc1.bias".into(), vec![d]),
        ("time_embed.fc2.weight".into(), vec![d, d]),
        ("time_embed.fc2.bias".into(), vec![d]),
    ];
    for i in 0..cfg.depth {
        let p = |s: &str| format!("block.{i}.{s}");
        v.extend([
            (p("ln1.gamma"), vec![d]),
            (p("ln1.beta"), vec![d]),
            (p("attn.qkv.weight"), vec![d, 3 * d]),
            (p("attn.qkv.bias"), vec![3 * d]),
            (p("attn.out.weight"), vec![d, d]),
            (p("attn.out.bias"), vec![d]),
            (p("ln2.gamma"), vec![d]),
            (p("ln2.beta"), vec![d]),
            (p("mlp.fc1.weight"), vec![d, h]),
            (p("mlp.fc1.bias"), vec![h]),
            (p("mlp.fc2.weight"), vec![h, d]),
            (p("mlp.fc2.bias"), vec![d]),
        ]);
    }
    v.extend([
        ("final.ln.gamma".into(), vec![d]),
        ("final.ln.beta".into(), vec![d]),
        ("final.proj.weight".into(), vec![d, f]),
        ("final.proj.bias".into(), vec![f]),
        ("final.skip.weight".into(), vec![f, f]),
    ]);
    v
}

/// Group label of a parameter name: `block.<i>` for block tensors, the
/// first path component otherwise.
pub fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    let head = parts.next().unwrap_or_default();
    if head == "block" {
        format!("block.{}", parts.next().unwrap_or_default())
    } else {
        head.to_string()
    }
}
