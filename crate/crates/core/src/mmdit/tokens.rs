use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};
use crate::imaging::{quantize_unit, Image};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
/// Characters with ids `2..`, in this order.
pub const VOCAB: &str =
    " ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789!\"%&'()+,-./:;?";

pub fn vocab_size() -> usize {
    VOCAB.chars().count() + 2
}

pub fn char_id(c: char) -> u32 {
    VOCAB.chars().position(|v| v == c).map_or(UNK_ID, |i| i as u32 + 2)
}

/// Character-level ids, truncated to `len` and padded with [`PAD_ID`].
pub fn encode_text(prompt: &str, len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = prompt.chars().take(len).map(char_id).collect();
    ids.resize(len, PAD_ID);
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub h_p: usize,
    pub w_p: usize,
    pub p: usize,
    pub c: usize,
}

impl PatchGrid {
    pub fn for_dims(width: u32, height: u32, p: usize) -> Result<Self> {
        if p == 0 || width as usize % p != 0 || height as usize % p != 0 {
            return Err(Error::Shape(format!("{width}x{height} is not divisible by patch size {p}")));
        }
        Ok(Self {
            h_p: height as usize / p,
            w_p: width as usize / p,
            p,
            c: 3,
        })
    }

    pub fn len(&self) -> usize {
        self.h_p * self.w_p
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature(&self) -> usize {
        self.p * self.p * self.c
    }

    pub fn dims(&self) -> (u32, u32) {
        ((self.w_p * self.p) as u32, (self.h_p * self.p) as u32)
    }

    /// `(row, col)` of every token in row-major order.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        (0..self.h_p)
            .flat_map(|r| (0..self.w_p).map(move |c| (r, c)))
            .collect()
    }
}

/// Image tokens: one row of `p²·c` features per patch, values in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens<T> {
    pub grid: PatchGrid,
    pub data: Vec<T>,
    pub pos: Vec<(usize, usize)>,
}

impl<T: Scalar> PatchTokens<T> {
    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    pub fn with_data(&self, data: Vec<T>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Self {
            grid: self.grid,
            data,
            pos: self.pos.clone(),
        }
    }
}

/// Feature order within a token is `(dy, dx, channel)`.
pub fn patchify<T: Scalar>(image: &Image, p: usize) -> Result<PatchTokens<T>> {
    let (w, h) = image.dimensions();
    let grid = PatchGrid::for_dims(w, h, p)?;
    let f = grid.feature();
    let mut data = vec![T::zero(); grid.len() * f];
    let two = T::c(2.0);
    let scale = T::c(255.0);
    for (i, (r, c)) in grid.positions().into_iter().enumerate() {
        for dy in 0..p {
            for dx in 0..p {
                let px = image.get_pixel((c * p + dx) as u32, (r * p + dy) as u32).0;
                for ch in 0..3 {
                    let v = T::c(px[ch] as f64) / scale * two - T::one();
                    data[i * f + (dy * p + dx) * 3 + ch] = v;
                }
            }
        }
    }
    Ok(PatchTokens {
        pos: grid.positions(),
        grid,
        data,
    })
}

/// Inverse of [`patchify`]; values are clamped to [−1, 1] and rounded half
/// away from zero. Token `i` is written to `pos[i]`.
pub fn unpatchify<T: Scalar>(tokens: &PatchTokens<T>) -> Image {
    let g = tokens.grid;
    let (w, h) = g.dims();
    let f = g.feature();
    let mut img = Image::new(w, h);
    for (i, &(r, c)) in tokens.pos.iter().enumerate() {
        for dy in 0..g.p {
            for dx in 0..g.p {
                let mut px = [0u8; 3];
                for (ch, out) in px.iter_mut().enumerate() {
                    let v = tokens.data[i * f + (dy * g.p + dx) * 3 + ch].to_f64().unwrap_or(0.0);
                    *out = quantize_unit(((v + 1.0) / 2.0).clamp(0.0, 1.0));
                }
                img.put_pixel((c * g.p + dx) as u32, (r * g.p + dy) as u32, image::Rgb(px));
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample<T> {
    pub x_t: Vec<T>,
    pub t: T,
    pub v_target: Vec<T>,
}

/// Linear path between data (t = 0) and noise (t = 1).
pub fn flow_interpolate<T: Scalar>(x_data: &[T], x_noise: &[T], t: T) -> NoisedSample<T> {
    assert_eq!(x_data.len(), x_noise.len());
    let x_t = x_data
        .iter()
        .zip(x_noise)
        .map(|(&d, &n)| (T::one() - t) * d + t * n)
        .collect();
    let v_target = x_data.iter().zip(x_noise).map(|(&d, &n)| n - d).collect();
    NoisedSample { x_t, t, v_target }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Cond = 0,
    Text = 1,
    Target = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenPos {
    Grid(usize, usize),
    Index(usize),
}

/// Layout of the joint sequence: roles and positions per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub roles: Vec<Role>,
    pub pos: Vec<TokenPos>,
    pub n_cond: usize,
    pub n_text: usize,
    pub n_target: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }
}

/// Orders tokens as COND, TEXT, TARGET. `cond` is `None` for the
/// unconditional branch.
pub fn build_sequence<T: Scalar>(
    cond: Option<&PatchTokens<T>>,
    text_len: usize,
    target: &PatchTokens<T>,
    max_grid_side: usize,
) -> Result<TokenSequence> {
    for g in cond.iter().map(|c| &c.grid).chain([&target.grid]) {
        if g.h_p > max_grid_side || g.w_p > max_grid_side {
            return Err(Error::Shape(format!(
                "{}x{} token grid exceeds max side {max_grid_side}",
                g.w_p, g.h_p
            )));
        }
    }
    let n_cond = cond.map_or(0, |c| c.len());
    let mut roles = Vec::with_capacity(n_cond + text_len + target.len());
    let mut pos = Vec::with_capacity(roles.capacity());
    if let Some(c) = cond {
        roles.extend(std::iter::repeat_n(Role::Cond, c.len()));
        pos.extend(c.pos.iter().map(|&(r, c)| TokenPos::Grid(r, c)));
    }
    roles.extend(std::iter::repeat_n(Role::Text, text_len));
    pos.extend((0..text_len).map(TokenPos::Index));
    roles.extend(std::iter::repeat_n(Role::Target, target.len()));
    pos.extend(target.pos.iter().map(|&(r, c)| TokenPos::Grid(r, c)));
    Ok(TokenSequence {
        roles,
        pos,
        n_cond,
        n_text: text_len,
        n_target: target.len(),
    })
}

/// Sinusoidal table `[n, dim]`: even columns sin, odd columns cos.
/// Frequencies run geometrically from π down to π/n, so every pair varies
/// across the table's positions.
pub fn sincos_table(n: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dim];
    let half = dim / 2;
    for i in 0..n {
        for j in 0..half {
            let freq = PI * (-(n.max(2) as f64).ln() * j as f64 / half.max(1) as f64).exp();
            out[i * dim + 2 * j] = (i as f64 * freq).sin();
            out[i * dim + 2 * j + 1] = (i as f64 * freq).cos();
        }
    }
    out
}

/// 2D table: the first half of the width encodes the row, the second half
/// the column.
pub fn pos2d(row: usize, col: usize, dim: usize, side: usize) -> Vec<f64> {
    let half = dim / 2;
    let t = sincos_table(side, half);
    let mut v = t[row * half..(row + 1) * half].to_vec();
    v.extend_from_slice(&t[col * half..(col + 1) * half]);
    v.resize(dim, 0.0);
    v
}

/// Sinusoidal features of a diffusion time in [0, 1].
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10_000f64).ln() * j as f64 / half.max(1) as f64).exp();
        v[2 * j] = (t * 1000.0 * freq).sin();
        v[2 * j + 1] = (t * 1000.0 * freq).cos();
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn token_counts() {
        let img = Image::new(64, 64);
        let t: PatchTokens<f32> = patchify(&img, 8).unwrap();
        assert_eq!(t.len(), 64);
        assert_eq!(t.data.len(), 64 * 192);
        assert!(patchify::<f32>(&Image::new(60, 64), 8).is_err());
    }

    #[test]
    fn sequence_lengths() {
        let cond: PatchTokens<f32> = patchify(&Image::new(64, 64), 8).unwrap();
        let tgt: PatchTokens<f32> = patchify(&Image::new(96, 64), 8).unwrap();
        let s = build_sequence(Some(&cond), 16, &tgt, 16).unwrap();
        assert_eq!(s.len(), 64 + 16 + 96);
        assert_eq!((s.n_cond, s.n_text, s.n_target), (64, 16, 96));
        // contiguous role segments
        let changes = s.roles.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(changes, 2);
        let s = build_sequence(None, 16, &tgt, 16).unwrap();
        assert_eq!(s.len(), 16 + 96);
        assert!(build_sequence(Some(&cond), 16, &tgt, 7).is_err());

        let a: PatchTokens<f32> = patchify(&Image::new(64, 96), 8).unwrap();
        let b: PatchTokens<f32> = patchify(&Image::new(96, 64), 8).unwrap();
        assert_eq!(a.len() + b.len(), 192);
    }

    #[test]
    fn text_encoding() {
        assert_eq!(encode_text("", 4), vec![PAD_ID; 4]);
        assert_eq!(encode_text("AB", 4), vec![char_id('A'), char_id('B'), PAD_ID, PAD_ID]);
        assert_eq!(char_id('A'), 3);
        assert_eq!(char_id('~'), UNK_ID);
        let long = "X".repeat(9) + "ABCDE";
        let ids = encode_text(&long, 9);
        assert_eq!(ids, vec![char_id('X'); 9]);
        assert!((75..=85).contains(&vocab_size()));
    }

    #[test]
    fn flow_endpoints() {
        let d = [0.5f64, -1.0, 0.25];
        let n = [1.0f64, 2.0, -0.5];
        assert_eq!(flow_interpolate(&d, &n, 0.0).x_t, d.to_vec());
        assert_eq!(flow_interpolate(&d, &n, 1.0).x_t, n.to_vec());
        let mid = flow_interpolate(&d, &n, 0.5);
        for i in 0..3 {
            assert_eq!(mid.x_t[i], (d[i] + n[i]) / 2.0);
        }
        assert_eq!(mid.v_target, flow_interpolate(&d, &n, 0.9).v_target);
    }

    proptest! {
        #[test]
        fn patchify_round_trip(w in 1u32..5, h in 1u32..5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = Image::from_fn(w * 8, h * 8, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
            let t32: PatchTokens<f32> = patchify(&img, 8).unwrap();
            prop_assert_eq!(unpatchify(&t32), img.clone());
            let t64: PatchTokens<f64> = patchify(&img, 8).unwrap();
            prop_assert_eq!(unpatchify(&t64), img);
        }
    }
}
