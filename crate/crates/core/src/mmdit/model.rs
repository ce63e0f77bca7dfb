use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint::{Checkpoint, TensorBlob};
use super::scalar::{gemm, Scalar, View, ViewMut};
use super::tokens::{build_sequence, sincos_table, pos2d, time_features, PatchTokens};
use super::{param_specs, ModelConfig};
use crate::error::{Error, Result};

const PATCH_W: usize = 0;
const PATCH_B: usize = 1;
const TEXT_E: usize = 2;
const ROLE: usize = 3;
const NULL_TEXT: usize = 4;
const TIME_W1: usize = 5;
const TIME_B1: usize = 6;
const TIME_W2: usize = 7;
const TIME_B2: usize = 8;
const BLOCK0: usize = 9;
const PER_BLOCK: usize = 12;
const LN1_G: usize = 0;
const QKV_W: usize = 2;
const OUT_W: usize = 4;
const LN2_G: usize = 6;
const FC1_W: usize = 8;
const FC2_W: usize = 10;

const LN_EPS: f64 = 1e-5;

/// One model evaluation. `text: None` selects the learned null prompt and
/// `cond: None` drops the condition segment from the sequence.
#[derive(Clone, Copy)]
pub struct Inputs<'a, T> {
    pub cond: Option<&'a PatchTokens<T>>,
    pub text: Option<&'a [u32]>,
    pub target: &'a PatchTokens<T>,
    pub t: T,
}

struct BlockCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    b: Vec<T>,
    h: Vec<T>,
    g: Vec<T>,
}

/// Activations kept from [`Mmdit::forward`] for the backward pass.
pub struct Cache<T> {
    nc: usize,
    nl: usize,
    nt: usize,
    cond: Option<Vec<T>>,
    text: Option<Vec<u32>>,
    target: Vec<T>,
    tf: Vec<T>,
    th: Vec<T>,
    ta: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    xhatf: Vec<T>,
    rstdf: Vec<T>,
    z: Vec<T>,
}

#[derive(Debug)]
pub struct Mmdit<T> {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub params: Vec<Vec<T>>,
    pos_grid: Vec<T>,
    pos_text: Vec<T>,
}

impl<T: Scalar> Clone for Mmdit<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            params: self.params.clone(),
            pos_grid: self.pos_grid.clone(),
            pos_text: self.pos_text.clone(),
        }
    }
}

fn linear<T: Scalar>(x: &[T], n: usize, din: usize, w: &[T], b: &[T], dout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * dout];
    for row in y.chunks_exact_mut(dout) {
        row.copy_from_slice(b);
    }
    gemm(T::one(), View::mat(x, n, din), View::mat(w, din, dout), T::one(), ViewMut::mat(&mut y, n, dout));
    y
}

/// Accumulates `dw += xᵀ·dy`, `db += Σ dy` and returns `dy·wᵀ` when asked.
#[allow(clippy::too_many_arguments)]
fn linear_back<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    din: usize,
    dout: usize,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    gemm(T::one(), View::mat(x, n, din).t(), View::mat(dy, n, dout), T::one(), ViewMut::mat(dw, din, dout));
    for row in dy.chunks_exact(dout) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    if !need_dx {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); n * din];
    gemm(T::one(), View::mat(dy, n, dout), View::mat(w, din, dout).t(), T::zero(), ViewMut::mat(&mut dx, n, din));
    dx
}

fn layer_norm<T: Scalar>(x: &[T], d: usize, g: &[T], b: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = x.len() / d;
    let mut y = vec![T::zero(); n * d];
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    let dn = T::c(d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + T::c(LN_EPS)).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = g[j] * h + b[j];
        }
    }
    (y, xhat, rstd)
}

fn layer_norm_back<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    d: usize,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let n = rstd.len();
    let mut dx = vec![T::zero(); n * d];
    let dn = T::c(d as f64);
    for i in 0..n {
        let (dyr, xr) = (&dy[i * d..(i + 1) * d], &xhat[i * d..(i + 1) * d]);
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..d {
            dg[j] = dg[j] + dyr[j] * xr[j];
            db[j] = db[j] + dyr[j];
            let dh = dyr[j] * g[j];
            m1 = m1 + dh;
            m2 = m2 + dh * xr[j];
        }
        m1 = m1 / dn;
        m2 = m2 / dn;
        for j in 0..d {
            dx[i * d + j] = rstd[i] * (dyr[j] * g[j] - m1 - xr[j] * m2);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x);
    let th = u.tanh();
    let du = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x * x);
    T::c(0.5) * (T::one() + th) + T::c(0.5) * x * (T::one() - th * th) * du
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn add_rows<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

fn col_sum_into<T: Scalar>(rows: &[T], d: usize, acc: &mut [T]) {
    for row in rows.chunks_exact(d) {
        add_rows(acc, row);
    }
}

fn pair_mut<T>(v: &mut [Vec<T>], i: usize, j: usize) -> (&mut [T], &mut [T]) {
    assert!(i < j);
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

impl<T: Scalar> Mmdit<T> {
    /// Randomly initialised model; the draw is fixed by `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let resid = 0.02 / (2.0 * config.depth.max(1) as f64).sqrt();
        let specs = param_specs(&config);
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape) in &specs {
            let n: usize = shape.iter().product();
            let std = if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
                0.0
            } else if name.starts_with("text_embed") || name.starts_with("role_embed") || name.starts_with("null_embed")
            {
                0.3
            } else if name.ends_with("attn.out.weight") || name.ends_with("mlp.fc2.weight") {
                resid
            } else if name == "final.skip.weight" {
                0.0
            } else if name == "final.proj.weight" {
                0.02
            } else {
                1.0 / (shape[0] as f64).sqrt()
            };
            let data: Vec<T> = if name.ends_with("gamma") {
                vec![T::one(); n]
            } else if std == 0.0 {
                vec![T::zero(); n]
            } else {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| T::c(dist.sample(&mut rng))).collect()
            };
            params.push(data);
        }
        Ok(Self::from_parts(config, params))
    }

    fn from_parts(config: ModelConfig, params: Vec<Vec<T>>) -> Self {
        let d = config.width;
        let side = config.max_grid_side;
        let mut pos_grid = Vec::with_capacity(side * side * d);
        for r in 0..side {
            for c in 0..side {
                pos_grid.extend(pos2d(r, c, d, side).into_iter().map(T::c));
            }
        }
        let pos_text = sincos_table(config.text_len, d).into_iter().map(T::c).collect();
        let specs = param_specs(&config);
        Self {
            names: specs.iter().map(|s| s.0.clone()).collect(),
            shapes: specs.into_iter().map(|s| s.1).collect(),
            config,
            params,
            pos_grid,
            pos_text,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    fn blk(&self, i: usize, k: usize) -> usize {
        BLOCK0 + PER_BLOCK * i + k
    }

    fn fin(&self, k: usize) -> usize {
        BLOCK0 + PER_BLOCK * self.config.depth + k
    }

    fn check_inputs(&self, inp: &Inputs<T>) -> Result<()> {
        let cfg = &self.config;
        for g in inp.cond.iter().map(|c| c.grid).chain([inp.target.grid]) {
            if g.p != cfg.patch || g.c != 3 {
                return Err(Error::Shape(format!("tokens use patch {} but the model expects {}", g.p, cfg.patch)));
            }
        }
        for tok in inp.cond.iter().copied().chain([inp.target]) {
            if tok.data.len() != tok.len() * cfg.feature() {
                return Err(Error::Shape("token data does not match its positions".into()));
            }
            if tok.pos.iter().any(|&(r, c)| r >= cfg.max_grid_side || c >= cfg.max_grid_side) {
                return Err(Error::Shape("token position outside the positional table".into()));
            }
        }
        if let Some(ids) = inp.text {
            if ids.len() != cfg.text_len {
                return Err(Error::Shape(format!("{} text ids, expected {}", ids.len(), cfg.text_len)));
            }
            if ids.iter().any(|&i| i as usize >= cfg.vocab) {
                return Err(Error::Shape("text id outside the vocabulary".into()));
            }
        }
        let t = inp.t.to_f64().unwrap_or(f64::NAN);
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// Predicted velocity for every target token, `[n_target, p²·3]` in
    /// target token order, plus the activations needed for `backward`.
    pub fn forward(&self, inp: &Inputs<T>) -> Result<(Vec<T>, Cache<T>)> {
        self.check_inputs(inp)?;
        let cfg = &self.config;
        let (d, f, hd) = (cfg.width, cfg.feature(), cfg.width * cfg.mlp_ratio);
        let side = cfg.max_grid_side;
        let seq = build_sequence(inp.cond, cfg.text_len, inp.target, side)?;
        let (nc, nl, nt) = (seq.n_cond, seq.n_text, seq.n_target);
        let n = seq.len();
        let p = &self.params;
        let role = |k: usize| &p[ROLE][k * d..(k + 1) * d];
        let grid_pos = |(r, c): (usize, usize)| &self.pos_grid[(r * side + c) * d..(r * side + c + 1) * d];

        let mut x = vec![T::zero(); n * d];
        if let Some(c) = inp.cond {
            let e = linear(&c.data, nc, f, &p[PATCH_W], &p[PATCH_B], d);
            for i in 0..nc {
                let row = &mut x[i * d..(i + 1) * d];
                row.copy_from_slice(&e[i * d..(i + 1) * d]);
                add_rows(row, role(0));
                add_rows(row, grid_pos(c.pos[i]));
            }
        }
        for i in 0..nl {
            let src = match inp.text {
                Some(ids) => &p[TEXT_E][ids[i] as usize * d..(ids[i] as usize + 1) * d],
                None => &p[NULL_TEXT][..],
            };
            let row = &mut x[(nc + i) * d..(nc + i + 1) * d];
            row.copy_from_slice(src);
            add_rows(row, role(1));
            add_rows(row, &self.pos_text[i * d..(i + 1) * d]);
        }
        let tf: Vec<T> = time_features(inp.t.to_f64().unwrap_or(0.0), d).into_iter().map(T::c).collect();
        let th = linear(&tf, 1, d, &p[TIME_W1], &p[TIME_B1], d);
        let ta: Vec<T> = th.iter().map(|&v| v * sigmoid(v)).collect();
        let te = linear(&ta, 1, d, &p[TIME_W2], &p[TIME_B2], d);
        let e = linear(&inp.target.data, nt, f, &p[PATCH_W], &p[PATCH_B], d);
        for i in 0..nt {
            let k = nc + nl + i;
            let row = &mut x[k * d..(k + 1) * d];
            row.copy_from_slice(&e[i * d..(i + 1) * d]);
            add_rows(row, role(2));
            add_rows(row, grid_pos(inp.target.pos[i]));
            add_rows(row, &te);
        }

        let heads = cfg.heads;
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for bi in 0..cfg.depth {
            let w = |k: usize| &p[self.blk(bi, k)][..];
            let (a, xhat1, rstd1) = layer_norm(&x, d, w(LN1_G), w(LN1_G + 1));
            let qkv = linear(&a, n, d, w(QKV_W), w(QKV_W + 1), 3 * d);
            let mut probs = vec![T::zero(); heads * n * n];
            let mut attn = vec![T::zero(); n * d];
            for h in 0..heads {
                let ph = &mut probs[h * n * n..(h + 1) * n * n];
                gemm(
                    scale,
                    View::cols_of(&qkv, n, 3 * d, h * dh, dh),
                    View::cols_of(&qkv, n, 3 * d, d + h * dh, dh).t(),
                    T::zero(),
                    ViewMut::mat(ph, n, n),
                );
                for row in ph.chunks_exact_mut(n) {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut s = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        s = s + *v;
                    }
                    for v in row.iter_mut() {
                        *v = *v / s;
                    }
                }
                gemm(
                    T::one(),
                    View::mat(ph, n, n),
                    View::cols_of(&qkv, n, 3 * d, 2 * d + h * dh, dh),
                    T::zero(),
                    ViewMut::cols_of(&mut attn, n, d, h * dh, dh),
                );
            }
            let o = linear(&attn, n, d, w(OUT_W), w(OUT_W + 1), d);
            add_rows(&mut x, &o);
            let (b, xhat2, rstd2) = layer_norm(&x, d, w(LN2_G), w(LN2_G + 1));
            let hpre = linear(&b, n, d, w(FC1_W), w(FC1_W + 1), hd);
            let g: Vec<T> = hpre.iter().map(|&v| gelu(v)).collect();
            let m = linear(&g, n, hd, w(FC2_W), w(FC2_W + 1), d);
            add_rows(&mut x, &m);
            blocks.push(BlockCache {
                xhat1,
                rstd1,
                a,
                qkv,
                probs,
                attn,
                xhat2,
                rstd2,
                b,
                h: hpre,
                g,
            });
        }

        let xt = &x[(nc + nl) * d..];
        let (z, xhatf, rstdf) = layer_norm(xt, d, &p[self.fin(0)], &p[self.fin(1)]);
        let mut y = linear(&z, nt, d, &p[self.fin(2)], &p[self.fin(3)], f);
        // linear path straight from the noisy target patches
        gemm(T::one(), View::mat(&inp.target.data, nt, f), View::mat(&p[self.fin(4)], f, f), T::one(), ViewMut::mat(&mut y, nt, f));
        let cache = Cache {
            nc,
            nl,
            nt,
            cond: inp.cond.map(|c| c.data.clone()),
            text: inp.text.map(|t| t.to_vec()),
            target: inp.target.data.clone(),
            tf,
            th,
            ta,
            blocks,
            xhatf,
            rstdf,
            z,
        };
        Ok((y, cache))
    }

    /// Accumulates parameter gradients of a scalar loss whose gradient with
    /// respect to the forward output is `dy`.
    pub fn backward(&self, cache: &Cache<T>, dy: &[T], grads: &mut [Vec<T>]) {
        let cfg = &self.config;
        let (d, f, hd) = (cfg.width, cfg.feature(), cfg.width * cfg.mlp_ratio);
        let (nc, nl, nt) = (cache.nc, cache.nl, cache.nt);
        let n = nc + nl + nt;
        let p = &self.params;
        assert_eq!(dy.len(), nt * f, "output gradient has the wrong shape");

        gemm(
            T::one(),
            View::mat(&cache.target, nt, f).t(),
            View::mat(dy, nt, f),
            T::one(),
            ViewMut::mat(&mut grads[self.fin(4)], f, f),
        );
        let (dw, db) = pair_mut(grads, self.fin(2), self.fin(3));
        let dz = linear_back(&cache.z, dy, nt, d, f, &p[self.fin(2)], dw, db, true);
        let (dg, dbt) = pair_mut(grads, self.fin(0), self.fin(1));
        let dxt = layer_norm_back(&dz, &cache.xhatf, &cache.rstdf, d, &p[self.fin(0)], dg, dbt);
        let mut dx = vec![T::zero(); n * d];
        dx[(nc + nl) * d..].copy_from_slice(&dxt);

        let heads = cfg.heads;
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        for bi in (0..cfg.depth).rev() {
            let bc = &cache.blocks[bi];
            let idx = |k: usize| self.blk(bi, k);

            let (dw, db) = pair_mut(grads, idx(FC2_W), idx(FC2_W + 1));
            let mut dh_ = linear_back(&bc.g, &dx, n, hd, d, &p[idx(FC2_W)], dw, db, true);
            for (v, &h) in dh_.iter_mut().zip(&bc.h) {
                *v = *v * gelu_grad(h);
            }
            let (dw, db) = pair_mut(grads, idx(FC1_W), idx(FC1_W + 1));
            let dbn = linear_back(&bc.b, &dh_, n, d, hd, &p[idx(FC1_W)], dw, db, true);
            let (dg, dbb) = pair_mut(grads, idx(LN2_G), idx(LN2_G + 1));
            let dxm = layer_norm_back(&dbn, &bc.xhat2, &bc.rstd2, d, &p[idx(LN2_G)], dg, dbb);
            add_rows(&mut dx, &dxm);

            let (dw, db) = pair_mut(grads, idx(OUT_W), idx(OUT_W + 1));
            let dattn = linear_back(&bc.attn, &dx, n, d, d, &p[idx(OUT_W)], dw, db, true);
            let mut dqkv = vec![T::zero(); n * 3 * d];
            let mut dp = vec![T::zero(); n * n];
            for h in 0..heads {
                let ph = &bc.probs[h * n * n..(h + 1) * n * n];
                let d_o = View::cols_of(&dattn, n, d, h * dh, dh);
                gemm(
                    T::one(),
                    d_o,
                    View::cols_of(&bc.qkv, n, 3 * d, 2 * d + h * dh, dh).t(),
                    T::zero(),
                    ViewMut::mat(&mut dp, n, n),
                );
                gemm(
                    T::one(),
                    View::mat(ph, n, n).t(),
                    d_o,
                    T::zero(),
                    ViewMut::cols_of(&mut dqkv, n, 3 * d, 2 * d + h * dh, dh),
                );
                for i in 0..n {
                    let (pr, dr) = (&ph[i * n..(i + 1) * n], &mut dp[i * n..(i + 1) * n]);
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot);
                    }
                }
                gemm(
                    scale,
                    View::mat(&dp, n, n),
                    View::cols_of(&bc.qkv, n, 3 * d, d + h * dh, dh),
                    T::zero(),
                    ViewMut::cols_of(&mut dqkv, n, 3 * d, h * dh, dh),
                );
                gemm(
                    scale,
                    View::mat(&dp, n, n).t(),
                    View::cols_of(&bc.qkv, n, 3 * d, h * dh, dh),
                    T::zero(),
                    ViewMut::cols_of(&mut dqkv, n, 3 * d, d + h * dh, dh),
                );
            }
            let (dw, db) = pair_mut(grads, idx(QKV_W), idx(QKV_W + 1));
            let da = linear_back(&bc.a, &dqkv, n, d, 3 * d, &p[idx(QKV_W)], dw, db, true);
            let (dg, dbb) = pair_mut(grads, idx(LN1_G), idx(LN1_G + 1));
            let dxa = layer_norm_back(&da, &bc.xhat1, &bc.rstd1, d, &p[idx(LN1_G)], dg, dbb);
            add_rows(&mut dx, &dxa);
        }

        if let Some(cond) = &cache.cond {
            let rows = &dx[..nc * d];
            let (dw, db) = pair_mut(grads, PATCH_W, PATCH_B);
            linear_back(cond, rows, nc, f, d, &p[PATCH_W], dw, db, false);
            col_sum_into(rows, d, &mut grads[ROLE][..d]);
        }
        for i in 0..nl {
            let row = &dx[(nc + i) * d..(nc + i + 1) * d];
            match &cache.text {
                Some(ids) => {
                    let id = ids[i] as usize;
                    add_rows(&mut grads[TEXT_E][id * d..(id + 1) * d], row);
                }
                None => add_rows(&mut grads[NULL_TEXT], row),
            }
            add_rows(&mut grads[ROLE][d..2 * d], row);
        }
        let rows = &dx[(nc + nl) * d..];
        let (dw, db) = pair_mut(grads, PATCH_W, PATCH_B);
        linear_back(&cache.target, rows, nt, f, d, &p[PATCH_W], dw, db, false);
        col_sum_into(rows, d, &mut grads[ROLE][2 * d..3 * d]);
        let mut dte = vec![T::zero(); d];
        col_sum_into(rows, d, &mut dte);

        let (dw, db) = pair_mut(grads, TIME_W2, TIME_B2);
        let mut dta = linear_back(&cache.ta, &dte, 1, d, d, &p[TIME_W2], dw, db, true);
        for (v, &h) in dta.iter_mut().zip(&cache.th) {
            let s = sigmoid(h);
            *v = *v * (s + h * s * (T::one() - s));
        }
        let (dw, db) = pair_mut(grads, TIME_W1, TIME_B1);
        linear_back(&cache.tf, &dta, 1, d, d, &p[TIME_W1], dw, db, false);
    }

    /// Mean squared error of the predicted velocity.
    pub fn loss(&self, inp: &Inputs<T>, v_target: &[T]) -> Result<T> {
        let (y, _) = self.forward(inp)?;
        Ok(mse(&y, v_target))
    }

    /// Loss plus accumulated gradients (`grads += ∂loss/∂params`).
    pub fn loss_and_grad(&self, inp: &Inputs<T>, v_target: &[T], grads: &mut [Vec<T>]) -> Result<T> {
        let (y, cache) = self.forward(inp)?;
        if y.len() != v_target.len() {
            return Err(Error::Shape("velocity target does not match the output".into()));
        }
        let k = T::c(2.0 / y.len() as f64);
        let dy: Vec<T> = y.iter().zip(v_target).map(|(&a, &b)| k * (a - b)).collect();
        self.backward(&cache, &dy, grads);
        Ok(mse(&y, v_target))
    }

    pub fn to_checkpoint(&self, kind: &str, extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            kind: kind.into(),
            config: self.config.clone(),
            extra,
            tensors: self
                .names
                .iter()
                .zip(&self.shapes)
                .zip(&self.params)
                .map(|((name, shape), data)| TensorBlob {
                    name: name.clone(),
                    shape: shape.clone(),
                    data: data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model from checkpoint tensors, checking every label and
    /// shape against the configuration. Extra tensors after the model's own
    /// are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.check()?;
        let specs = param_specs(&ckpt.config);
        if ckpt.tensors.len() < specs.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors, the configuration needs {}",
                ckpt.tensors.len(),
                specs.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape), blob) in specs.iter().zip(&ckpt.tensors) {
            if &blob.name != name || &blob.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    blob.name, blob.shape
                )));
            }
            params.push(blob.data.iter().map(|&v| T::c(v as f64)).collect());
        }
        Ok(Self::from_parts(ckpt.config.clone(), params))
    }
}

pub fn mse<T: Scalar>(a: &[T], b: &[T]) -> T {
    let s: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    s / T::c(a.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;
    use crate::mmdit::{encode_text, patchify, write_checkpoint, read_checkpoint, unpatchify};
    use rand::Rng;

    fn random_tokens<T: Scalar>(w: u32, h: u32, seed: u64) -> PatchTokens<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
        patchify(&img, 8).unwrap()
    }

    #[test]
    fn zero_loss_when_prediction_matches() {
        let v = [0.5f64, -1.0, 2.0];
        assert_eq!(mse(&v, &v), 0.0);
        assert!(mse(&v, &[0.0, 0.0, 0.0]) > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = ModelConfig::micro();
        let mut model: Mmdit<f64> = Mmdit::new(cfg.clone()).unwrap();
        // give the zero-initialised tensors some signal too
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for p in model.params.iter_mut() {
            for v in p.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let cond = random_tokens::<f64>(16, 8, 1);
        let target = random_tokens::<f64>(8, 16, 2);
        let ids = encode_text("AB C", cfg.text_len);
        let v: Vec<f64> = (0..target.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();

        for (with_cond, with_text) in [(true, true), (false, false)] {
            let inp = Inputs {
                cond: with_cond.then_some(&cond),
                text: with_text.then_some(&ids[..]),
                target: &target,
                t: 0.3,
            };
            let mut grads = model.zero_grads();
            model.loss_and_grad(&inp, &v, &mut grads).unwrap();
            let (mut num2, mut diff2, mut ana2) = (0.0, 0.0, 0.0);
            let h = 1e-5;
            for ti in 0..model.params.len() {
                for k in 0..model.params[ti].len() {
                    let orig = model.params[ti][k];
                    model.params[ti][k] = orig + h;
                    let lp = model.loss(&inp, &v).unwrap();
                    model.params[ti][k] = orig - h;
                    let lm = model.loss(&inp, &v).unwrap();
                    model.params[ti][k] = orig;
                    let num = (lp - lm) / (2.0 * h);
                    let ana = grads[ti][k];
                    num2 += num * num;
                    ana2 += ana * ana;
                    diff2 += (num - ana) * (num - ana);
                    let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-6);
                    assert!(rel < 1e-3, "{}[{k}]: analytic {ana} numeric {num}", model.names[ti]);
                }
            }
            let rel = diff2.sqrt() / (num2.sqrt() + ana2.sqrt());
            assert!(rel < 1e-6, "overall relative error {rel}");
        }
    }

    #[test]
    fn output_dims_follow_target() {
        let cfg = ModelConfig {
            depth: 1,
            width: 16,
            heads: 2,
            text_len: 8,
            ..ModelConfig::default()
        };
        let model: Mmdit<f32> = Mmdit::new(cfg.clone()).unwrap();
        let ids = encode_text("SALE", 8);
        let shapes = [(64, 64), (64, 96), (96, 64), (48, 96), (32, 32)];
        let mut n = 0;
        for (i, &c) in shapes.iter().enumerate() {
            for (j, &t) in shapes.iter().enumerate() {
                if (i + j) % 2 == 1 || i == j {
                    let cond = random_tokens::<f32>(c.0, c.1, i as u64);
                    let tgt = random_tokens::<f32>(t.0, t.1, j as u64);
                    let (y, _) = model
                        .forward(&Inputs { cond: Some(&cond), text: Some(&ids), target: &tgt, t: 0.5 })
                        .unwrap();
                    let img = unpatchify(&tgt.with_data(y));
                    assert_eq!(img.dimensions(), t);
                    n += 1;
                }
            }
        }
        assert!(n >= 10);
    }

    #[test]
    fn condition_pixels_reach_target_outputs() {
        let cfg = ModelConfig {
            depth: 2,
            width: 16,
            heads: 2,
            text_len: 8,
            ..ModelConfig::default()
        };
        let model: Mmdit<f64> = Mmdit::new(cfg).unwrap();
        let mut cond = random_tokens::<f64>(16, 16, 3);
        let tgt = random_tokens::<f64>(16, 16, 4);
        let ids = encode_text("HI", 8);
        let run = |c: &PatchTokens<f64>| {
            model
                .forward(&Inputs { cond: Some(c), text: Some(&ids), target: &tgt, t: 0.5 })
                .unwrap()
                .0
        };
        let a = run(&cond);
        cond.data[5] += 0.5;
        let b = run(&cond);
        let change: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(change > 0.0);
    }

    #[test]
    fn target_permutation_equivariance() {
        let cfg = ModelConfig {
            depth: 2,
            width: 16,
            heads: 4,
            text_len: 8,
            ..ModelConfig::default()
        };
        let model: Mmdit<f64> = Mmdit::new(cfg).unwrap();
        let cond = random_tokens::<f64>(16, 16, 5);
        let tgt = random_tokens::<f64>(24, 16, 6);
        let ids = encode_text("OK", 8);
        let f = tgt.grid.feature();
        let mut swapped = tgt.clone();
        let (i, j) = (1, 4);
        swapped.pos.swap(i, j);
        for k in 0..f {
            swapped.data.swap(i * f + k, j * f + k);
        }
        let run = |t: &PatchTokens<f64>| {
            model
                .forward(&Inputs { cond: Some(&cond), text: Some(&ids), target: t, t: 0.7 })
                .unwrap()
                .0
        };
        let (a, b) = (run(&tgt), run(&swapped));
        for k in 0..f {
            assert!((a[i * f + k] - b[j * f + k]).abs() < 1e-12);
            assert!((a[j * f + k] - b[i * f + k]).abs() < 1e-12);
            assert!((a[0 * f + k] - b[0 * f + k]).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let model: Mmdit<f32> = Mmdit::new(ModelConfig::micro()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &model.to_checkpoint("model", serde_json::json!({"step": 3}))).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.extra["step"], 3);
        let m2: Mmdit<f32> = Mmdit::from_checkpoint(&back).unwrap();
        assert_eq!(m2.params, model.params);

        let mut bad = back.clone();
        bad.tensors[3].shape = vec![2, 8];
        assert!(Mmdit::<f32>::from_checkpoint(&bad).is_err());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn every_parameter_has_a_known_group() {
        let cfg = ModelConfig::default();
        let labels = cfg.group_labels();
        for (name, _) in param_specs(&cfg) {
            assert!(labels.contains(&crate::mmdit::group_of(&name)), "{name}");
        }
    }
}
