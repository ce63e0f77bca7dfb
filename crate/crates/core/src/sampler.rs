//! Euler integration of the learned velocity field with classifier-free
//! guidance, at any target size the model's grid admits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::mmdit::{encode_text, patchify, unpatchify, Inputs, Mmdit, PatchGrid, PatchTokens, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, guidance: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub cond: Option<Image>,
    pub prompt: String,
    pub width: u32,
    pub height: u32,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl SampleRequest {
    pub fn check<T>(&self, model: &Mmdit<T>) -> Result<PatchGrid> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("sampling needs at least one step".into()));
        }
        if !(self.guidance >= 0.0) {
            return Err(Error::InvalidArgument(format!("guidance scale {} is negative", self.guidance)));
        }
        let grid = PatchGrid::for_dims(self.width, self.height, model.config.patch)?;
        let side = model.config.max_grid_side;
        if grid.h_p > side || grid.w_p > side {
            return Err(Error::InvalidArgument(format!(
                "{}x{} exceeds the {side}x{side} patch grid",
                self.width, self.height
            )));
        }
        Ok(grid)
    }
}

/// Guided velocity. Weight 0 evaluates only the unconditional branch and
/// weight 1 only the conditional one.
fn velocity<T: Scalar>(
    model: &Mmdit<T>,
    cond: Option<&PatchTokens<T>>,
    text: &[u32],
    x: &PatchTokens<T>,
    t: T,
    w: f64,
) -> Result<Vec<T>> {
    let uncond = || model.forward(&Inputs { cond: None, text: None, target: x, t }).map(|r| r.0);
    let conditioned = || model.forward(&Inputs { cond, text: Some(text), target: x, t }).map(|r| r.0);
    if w == 0.0 {
        return uncond();
    }
    if w == 1.0 {
        return conditioned();
    }
    let (vu, vc) = (uncond()?, conditioned()?);
    let w = T::c(w);
    Ok(vu.iter().zip(&vc).map(|(&u, &c)| u + w * (c - u)).collect())
}

/// Final target tokens before quantization.
pub fn sample_tokens<T: Scalar>(model: &Mmdit<T>, req: &SampleRequest) -> Result<PatchTokens<T>> {
    let grid = req.check(model)?;
    let cond = req.cond.as_ref().map(|c| patchify::<T>(c, model.config.patch)).transpose()?;
    let text = encode_text(&req.prompt, model.config.text_len);
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let noise: Vec<T> = (0..grid.len() * grid.feature())
        .map(|_| T::c(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let mut x = PatchTokens { pos: grid.positions(), grid, data: noise };
    let n = req.steps;
    let dt = T::c(1.0 / n as f64);
    for i in 0..n {
        let t = T::c(1.0 - i as f64 / n as f64);
        let v = velocity(model, cond.as_ref(), &text, &x, t, req.guidance)?;
        for (xi, vi) in x.data.iter_mut().zip(v) {
            *xi = *xi - dt * vi;
        }
    }
    Ok(x)
}

pub fn sample<T: Scalar>(model: &Mmdit<T>, req: &SampleRequest) -> Result<Image> {
    Ok(unpatchify(&sample_tokens(model, req)?))
}

/// One sample per `(width, height)`, seeded `req.seed + index`. A bad
/// ratio yields an error in its slot without affecting the others.
pub fn sample_grid<T: Scalar>(model: &Mmdit<T>, req: &SampleRequest, ratios: &[(u32, u32)]) -> Vec<Result<Image>> {
    ratios
        .par_iter()
        .enumerate()
        .map(|(i, &(width, height))| {
            let r = SampleRequest {
                width,
                height,
                seed: req.seed.wrapping_add(i as u64),
                ..req.clone()
            };
            sample(model, &r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::solid;
    use crate::mmdit::ModelConfig;

    fn model() -> Mmdit<f64> {
        Mmdit::new(ModelConfig { max_grid_side: 16, ..ModelConfig::micro() }).unwrap()
    }

    fn request() -> SampleRequest {
        SampleRequest {
            cond: Some(solid(96, 64, [200, 30, 30])),
            prompt: "Add the title \"SALE\" to this image.".into(),
            width: 64,
            height: 96,
            steps: 4,
            guidance: 3.0,
            seed: 7,
        }
    }

    #[test]
    fn output_dims_follow_the_request() {
        let m = model();
        let img = sample(&m, &request()).unwrap();
        assert_eq!(img.dimensions(), (64, 96));
    }

    #[test]
    fn deterministic() {
        let m = model();
        assert_eq!(sample(&m, &request()).unwrap(), sample(&m, &request()).unwrap());
    }

    #[test]
    fn zero_guidance_is_unconditional() {
        let m = model();
        let mut a = request();
        a.guidance = 0.0;
        let mut b = a.clone();
        b.cond = None;
        b.prompt = "something else entirely".into();
        assert_eq!(sample_tokens(&m, &a).unwrap().data, sample_tokens(&m, &b).unwrap().data);
    }

    #[test]
    fn unit_guidance_is_conditional() {
        let m = model();
        let req = request();
        let cond = patchify::<f64>(req.cond.as_ref().unwrap(), 8).unwrap();
        let text = encode_text(&req.prompt, m.config.text_len);
        let grid = PatchGrid::for_dims(64, 96, 8).unwrap();
        let x = PatchTokens { pos: grid.positions(), grid, data: vec![0.25; grid.len() * grid.feature()] };
        let v = velocity(&m, Some(&cond), &text, &x, 0.5, 1.0).unwrap();
        let vc = m.forward(&Inputs { cond: Some(&cond), text: Some(&text), target: &x, t: 0.5 }).unwrap().0;
        assert_eq!(v, vc);
    }

    #[test]
    fn single_step_is_one_euler_step() {
        let m = model();
        let mut req = request();
        req.steps = 1;
        let out = sample_tokens(&m, &req).unwrap();
        let grid = PatchGrid::for_dims(64, 96, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        let x1: Vec<f64> = (0..grid.len() * grid.feature()).map(|_| rng.sample(StandardNormal)).collect();
        let x = PatchTokens { pos: grid.positions(), grid, data: x1.clone() };
        let cond = patchify::<f64>(req.cond.as_ref().unwrap(), 8).unwrap();
        let text = encode_text(&req.prompt, m.config.text_len);
        let f = |c, tx| m.forward(&Inputs { cond: c, text: tx, target: &x, t: 1.0 }).unwrap().0;
        let (vu, vc) = (f(None, None), f(Some(&cond), Some(text.as_slice())));
        let expect: Vec<f64> = (0..x1.len()).map(|i| x1[i] - (vu[i] + 3.0 * (vc[i] - vu[i]))).collect();
        assert_eq!(out.data, expect);
    }

    #[test]
    fn grid_of_ratios() {
        let m = model();
        let mut req = request();
        req.steps = 2;
        let ratios = [(64, 64), (64, 96), (96, 64), (48, 96), (60, 64), (256, 64)];
        let out = sample_grid(&m, &req, &ratios);
        for (r, img) in ratios.iter().zip(&out).take(4) {
            assert_eq!(img.as_ref().unwrap().dimensions(), *r);
        }
        assert!(out[4].is_err());
        assert!(out[5].is_err());
        let again = sample_grid(&m, &req, &ratios[..2]);
        assert_eq!(again[1].as_ref().unwrap(), out[1].as_ref().unwrap());
    }

    #[test]
    fn invalid_requests() {
        let m = model();
        let mut r = request();
        r.steps = 0;
        assert!(sample(&m, &r).is_err());
        let mut r = request();
        r.guidance = -1.0;
        assert!(sample(&m, &r).is_err());
    }
}
