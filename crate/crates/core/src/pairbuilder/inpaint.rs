use crate::error::{Error, Result};
use crate::filtering::DetectedSpan;
use crate::imaging::{quantize_unit, BinaryMask, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct TextMask {
    pub mask: BinaryMask,
    pub dilation_radius: u32,
}

/// Union of the span boxes grown by `r` px on every side, clipped to the
/// canvas.
pub fn build_text_mask(spans: &[DetectedSpan], dims: (u32, u32), r: u32) -> TextMask {
    let mut mask = BinaryMask::new(dims.0, dims.1);
    for s in spans {
        mask.fill_rect(s.bbox.dilate(r, dims.0, dims.1));
    }
    TextMask {
        mask,
        dilation_radius: r,
    }
}

/// Laplace relaxation on a float field, channel values in [0, 1].
///
/// Masked pixels are swept row-major with in-place (Gauss-Seidel) updates,
/// each becoming the mean of its in-canvas 4-neighbours, until the largest
/// channel change in a sweep drops below `eps` or `max_iters` sweeps ran.
/// Returns the field and the number of sweeps.
pub fn inpaint_field(
    image: &Image,
    mask: &BinaryMask,
    eps: f64,
    max_iters: usize,
) -> Result<(Vec<[f64; 3]>, usize)> {
    let (w, h) = image.dimensions();
    if (mask.width, mask.height) != (w, h) {
        return Err(Error::InvalidArgument(format!(
            "mask is {}x{} but image is {w}x{h}",
            mask.width, mask.height
        )));
    }
    let mut field: Vec<[f64; 3]> = image
        .pixels()
        .map(|p| p.0.map(|c| c as f64 / 255.0))
        .collect();
    let holes: Vec<usize> = (0..field.len()).filter(|&i| mask.bits[i]).collect();
    if holes.is_empty() {
        return Ok((field, 0));
    }
    if holes.len() == field.len() {
        return Err(Error::InvalidArgument(
            "mask covers the whole image; inpainting has no boundary".into(),
        ));
    }

    // Start holes at the mean of the known pixels bordering them.
    let (w, h) = (w as usize, h as usize);
    let neighbours = |i: usize| {
        let (x, y) = (i % w, i / w);
        [
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
        ]
        .into_iter()
        .flatten()
    };
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for &i in &holes {
        for j in neighbours(i).filter(|&j| !mask.bits[j]) {
            for c in 0..3 {
                sum[c] += field[j][c];
            }
            n += 1;
        }
    }
    let start = sum.map(|s| s / n.max(1) as f64);
    for &i in &holes {
        field[i] = start;
    }

    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        let mut delta: f64 = 0.0;
        for &i in &holes {
            let mut acc = [0.0; 3];
            let mut k = 0.0;
            for j in neighbours(i) {
                for c in 0..3 {
                    acc[c] += field[j][c];
                }
                k += 1.0;
            }
            for c in 0..3 {
                let v = acc[c] / k;
                delta = delta.max((v - field[i][c]).abs());
                field[i][c] = v;
            }
        }
        if delta < eps {
            break;
        }
    }
    Ok((field, iters))
}

/// Fills masked pixels by Laplace relaxation; unmasked pixels are copied
/// bit for bit.
pub fn inpaint(image: &Image, mask: &BinaryMask, eps: f64, max_iters: usize) -> Result<Image> {
    let (field, _) = inpaint_field(image, mask, eps, max_iters)?;
    let mut out = image.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        if mask.bits[i] {
            px.0 = field[i].map(quantize_unit);
        }
    }
    Ok(out)
}
