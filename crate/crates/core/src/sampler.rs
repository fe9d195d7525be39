//! Sequential generation in raster order, channels in order within a pixel.
//!
//! The reference path runs a full forward pass for every (pixel, channel).
//! The fast path only evaluates rows `0..=y`, which causality makes
//! bitwise identical.

use crate::error::{Error, Result};
use crate::layers::Conditioning;
use crate::model::Autoregressive;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    /// Softmax temperature; 0 picks the most likely level.
    pub temperature: f64,
    /// Evaluate only the rows up to the current one.
    pub fast: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            fast: true,
        }
    }
}

/// Images plus the distribution each generated value was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    /// Levels `[N, C, H, W]`.
    pub images: Tensor,
    /// `[N, C, L, H, W]`; zero at positions that were given, not generated.
    pub distributions: Tensor,
    /// Raster index (pixel-major, then channel) of the first generated value.
    pub start: usize,
}

/// Draws `count` images; image `i` uses the stream `Rng::derive(seed, i)`.
pub fn sample<M: Autoregressive>(
    model: &M,
    count: usize,
    cond: &Conditioning,
    seed: u64,
    opts: SampleOptions,
) -> Result<Samples> {
    let cfg = model.config();
    let blank = Tensor::zeros(&[count, cfg.channels, cfg.height, cfg.width]);
    let rngs = (0..count as u64).map(|i| Rng::derive(seed, i)).collect();
    generate(model, blank, 0, cond, rngs, opts)
}

/// Resamples everything after the known raster prefix of `partial`.
/// `known` is a `[C, H, W]` mask shared by all images and must be a prefix
/// in raster order.
pub fn complete<M: Autoregressive>(
    model: &M,
    partial: &Tensor,
    known: &[bool],
    cond: &Conditioning,
    seed: u64,
    opts: SampleOptions,
) -> Result<Samples> {
    let cfg = model.config();
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let (n, ..) = partial.dims4("complete")?;
    if partial.shape()[1..] != [c, h, w] || known.len() != c * h * w {
        return Err(Error::shape(
            "complete",
            format!("image {:?} and mask of {} for {c}x{h}x{w}", partial.shape(), known.len()),
        ));
    }
    let at = |i: usize| {
        let (pixel, ch) = (i / c, i % c);
        known[(ch * h + pixel / w) * w + pixel % w]
    };
    let prefix = (0..c * h * w).take_while(|&i| at(i)).count();
    if (prefix..c * h * w).any(at) {
        return Err(Error::Invalid("known region is not a raster prefix".into()));
    }
    let rngs = (0..n as u64).map(|i| Rng::derive(seed, i)).collect();
    generate(model, partial.clone(), prefix, cond, rngs, opts)
}

/// One image per point of a uniform grid of `steps` points from `h_a` to
/// `h_b` inclusive; every image is drawn with the same random stream.
pub fn sample_interpolation<M: Autoregressive>(
    model: &M,
    h_a: &[f64],
    h_b: &[f64],
    steps: usize,
    seed: u64,
    opts: SampleOptions,
) -> Result<(Samples, Tensor)> {
    let dim = model.config().conditioning.dim();
    if h_a.len() != dim || h_b.len() != dim || dim == 0 {
        return Err(Error::Conditioning(format!(
            "endpoints of size {} and {} for conditioning size {dim}",
            h_a.len(),
            h_b.len()
        )));
    }
    let h = interpolation_grid(h_a, h_b, steps)?;
    let cfg = model.config();
    let blank = Tensor::zeros(&[steps, cfg.channels, cfg.height, cfg.width]);
    let rngs = vec![Rng::derive(seed, 0); steps];
    let samples = generate(model, blank, 0, &Conditioning::Global(h.clone()), rngs, opts)?;
    Ok((samples, h))
}

/// Rows `h_t = (1 - t) h_a + t h_b` for `t = i / (steps - 1)`.
pub fn interpolation_grid(h_a: &[f64], h_b: &[f64], steps: usize) -> Result<Tensor> {
    if steps < 2 || h_a.len() != h_b.len() {
        return Err(Error::Invalid(format!(
            "interpolation needs >= 2 steps and equal sizes (got {steps}, {} vs {})",
            h_a.len(),
            h_b.len()
        )));
    }
    let d = h_a.len();
    Ok(Tensor::from_fn(&[steps, d], |i| {
        let t = (i / d) as f64 / (steps - 1) as f64;
        let k = i % d;
        (1.0 - t) * h_a[k] + t * h_b[k]
    }))
}

fn generate<M: Autoregressive>(
    model: &M,
    mut images: Tensor,
    start: usize,
    cond: &Conditioning,
    mut rngs: Vec<Rng>,
    opts: SampleOptions,
) -> Result<Samples> {
    let cfg = model.config();
    let (c, h, w, levels) = (cfg.channels, cfg.height, cfg.width, cfg.levels);
    let n = images.shape()[0];
    if !(opts.temperature >= 0.0) || !opts.temperature.is_finite() {
        return Err(Error::Invalid(format!("temperature {}", opts.temperature)));
    }
    let mut dists = Tensor::zeros(&[n, c, levels, h, w]);
    let mut probs = vec![0.0; levels];
    for i in start..c * h * w {
        let (pixel, ch) = (i / c, i % c);
        let (y, x) = (pixel / w, pixel % w);
        let rows = if opts.fast { y + 1 } else { h };
        let logits = model.logits_rows(&images, cond, rows)?;
        for (b, rng) in rngs.iter_mut().enumerate() {
            let logit = |l: usize| logits.data()[(((b * c + ch) * levels + l) * rows + y) * w + x];
            let level = if opts.temperature == 0.0 {
                let mut best = 0;
                for l in 1..levels {
                    if logit(l) > logit(best) {
                        best = l;
                    }
                }
                probs.fill(0.0);
                probs[best] = 1.0;
                best
            } else {
                let max = (0..levels).map(logit).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (l, p) in probs.iter_mut().enumerate() {
                    *p = ((logit(l) - max) / opts.temperature).exp();
                    z += *p;
                }
                probs.iter_mut().for_each(|p| *p /= z);
                inverse_cdf(&probs, rng.uniform())
            };
            for (l, &p) in probs.iter().enumerate() {
                dists.set(&[b, ch, l, y, x], p);
            }
            images.set(&[b, ch, y, x], level as f64);
        }
    }
    Ok(Samples {
        images,
        distributions: dists,
        start,
    })
}

/// First level whose cumulative probability exceeds `u`.
pub fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (l, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return l;
        }
    }
    probs.len() - 1
}
