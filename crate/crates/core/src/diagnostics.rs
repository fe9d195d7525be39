//! Architecture checks: exhaustive causality, receptive-field maps (by
//! perturbation or by gradient), the symbolic blind-spot oracle, and a
//! finite-difference audit of every backward rule.

use crate::autodiff::{BackwardFault, Tape, Var};
use crate::error::Result;
use crate::layers::{Architecture, Conditioning};
use crate::model::{Autoregressive, CondMode, GatedPixelCNN, ModelConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Set the input to two distinct values and compare logits.
    Perturbation,
    /// Non-zero gradient of the target logits with respect to the input.
    Gradient,
}

/// Which input pixels influence the logits of one `(y, x, channel)` target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencyMap {
    pub target: (usize, usize, usize),
    pub height: usize,
    pub width: usize,
    /// Row-major `[H, W]`.
    pub influence: Vec<bool>,
    pub method: Method,
}

impl DependencyMap {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.influence[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.influence.iter().filter(|&&b| b).count()
    }

    /// Share of the strictly earlier pixels the target cannot see.
    pub fn missing_fraction(&self) -> f64 {
        missing_fraction(&self.influence, self.width, (self.target.0, self.target.1))
    }

    /// `#` influencing, `.` earlier but unseen, `T` target, blank later.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let t = self.target.0 * self.width + self.target.1;
        for y in 0..self.height {
            for x in 0..self.width {
                let i = y * self.width + x;
                s.push(if i == t {
                    'T'
                } else if self.influence[i] {
                    '#'
                } else if i < t {
                    '.'
                } else {
                    ' '
                });
            }
            s.push('\n');
        }
        s
    }
}

/// Fraction of pixels before `target` in raster order missing from `grid`.
pub fn missing_fraction(grid: &[bool], width: usize, target: (usize, usize)) -> f64 {
    let t = target.0 * width + target.1;
    if t == 0 {
        return 0.0;
    }
    grid[..t].iter().filter(|&&b| !b).count() as f64 / t as f64
}

/// A forbidden `(target, input)` pair whose logits moved.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub trial: usize,
    /// `(y, x, channel)`.
    pub target: (usize, usize, usize),
    pub input: (usize, usize, usize),
    pub delta: f64,
}

const PERTURB_CHUNK: usize = 64;

fn random_conditioning(cfg: &ModelConfig, n: usize, rng: &mut Rng) -> Conditioning {
    match cfg.conditioning {
        CondMode::None => Conditioning::None,
        CondMode::Global { dim } | CondMode::Spatial { dim, .. } => {
            let h: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            Conditioning::Global(Tensor::from_fn(&[n, dim], |i| h[i % dim]))
        }
    }
}

fn repeat_conditioning(cond: &Conditioning, n: usize) -> Result<Conditioning> {
    Ok(match cond {
        Conditioning::Global(h) => {
            let dim = h.shape()[1];
            let row = &h.data()[..dim];
            Conditioning::Global(Tensor::from_fn(&[n, dim], |i| row[i % dim]))
        }
        other => other.clone(),
    })
}

fn random_image(cfg: &ModelConfig, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(&[1, cfg.channels, cfg.height, cfg.width], |_| rng.below(cfg.levels) as f64)
}

/// Another level than `v`, drawn uniformly.
fn other_level(v: f64, levels: usize, rng: &mut Rng) -> f64 {
    ((v as usize + 1 + rng.below(levels - 1)) % levels) as f64
}

/// Largest logit change at each `(channel, y, x)` between image `b` and image 0.
fn deltas(logits: &Tensor, b: usize, cfg: &ModelConfig) -> Vec<f64> {
    let (c, l, hw) = (cfg.channels, cfg.levels, cfg.height * cfg.width);
    let per = c * l * hw;
    let (base, other) = (&logits.data()[..per], &logits.data()[b * per..(b + 1) * per]);
    let mut out = vec![0.0f64; c * hw];
    for ch in 0..c {
        for lv in 0..l {
            for p in 0..hw {
                let i = (ch * l + lv) * hw + p;
                let d = (base[i] - other[i]).abs();
                let slot = &mut out[ch * hw + p];
                if d > *slot || d.is_nan() {
                    *slot = d;
                }
            }
        }
    }
    out
}

/// Exhaustive perturbation test of one model: every input value (pixel and
/// channel) is changed in turn and every logit is compared. Inputs at or
/// after a target in raster order (pixel, then channel) must not move it.
pub fn causality_violations<M: Autoregressive>(model: &M, tolerance: f64, seed: u64, trial: usize) -> Result<Vec<Violation>> {
    let cfg = model.config().clone();
    let (c, w) = (cfg.channels, cfg.width);
    let dims = cfg.dims_per_image();
    let mut rng = Rng::derive(seed, trial as u64);
    let base = random_image(&cfg, &mut rng);
    let mut batch = vec![base.clone()];
    for j in 0..dims {
        let (pixel, ch) = (j / c, j % c);
        let idx = [0, ch, pixel / w, pixel % w];
        let mut img = base.clone();
        img.set(&idx, other_level(base.at(&idx), cfg.levels, &mut rng));
        batch.push(img);
    }
    let batch = Tensor::stack(&batch)?;
    let cond = random_conditioning(&cfg, dims + 1, &mut rng);
    let logits = model.forward_logits(&batch, &cond)?;
    let hw = cfg.height * w;
    let mut out = Vec::new();
    for j in 0..dims {
        let d = deltas(&logits, j + 1, &cfg);
        for i in 0..=j {
            let (pixel, ch) = (i / c, i % c);
            let delta = d[ch * hw + pixel];
            if delta > tolerance || delta.is_nan() {
                out.push(Violation {
                    trial,
                    target: (pixel / w, pixel % w, ch),
                    input: ((j / c) / w, (j / c) % w, j % c),
                    delta,
                });
            }
        }
    }
    Ok(out)
}

/// Causality over `trials` independent weight draws of `config`, one
/// thread per trial.
pub fn causality_check(config: &ModelConfig, trials: usize, tolerance: f64, seed: u64) -> Result<Vec<Violation>> {
    let per_trial: Vec<Result<Vec<Violation>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..trials)
            .map(|t| {
                scope.spawn(move || {
                    let model = GatedPixelCNN::new(config.clone(), seed.wrapping_add(t as u64))?;
                    causality_violations(&model, tolerance, seed, t)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("causality trial panicked")).collect()
    });
    let mut out = Vec::new();
    for v in per_trial {
        out.extend(v?);
    }
    Ok(out)
}

/// Input pixels that move the logits of `target = (y, x, channel)`, pooled
/// over `probes` random base images (a ReLU that is off for one input can
/// hide a dependency).
pub fn receptive_field_map(
    model: &GatedPixelCNN,
    target: (usize, usize, usize),
    method: Method,
    probes: usize,
    seed: u64,
) -> Result<DependencyMap> {
    let cfg = model.config().clone();
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut rng = Rng::new(seed);
    let tgt = (target.2 * h + target.0) * w + target.1;
    let mut influence = vec![false; h * w];
    for _ in 0..probes.max(1) {
        let base = random_image(&cfg, &mut rng);
        let hits: Vec<bool> = match method {
            Method::Perturbation => {
                let cond = random_conditioning(&cfg, 1, &mut rng);
                let mut hits = Vec::with_capacity(h * w);
                // Bounded batches keep the tape small on large images.
                for chunk in (0..h * w).collect::<Vec<_>>().chunks(PERTURB_CHUNK) {
                    let mut batch = vec![base.clone()];
                    for &p in chunk {
                        let mut img = base.clone();
                        for ch in 0..c {
                            let idx = [0, ch, p / w, p % w];
                            img.set(&idx, other_level(base.at(&idx), cfg.levels, &mut rng));
                        }
                        batch.push(img);
                    }
                    let batch = Tensor::stack(&batch)?;
                    let logits = model.forward_logits(&batch, &repeat_conditioning(&cond, chunk.len() + 1)?)?;
                    hits.extend((0..chunk.len()).map(|i| deltas(&logits, i + 1, &cfg)[tgt] != 0.0));
                }
                hits
            }
            Method::Gradient => {
                let top = (cfg.levels - 1) as f64;
                let cond = random_conditioning(&cfg, 1, &mut rng);
                let mut tape = Tape::new();
                let x = tape.leaf(base.map(|v| v / top * 2.0 - 1.0));
                let logits = model.logits_from_input(&mut tape, x, &cond)?;
                let mut weights = Tensor::zeros(tape.value(logits).shape());
                for l in 0..cfg.levels {
                    weights.set(&[0, target.2, l, target.0, target.1], rng.normal());
                }
                let wv = tape.constant(weights);
                let picked = tape.mul(logits, wv)?;
                let loss = tape.sum(picked)?;
                let grads = tape.backward(loss)?;
                let g = grads.wrt(x)?;
                (0..h * w)
                    .map(|p| (0..c).any(|ch| g.data()[ch * h * w + p] != 0.0))
                    .collect()
            }
        };
        for (acc, hit) in influence.iter_mut().zip(hits) {
            *acc |= hit;
        }
    }
    Ok(DependencyMap {
        target,
        height: h,
        width: w,
        influence,
        method,
    })
}

/// Exact set of input pixels reachable from the target's logits by set
/// propagation through the layer geometry (single colour channel). `depth`
/// counts gated layers after the input projection.
pub fn blind_spot_oracle(
    architecture: Architecture,
    depth: usize,
    filter: usize,
    (h, w): (usize, usize),
    (ty, tx): (usize, usize),
) -> Vec<bool> {
    let r = (filter / 2) as isize;
    let half = filter.div_ceil(2) as isize;
    // Offsets (dy, dx) read by each kernel, relative to the output position.
    let square_b: Vec<(isize, isize)> = (-r..=0)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy < 0 || dx <= 0)
        .collect();
    let square_a: Vec<(isize, isize)> = square_b.iter().copied().filter(|&o| o != (0, 0)).collect();
    let row_b: Vec<(isize, isize)> = (-(half - 1)..=0).map(|dx| (0, dx)).collect();
    let row_a: Vec<(isize, isize)> = row_b.iter().copied().filter(|&o| o != (0, 0)).collect();
    let vertical: Vec<(isize, isize)> = (-(half - 1)..=0)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .collect();
    let vertical_input: Vec<(isize, isize)> = vertical.iter().map(|&(dy, dx)| (dy - 1, dx)).collect();

    let expand = |set: &[bool], offsets: &[(isize, isize)], out: &mut Vec<bool>| {
        for (i, _) in set.iter().enumerate().filter(|(_, &b)| b) {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for &(dy, dx) in offsets {
                let (yy, xx) = (y + dy, x + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    };
    let mut hset = vec![false; h * w];
    hset[ty * w + tx] = true;
    let mut vset = vec![false; h * w];
    let mut reach = vec![false; h * w];
    match architecture {
        Architecture::SingleStack => {
            for _ in 0..depth {
                let mut next = vec![false; h * w];
                expand(&hset, &square_b, &mut next);
                hset = next;
            }
            expand(&hset, &square_a, &mut reach);
        }
        Architecture::TwoStack => {
            for _ in 0..depth {
                let mut nh = vec![false; h * w];
                let mut nv = vec![false; h * w];
                expand(&hset, &row_b, &mut nh);
                expand(&hset, &vertical, &mut nv);
                expand(&vset, &vertical, &mut nv);
                hset = nh;
                vset = nv;
            }
            expand(&hset, &row_a, &mut reach);
            expand(&vset, &vertical_input, &mut reach);
        }
    }
    reach
}

/// Objective whose gradient is audited.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditLoss {
    /// Bits/dim of a random batch.
    Nll,
    /// Fixed random projection of the logits; affine in every single
    /// parameter of a model with identity activations.
    Projection,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditOptions {
    pub loss: AuditLoss,
    /// Parameter entries checked per parameter tensor.
    pub per_tensor: usize,
    pub step: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    pub seed: u64,
    /// Deliberately wrong backward rule (negative control).
    pub fault: Option<BackwardFault>,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            loss: AuditLoss::Projection,
            per_tensor: 4,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Entries whose perturbation moved some ReLU input across zero.
    pub skipped: usize,
    /// `(parameter name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares backpropagated gradients with central differences on a random
/// subsample of parameter entries. Error is
/// `|a - n| / max(|a|, |n|, floor)`.
///
/// Runs on a copy whose biases are redrawn from `N(0, 0.1²)`: with zero
/// biases the first pixel's activations sit exactly on the ReLU kink.
pub fn gradient_audit(model: &GatedPixelCNN, opts: AuditOptions) -> Result<AuditReport> {
    let cfg = model.config().clone();
    let mut rng = Rng::new(opts.seed);
    let mut model = model.clone();
    let biases: Vec<_> = model.params().iter().filter(|(_, name, _)| name.ends_with("bias")).map(|(id, _, _)| id).collect();
    for id in biases {
        for b in model.params_mut().get_mut(id).data_mut() {
            *b = 0.1 * rng.normal();
        }
    }
    let model = &mut model;
    let n = 2;
    let images = Tensor::from_fn(&[n, cfg.channels, cfg.height, cfg.width], |_| rng.below(cfg.levels) as f64);
    let cond = random_conditioning(&cfg, n, &mut rng);
    let projection = Tensor::from_fn(&[n, cfg.channels, cfg.levels, cfg.height, cfg.width], |_| rng.normal());
    let forward = |m: &GatedPixelCNN, tape: &mut Tape| -> Result<(Var, Var)> {
        let logits = m.logits_var(tape, &images, &cond)?;
        let loss = match opts.loss {
            AuditLoss::Nll => m.loss(tape, &images, &cond)?,
            AuditLoss::Projection => {
                let r = tape.constant(projection.clone());
                let y = tape.mul(logits, r)?;
                tape.sum(y)?
            }
        };
        Ok((logits, loss))
    };
    let mut tape = match opts.fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let (_, loss) = forward(&*model, &mut tape)?;
    let grads = tape.backward(loss)?;
    let pattern = tape.relu_pattern();
    drop(tape);
    let ids: Vec<_> = model.params().ids().collect();
    let mut report = AuditReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    // Loss value, logits and ReLU pattern at the current parameters.
    let eval = |m: &GatedPixelCNN| -> Result<(f64, Tensor, Vec<bool>)> {
        let mut t = Tape::new();
        let (logits, loss) = forward(m, &mut t)?;
        Ok((t.value(loss).item(), t.value(logits).clone(), t.relu_pattern()))
    };
    for id in ids {
        let numel = model.params().get(id).numel();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(model.params().get(id).shape()));
        let wanted = opts.per_tensor.min(numel);
        let mut done = 0;
        for _ in 0..wanted * 10 {
            if done == wanted {
                break;
            }
            let k = rng.below(numel);
            let orig = model.params().get(id).data()[k];
            let (hi, lo) = (orig + opts.step, orig - opts.step);
            model.params_mut().get_mut(id).data_mut()[k] = hi;
            let plus = eval(&*model);
            model.params_mut().get_mut(id).data_mut()[k] = lo;
            let minus = eval(&*model);
            model.params_mut().get_mut(id).data_mut()[k] = orig;
            let ((fp, lp, pp), (fm, lm, pm)) = (plus?, minus?);
            if pp != pattern || pm != pattern {
                report.skipped += 1;
                continue;
            }
            let diff = match opts.loss {
                AuditLoss::Nll => fp - fm,
                // Differencing before projecting drops the rounding of
                // every logit the entry does not reach.
                AuditLoss::Projection => lp
                    .data()
                    .iter()
                    .zip(lm.data())
                    .zip(projection.data())
                    .map(|((p, m), r)| (p - m) * r)
                    .sum(),
            };
            let numeric = diff / (hi - lo);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            done += 1;
            if err > report.max_relative_error || err.is_nan() {
                report.max_relative_error = err;
                report.worst = Some((model.params().name(id).to_string(), k, a, numeric));
            }
        }
    }
    Ok(report)
}
