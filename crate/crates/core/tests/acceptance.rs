//! Acceptance run: one pass/fail line per criterion.
//!
//! `cargo test --release --test acceptance -- 2 5` runs a subset.

use std::path::PathBuf;
use std::time::Instant;

use gpcnn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use gpcnn::data::{classify_stripes, load_mnist, make_synthetic, one_hot, Dataset, QuantizationSpec, Split, SyntheticKind};
use gpcnn::diagnostics::{
    blind_spot_oracle, causality_check, causality_violations, gradient_audit, receptive_field_map, AuditLoss, AuditOptions,
    Method,
};
use gpcnn::model::level_probabilities;
use gpcnn::sampler::{sample, SampleOptions};
use gpcnn::train::{evaluate, fit, fit_until, TrainConfig};
use gpcnn::{
    nll_bits_per_dim, Activation, Architecture, Autoregressive, BackwardFault, CondMode, CondSource, Conditioning, Fault,
    GatedPixelCNN, ModelConfig, PixelCNNAutoencoder, Result, Tensor,
};

struct Outcome {
    pass: bool,
    detail: String,
    /// Failure explained by a bound the implementation cannot beat.
    known: Option<&'static str>,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self {
            pass,
            detail,
            known: None,
        }
    }
}

fn digits() -> Result<(Dataset, Dataset)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/digits");
    let q = QuantizationSpec::new(4)?;
    Ok((load_mnist(&dir, Split::Train, q)?, load_mnist(&dir, Split::Test, q)?))
}

fn causality() -> Result<Outcome> {
    let t = Instant::now();
    let gray = ModelConfig {
        height: 8,
        width: 8,
        ..ModelConfig::mnist_small()
    };
    let rgb = ModelConfig {
        height: 6,
        width: 6,
        channels: 3,
        features: 24,
        head_width: 48,
        ..ModelConfig::mnist_small()
    };
    let mut violations = 0;
    for base in [&gray, &rgb] {
        for arch in [Architecture::TwoStack, Architecture::SingleStack] {
            let cfg = ModelConfig {
                architecture: arch,
                ..base.clone()
            };
            violations += causality_check(&cfg, 5, 0.0, 11)?.len();
        }
    }
    let elapsed = t.elapsed().as_secs_f64();
    let mut flagged = Vec::new();
    for fault in [Fault::UnmaskInput, Fault::UnshiftVertical] {
        let mut m = GatedPixelCNN::new(gray.clone(), 1)?;
        m.inject_fault(fault);
        flagged.push(causality_violations(&m, 0.0, 0, 0)?.len());
    }
    Ok(Outcome::new(
        violations == 0 && elapsed < 120.0 && flagged.iter().all(|&n| n > 0),
        format!(
            "violations {violations} over 8x8x1 and 6x6x3, both stacks, 5 draws each, {elapsed:.1}s; \
             injected faults flagged {flagged:?}"
        ),
    ))
}

fn blind_spot() -> Result<Outcome> {
    let (h, w) = (12, 12);
    let target = ((h - 1) / 2, (w - 1) / 2);
    let mut mismatches = Vec::new();
    let mut cells = 0;
    for arch in [Architecture::SingleStack, Architecture::TwoStack] {
        for depth in [1, 2, 4, 8] {
            for filter in [3, 5] {
                let cfg = ModelConfig {
                    layers: depth,
                    filter,
                    architecture: arch,
                    features: 8,
                    head_width: 16,
                    ..ModelConfig::tiny(h, w, 1, 4)
                };
                let model = GatedPixelCNN::new(cfg, 3)?;
                let oracle = blind_spot_oracle(arch, depth, filter, (h, w), target);
                let methods: &[Method] = if depth <= 4 {
                    &[Method::Perturbation, Method::Gradient]
                } else {
                    &[Method::Perturbation]
                };
                for &method in methods {
                    cells += 1;
                    let map = receptive_field_map(&model, (target.0, target.1, 0), method, 3, 5)?;
                    if map.influence != oracle {
                        mismatches.push(format!("{arch:?}/{depth}/{filter}/{method:?}"));
                    }
                }
            }
        }
    }
    // Deep 3x3 nets on 32x32: every pixel of the prefix is within reach of
    // the two-stack model at this depth.
    let (n, depth) = (32, 16);
    let centre = ((n - 1) / 2, (n - 1) / 2);
    let mut missing = Vec::new();
    for arch in [Architecture::SingleStack, Architecture::TwoStack] {
        let cfg = ModelConfig {
            layers: depth,
            filter: 3,
            architecture: arch,
            features: 8,
            head_width: 16,
            ..ModelConfig::tiny(n, n, 1, 4)
        };
        let map = receptive_field_map(&GatedPixelCNN::new(cfg, 3)?, (centre.0, centre.1, 0), Method::Perturbation, 2, 5)?;
        let oracle = blind_spot_oracle(arch, depth, 3, (n, n), centre);
        if map.influence != oracle {
            mismatches.push(format!("{arch:?}/32x32/{depth}"));
        }
        missing.push(map.missing_fraction());
    }
    Ok(Outcome::new(
        mismatches.is_empty() && missing[0] >= 0.2 && missing[1] == 0.0,
        format!(
            "{cells} maps vs oracle, mismatches {mismatches:?}; 32x32 depth {depth} centre missing: \
             single {:.3}, two {:.3}",
            missing[0], missing[1]
        ),
    ))
}

fn gradients() -> Result<Outcome> {
    let mut desk: f64 = 0.0;
    let mut skipped = 0;
    for seed in 0..2 {
        let m = GatedPixelCNN::new(ModelConfig::mnist_small(), seed)?;
        let r = gradient_audit(
            &m,
            AuditOptions {
                seed,
                ..AuditOptions::default()
            },
        )?;
        desk = desk.max(r.max_relative_error);
        skipped += r.skipped;
    }
    let tiny = ModelConfig::tiny(6, 6, 1, 4);
    let nll = gradient_audit(
        &GatedPixelCNN::new(tiny.clone(), 0)?,
        AuditOptions {
            loss: AuditLoss::Nll,
            ..AuditOptions::default()
        },
    )?
    .max_relative_error;
    let mut linear: f64 = 0.0;
    for seed in 0..5 {
        let cfg = ModelConfig {
            activation: Activation::Identity,
            ..tiny.clone()
        };
        let r = gradient_audit(
            &GatedPixelCNN::new(cfg, seed)?,
            AuditOptions {
                seed,
                per_tensor: 8,
                ..AuditOptions::default()
            },
        )?;
        linear = linear.max(r.max_relative_error);
    }
    let faulty = gradient_audit(
        &GatedPixelCNN::new(ModelConfig::mnist_small(), 0)?,
        AuditOptions {
            fault: Some(BackwardFault::SigmoidDerivative),
            ..AuditOptions::default()
        },
    )?
    .max_relative_error;
    Ok(Outcome::new(
        desk <= 1e-4 && nll <= 1e-4 && linear <= 1e-8 && faulty > 1e-2,
        format!(
            "desk model {desk:.2e} ({skipped} kink entries redrawn), tiny NLL {nll:.2e}, \
             linear control {linear:.2e}, wrong sigmoid rule {faulty:.2e}"
        ),
    ))
}

fn uniform() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut at256 = 0.0;
    for levels in [2, 4, 16, 256] {
        let images = Tensor::from_fn(&[3, 1, 5, 5], |i| ((i * 7919) % levels) as f64);
        let logits = Tensor::zeros(&[3, 1, levels, 5, 5]);
        let bits = nll_bits_per_dim(&logits, &images)?;
        worst = worst.max((bits - (levels as f64).log2()).abs());
        // Through a model whose parameters are all zero.
        let mut m = GatedPixelCNN::new(ModelConfig::tiny(5, 5, 1, levels), 0)?;
        m.params_mut().zero();
        let bits = m.nll(&images, &Conditioning::None)?;
        worst = worst.max((bits - (levels as f64).log2()).abs());
        if levels == 256 {
            at256 = bits;
        }
    }
    Ok(Outcome::new(
        worst <= 1e-9,
        format!("L=256 gives {at256:.4}, max deviation from log2 L {worst:.1e}"),
    ))
}

fn sequential() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut bitwise = true;
    for cfg in [ModelConfig::tiny(8, 8, 1, 4), ModelConfig::tiny(6, 6, 3, 8)] {
        let m = GatedPixelCNN::new(cfg, 4)?;
        let fast = sample(&m, 3, &Conditioning::None, 9, SampleOptions::default())?;
        let slow = sample(
            &m,
            3,
            &Conditioning::None,
            9,
            SampleOptions {
                fast: false,
                ..SampleOptions::default()
            },
        )?;
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        bitwise &= bits(&fast.images) == bits(&slow.images) && bits(&fast.distributions) == bits(&slow.distributions);
        let teacher = level_probabilities(&m.forward_logits(&fast.images, &Conditioning::None)?)?;
        worst = worst.max(teacher.max_abs_diff(&fast.distributions));
    }
    Ok(Outcome::new(
        worst <= 1e-6 && bitwise,
        format!("max |sequential - teacher-forced| {worst:.1e} on 8x8x1 and 6x6x3; fast path bitwise equal: {bitwise}"),
    ))
}

fn desk_training() -> Result<Outcome> {
    let (train, test) = digits()?;
    let t = Instant::now();
    let mut model = GatedPixelCNN::new(ModelConfig::mnist_small(), 0)?;
    let cfg = TrainConfig {
        steps: 2000,
        eval_every: 25,
        ..TrainConfig::default()
    };
    let (history, ..) = fit_until(&mut model, &train, &test, CondSource::None, &cfg, None, |e| e.eval_bits <= 1.4)?;
    let elapsed = t.elapsed().as_secs_f64();
    let last = *history.entries.last().expect("at least one evaluation");

    let batch = train.subset(&(0..16).collect::<Vec<_>>());
    let mut model = GatedPixelCNN::new(ModelConfig::mnist_small(), 0)?;
    let cfg = TrainConfig {
        steps: 1500,
        eval_every: 25,
        ..TrainConfig::default()
    };
    let (over, ..) = fit_until(&mut model, &batch, &batch, CondSource::None, &cfg, None, |e| e.eval_bits <= 0.2)?;
    let o = *over.entries.last().expect("at least one evaluation");
    Ok(Outcome::new(
        last.eval_bits <= 1.4 && elapsed < 1800.0 && o.eval_bits <= 0.2,
        format!(
            "held-out {:.4} bits/dim at step {} ({elapsed:.0}s); one batch {:.4} at step {}",
            last.eval_bits, last.step, o.eval_bits, o.step
        ),
    ))
}

fn gating_ablation() -> Result<Outcome> {
    let (train, test) = digits()?;
    let gated = ModelConfig::mnist_small();
    let relu = gated.relu_ablation()?;
    let count = |c: &ModelConfig| -> Result<usize> { Ok(GatedPixelCNN::new(c.clone(), 0)?.params().count()) };
    let (ng, nr) = (count(&gated)?, count(&relu)?);
    let steps = 150;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let cfg = TrainConfig {
            steps,
            eval_every: steps,
            seed,
            ..TrainConfig::default()
        };
        let mut scores = [0.0; 2];
        for (slot, mc) in [&gated, &relu].into_iter().enumerate() {
            let mut model = GatedPixelCNN::new(mc.clone(), seed)?;
            fit(&mut model, &train, &test, CondSource::None, &cfg, None)?;
            scores[slot] = evaluate(&model, &test, CondSource::None, 64, None)?;
        }
        if scores[0] <= scores[1] {
            wins += 1;
        }
        pairs.push(format!("{:.4}/{:.4}", scores[0], scores[1]));
    }
    Ok(Outcome::new(
        wins >= 3,
        format!(
            "gated wins {wins}/5 after {steps} steps (gated/relu {}; params {ng} vs {nr}, relu features {})",
            pairs.join(" "),
            relu.features
        ),
    ))
}

fn conditional() -> Result<Outcome> {
    let all = make_synthetic(SyntheticKind::StripesHv, 2400, (8, 8), 4, 0)?;
    let (train, test) = all.split(2000);
    let base = ModelConfig {
        layers: 4,
        features: 16,
        filter: 5,
        head_width: 32,
        ..ModelConfig::tiny(8, 8, 1, 4)
    };
    let cfg = TrainConfig {
        steps: 500,
        eval_every: 500,
        ..TrainConfig::default()
    };
    let mut plain = GatedPixelCNN::new(base.clone(), 0)?;
    fit(&mut plain, &train, &test, CondSource::None, &cfg, None)?;
    let plain_bits = evaluate(&plain, &test, CondSource::None, 64, None)?;
    let mut cond = GatedPixelCNN::new(
        ModelConfig {
            conditioning: CondMode::Global { dim: 2 },
            ..base
        },
        0,
    )?;
    fit(&mut cond, &train, &test, CondSource::Class, &cfg, None)?;
    let cond_bits = evaluate(&cond, &test, CondSource::Class, 64, None)?;

    let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
    let s = sample(&cond, 200, &Conditioning::Global(one_hot(&labels, 2)?), 1, SampleOptions::default())?;
    let correct = (0..200)
        .filter(|&i| classify_stripes(s.images.batch_item(i).data(), 8, 8) == labels[i])
        .count();
    let gap = plain_bits - cond_bits;
    let samples_ok = correct >= 190;
    let mut out = Outcome::new(
        gap >= 0.2 && samples_ok,
        format!(
            "held-out gap {gap:.4} bits/dim (unconditional {plain_bits:.4}, class-conditional {cond_bits:.4}); \
             classifier agrees on {correct}/200 samples"
        ),
    );
    if !out.pass && samples_ok {
        out.known = Some("a binary label lowers the optimal NLL by at most 1 bit per image, 1/64 bits/dim here");
    }
    Ok(out)
}

fn autoencoder() -> Result<Outcome> {
    let (train, test) = digits()?;
    let cfg = TrainConfig {
        steps: 300,
        eval_every: 300,
        ..TrainConfig::default()
    };
    let mut plain = GatedPixelCNN::new(ModelConfig::mnist_small(), 0)?;
    fit(&mut plain, &train, &test, CondSource::None, &cfg, None)?;
    let plain_bits = evaluate(&plain, &test, CondSource::None, 64, None)?;
    let mut ae = PixelCNNAutoencoder::new(
        ModelConfig {
            bottleneck: Some(10),
            ..ModelConfig::mnist_small()
        },
        0,
    )?;
    fit(&mut ae, &train, &test, CondSource::None, &cfg, None)?;
    let ae_bits = evaluate(&ae, &test, CondSource::None, 64, None)?;
    Ok(Outcome::new(
        ae_bits < plain_bits,
        format!("held-out bits/dim: autoencoder (m=10) {ae_bits:.4}, unconditional {plain_bits:.4}"),
    ))
}

fn determinism() -> Result<Outcome> {
    let all = make_synthetic(SyntheticKind::StripesHv, 300, (6, 6), 4, 2)?;
    let (train, test) = all.split(240);
    let cfg = ModelConfig::tiny(6, 6, 1, 4);
    let tc = |steps| TrainConfig {
        steps,
        eval_every: 5,
        seed: 7,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| gpcnn::Error::io("tempdir", e))?;
    let path = dir.path().join("run.ckpt");

    let mut whole = GatedPixelCNN::new(cfg.clone(), 1)?;
    let (full, ..) = fit(&mut whole, &train, &test, CondSource::None, &tc(40), None)?;

    let mut first = GatedPixelCNN::new(cfg.clone(), 1)?;
    let (h1, opt, trainer) = fit(&mut first, &train, &test, CondSource::None, &tc(20), None)?;
    let saved = Checkpoint::capture(&first, &opt, &trainer);
    save_checkpoint(&saved, &path)?;
    let loaded = load_checkpoint(&path)?;
    let round_trip = loaded.to_bytes() == saved.to_bytes()
        && loaded
            .params
            .iter()
            .zip(first.params().iter())
            .all(|((_, _, a), (_, _, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let mut resumed = GatedPixelCNN::new(loaded.config.clone(), 99)?;
    loaded.restore_into(&mut resumed)?;
    let (h2, ..) = fit(&mut resumed, &train, &test, CondSource::None, &tc(40), Some((loaded.optimizer, loaded.trainer)))?;
    let joined: Vec<u64> = h1.losses.iter().chain(&h2.losses).map(|v| v.to_bits()).collect();
    let history_ok = joined == full.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        && h1.entries.iter().chain(&h2.entries).eq(full.entries.iter());
    let params_ok = resumed.params() == whole.params();

    let draw = |seed| sample(&whole, 4, &Conditioning::None, seed, SampleOptions::default());
    let (a, b, c) = (draw(5)?, draw(5)?, draw(6)?);
    let samples_ok = a.images == b.images && a.images != c.images;
    Ok(Outcome::new(
        round_trip && history_ok && params_ok && samples_ok,
        format!(
            "checkpoint round trip {round_trip}; resumed 20+20 equals 40 straight (losses {history_ok}, \
             parameters {params_ok}); same seed same samples {samples_ok}"
        ),
    ))
}

type Criterion = (u32, &'static str, fn() -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "causality", causality),
        (2, "blind spot", blind_spot),
        (3, "gradient audit", gradients),
        (4, "uniform likelihood", uniform),
        (5, "sequential equivalence", sequential),
        (6, "desk training", desk_training),
        (7, "gating ablation", gating_ablation),
        (8, "conditional generation", conditional),
        (9, "autoencoder", autoencoder),
        (10, "determinism", determinism),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = 0;
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = run().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let secs = t.elapsed().as_secs_f64();
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {status} {name}: {} [{secs:.1}s]", outcome.detail);
        if !outcome.pass {
            failed += 1;
            match outcome.known {
                Some(why) => println!("             known limit: {why}"),
                None => unexpected += 1,
            }
        }
    }
    println!("acceptance: {failed} failed ({unexpected} unexpected)");
    if unexpected > 0 {
        std::process::exit(1);
    }
}
