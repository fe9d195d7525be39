use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gpcnn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use gpcnn::config::parse_kv;
use gpcnn::data::{
    load_cifar_binary, load_mnist, make_synthetic, one_hot, read_embeddings, read_png, write_png_grid, CondSource, Dataset,
    QuantizationSpec, Split, SyntheticKind,
};
use gpcnn::diagnostics::{
    blind_spot_oracle, causality_check, gradient_audit, missing_fraction, receptive_field_map, AuditLoss, AuditOptions, Method,
};
use gpcnn::model::{parse_architecture, Autoregressive, CondMode, GatedPixelCNN, ModelConfig, PixelCNNAutoencoder};
use gpcnn::sampler::{sample, sample_interpolation, SampleOptions};
use gpcnn::train::{evaluate, fit, TrainConfig};
use gpcnn::{Activation, Architecture, Conditioning, Error, Result, Tensor};

const CONFIG_HELP: &str = "\
Config file (--config): key=value per line, '#' comments. Command-line flags override it.
  model:    layers features filter levels height width channels head_width
            activation={gated,relu,identity} architecture={two_stack,single_stack}
            residual={conv,identity} conditioning={none,global,spatial}
            cond_dim cond_channels bottleneck (0 = none)
  training: optimizer={adam,sgd_momentum} learning_rate batch_size steps seed
            eval_every eval_limit checkpoint_every clip_norm momentum beta1 beta2 epsilon
            (0 disables eval_limit, checkpoint_every and clip_norm)";

#[derive(Parser)]
#[command(name = "gpcnn", version, about = "Gated PixelCNN image models", after_help = CONFIG_HELP)]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice (default: config file, else 0)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Draw samples from a checkpoint into a PNG grid
    Sample(SampleArgs),
    /// Report held-out bits/dim of a checkpoint
    Eval(EvalArgs),
    /// Architecture checks
    Diagnose(DiagnoseArgs),
    /// Train a PixelCNN autoencoder
    Autoencode(AutoencodeArgs),
    /// Sample along a line between two images' latent codes
    Interpolate(InterpolateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Mnist,
    /// MNIST-format digit fixture (data/digits)
    Digits,
    Stripes,
    Brightness,
    Cifar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Conditional {
    None,
    Class,
    Embedding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Init {
    Random,
    /// All parameters zero: uniform predictions
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "digits")]
    dataset: DatasetKind,
    /// Directory with the dataset files
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Embedding file, one vector per image (training images first, then held-out)
    #[arg(long)]
    embedding_file: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model preset (mnist-small, imagenet-paper)
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    /// Quantization levels
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long, value_enum, default_value = "none")]
    conditional: Conditional,
    #[arg(long, value_enum, default_value = "random")]
    init: Init,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Class to condition on
    #[arg(long, conflicts_with = "embedding_file")]
    class: Option<usize>,
    /// Conditioning vectors, one per line (cycled over the samples)
    #[arg(long)]
    embedding_file: Option<PathBuf>,
    /// Tiles per row of the output grid
    #[arg(long, default_value_t = 4)]
    grid: usize,
    /// Softmax temperature (0 picks the most likely level)
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Evaluate at most this many images
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, value_enum, default_value = "none")]
    conditional: Conditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Check {
    Causality,
    ReceptiveField,
    Blindspot,
    Gradients,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Perturbation,
    Gradient,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(value_enum)]
    check: Check,
    /// Image size, e.g. 8x8
    #[arg(long, value_parser = parse_dims)]
    dims: Option<(usize, usize)>,
    #[arg(long, value_parser = parse_architecture_arg)]
    arch: Option<Architecture>,
    /// Gated layers after the input projection
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    filter: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    preset: Option<String>,
    /// Random weight draws for the causality check
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0.0)]
    tolerance: f64,
    /// Target pixel "y,x" (default: centre)
    #[arg(long, value_parser = parse_pair)]
    target: Option<(usize, usize)>,
    #[arg(long, value_enum, default_value = "perturbation")]
    method: MethodArg,
    /// Gradient audit of the model with activations removed
    #[arg(long)]
    linear: bool,
}

#[derive(Args)]
struct AutoencodeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    levels: Option<usize>,
    /// Latent size
    #[arg(long, default_value_t = 10)]
    bottleneck: usize,
}

#[derive(Args)]
struct InterpolateArgs {
    /// Autoencoder checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// First endpoint image (PNG)
    #[arg(long)]
    a: PathBuf,
    /// Second endpoint image (PNG)
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    Ok((h.trim().parse().map_err(|e| format!("{e}"))?, w.trim().parse().map_err(|e| format!("{e}"))?))
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected y,x, got {s:?}"))?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?))
}

fn parse_architecture_arg(s: &str) -> std::result::Result<Architecture, String> {
    parse_architecture(s).map_err(|e| e.to_string())
}

/// Settings from `--config` plus the command-line seed.
struct Settings {
    file: BTreeMap<String, String>,
    seed: Option<u64>,
    out: PathBuf,
}

impl Settings {
    fn load(cli: &Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(path) => parse_kv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
            None => BTreeMap::new(),
        };
        if let Some(k) = file
            .keys()
            .find(|k| !ModelConfig::KEYS.contains(&k.as_str()) && !TrainConfig::KEYS.contains(&k.as_str()))
        {
            return Err(Error::Invalid(format!("unknown config key {k:?}")));
        }
        Ok(Self {
            file,
            seed: cli.seed,
            out: cli.out.clone(),
        })
    }

    fn model(&self, preset: Option<&str>) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(preset.unwrap_or("mnist-small"))?;
        cfg.apply(&self.file, false)?;
        Ok(cfg)
    }

    fn train(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.apply(&self.file, false)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn seed(&self) -> u64 {
        self.seed
            .or_else(|| self.file.get("seed").and_then(|s| s.parse().ok()))
            .unwrap_or(0)
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(self.out.join(name))
    }
}

/// Training and held-out splits at the model's size and level count.
fn load_data(args: &DataArgs, cfg: &ModelConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let spec = QuantizationSpec::new(cfg.levels)?;
    let dir = |default: &str| args.data_dir.clone().unwrap_or_else(|| PathBuf::from(default));
    let (train, test) = match args.dataset {
        DatasetKind::Mnist | DatasetKind::Digits => {
            let d = dir(if args.dataset == DatasetKind::Mnist { "data/mnist" } else { "data/digits" });
            (load_mnist(&d, Split::Train, spec)?, load_mnist(&d, Split::Test, spec)?)
        }
        DatasetKind::Stripes | DatasetKind::Brightness => {
            let kind = if args.dataset == DatasetKind::Stripes {
                SyntheticKind::StripesHv
            } else {
                SyntheticKind::Brightness2Class
            };
            let all = make_synthetic(kind, 2400, (cfg.height, cfg.width), cfg.levels, seed)?;
            all.split(2000)
        }
        DatasetKind::Cifar => {
            let d = dir("data/cifar-10-batches-bin");
            let mut parts = Vec::new();
            for i in 1..=5 {
                let p = d.join(format!("data_batch_{i}.bin"));
                if p.exists() {
                    parts.push(load_cifar_binary(&p, spec)?);
                }
            }
            if parts.is_empty() {
                return Err(Error::Invalid(format!("no data_batch_*.bin in {}", d.display())));
            }
            let images = Tensor::stack(&parts.iter().map(|p| p.images.clone()).collect::<Vec<_>>())?;
            let labels = parts.iter().flat_map(|p| p.labels.clone().unwrap_or_default()).collect();
            let train = Dataset::new(images, Some(labels), cfg.levels, 10)?;
            (train, load_cifar_binary(&d.join("test_batch.bin"), spec)?)
        }
    };
    match &args.embedding_file {
        Some(path) => {
            let e = read_embeddings(path)?;
            let (n, m) = (train.len(), test.len());
            if e.shape()[0] != n + m {
                return Err(Error::Conditioning(format!(
                    "{} embeddings for {n} training and {m} held-out images",
                    e.shape()[0]
                )));
            }
            let all: Vec<usize> = (0..n + m).collect();
            let (a, b) = all.split_at(n);
            Ok((train.with_embeddings(e.select(a))?, test.with_embeddings(e.select(b))?))
        }
        None => Ok((train, test)),
    }
}

/// Adopts the dataset's image shape.
fn fit_to_data(cfg: &mut ModelConfig, data: &Dataset) {
    let (c, h, w) = data.image_dims();
    cfg.channels = c;
    cfg.height = h;
    cfg.width = w;
}

fn cond_source(c: Conditional) -> CondSource {
    match c {
        Conditional::None => CondSource::None,
        Conditional::Class => CondSource::Class,
        Conditional::Embedding => CondSource::Embedding,
    }
}

enum AnyModel {
    Plain(GatedPixelCNN),
    Autoencoder(PixelCNNAutoencoder),
}

impl AnyModel {
    fn from_checkpoint(path: &Path) -> Result<(Self, Checkpoint)> {
        let ck = load_checkpoint(path)?;
        let mut model = if ck.config.bottleneck.is_some() {
            AnyModel::Autoencoder(PixelCNNAutoencoder::new(ck.config.clone(), 0)?)
        } else {
            AnyModel::Plain(GatedPixelCNN::new(ck.config.clone(), 0)?)
        };
        match &mut model {
            AnyModel::Plain(m) => ck.restore_into(m)?,
            AnyModel::Autoencoder(m) => ck.restore_into(m)?,
        }
        Ok((model, ck))
    }
}

fn print_history(history: &gpcnn::train::History) {
    for e in &history.entries {
        println!("step {:>6}  train {:.4}  eval {:.4}", e.step, e.train_bits, e.eval_bits);
    }
}

fn write_history(path: &Path, history: &gpcnn::train::History) -> Result<()> {
    let mut s = String::from("step,train_bits,eval_bits\n");
    for e in &history.entries {
        s.push_str(&format!("{},{},{}\n", e.step, e.train_bits, e.eval_bits));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn train(set: &Settings, args: &TrainArgs) -> Result<()> {
    let mut cfg = set.model(args.preset.as_deref())?;
    if let Some(l) = args.levels {
        cfg.levels = l;
    }
    let mut tc = set.train()?;
    if let Some(s) = args.steps {
        tc.steps = s;
    }
    if let Some(b) = args.batch_size {
        tc.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        tc.learning_rate = lr;
    }
    let (train, test) = load_data(&args.data, &cfg, tc.seed)?;
    fit_to_data(&mut cfg, &train);
    let source = cond_source(args.conditional);
    cfg.conditioning = match source {
        CondSource::None => CondMode::None,
        CondSource::Class => CondMode::Global { dim: train.classes },
        CondSource::Embedding => CondMode::Global {
            dim: train
                .embeddings
                .as_ref()
                .ok_or_else(|| Error::Conditioning("--conditional embedding needs --embedding-file".into()))?
                .shape()[1],
        },
    };
    let mut model = GatedPixelCNN::new(cfg, tc.seed)?;
    if args.init == Init::Zeros {
        model.params_mut().zero();
    }
    let path = set.out_file("checkpoint.ckpt")?;
    tc.checkpoint_path = Some(path.clone());
    println!("parameters: {}", model.params().count());
    let (history, opt, trainer) = fit(&mut model, &train, &test, source, &tc, None)?;
    print_history(&history);
    save_checkpoint(&Checkpoint::capture(&model, &opt, &trainer), &path)?;
    write_history(&set.out_file("history.csv")?, &history)?;
    fs::write(set.out_file("model.cfg")?, model.config().to_kv()).map_err(|e| Error::io(&set.out, e))?;
    let bits = evaluate(&model, &test, source, tc.batch_size.max(32), tc.eval_limit)?;
    println!("bits_per_dim: {bits:.4}");
    println!("checkpoint: {}", path.display());
    Ok(())
}

fn eval(set: &Settings, args: &EvalArgs) -> Result<()> {
    let (model, ck) = AnyModel::from_checkpoint(&args.checkpoint)?;
    let (train, test) = load_data(&args.data, &ck.config, set.seed())?;
    let data = match args.split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    };
    if data.image_dims() != (ck.config.channels, ck.config.height, ck.config.width) {
        return Err(Error::Invalid("dataset image size differs from the checkpoint's model".into()));
    }
    let source = cond_source(args.conditional);
    let bits = match &model {
        AnyModel::Plain(m) => evaluate(m, &data, source, 64, args.limit)?,
        AnyModel::Autoencoder(m) => evaluate(m, &data, CondSource::None, 64, args.limit)?,
    };
    println!("bits_per_dim: {bits:.4}");
    Ok(())
}

fn sample_cmd(set: &Settings, args: &SampleArgs) -> Result<()> {
    let (model, ck) = AnyModel::from_checkpoint(&args.checkpoint)?;
    let cfg = &ck.config;
    let dim = cfg.conditioning.dim();
    let cond = match (&args.class, &args.embedding_file) {
        (Some(c), _) => {
            if *c >= dim {
                return Err(Error::Conditioning(format!("class {c} for a model with {dim} classes")));
            }
            Conditioning::Global(one_hot(&vec![*c; args.count], dim)?)
        }
        (None, Some(path)) => {
            let e = read_embeddings(path)?;
            let rows: Vec<usize> = (0..args.count).map(|i| i % e.shape()[0]).collect();
            Conditioning::Global(e.select(&rows))
        }
        (None, None) if dim == 0 => Conditioning::None,
        (None, None) => return Err(Error::Conditioning("conditional model: pass --class or --embedding-file".into())),
    };
    let opts = SampleOptions {
        temperature: args.temperature,
        ..SampleOptions::default()
    };
    let seed = set.seed();
    let samples = match &model {
        AnyModel::Plain(m) => sample(m, args.count, &cond, seed, opts)?,
        AnyModel::Autoencoder(m) => sample(m, args.count, &cond, seed, opts)?,
    };
    let path = set.out_file("samples.png")?;
    let (w, h) = write_png_grid(&samples.images, cfg.levels, args.grid, &path)?;
    println!("wrote {} ({w}x{h})", path.display());
    Ok(())
}

fn diagnose(set: &Settings, args: &DiagnoseArgs) -> Result<()> {
    let mut cfg = set.model(args.preset.as_deref())?;
    if let Some((h, w)) = args.dims {
        cfg.height = h;
        cfg.width = w;
    }
    if let Some(a) = args.arch {
        cfg.architecture = a;
    }
    if let Some(d) = args.depth {
        cfg.layers = d;
    }
    if let Some(f) = args.filter {
        cfg.filter = f;
    }
    if let Some(c) = args.channels {
        cfg.channels = c;
    }
    if let Some(l) = args.levels {
        cfg.levels = l;
    }
    if args.linear {
        cfg.activation = Activation::Identity;
    }
    cfg.validate()?;
    let seed = set.seed();
    let (h, w) = (cfg.height, cfg.width);
    let target = args.target.unwrap_or(((h - 1) / 2, (w - 1) / 2));
    if target.0 >= h || target.1 >= w {
        return Err(Error::Invalid(format!("target {target:?} outside {h}x{w}")));
    }
    match args.check {
        Check::Causality => {
            let v = causality_check(&cfg, args.trials, args.tolerance, seed)?;
            for x in v.iter().take(10) {
                println!(
                    "trial {} target {:?} moved by input {:?} (|delta| {:.3e})",
                    x.trial, x.target, x.input, x.delta
                );
            }
            println!("violations: {}", v.len());
        }
        Check::ReceptiveField => {
            let model = GatedPixelCNN::new(cfg.clone(), seed)?;
            let method = match args.method {
                MethodArg::Perturbation => Method::Perturbation,
                MethodArg::Gradient => Method::Gradient,
            };
            let map = receptive_field_map(&model, (target.0, target.1, 0), method, 3, seed)?;
            print!("{}", map.render());
            println!("influencing: {}", map.count());
            println!("missing_fraction: {:.4}", map.missing_fraction());
        }
        Check::Blindspot => {
            let oracle = blind_spot_oracle(cfg.architecture, cfg.layers, cfg.filter, (h, w), target);
            let single = ModelConfig { channels: 1, ..cfg.clone() };
            let model = GatedPixelCNN::new(single, seed)?;
            let map = receptive_field_map(&model, (target.0, target.1, 0), Method::Perturbation, 3, seed)?;
            print!("{}", map.render());
            println!("missing_fraction: {:.4}", missing_fraction(&oracle, w, target));
            println!("matches_oracle: {}", map.influence == oracle);
        }
        Check::Gradients => {
            let model = GatedPixelCNN::new(cfg, seed)?;
            let report = gradient_audit(
                &model,
                AuditOptions {
                    loss: AuditLoss::Projection,
                    seed,
                    ..AuditOptions::default()
                },
            )?;
            if let Some((name, k, a, n)) = &report.worst {
                println!("worst: {name}[{k}] analytic {a:.10e} numeric {n:.10e}");
            }
            println!("checked: {} (skipped {} at ReLU kinks)", report.checked, report.skipped);
            println!("max_relative_error: {:.3e}", report.max_relative_error);
        }
    }
    Ok(())
}

fn autoencode(set: &Settings, args: &AutoencodeArgs) -> Result<()> {
    let mut cfg = set.model(args.preset.as_deref())?;
    if let Some(l) = args.levels {
        cfg.levels = l;
    }
    cfg.bottleneck = Some(args.bottleneck);
    let mut tc = set.train()?;
    if let Some(s) = args.steps {
        tc.steps = s;
    }
    let (train, test) = load_data(&args.data, &cfg, tc.seed)?;
    fit_to_data(&mut cfg, &train);
    let mut model = PixelCNNAutoencoder::new(cfg, tc.seed)?;
    let path = set.out_file("autoencoder.ckpt")?;
    tc.checkpoint_path = Some(path.clone());
    println!("parameters: {}", model.params().count());
    let (history, opt, trainer) = fit(&mut model, &train, &test, CondSource::None, &tc, None)?;
    print_history(&history);
    save_checkpoint(&Checkpoint::capture(&model, &opt, &trainer), &path)?;
    write_history(&set.out_file("history.csv")?, &history)?;
    let bits = evaluate(&model, &test, CondSource::None, tc.batch_size.max(32), tc.eval_limit)?;
    println!("bits_per_dim: {bits:.4}");
    println!("checkpoint: {}", path.display());
    Ok(())
}

/// Reads a PNG with the model's image size as quantized levels `[1, C, H, W]`.
fn read_image(path: &Path, cfg: &ModelConfig) -> Result<Tensor> {
    let (w, h, c, bytes) = read_png(path)?;
    if (w, h) != (cfg.width, cfg.height) || !(c == cfg.channels || (c >= 3 && cfg.channels == 1)) {
        return Err(Error::Invalid(format!(
            "{}: {w}x{h} with {c} channels, model expects {}x{} with {}",
            path.display(),
            cfg.width,
            cfg.height,
            cfg.channels
        )));
    }
    let spec = QuantizationSpec::new(cfg.levels)?;
    Ok(Tensor::from_fn(&[1, cfg.channels, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        spec.quantize(bytes[p * c + ch]) as f64
    }))
}

fn interpolate(set: &Settings, args: &InterpolateArgs) -> Result<()> {
    let (model, ck) = AnyModel::from_checkpoint(&args.checkpoint)?;
    let AnyModel::Autoencoder(model) = model else {
        return Err(Error::Invalid("interpolate needs an autoencoder checkpoint".into()));
    };
    let cfg = &ck.config;
    let pair = Tensor::stack(&[read_image(&args.a, cfg)?, read_image(&args.b, cfg)?])?;
    let h = model.encode(&pair)?;
    let m = h.shape()[1];
    let opts = SampleOptions {
        temperature: args.temperature,
        ..SampleOptions::default()
    };
    let (samples, _) = sample_interpolation(&model, &h.data()[..m], &h.data()[m..], args.steps, set.seed(), opts)?;
    let path = set.out_file("interpolation.png")?;
    let (w, hgt) = write_png_grid(&samples.images, cfg.levels, args.steps, &path)?;
    println!("wrote {} ({w}x{hgt})", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let set = Settings::load(cli)?;
    match &cli.command {
        Command::Train(a) => train(&set, a),
        Command::Sample(a) => sample_cmd(&set, a),
        Command::Eval(a) => eval(&set, a),
        Command::Diagnose(a) => diagnose(&set, a),
        Command::Autoencode(a) => autoencode(&set, a),
        Command::Interpolate(a) => interpolate(&set, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
