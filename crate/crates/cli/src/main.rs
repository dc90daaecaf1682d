//! `bireal`: train, export, run and analyze 1-bit networks.

mod config;
mod manifest;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bireal_core::accounting::cost_report;
use bireal_core::binarize::lemma1_check;
use bireal_core::capacity::{capacity_network, capacity_per_entry, CapacityCount};
use bireal_core::data::{load_cifar10, load_mnist, Dataset, Normalization, RawSet};
use bireal_core::export::ExportedModel;
use bireal_core::format::Checkpoint;
use bireal_core::gradcheck::{gradcheck, toy_spec};
use bireal_core::layers::Activation;
use bireal_core::model::{ForwardConfig, Network};
use bireal_core::netspec::reference;
use bireal_core::surrogate::SurrogateKind;
use bireal_core::train::{evaluate, metrics_from_logits, run_phases, EpochRecord, MetricSink, PhaseState, TrainConfig};
use bireal_core::{Error, Result, Tensor};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{DatasetKind, RunConfig};
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "bireal", version, about = "1-bit CNNs with real-valued shortcuts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, for `export`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Worker threads; 1 forces the bit-exact single-threaded mode.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Binary,
    Relu,
    LeakyClip,
    Clip,
}

#[derive(Subcommand)]
enum Command {
    /// Real-valued initialization chain: ReLU, leaky clip, clip.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue an interrupted run from its checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Binarized training followed by batch-norm retraining.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from a pretrained checkpoint instead of a fresh initialization.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Test-split metrics of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        mode: EvalMode,
        /// Evaluate only the first `n` test samples.
        #[arg(long)]
        limit: Option<usize>,
        /// Write the logits as JSON lines.
        #[arg(long)]
        logits: Option<PathBuf>,
    },
    /// Fold scales into batch norm and write a packed model file.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Test-split metrics of an exported model, using the packed kernels.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        logits: Option<PathBuf>,
    },
    /// Memory and bit-operation report for a reference spec.
    Count {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 1)]
        width: usize,
        /// One JSON object per layer instead of a table.
        #[arg(long)]
        jsonl: bool,
    },
    /// Distinct values per activation entry.
    Capacity {
        #[command(flatten)]
        common: Common,
        /// `KHxKWxC`, e.g. `3x3x32`.
        #[arg(long, conflicts_with = "spec")]
        kernel: Option<String>,
        /// Per-block counts through a reference spec.
        #[arg(long)]
        spec: Option<String>,
    },
    /// Analytic vs finite-difference gradients on a smoothed toy network.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value = "approx_sign2")]
        surrogate: SurrogateKind,
    },
    /// Scale a conv ahead of batch norm by `alpha` and report the effect.
    Lemma1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: f64,
    },
    /// Print the fully resolved configuration.
    DumpConfig {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let path = self.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.data_dir {
            cfg.data.dir = d.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        cfg.validate()?;
        init_threads(cfg.threads)?;
        Ok(cfg)
    }

    fn out_dir(&self, default: &str) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

fn init_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

struct Data {
    train: Dataset,
    test: Dataset,
    norm: Normalization,
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let d = &cfg.data;
    let (tr, te): (RawSet, RawSet) = match d.kind {
        DatasetKind::Mnist => load_mnist(&d.dir)?,
        DatasetKind::Cifar10 => load_cifar10(&d.dir)?,
    };
    let limit = |set: RawSet, n: usize| if n > 0 { set.truncate(n) } else { set };
    let (tr, te) = (limit(tr, d.train_limit), limit(te, d.test_limit));
    let norm = Normalization::fit(&tr)?;
    Ok(Data { train: Dataset::new(&tr, &norm)?, test: Dataset::new(&te, &norm)?, norm })
}

/// Appends each epoch record to a line-delimited log and echoes it.
struct FileSink {
    file: fs::File,
}

impl MetricSink for FileSink {
    fn record(&mut self, rec: &EpochRecord) -> Result<()> {
        let line = rec.to_json_line();
        writeln!(self.file, "{line}")?;
        println!("{line}");
        Ok(())
    }
}

fn run_training(
    common: &Common,
    cfg: &RunConfig,
    tcfg: &TrainConfig,
    mut ck: Checkpoint,
    inputs: &[&Path],
    command: &str,
) -> Result<()> {
    let out = common.out_dir(&format!("runs/{command}"))?;
    let data = load_data(cfg)?;
    let log = out.join("metrics.jsonl");
    let resumed = ck.state != PhaseState::start();
    let file = fs::OpenOptions::new().create(true).append(resumed).write(true).truncate(!resumed).open(&log)?;
    let mut sink = FileSink { file };
    let ck_path = out.join("checkpoint.brnc");
    let seed = ck.seed;
    run_phases::<f32>(&mut ck.network, &mut ck.state, tcfg, &data.train, Some(&data.test), &mut sink, &mut |net, st| {
        Checkpoint { network: net.clone(), state: st.clone(), seed }.save(&ck_path)
    })?;
    let model = out.join("model.brnc");
    ck.save(&model)?;
    fs::write(out.join("normalization.json"), serde_json::to_string_pretty(&data.norm).expect("serializes"))?;
    let mut m = Manifest::new(command, cfg, &ck.network.spec);
    m.inputs(inputs.iter().copied().chain([common.config.as_deref().expect("validated")]))?;
    m.outputs([model.as_path(), log.as_path(), ck_path.as_path()])?;
    m.write(&out.join("manifest.json"))
}

fn fresh(cfg: &RunConfig) -> Result<Checkpoint> {
    Ok(Checkpoint { network: Network::init(&cfg.spec()?, cfg.seed)?, state: PhaseState::start(), seed: cfg.seed })
}

fn pretrain(common: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = common.run_config()?;
    let spec = cfg.spec()?;
    let ck = match resume {
        Some(p) => Checkpoint::load(p, Some(&spec))?,
        None => fresh(&cfg)?,
    };
    run_training(common, &cfg, &cfg.train_config(false)?, ck, &resume.into_iter().collect::<Vec<_>>(), "pretrain")
}

fn train(common: &Common, init: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let cfg = common.run_config()?;
    let spec = cfg.spec()?;
    let ck = match (init, resume) {
        (Some(p), _) => {
            let mut ck = Checkpoint::load(p, Some(&spec))?;
            ck.state = PhaseState::start();
            ck.seed = cfg.seed;
            ck
        }
        (None, Some(p)) => Checkpoint::load(p, Some(&spec))?,
        (None, None) => fresh(&cfg)?,
    };
    let tcfg = cfg.with_phases(cfg.main_phases()?);
    let inputs: Vec<&Path> = init.into_iter().chain(resume).collect();
    run_training(common, &cfg, &tcfg, ck, &inputs, "train")
}

fn write_logits(path: &Path, logits: &Tensor<f64>) -> Result<()> {
    let [n, k] = logits.dims2()?;
    let mut out = String::new();
    for i in 0..n {
        out.push_str(&serde_json::to_string(&logits.data()[i * k..(i + 1) * k]).expect("serializes"));
        out.push('\n');
    }
    Ok(fs::write(path, out)?)
}

/// Test samples to run, honoring `--limit`.
fn test_batch(data: &Data, limit: Option<usize>) -> Result<(Tensor<f64>, Vec<usize>)> {
    let n = limit.unwrap_or(data.test.len()).min(data.test.len());
    let idx: Vec<usize> = (0..n).collect();
    let (x, labels) = data.test.gather(&idx)?;
    Ok((x.cast(), labels))
}

fn logits_in_batches(
    x: &Tensor<f64>,
    batch: usize,
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<Tensor<f64>> {
    let n = x.shape()[0];
    let mut data = Vec::new();
    let mut classes = 0;
    for start in (0..n).step_by(batch.max(1)) {
        let y = f(&x.batch_slice(start, (start + batch).min(n))?)?;
        classes = y.shape()[1];
        data.extend_from_slice(y.data());
    }
    Tensor::new(vec![n, classes], data)
}

fn eval(common: &Common, checkpoint: &Path, mode: EvalMode, limit: Option<usize>, logits: Option<&Path>) -> Result<()> {
    let cfg = common.run_config()?;
    let ck = Checkpoint::load(checkpoint, Some(&cfg.spec()?))?;
    let data = load_data(&cfg)?;
    let net = &ck.network;
    let fcfg = match mode {
        EvalMode::Binary => ForwardConfig::binary(net),
        EvalMode::Relu => ForwardConfig::real(net, Activation::Relu),
        EvalMode::LeakyClip => ForwardConfig::real(net, Activation::leaky_clip()),
        EvalMode::Clip => ForwardConfig::real(net, Activation::Clip),
    };
    let metrics = match (limit, logits) {
        (None, None) => evaluate::<f64>(net, &fcfg, &data.test, cfg.data.eval_batch)?,
        _ => {
            let (x, labels) = test_batch(&data, limit)?;
            let y = logits_in_batches(&x, cfg.data.eval_batch, |b| net.predict(b, &fcfg))?;
            if let Some(p) = logits {
                write_logits(p, &y)?;
            }
            metrics_from_logits(&y, &labels)?
        }
    };
    println!("{}", serde_json::to_string(&metrics).expect("serializes"));
    Ok(())
}

fn export(common: &Common, checkpoint: &Path) -> Result<()> {
    let expected = common.config.as_ref().map(|_| common.run_config()).transpose()?;
    let spec = expected.as_ref().map(|c| c.spec()).transpose()?;
    let ck = Checkpoint::load(checkpoint, spec.as_ref())?;
    let model = ExportedModel::from_network(&ck.network)?;
    let out = common.out.clone().unwrap_or_else(|| checkpoint.with_extension("brnx"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    model.save(&out)?;
    let mut m = Manifest::for_spec("export", &ck.network.spec);
    m.inputs([checkpoint])?;
    m.outputs([out.as_path()])?;
    m.write(&manifest::sidecar(&out))?;
    println!("{}", out.display());
    Ok(())
}

fn infer(common: &Common, model: &Path, limit: Option<usize>, logits: Option<&Path>) -> Result<()> {
    let cfg = common.run_config()?;
    let m = ExportedModel::load(model, Some(&cfg.spec()?))?;
    let data = load_data(&cfg)?;
    let (x, labels) = test_batch(&data, limit)?;
    let y = logits_in_batches(&x, cfg.data.eval_batch, |b| m.forward(b))?;
    if let Some(p) = logits {
        write_logits(p, &y)?;
    }
    println!("{}", serde_json::to_string(&metrics_from_logits(&y, &labels)?).expect("serializes"));
    Ok(())
}

fn count(spec: &str, width: usize, jsonl: bool) -> Result<()> {
    let report = cost_report(&reference::by_name(spec)?.widened(width)?)?;
    if jsonl {
        print!("{}", report.to_jsonl());
    } else {
        println!("{report}");
    }
    Ok(())
}

fn parse_kernel(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad kernel `{s}`, expected KHxKWxC"))))
        .collect::<Result<_>>()?;
    match parts[..] {
        [kh, kw, c] if kh * kw * c > 0 => Ok((kh, kw, c)),
        _ => Err(Error::Config(format!("bad kernel `{s}`, expected KHxKWxC"))),
    }
}

fn capacity(kernel: Option<&str>, spec: Option<&str>) -> Result<()> {
    match (kernel, spec) {
        (Some(k), _) => {
            let (kh, kw, c) = parse_kernel(k)?;
            println!("{}", capacity_per_entry(kh, kw, c));
        }
        (None, Some(name)) => {
            let spec = reference::by_name(name)?;
            let sizes = spec.feature_sizes()?;
            for (i, (count, b)) in capacity_network(&spec, &CapacityCount::binary()).iter().zip(&spec.blocks).enumerate() {
                let (h, w) = sizes[i + 1];
                let entries = (b.out_channels * h * w) as u64;
                println!("block{i}\t{count}\tlog2/entry={:.3}\tlog2/map={:.1}", count.log2(), count.map_log2(entries));
            }
        }
        (None, None) => return Err(Error::Config("capacity needs --kernel or --spec".into())),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, resume } => pretrain(&common, resume.as_deref()),
        Command::Train { common, init, resume } => train(&common, init.as_deref(), resume.as_deref()),
        Command::Eval { common, checkpoint, mode, limit, logits } => {
            eval(&common, &checkpoint, mode, limit, logits.as_deref())
        }
        Command::Export { common, checkpoint } => export(&common, &checkpoint),
        Command::Infer { common, model, limit, logits } => infer(&common, &model, limit, logits.as_deref()),
        Command::Count { spec, width, jsonl, .. } => count(&spec, width, jsonl),
        Command::Capacity { kernel, spec, .. } => capacity(kernel.as_deref(), spec.as_deref()),
        Command::Gradcheck { common, samples, surrogate } => {
            let r = gradcheck(&toy_spec(), surrogate, samples, common.seed.unwrap_or(0))?;
            for e in &r.entries {
                println!("{}", serde_json::to_string(e).expect("serializes"));
            }
            println!("max_rel_error {:.3e}", r.max_rel_error);
            Ok(())
        }
        Command::Lemma1 { alpha, .. } => {
            let r = lemma1_check(alpha)?;
            println!("alpha {}", r.alpha);
            println!("forward_delta {:.3e}", r.forward_delta);
            println!("gradient_ratio {}", r.gradient_ratio);
            Ok(())
        }
        Command::DumpConfig { common } => {
            print!("{}", common.run_config()?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
