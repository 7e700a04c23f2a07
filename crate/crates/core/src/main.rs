use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use restp::features::{extract_features, l2_normalize, load_features, save_features, FeatureVector};
use restp::gradcheck::standard_suite;
use restp::harness::{evaluate, load_dataset, report_emit, synth_dataset, LoadOptions, SplitSpec, SvmClassifier};
use restp::network::{inspect, Checkpoint, Depth, Network, NetworkConfig, Pathways};
use restp::svm::{SvmModel, SvmParams};
use restp::trainer::{parse_key_values, train_with, TrainConfig};
use restp::{Error, Result};

#[derive(Parser)]
#[command(name = "restp", version, about = "Two-pathway residual network toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct NetArgs {
    #[arg(long)]
    depth: Option<Depth>,
    #[arg(long)]
    width: Option<f64>,
    /// both, 5_1 or 5_2
    #[arg(long)]
    pathways: Option<Pathways>,
    /// Square input side in pixels.
    #[arg(long)]
    input: Option<usize>,
}

impl NetArgs {
    fn config(&self, defaults: NetworkConfig) -> NetworkConfig {
        let mut c = defaults;
        if let Some(d) = self.depth {
            c.depth = d;
        }
        if let Some(w) = self.width {
            c.width_multiplier = w;
        }
        if let Some(p) = self.pathways {
            c.pathways = p;
        }
        if let Some(s) = self.input {
            c.input_size = (s, s);
        }
        c
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print group output sizes, dilations, receptive fields and parameter counts.
    Inspect {
        #[command(flatten)]
        net: NetArgs,
        #[arg(long, default_value_t = 45)]
        classes: usize,
    },
    /// Write a procedural texture dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a network on a manifest and save a checkpoint.
    Train {
        /// key = value file with network keys (depth, width, pathways, input) and training keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV; defaults to <out>.metrics.csv.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Initialize from a checkpoint (matching names and shapes only).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Write pooled representations of every manifest image.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// .csv or .rtpt
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        normalize: bool,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Train a linear SVM on one feature file and optionally label another.
    Classify {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// CSV of (index, predicted, label) for the test file.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Repeated stratified splits: features, SVM, accuracy and confusion reports.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Finite-difference check of every op and residual block in 64-bit.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        probes: usize,
        #[arg(long, default_value_t = 1e-3)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_network(path: &Path) -> Result<Network<f32>> {
    Network::from_checkpoint(&Checkpoint::load(path)?)
}

fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    metrics: Option<&Path>,
    init: Option<&Path>,
    seed: Option<u64>,
    net: &NetArgs,
) -> Result<()> {
    let mut map = match config {
        Some(p) => parse_key_values(&read_text(p)?)?,
        None => Default::default(),
    };
    let mut cfg = TrainConfig::default();
    cfg.apply(&mut map)?;
    let mut ncfg = NetworkConfig::new(Depth::D18, 2);
    for (k, v) in &map {
        let bad = || Error::Config(format!("invalid value '{v}' for {k}"));
        match k.as_str() {
            "depth" => ncfg.depth = v.parse()?,
            "width" => ncfg.width_multiplier = v.parse().map_err(|_| bad())?,
            "pathways" => ncfg.pathways = v.parse()?,
            "input" => {
                let s = v.parse().map_err(|_| bad())?;
                ncfg.input_size = (s, s);
            }
            _ => return Err(Error::Config(format!("unknown config key '{k}'"))),
        }
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mut ncfg = net.config(ncfg);
    let (manifest, dataset) = load_dataset(data, &LoadOptions::new(ncfg.input_size.0))?;
    ncfg.num_classes = manifest.class_index.len();
    let mut network = Network::build(ncfg, cfg.seed)?;
    if let Some(p) = init {
        let summary = network.load_checkpoint(&Checkpoint::load(p)?, false)?;
        log::info!("init: {} tensors loaded, {} skipped", summary.loaded.len(), summary.skipped.len());
    }
    println!("{}", network.config().describe());

    let metrics_path = metrics.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("metrics.csv"));
    let mut log = String::from("epoch,lr,loss,train_acc\n");
    let result = train_with(&mut network, &dataset, &cfg, |m| {
        println!("epoch {:>3}  lr {:.2e}  loss {:.4}  acc {:.3}", m.epoch, m.lr, m.loss, m.train_acc);
        log.push_str(&format!("{},{},{:.6},{:.4}\n", m.epoch, m.lr, m.loss, m.train_acc));
        let _ = fs::write(&metrics_path, &log);
    });
    // the network holds the last good parameters even after divergence
    let epochs = result.as_ref().map_or(0, |r| r.epochs.len());
    network.save_checkpoint(out, epochs)?;
    write_text(&metrics_path, &log)?;
    result.map(|_| ())
}

fn cmd_classify(train: &Path, test: Option<&Path>, model: Option<&Path>, predictions: Option<&Path>, c: f64, seed: u64) -> Result<()> {
    let train_set = load_features(train)?;
    let labels = train_set
        .iter()
        .enumerate()
        .map(|(i, f)| f.label.ok_or_else(|| Error::Domain(format!("training feature {i} has no label"))))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<&[f32]> = train_set.iter().map(|f| f.values.as_slice()).collect();
    let svm = SvmModel::train(&xs, &labels, &SvmParams { c, seed, ..SvmParams::default() })?;
    if let Some(p) = model {
        svm.save(p)?;
    }
    let Some(test) = test else {
        return Ok(());
    };
    let test_set = load_features(test)?;
    let ys: Vec<&[f32]> = test_set.iter().map(|f| f.values.as_slice()).collect();
    let predicted = svm.predict_batch(&ys)?;
    let mut csv = String::from("index,predicted,label\n");
    let (mut known, mut hits) = (0, 0);
    for (i, (f, p)) in test_set.iter().zip(&predicted).enumerate() {
        let label = f.label.map(|l| l.to_string()).unwrap_or_default();
        csv.push_str(&format!("{i},{p},{label}\n"));
        if let Some(l) = f.label {
            known += 1;
            hits += (l == *p) as usize;
        }
    }
    if let Some(p) = predictions {
        write_text(p, &csv)?;
    } else {
        print!("{csv}");
    }
    if known > 0 {
        println!("accuracy {:.2}% ({hits}/{known})", 100.0 * hits as f64 / known as f64);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Inspect { net, classes } => {
            let c = net.config(NetworkConfig::new(Depth::D18, classes).with_input(224));
            print!("{}", inspect(&c)?);
        }
        Command::Synth {
            out,
            classes,
            per_class,
            size,
            seed,
        } => {
            let m = synth_dataset(&out, classes, per_class, size, seed)?;
            println!("wrote {} images in {} classes to {}", m.records.len(), m.class_index.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            metrics,
            init,
            seed,
            net,
        } => cmd_train(config.as_deref(), &data, &out, metrics.as_deref(), init.as_deref(), seed, &net)?,
        Command::Extract {
            checkpoint,
            data,
            out,
            normalize,
            batch,
        } => {
            let mut net = load_network(&checkpoint)?;
            let (_, dataset) = load_dataset(&data, &LoadOptions::new(net.config().input_size.0))?;
            let mut features = extract_features(&mut net, &dataset, batch)?;
            if normalize {
                features = features
                    .into_iter()
                    .map(|f| FeatureVector {
                        values: l2_normalize(&f.values),
                        ..f
                    })
                    .collect();
            }
            save_features(&out, &features)?;
            println!("wrote {} vectors of length {}", features.len(), features.first().map_or(0, |f| f.len()));
        }
        Command::Classify {
            train,
            test,
            model,
            predictions,
            c,
            seed,
        } => cmd_classify(&train, test.as_deref(), model.as_deref(), predictions.as_deref(), c, seed)?,
        Command::Evaluate {
            checkpoint,
            data,
            out,
            ratio,
            repeats,
            seed,
            c,
            batch,
        } => {
            let mut net = load_network(&checkpoint)?;
            let (_, dataset) = load_dataset(&data, &LoadOptions::new(net.config().input_size.0))?;
            let spec = SplitSpec {
                ratio,
                repeats,
                base_seed: seed,
            };
            let classifier = SvmClassifier {
                params: SvmParams { c, seed, ..SvmParams::default() },
            };
            let report = evaluate(&mut net, &dataset, &spec, &classifier, batch)?;
            report_emit(&report, &out)?;
            for (r, a) in report.accuracies.iter().enumerate() {
                println!("repeat {r:>2}: {a:.2}");
            }
            println!("accuracy {}", report.summary());
        }
        Command::Gradcheck { probes, h, tol, seed } => {
            let reports = standard_suite(probes, h, seed);
            for r in &reports {
                println!("{:<40} {:.3e} {}", r.op, r.max_rel_error, if r.passes(tol) { "ok" } else { "FAIL" });
            }
            let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            if worst > tol {
                return Err(Error::Numeric(format!("max relative error {worst:.3e} exceeds {tol:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Io { .. } => 3,
                Error::Format(_) | Error::Load(_) => 4,
                Error::Dimension { .. } | Error::Domain(_) => 5,
                Error::Numeric(_) | Error::Diverged { .. } => 6,
            })
        }
    }
}
