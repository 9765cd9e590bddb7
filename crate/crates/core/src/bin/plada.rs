use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use plada_core::attention::PromptSelection;
use plada_core::data::{build_dataset, load_dataset, save_dataset, DatasetManifest, Protocol, QpRegime};
use plada_core::harness::{
    checkpoint, evaluate, export_features, gradcheck, run_ablation, test_samples, train, Axis, Components, TrainConfig,
};
use plada_core::harness::eval::{load_training_data, write_eval_csv};
use plada_core::image::Image;
use plada_core::{jpeg, Result};

#[derive(Parser)]
#[command(name = "plada", about = "Compression-robust fake image detection at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic training set with compressed twins.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.2)]
        paired: f64,
        #[arg(long, default_value = "fixed:50")]
        qp_regime: QpRegime,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a JSON config; writes metrics and per-epoch checkpoints to OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on images held out from the dataset in DATA.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory, or a run config naming the training data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "raw")]
        protocol: Protocol,
        #[arg(long, default_value_t = 1000)]
        n_test: usize,
        /// Training/inference prompt selection code such as R-FA.
        #[arg(long, default_value = "R-FA")]
        selection: PromptSelection,
        /// The run config; its backbone must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one run per value of a single axis and tabulate Acc/AP.
    Ablate {
        #[arg(long)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Base config; the desk default when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "aware:50,agnostic:30-100,raw")]
        protocols: Vec<Protocol>,
        #[arg(long, default_value_t = 1000)]
        n_test: usize,
    },
    /// Compare tape gradients with central finite differences for every op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump class-token features of a dataset, or of a held-out set with --protocol.
    ExportFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory, or a run config naming the training data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        protocol: Option<Protocol>,
        #[arg(long, default_value_t = 1000)]
        n_test: usize,
        #[arg(long, default_value = "features.csv")]
        out: PathBuf,
    },
    /// Write the desk-scale default config, optionally switched to one component set.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "full")]
        components: Components,
    },
    /// JPEG round trip of a binary PPM image.
    CompressImage {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        qp: u32,
    },
}

/// Manifest of the training data named by a dataset directory or a run config file.
fn training_manifest(data: &Path) -> Result<DatasetManifest> {
    if data.is_file() {
        let cfg = TrainConfig::load(data)?;
        if let Some(m) = cfg.manifest() {
            return Ok(m.clone());
        }
        return Ok(load_training_data(&cfg)?.0);
    }
    Ok(load_dataset(data)?.manifest)
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::GenData { out, n, paired, qp_regime, seed } => {
            let ds = build_dataset(&DatasetManifest::new(seed, n, paired, qp_regime))?;
            save_dataset(&out, &ds)?;
            println!("wrote {} samples ({} twin pairs) to {}", ds.len(), ds.manifest.n_pairs(), out.display());
        }
        Cmd::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let (_, samples) = load_training_data(&cfg)?;
            let res = train(&cfg, &samples, Some(&out))?;
            for e in &res.epochs {
                let cmp = e.cmp_acc.map_or("-".to_string(), |a| format!("{a:.4}"));
                println!("epoch {:>3}  loss {:.5}  acc {:.4}  cmp_acc {cmp}", e.epoch, e.mean_l_all, e.train_acc);
            }
        }
        Cmd::Eval { ckpt, data, protocol, n_test, selection, config, out, seed } => {
            let expected = config.as_deref().map(TrainConfig::load).transpose()?;
            let model = checkpoint::load(&ckpt, expected.as_ref().map(|c| &c.backbone))?;
            let manifest = training_manifest(&data)?;
            let test = test_samples(&manifest, n_test, protocol)?;
            let report = evaluate(&model, &test, &protocol.to_string(), selection.infer, seed)?;
            let path = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("eval.csv"));
            write_eval_csv(&path, &report)?;
            println!("{}  acc {:.4}  ap {:.4}  n {}", report.protocol, report.accuracy, report.ap, test.len());
        }
        Cmd::Ablate { axis, values, config, out, protocols, n_test } => {
            let base = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::desk(0),
            };
            for r in run_ablation(&base, axis, &values, &protocols, n_test, Some(&out))? {
                println!("{}={}  {}  acc {:.4}  ap {:.4}", r.axis, r.value, r.protocol, r.accuracy, r.ap);
            }
        }
        Cmd::Gradcheck { seed } => {
            let reports = gradcheck::full_suite(seed)?;
            for r in &reports {
                println!("{}", r.line());
            }
            return Ok(reports.iter().all(|r| r.passed()));
        }
        Cmd::ExportFeatures { ckpt, data, protocol, n_test, out } => {
            let model = checkpoint::load(&ckpt, None)?;
            let samples = match protocol {
                Some(p) => test_samples(&training_manifest(&data)?, n_test, p)?,
                None if data.is_file() => load_training_data(&TrainConfig::load(&data)?)?.1,
                None => load_dataset(&data)?.samples,
            };
            export_features(&model, &samples, &out)?;
            println!("wrote {} rows to {}", samples.len(), out.display());
        }
        Cmd::InitConfig { out, seed, components } => {
            let mut cfg = TrainConfig::desk(seed);
            components.apply(&mut cfg);
            std::fs::write(&out, cfg.to_json()?)?;
            println!("wrote {}", out.display());
        }
        Cmd::CompressImage { input, out, qp } => {
            let img = Image::load(&input)?;
            let (c, rec) = jpeg::compress_with_record(&img, qp)?;
            c.save(&out)?;
            println!(
                "qp {}  mse {:.3}  blockiness {:.4} -> {:.4}",
                rec.qp,
                jpeg::mse(&img, &c),
                jpeg::blockiness(&img)?,
                jpeg::blockiness(&c)?
            );
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
