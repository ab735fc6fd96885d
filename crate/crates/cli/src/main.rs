//! `mimo-jscc` command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | command-line usage error |
//! | 3 | invalid configuration (bad value or unknown key) |
//! | 4 | file-system error, e.g. a missing config file |
//! | 5 | missing resource: checkpoint or required condition |
//! | 6 | checkpoint config-hash mismatch without `--force` |
//! | 7 | training diverged |
//! | 8 | gradient check failed |
//! | 9 | corrupt input: image file or checkpoint payload |
//! | 10 | internal error |

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};

use mimo_jscc::channel::{derive_seed, inject_estimation_error, sample_rayleigh, ChannelRng};
use mimo_jscc::checkpoint;
use mimo_jscc::config::RunConfig;
use mimo_jscc::data::encode_netpbm;
use mimo_jscc::eval::{
    compare_trends, monotonic_degradation, psnr, sweep, Condition, TrendOptions,
};
use mimo_jscc::net::{sample_noise, JsccNet, LinkBatch, ParameterStore, Variant};
use mimo_jscc::tensor::Graph;
use mimo_jscc::train::{train_stage, Stage, Trained};
use mimo_jscc::verify::gradient_suite;
use mimo_jscc::{Error, Precision, Scalar};

/// Overrides the output directory (below `--out`, above the config file).
const OUT_ENV: &str = "MIMO_JSCC_OUT";

mod exit {
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const MISSING: u8 = 5;
    pub const HASH: u8 = 6;
    pub const DIVERGED: u8 = 7;
    pub const GRADCHECK: u8 = 8;
    pub const CORRUPT: u8 = 9;
    pub const INTERNAL: u8 = 10;
}

#[derive(Parser)]
#[command(
    name = "mimo-jscc",
    version,
    about = "MIMO semantic image transmission under imperfect CSI"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured stages, skipping any whose checkpoint exists.
    Train(Common),
    /// Sweep every condition over the SNR / sigma_e grid and judge the trends.
    Eval(Common),
    /// Finite-difference check of every differentiable component.
    Gradcheck,
    /// Send one image through the link and print its PSNR.
    Demo(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint directory or manifest file (repeatable); defaults to <out>/checkpoints
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Output directory; overrides the MIMO_JSCC_OUT variable and the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config
    #[arg(long)]
    seed: Option<u64>,
    /// Accept checkpoints whose config hash differs
    #[arg(long)]
    force: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => exit::CONFIG,
            Error::Io { .. } => exit::IO,
            Error::Missing(_) => exit::MISSING,
            Error::ConfigHashMismatch { .. } => exit::HASH,
            Error::Divergence { .. } => exit::DIVERGED,
            Error::Ingest { .. } => exit::CORRUPT,
            _ => exit::INTERNAL,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    checkpoints: Vec<PathBuf>,
    force: bool,
}

impl Run {
    fn new(c: &Common) -> Result<Self, Failure> {
        let mut cfg = RunConfig::load(&c.config)?;
        if let Some(seed) = c.seed {
            cfg.seed = seed;
        }
        let out = c
            .out
            .clone()
            .or_else(|| {
                std::env::var_os(OUT_ENV)
                    .filter(|v| !v.is_empty())
                    .map(PathBuf::from)
            })
            .unwrap_or_else(|| cfg.output_dir.clone());
        let checkpoints = if c.checkpoint.is_empty() {
            vec![out.join("checkpoints")]
        } else {
            c.checkpoint.clone()
        };
        Ok(Self {
            cfg,
            out,
            checkpoints,
            force: c.force,
        })
    }

    /// Manifest path of `stage`: a listed manifest for that stage, else the
    /// stage file inside the first listed directory that has one.
    fn manifest(&self, stage: Stage) -> Option<PathBuf> {
        for p in &self.checkpoints {
            if p.is_dir() {
                let m = checkpoint::paths(p, stage).0;
                if m.is_file() {
                    return Some(m);
                }
            } else if checkpoint::read_manifest(p).is_ok_and(|m| m.stage == stage) {
                return Some(p.clone());
            }
        }
        None
    }

    fn load<T: Scalar>(&self, stage: Stage) -> Result<Option<ParameterStore<T>>, Failure> {
        let Some(path) = self.manifest(stage) else {
            return Ok(None);
        };
        let hash = self.cfg.training_hash();
        let (store, _) = checkpoint::load::<T>(&path, &self.cfg.model, Some(&hash), self.force)
            .map_err(|e| {
                let mut f = Failure::from(e);
                f.message = format!("{}: {}", path.display(), f.message);
                f
            })?;
        log::info!("loaded {stage} from {}", path.display());
        Ok(Some(store))
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn train<T: Scalar>(run: &Run) -> Outcome {
    let cfg = &run.cfg;
    let ckpt_dir = run
        .checkpoints
        .iter()
        .find(|p| !p.is_file())
        .cloned()
        .unwrap_or_else(|| run.out.join("checkpoints"));
    let log_dir = run.out.join("logs");
    create_dir(&ckpt_dir)?;
    create_dir(&log_dir)?;
    let cfg_path = run.out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;

    let data = cfg.train_data::<T>()?;
    let hash = cfg.training_hash();
    let mut done = Trained::<T>::new();
    for stage in Stage::ORDER {
        if let Some(store) = run.load::<T>(stage)? {
            done.insert(stage, store);
        }
    }
    for stage in Stage::ORDER {
        if !cfg.stages.contains(&stage) {
            continue;
        }
        if done.contains_key(&stage) {
            println!("{stage}: checkpoint present, skipped");
            continue;
        }
        let log_path = log_dir.join(format!("{}.jsonl", stage.tag().to_ascii_lowercase()));
        let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut writer = BufWriter::new(file);
        let every = (cfg.train.steps_for(stage) / 10).max(1);
        let outcome = train_stage(
            stage,
            &cfg.model,
            &cfg.train,
            &data,
            cfg.seed,
            &done,
            &mut |r| {
                writeln!(writer, "{}", r.to_line()).map_err(|e| Error::io(&log_path, e))?;
                if r.step % every == 0 {
                    log::info!(
                        "{} step {} loss {:.5} l1 {:.5} kl {:.5} lr {:.2e}",
                        r.stage,
                        r.step,
                        r.loss,
                        r.l1,
                        r.kl,
                        r.lr
                    );
                }
                Ok(())
            },
        )?;
        writer.flush().map_err(|e| Error::io(&log_path, e))?;
        let path = checkpoint::save(&ckpt_dir, stage, stage.variant(), &outcome.store, &hash)?;
        let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
        println!(
            "{stage}: {} steps, final loss {last:.5}, checkpoint {}",
            outcome.log.len(),
            path.display()
        );
        done.insert(stage, outcome.store);
    }
    Ok(())
}

fn eval<T: Scalar>(run: &Run) -> Outcome {
    let cfg = &run.cfg;
    let mut done = Trained::<T>::new();
    let mut missing = Vec::new();
    for c in Condition::ALL {
        let stage = c.stage();
        if done.contains_key(&stage) {
            continue;
        }
        match run.load::<T>(stage)? {
            Some(store) => {
                done.insert(stage, store);
            }
            None => missing.push(format!("{c} (needs {stage})")),
        }
    }
    if !missing.is_empty() {
        missing.dedup();
        return Err(Error::Missing(format!("no checkpoint for {}", missing.join(", "))).into());
    }
    let data = cfg.eval_data::<T>()?;
    let report = sweep(
        &cfg.model,
        &done,
        &Condition::ALL,
        &cfg.eval,
        &data,
        cfg.seed,
        &cfg.training_hash(),
    )?;
    report.write_all(&run.out, "report")?;
    let verdicts = compare_trends(&report, &TrendOptions::default())?;
    let mono = monotonic_degradation(&report, Condition::Direct)?;
    let mut text = format!("{verdicts}\n");
    text.push_str(&format!(
        "monotonic {}: DIRECT along sigma_e {:?}: {:?} dB, {} inversion(s), {} beyond one std\n",
        if mono.passes() { "pass" } else { "fail" },
        mono.sigma_e,
        mono.mean_db
            .iter()
            .map(|v| mimo_jscc::eval::round_sig6(*v))
            .collect::<Vec<_>>(),
        mono.inversions,
        mono.inversions_beyond_std
    ));
    print!("{text}");
    let path = run.out.join("trends.txt");
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    println!(
        "wrote {} rows to {}",
        report.rows.len(),
        run.out.join("report.csv").display()
    );
    Ok(())
}

fn demo<T: Scalar>(run: &Run) -> Outcome {
    let cfg = &run.cfg;
    let hana = cfg.model.clone().with_variant(Variant::Hana);
    let (net, store) = match run.load::<T>(Stage::Stage2)? {
        Some(store) => (JsccNet::new(&hana)?, store),
        None => {
            log::warn!("no STAGE2 checkpoint found; using untrained weights");
            let mut rng = ChannelRng::seed_from_u64(cfg.seed);
            JsccNet::init::<T>(&hana, &mut rng)?
        }
    };
    let data = cfg.eval_data::<T>()?;
    let mut rng = ChannelRng::seed_from_u64(derive_seed(&[cfg.seed, 0xde70]));
    let index = rng.random_range(0..data.len());
    let images = data.batch(&[index])?;
    let (snr, sigma_e_sq) = (
        cfg.eval.slice_snr_db,
        cfg.eval.sigma_axis.variance(cfg.eval.slice_sigma_e),
    );
    let h_p = sample_rayleigh(cfg.model.n_rx, cfg.model.n_tx, &mut rng);
    let real = inject_estimation_error(&h_p, sigma_e_sq, &mut rng)
        .map_err(Error::from)?
        .with_snr(snr);
    let noise = sample_noise(cfg.model.n_rx, cfg.model.d, real.sigma_n_sq, &mut rng);
    create_dir(&run.out)?;
    let input = run.out.join("demo_input.ppm");
    fs::write(&input, encode_netpbm(cfg.model.image, images.data())?)
        .map_err(|e| Error::io(&input, e))?;
    for (label, r) in [
        ("estimated CSI", real.clone()),
        ("perfect CSI", real.perfect()),
    ] {
        let link = LinkBatch::new(&[r], std::slice::from_ref(&noise))?;
        let mut g = Graph::new();
        let p = store.bind_constant(&mut g);
        let x = g.constant(images.clone());
        let out = net.forward(&mut g, &p, x, &link).map_err(Error::from)?;
        let db = psnr(images.data(), g.data(out.x_hat))?;
        println!("image {index}, SNR {snr} dB, sigma_e^2 {sigma_e_sq}, {label}: PSNR {db:.3} dB");
        if label == "estimated CSI" {
            let path = run.out.join("demo_output.ppm");
            fs::write(&path, encode_netpbm(cfg.model.image, g.data(out.x_hat))?)
                .map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn gradcheck() -> Outcome {
    let entries = gradient_suite()?;
    for e in &entries {
        println!("{e}");
    }
    let failed = entries.iter().filter(|e| !e.passes()).count();
    if failed > 0 {
        return Err(Failure {
            code: exit::GRADCHECK,
            message: format!(
                "{failed} of {} gradient checks exceeded tolerance",
                entries.len()
            ),
        });
    }
    println!("all {} gradient checks within tolerance", entries.len());
    Ok(())
}

fn dispatch(run: &Run, f32_fn: fn(&Run) -> Outcome, f64_fn: fn(&Run) -> Outcome) -> Outcome {
    match run.cfg.precision {
        Precision::F32 => f32_fn(run),
        Precision::F64 => f64_fn(run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Gradcheck => gradcheck(),
        Command::Train(c) | Command::Eval(c) | Command::Demo(c) => {
            Run::new(c).and_then(|run| match &cli.command {
                Command::Train(_) => dispatch(&run, train::<f32>, train::<f64>),
                Command::Eval(_) => dispatch(&run, eval::<f32>, eval::<f64>),
                _ => dispatch(&run, demo::<f32>, demo::<f64>),
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
