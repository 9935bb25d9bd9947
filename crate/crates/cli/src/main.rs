use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dpfb::data::{load_csv, synth_generate, write_csv, Schema, SynthConfig};
use dpfb::gradcheck::run_suite;
use dpfb::metrics::evaluate;
use dpfb::oracle::{
    ensemble_mean, kalman_update, mahalanobis, mean_nis, pearson, planar_case, scalar_case,
    transport_linear_gaussian, TransportSettings,
};
use dpfb::training::{
    initialize, prepare, train, Checkpoint, EpochLog, PreparedData, RunConfig, TrainObserver, LOSS_LOG_HEADER,
};
use dpfb::flow::VelocityPotential;
use dpfb::generative::GenerativeModel;
use dpfb::{Error, Result};
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "dpfb", version, about = "Particle-flow soft sensors across operating regimes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic switching-process dataset (and its schema next to it).
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Train a model and potential on a CSV dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Score a checkpoint on a dataset; predictions go next to the report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Staged flow transport against closed-form posteriors.
    FlowDemo {
        #[arg(long, value_enum)]
        case: DemoCase,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoCase {
    Gaussian1d,
    Kalman2d,
}

/// Writes the loss log as epochs finish and saves periodic checkpoints.
struct RunFiles<'a> {
    config: &'a RunConfig,
    prepared: &'a PreparedData,
    log: File,
    log_path: &'a Path,
    out: &'a Path,
}

impl RunFiles<'_> {
    fn periodic_path(&self, epoch: usize) -> PathBuf {
        let stem = self.out.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        self.out.with_file_name(format!("{stem}.epoch{epoch}.json"))
    }
}

impl TrainObserver for RunFiles<'_> {
    fn epoch(&mut self, log: &EpochLog) -> Result<()> {
        writeln!(self.log, "{}", log.csv_row())
            .and_then(|_| self.log.flush())
            .map_err(|e| Error::io(self.log_path, e))?;
        println!(
            "epoch {:>4}  loss_theta {:>12.5}  loss_phi {:>12.5}  lr {:.3e}  {:.1}s",
            log.epoch, log.loss_theta, log.loss_phi, log.lr, log.seconds
        );
        Ok(())
    }

    fn checkpoint(&mut self, epoch: usize, model: &GenerativeModel, potential: &VelocityPotential) -> Result<()> {
        let ckpt = Checkpoint::new(self.config, epoch, model, potential).with_data(self.prepared);
        let path = if epoch == self.config.train.epochs {
            self.out.to_path_buf()
        } else {
            self.periodic_path(epoch)
        };
        ckpt.save(&path)
    }
}

fn run_synth(config: &Path, out: &Path, seed: u64) -> Result<()> {
    let mut cfg = SynthConfig::load(config)?;
    cfg.seed = seed;
    let data = synth_generate(&cfg)?;
    write_csv(out, &data)?;
    let schema_path = out.with_extension("schema");
    std::fs::write(&schema_path, cfg.schema().render()).map_err(|e| Error::io(&schema_path, e))?;
    println!(
        "wrote {} steps to {} (source fraction {:.3}), schema {}",
        data.len(),
        out.display(),
        data.domain.source_fraction(),
        schema_path.display()
    );
    Ok(())
}

fn run_train(data: &Path, schema: &Path, config: &Path, out: &Path, log: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let schema = Schema::load(schema)?;
    let raw = load_csv(data, &schema)?;
    let prepared = prepare(&cfg, &raw)?;
    println!(
        "{} steps, {} windows of {}, source fraction {:.3}",
        raw.len(),
        prepared.windows.len(),
        cfg.train.window_length,
        prepared.source_fraction
    );
    let (mut model, mut potential) = initialize(&cfg)?;
    let mut file = File::create(log).map_err(|e| Error::io(log, e))?;
    writeln!(file, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(log, e))?;
    let mut files = RunFiles {
        config: &cfg,
        prepared: &prepared,
        log: file,
        log_path: log,
        out,
    };
    train(
        &cfg.train,
        &cfg.flow,
        std::slice::from_ref(&prepared.windows),
        &mut model,
        &mut potential,
        &mut files,
    )?;
    println!("checkpoint {}", out.display());
    Ok(())
}

fn run_eval(ckpt_path: &Path, data: &Path, schema: &Path, report: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let schema = Schema::load(schema)?;
    let raw = load_csv(data, &schema)?;
    let eval = evaluate(&ckpt, &ckpt_path.display().to_string(), &raw, &schema.label_groups())?;
    eval.report.save(report)?;
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let predictions = report.with_file_name(format!("{stem}.predictions.csv"));
    eval.predictions.write_csv(&predictions)?;
    print!("{}", eval.report.text());
    println!("report {}, predictions {}", report.display(), predictions.display());
    Ok(())
}

fn run_gradcheck(seed: u64) -> Result<()> {
    let results = run_suite(seed)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Error::NonFinite(format!("{failed} gradient checks exceeded their tolerance")));
    }
    Ok(())
}

fn run_flow_demo(case: DemoCase) -> Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let start = std::time::Instant::now();
    match case {
        DemoCase::Gaussian1d => {
            let case = scalar_case();
            let (prior, h, r, y) = case.as_linear();
            let (samples, out) =
                transport_linear_gaussian(&prior, &h, &r, &y, &TransportSettings::scalar(), &mut rng)?;
            let exact = case.velocity(0.0, 4001)?;
            let (lo, hi) = (-1.6449, 1.6449);
            let (mut learned, mut quadrature) = (Vec::new(), Vec::new());
            for (i, &z) in samples.data().iter().enumerate() {
                if (lo..=hi).contains(&z) {
                    learned.push(out.first_gradient.data()[i]);
                    quadrature.push(exact.velocity_at(z));
                }
            }
            let (post_mean, post_var) = case.posterior();
            let mean = out.particles.mean();
            println!("gradient vs quadrature velocity, Pearson: {:.4}", pearson(&learned, &quadrature));
            println!(
                "transported mean {mean:.4}, posterior mean {post_mean:.4}, error {:.4} ({:.3} sd)",
                (mean - post_mean).abs(),
                (mean - post_mean).abs() / post_var.sqrt()
            );
        }
        DemoCase::Kalman2d => {
            let (prior, h, r, y) = planar_case();
            let post = kalman_update(&prior, &h, &r, &y)?;
            let (samples, out) =
                transport_linear_gaussian(&prior, &h, &r, &y, &TransportSettings::planar(), &mut rng)?;
            let mean = ensemble_mean(&out.particles);
            println!("transported mean {mean:.4?}, Kalman mean {:.4?}", post.mean.as_slice());
            println!("distance {:.4} posterior sd (Mahalanobis)", mahalanobis(&mean, &post)?);
            println!(
                "mean NIS {:.4} -> {:.4}",
                mean_nis(&h, &r, &y, &samples)?,
                mean_nis(&h, &r, &y, &out.particles)?
            );
        }
    }
    println!("{:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Synth { config, out, seed } => run_synth(&config, &out, seed),
        Command::Train {
            data,
            schema,
            config,
            out,
            log,
        } => run_train(&data, &schema, &config, &out, &log),
        Command::Eval {
            ckpt,
            data,
            schema,
            report,
        } => run_eval(&ckpt, &data, &schema, &report),
        Command::Gradcheck { seed } => run_gradcheck(seed),
        Command::FlowDemo { case } => run_flow_demo(case),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
