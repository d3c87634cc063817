use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use plugdef_core::checkpoint::Checkpoint;
use plugdef_core::defender::DefenderModel;
use plugdef_core::harness::{
    emit_results, evaluate_ca_aa, obtain_victim, prepare, run_experiment, transfer_eval, tune_arm, DefenseSpec,
    ExperimentSpec, Format, ResultRow, Store, TransferSpec,
};
use plugdef_core::trainer::CurveLog;
use plugdef_core::{Error, Real, Result};

#[derive(Parser, Debug)]
#[command(name = "plugdef", version, about = "Plug-in residual defenders for frozen classifiers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seeds with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Worker threads for attacks and evaluation; 0 keeps the default.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Artifact store root.
    #[arg(long, global = true, default_value = "store")]
    store: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Trains (or loads) the victim and reports its test accuracy.
    TrainVictim,
    /// Builds the adversarial cache of the test subset.
    GenAdv,
    /// Tunes one defender arm for one seed.
    Tune {
        /// Index into the config's defenses.
        #[arg(long, default_value_t = 0)]
        arm: usize,
        /// Writes an intermediate checkpoint every N epochs.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Evaluates a defender checkpoint, or the bare victim, on the cache.
    Eval {
        #[arg(long)]
        defender: Option<PathBuf>,
    },
    /// Evaluates a tuned defender zero-shot in another environment.
    Transfer {
        /// Overrides the config's source checkpoint.
        #[arg(long)]
        defender: Option<PathBuf>,
    },
    /// Runs every seed and arm of the config.
    Suite,
    /// Converts a curve log to CSV.
    Curves {
        /// A `.curves.jsonl` file.
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.global.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let res = match cli.global.precision {
        Precision::F32 => run::<f32>(&cli.global, &cli.cmd),
        Precision::F64 => run::<f64>(&cli.global, &cli.cmd),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn config(g: &Global) -> Result<&Path> {
    g.config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))
}

fn experiment(g: &Global) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::load(config(g)?)?;
    if let Some(s) = g.seed {
        spec.seeds = vec![s];
    }
    Ok(spec)
}

fn write_rows(rows: &[ResultRow], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => emit_results(rows, p, Format::from_path(p)),
        None => {
            print!("{}", plugdef_core::harness::results_to_string(rows, Format::Csv)?);
            Ok(())
        }
    }
}

/// Returns whether every requested cell completed.
fn run<T: Real>(g: &Global, cmd: &Command) -> Result<bool> {
    let store = Store::new(&g.store);
    match cmd {
        Command::TrainVictim => {
            let spec = experiment(g)?;
            let split = spec.dataset.load(&spec.base_dir)?;
            let victim = obtain_victim::<T>(&spec, &split, &store)?;
            let acc = plugdef_core::accuracy(&victim, &split.test.images.cast(), &split.test.labels, None, None)?;
            println!("{}\t{:.4}", store.victim_path::<T>(&spec).display(), acc);
            if let Some(out) = &g.out {
                victim.to_checkpoint().save(out)?;
            }
            Ok(true)
        }
        Command::GenAdv => {
            let spec = experiment(g)?;
            let prep = prepare::<T>(&spec, &store)?;
            let (ca, aa) = evaluate_ca_aa(&prep.victim, None, &prep.cache)?;
            println!("{}\tca {:.4}\taa {:.4}", prep.dir.join("corpus.adv").display(), ca, aa);
            if let Some(out) = &g.out {
                prep.corpus.save(out)?;
            }
            Ok(true)
        }
        Command::Tune { arm, checkpoint_every } => {
            let spec = experiment(g)?;
            let cfg = match spec.defenses.get(*arm) {
                Some(DefenseSpec::Defender(c)) => c.clone(),
                Some(other) => return Err(Error::Config(format!("arm {arm} is {}, not a defender", other.label()))),
                None => return Err(Error::Config(format!("no arm {arm}"))),
            };
            let prep = prepare::<T>(&spec, &store)?;
            let slug = spec.defenses[*arm].slug(*arm);
            let mut ok = true;
            for &seed in &spec.seeds {
                let dir = g.out.clone().unwrap_or_else(|| store.seed_dir(&spec, seed));
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let every = checkpoint_every.unwrap_or(0);
                let mut hook = |row: &plugdef_core::trainer::CurveRow, d: &DefenderModel<T>| {
                    log::info!("epoch {} loss {:.4} train aa {:.4}", row.epoch, row.loss, row.train_aa);
                    if every > 0 && row.epoch > 0 && row.epoch % every == 0 {
                        d.to_checkpoint().save(dir.join(format!("{slug}.epoch{:04}.ckpt", row.epoch)))?;
                    }
                    Ok(())
                };
                match tune_arm(&spec, &prep, &cfg, seed, &mut hook) {
                    Ok((d, curves)) => {
                        d.to_checkpoint().save(dir.join(format!("{slug}.ckpt")))?;
                        curves.save_jsonl(dir.join(format!("{slug}.curves.jsonl")))?;
                        let (ca, aa) = evaluate_ca_aa(&prep.victim, Some(&d), &prep.cache)?;
                        println!("seed {seed}\tca {:.4}\taa {:.4}", ca, aa);
                    }
                    Err(e) => {
                        log::error!("seed {seed}: {e}");
                        ok = false;
                    }
                }
            }
            Ok(ok)
        }
        Command::Eval { defender } => {
            let spec = experiment(g)?;
            let prep = prepare::<T>(&spec, &store)?;
            let d = match defender {
                Some(p) => Some(DefenderModel::<T>::from_checkpoint(&Checkpoint::load(p)?)?),
                None => None,
            };
            if let Some(d) = &d {
                plugdef_core::harness::check_geometry(d, &prep.victim)?;
            }
            let label = d.as_ref().map_or_else(|| "none".to_string(), |d| d.cfg.label());
            let (ca, aa) = evaluate_ca_aa(&prep.victim, d.as_ref().map(|d| d as _), &prep.cache)?;
            let seed = spec.seeds[0];
            let row = ResultRow::new(&prep.split.name, &spec.victim.label(), &label, &spec.attack.label(), seed, ca, aa, 0.0)?;
            write_rows(&[row], g.out.as_deref())?;
            Ok(true)
        }
        Command::Transfer { defender } => {
            let mut spec = TransferSpec::load(config(g)?)?;
            if let Some(s) = g.seed {
                spec.seed = s;
            }
            if let Some(p) = defender {
                spec.source = std::path::absolute(p).map_err(|e| Error::io(p, e))?;
            }
            let row = transfer_eval::<T>(&spec, &store)?;
            write_rows(&[row], g.out.as_deref())?;
            Ok(true)
        }
        Command::Suite => {
            let spec = experiment(g)?;
            let report = run_experiment::<T>(&spec, &store)?;
            log::info!("artifacts in {}", report.dir.display());
            if !report.rows.is_empty() {
                write_rows(&report.rows, g.out.as_deref())?;
            }
            for f in &report.failures {
                log::error!("seed {} {}: {}", f.seed, f.defender, f.error);
            }
            Ok(report.complete())
        }
        Command::Curves { input } => {
            let log = CurveLog::load_jsonl(input)?;
            match &g.out {
                Some(p) => {
                    let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
                    log.write_csv(std::io::BufWriter::new(f))?;
                }
                None => log.write_csv(std::io::stdout().lock())?,
            }
            Ok(true)
        }
    }
}
