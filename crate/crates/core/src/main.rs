use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use consvqa::harness::{
    report, run_all, run_evaluation, run_training, GradcheckOptions, Method, RunConfig,
};
use consvqa::model::ModelConfig;
use consvqa::synth::{generate_dataset, DatasetConfig, QType, Split};
use consvqa::{Error, Execution, Result};

#[derive(Parser)]
#[command(name = "consvqa", version, about = "Consistency-regularized VQA on synthetic retinal scenes")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Training scenes; validation and test default to a quarter and a third of this.
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        image_size: u32,
        #[arg(long)]
        val_scenes: Option<usize>,
        #[arg(long)]
        test_scenes: Option<usize>,
    },
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare finished runs.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Add the lambda/gamma grid.
        #[arg(long)]
        sweep: bool,
        /// Inconsistent scenes listed per run.
        #[arg(long, default_value_t = 10)]
        listing: usize,
    },
    /// Finite-difference checks of autodiff operations, losses and a micro model.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Flip the sign of the hinge gradient to confirm the check catches it.
        #[arg(long, hide = true)]
        inject_hinge_fault: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    seed: Option<u64>,
    /// Key-value run configuration; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Key-value model configuration.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    squint_lambda: Option<f64>,
    #[arg(long)]
    pair_quota: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    stop_grad_main: bool,
}

fn read(path: &PathBuf) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })
}

fn run_config(args: &TrainArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => read(p)?,
        None => String::new(),
    };
    let file = consvqa::model::parse_kv(&text)?;
    let mut cfg = RunConfig::from_kv(&text)?;
    cfg.data_dir = args.data.clone();
    cfg.output_dir = args.out.clone();
    if let Some(m) = args.method {
        cfg.method = m;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    macro_rules! apply {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { cfg.$field = v; })*
        };
    }
    apply!(lambda => lambda, gamma => gamma, squint_lambda => squint_lambda,
        batch_size => batch_size, lr => learning_rate, max_epochs => max_epochs,
        patience => patience, pair_quota => pair_quota);
    if args.stop_grad_main {
        cfg.stop_grad_main = true;
    }
    if args.pair_quota.is_none() && !file.contains_key("pair_quota") {
        cfg.pair_quota = cfg.batch_size / 4;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    match cli.command {
        Command::Generate { out, scenes, seed, image_size, val_scenes, test_scenes } => {
            let mut cfg = DatasetConfig::with_scenes(scenes, seed);
            cfg.gen.width = image_size;
            cfg.gen.height = image_size;
            cfg.val_scenes = val_scenes.unwrap_or(cfg.val_scenes);
            cfg.test_scenes = test_scenes.unwrap_or(cfg.test_scenes);
            let ds = generate_dataset(&cfg, exec)?;
            ds.write(&out, exec)?;
            for split in Split::ALL {
                let recs = ds.records(split);
                let count = |q| recs.iter().filter(|r| r.qtype == q).count();
                let per_type: Vec<String> =
                    QType::ALL.iter().map(|&q| format!("{} {}", q.as_str(), count(q))).collect();
                println!("{:<5} {:>6} records ({})", split.as_str(), recs.len(), per_type.join(", "));
            }
            println!("wrote {}", out.display());
        }
        Command::Train(args) => {
            let cfg = run_config(&args)?;
            let model_cfg = match &args.model_config {
                Some(p) => ModelConfig::from_kv(&read(p)?)?,
                None => ModelConfig::default(),
            };
            let (outcome, m) = run_training(&cfg, model_cfg, exec)?;
            println!(
                "best epoch {} of {}; test overall {:?} grade {:?} C1 {:?} C2 {:?}",
                outcome.best_epoch,
                outcome.history.len(),
                m.accuracy_overall,
                m.accuracy_grade,
                m.c1,
                m.c2
            );
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Evaluate { ckpt, data, split, out } => {
            let m = run_evaluation(&ckpt, &data, split, &out, exec)?;
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
        }
        Command::Report { runs, sweep, listing } => {
            let (text, found) = report(&runs, sweep, listing);
            if found.is_empty() {
                return Err(Error::Usage("no readable runs".into()));
            }
            print!("{text}");
        }
        Command::Gradcheck { seed, inject_hinge_fault } => {
            let opts = GradcheckOptions {
                seed,
                hinge_grad_scale: if inject_hinge_fault { -1.0 } else { 1.0 },
            };
            let suites = run_all(&opts)?;
            for s in &suites {
                println!("{}", s.line());
            }
            let failed: Vec<_> = suites.iter().filter(|s| !s.pass()).collect();
            if let Some(worst) = failed
                .iter()
                .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
            {
                eprintln!("gradcheck failed in {} suite(s); worst: {}", failed.len(), worst.line());
                return Err(Error::GradCheck(worst.name.clone()));
            }
            println!("gradcheck passed ({} suites)", suites.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
