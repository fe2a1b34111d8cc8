use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use d3pm_core::codes::{load_dataset, save_dataset};
use d3pm_core::eval::{
    attribute_inference_risk, auprc, auroc, fidelity_report, membership_inference_risk, prevalence_csv,
    sample_exposed, train_downstream, CmdMode,
};
use d3pm_core::experiment::{run_experiment, AttackConfig, DataSource};
use d3pm_core::harness::{gen_ground_truth, MixtureSpec};
use d3pm_core::io::write_atomic;
use d3pm_core::nn::default_positional;
use d3pm_core::rng::substream;
use d3pm_core::train::{canonical_json, json_digest, train_with};
use d3pm_core::{
    sample_guided, sample_unconditional, Checkpoint, ContextSpec, DatasetSplit, Error, EvalConfig, Result, RunConfig,
};
use serde_json::json;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Discrete diffusion for binary medical-code matrices.
#[derive(Parser)]
#[command(name = "d3pm", version)]
struct Cli {
    /// Run configuration (JSON); the desk-scale preset when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the configured mixture; writes data.txt and truth.json.
    GenData {
        #[arg(long)]
        n_records: Option<usize>,
    },
    /// Train a denoiser; writes model.ckpt and best.ckpt.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Unconditional samples; writes synthetic.txt.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5000)]
        n: usize,
    },
    /// Samples guided toward records holding every `--code`; writes guided.txt.
    Guide(GuideArgs),
    /// Fidelity metrics as JSON on stdout.
    Eval(EvalArgs),
    /// Attribute and membership inference risks as JSON on stdout.
    Attack {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        holdout: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        /// Exposed attributes; `min(256, N / 2)` when absent.
        #[arg(long)]
        exposed: Option<usize>,
        #[arg(long, default_value_t = 3.0)]
        mir_threshold: f64,
    },
    /// Downstream AUROC and AUPRC as JSON on stdout.
    Utility {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long, default_value_t = 1e-3)]
        reg: f64,
    },
    /// Full pipeline; writes report.json and CSV sidecars.
    Bench,
}

#[derive(Args)]
struct GuideArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "code", required = true)]
    codes: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    synth: PathBuf,
    #[arg(long, default_value_t = 5)]
    mmd_kernels: usize,
    #[arg(long, default_value_t = 175)]
    mcad_bins: usize,
    /// `lo:hi`
    #[arg(long, default_value = "0:175", value_parser = parse_range)]
    mcad_range: (f64, f64),
    /// Compare correlation rather than covariance matrices.
    #[arg(long)]
    correlation: bool,
    /// Also write `code,real_prev,synth_prev` rows here.
    #[arg(long)]
    prevalence_csv: Option<PathBuf>,
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((p(lo)?, p(hi)?))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", canonical_json(value)?);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::GenData { n_records } => {
            let (spec, n) = match &cfg.data {
                DataSource::Mixture { spec, n_records } => (spec.clone(), *n_records),
                DataSource::Desk { n_codes, n_records } => {
                    if *n_codes < 8 {
                        return Err(Error::InvalidConfig("desk data need at least 8 codes".into()));
                    }
                    (MixtureSpec::desk(*n_codes), *n_records)
                }
                DataSource::File { .. } => {
                    return Err(Error::InvalidConfig("gen-data needs a mixture or desk data source".into()))
                }
            };
            let seeds = d3pm_core::experiment::StageSeeds::new(&cfg);
            let gt = gen_ground_truth(&spec, n_records.unwrap_or(n), seeds.data)?;
            std::fs::create_dir_all(out)?;
            save_dataset(&out.join("data.txt"), &gt.data)?;
            let truth = json!({ "prevalence": gt.prevalence, "covariance": gt.covariance, "seed": seeds.data });
            write_text(&out.join("truth.json"), &canonical_json(&truth)?)?;
        }
        Command::Train { data } => {
            let data = load_dataset(&data)?;
            if cli.config.is_none() {
                // fit the preset network to the data's width
                let n = data.n_codes();
                cfg.net.n_tokens = n;
                cfg.net.proj_dim = cfg.net.proj_dim.min(n);
                cfg.net.positional = default_positional(n);
            }
            let split = DatasetSplit::split(&data, cfg.split.train, cfg.split.validation, cfg.seed)?;
            let schedule = cfg.schedule.build()?;
            std::fs::create_dir_all(out)?;
            let best = out.join("best.ckpt");
            let ckpt = train_with(&split, &schedule, Some(cfg.schedule), &cfg.net, &cfg.train, |c, is_best| {
                if is_best {
                    c.save(&best)?;
                }
                Ok(())
            })?;
            ckpt.save(&out.join("model.ckpt"))?;
            print_json(&json!({ "train_history": ckpt.train_history, "valid_history": ckpt.valid_history }))?;
        }
        Command::Sample { checkpoint, n } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let synth = sample_unconditional(&ckpt, n, cfg.seed)?;
            std::fs::create_dir_all(out)?;
            save_dataset(&out.join("synthetic.txt"), &synth)?;
        }
        Command::Guide(args) => {
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            let mut g = cfg.guidance.langevin.clone();
            g.steps = args.steps.unwrap_or(g.steps);
            g.eta = args.eta.unwrap_or(g.eta);
            g.lambda = args.lambda.unwrap_or(g.lambda);
            g.tau = args.tau.unwrap_or(g.tau);
            let context = match args.codes.as_slice() {
                [code] => ContextSpec::CodePresence(*code),
                codes => ContextSpec::Conjunction(codes.to_vec()),
            };
            let synth = sample_guided(&ckpt, &context, args.n, &g, cfg.seed)?;
            std::fs::create_dir_all(out)?;
            save_dataset(&out.join("guided.txt"), &synth)?;
        }
        Command::Eval(args) => {
            let (real, synth) = (load_dataset(&args.real)?, load_dataset(&args.synth)?);
            let mut eval = EvalConfig {
                mcad_bins: args.mcad_bins,
                mcad_range: args.mcad_range,
                ..cfg.eval
            };
            eval.mmd.kernels = args.mmd_kernels;
            if args.correlation {
                eval.cmd_mode = CmdMode::Correlation;
            }
            let mut report = fidelity_report(&real, &synth, &eval)?;
            report.config_digests.insert("eval".into(), json_digest(&eval)?);
            if let Some(path) = args.prevalence_csv {
                write_text(&path, &prevalence_csv(&real, &synth)?)?;
            }
            print_json(&report)?;
        }
        Command::Attack {
            train,
            holdout,
            synth,
            exposed,
            mir_threshold,
        } => {
            let (train, holdout, synth) = (load_dataset(&train)?, load_dataset(&holdout)?, load_dataset(&synth)?);
            let attack = AttackConfig {
                exposed,
                mir_threshold,
            };
            let n = synth.n_codes();
            let exposed = sample_exposed(n, attack.exposed_count(n), &mut substream(cfg.seed, &[]))?;
            print_json(&json!({
                "air": attribute_inference_risk(&train, &synth, &exposed)?,
                "mir": membership_inference_risk(&train, &holdout, &synth, attack.mir_threshold)?,
                "exposed": exposed.len(),
                "mir_threshold": attack.mir_threshold,
                "seed": cfg.seed,
            }))?;
        }
        Command::Utility {
            train,
            test,
            synth,
            target,
            reg,
        } => {
            let test = load_dataset(&test)?;
            let (xt, yt) = test.split_column(target)?;
            let mut rows = Vec::new();
            for (name, path) in [("real", train), ("synthetic", synth)] {
                let (x, y) = load_dataset(&path)?.split_column(target)?;
                let scores = train_downstream(&x, &y, reg)?.predict_proba(&xt)?;
                rows.push(json!({ "trained_on": name, "auroc": auroc(&scores, &yt)?, "auprc": auprc(&scores, &yt)? }));
            }
            print_json(&rows)?;
        }
        Command::Bench => {
            let report = run_experiment(&cfg, Some(out))?;
            print_json(&report)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
