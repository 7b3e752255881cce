use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use sdca::certify::{certify, CertScale};
use sdca::experiment::{
    eval_csv, resolve_out_dir, run, sweep, sweep_csv, write_run, ExperimentConfig, OUTPUT_ROOT_ENV,
};
use sdca::model::ModelParams;
use sdca::synth::{generate, read_dataset, write_dataset};
use sdca::train::Mode;
use sdca::{Result, SdcaError};

#[derive(Parser, Debug)]
#[command(name = "sdca", version, about = "Distribution-aware contrastive adaptation on synthetic scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` config file; flags below override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Ablation mode, or `all` for train
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Output directory (default: $SDCA_OUTPUT_ROOT/<subcommand> or runs/<subcommand>)
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    lambda_lov: Option<f64>,
    #[arg(long, global = true)]
    lambda_feat: Option<f64>,
    #[arg(long, global = true)]
    lambda_out: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic source/target dataset
    Generate {
        #[arg(long)]
        n_source: Option<usize>,
        #[arg(long)]
        n_target: Option<usize>,
    },
    /// Train one mode (or every mode) and write the run artifacts
    Train,
    /// Evaluate a saved model
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory from `generate`; default regenerates from the config
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train once per value of one parameter
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Run the numerical self-checks
    Certify {
        /// Smaller instance counts
        #[arg(long)]
        quick: bool,
    },
}

fn load_config(c: &Common, allow_all: bool) -> Result<(ExperimentConfig, Vec<Mode>)> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    let overrides = [
        ("tau", c.tau),
        ("delta", c.delta),
        ("lambda_lov", c.lambda_lov),
        ("lambda_feat", c.lambda_feat),
        ("lambda_out", c.lambda_out),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, &v.to_string())?;
        }
    }
    let modes = match c.mode.as_deref() {
        Some("all") if allow_all => Mode::ALL.to_vec(),
        Some(m) => {
            cfg.set("mode", m)?;
            vec![cfg.train.mode]
        }
        None => vec![cfg.train.mode],
    };
    cfg.validate()?;
    Ok((cfg, modes))
}

fn out_dir(c: &Common, name: &str) -> PathBuf {
    resolve_out_dir(c.out_dir.as_deref(), name)
}

fn cmd_generate(c: &Common, n_source: Option<usize>, n_target: Option<usize>) -> Result<()> {
    let (cfg, _) = load_config(c, false)?;
    let dir = out_dir(c, "data");
    let ds = generate(
        &cfg.scene,
        cfg.train.seed,
        n_source.unwrap_or(cfg.n_source),
        n_target.unwrap_or(cfg.n_target + cfg.n_eval),
    )?;
    write_dataset(&ds, &dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    println!("{}", dir.display());
    Ok(())
}

fn cmd_train(c: &Common) -> Result<()> {
    let (cfg, modes) = load_config(c, true)?;
    let dir = out_dir(c, "train");
    if modes.len() == 1 {
        let art = run(&cfg)?;
        write_run(&art, &dir)?;
        println!("{} target_miou={:.4} mean_pdd={:.4}", art.summary.mode, art.summary.target_miou, art.summary.mean_pdd);
        return Ok(());
    }
    let mut table = String::from("mode,seed,target_miou,tail_miou,mean_pdd,source_miou\n");
    for m in modes {
        let mut mc = cfg.clone();
        mc.train.mode = m;
        info!("training {m}");
        let art = run(&mc)?;
        write_run(&art, &dir.join(m.name()))?;
        let s = &art.summary;
        table.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.mode,
            s.seed,
            s.target_miou,
            s.tail_miou.map_or(String::new(), |t| t.to_string()),
            s.mean_pdd,
            s.source_miou
        ));
        println!("{} target_miou={:.4} mean_pdd={:.4}", s.mode, s.target_miou, s.mean_pdd);
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("ablation.csv"), table)?;
    Ok(())
}

fn cmd_eval(c: &Common, model: &Path, data: Option<&Path>) -> Result<()> {
    let (cfg, _) = load_config(c, false)?;
    let params = ModelParams::read_from(&mut std::io::BufReader::new(fs::File::open(model)?))?;
    let ds = match data {
        Some(d) => read_dataset(d)?,
        None => {
            let s = sdca::experiment::make_splits(&cfg)?;
            sdca::synth::SyntheticDataset {
                source: s.source,
                target: s.eval,
            }
        }
    };
    let csv = eval_csv(&params, &ds.source, &ds.target)?;
    let dir = out_dir(c, "eval");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_sweep(c: &Common, param: &str, values: &[f64]) -> Result<()> {
    let (cfg, _) = load_config(c, false)?;
    let rows = sweep(&cfg, param, values)?;
    let dir = out_dir(c, "sweep");
    fs::create_dir_all(&dir)?;
    let csv = sweep_csv(&rows);
    fs::write(dir.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_certify(c: &Common, quick: bool) -> Result<bool> {
    let seed = c.seed.unwrap_or(0);
    let report = certify(seed, if quick { CertScale::quick() } else { CertScale::full() })?;
    for ch in &report.checks {
        println!(
            "{} {} (n={}, worst={:.3e}) {}",
            if ch.passed { "PASS" } else { "FAIL" },
            ch.name,
            ch.instances,
            ch.worst,
            ch.detail
        );
    }
    let dir = out_dir(c, "certify");
    fs::create_dir_all(&dir)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| SdcaError::Format(e.to_string()))?;
    fs::write(dir.join("certify.json"), json + "\n")?;
    Ok(report.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    info!("output root from ${OUTPUT_ROOT_ENV}: {:?}", std::env::var_os(OUTPUT_ROOT_ENV));
    let res = match &cli.command {
        Command::Generate { n_source, n_target } => cmd_generate(&cli.common, *n_source, *n_target).map(|_| true),
        Command::Train => cmd_train(&cli.common).map(|_| true),
        Command::Eval { model, data } => cmd_eval(&cli.common, model, data.as_deref()).map(|_| true),
        Command::Sweep { param, values } => cmd_sweep(&cli.common, param, values).map(|_| true),
        Command::Certify { quick } => cmd_certify(&cli.common, *quick),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
