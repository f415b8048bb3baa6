//! Command-line driver: pre-training runs, checkpoint evaluation,
//! forgetting reports, gradient verification, and dataset dumps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use retcop_core::error::Error;
use retcop_core::eval::{linear_probe_eval, zero_shot_eval};
use retcop_core::pipeline::checkpoint::{config_hash_matches, load_checkpoint};
use retcop_core::pipeline::report::{parse_metrics, render_report};
use retcop_core::pipeline::{resume_pipeline, run_pipeline, RunConfig};
use retcop_core::synthstream::{build_modality, write_dataset, ModalitySpec};
use retcop_core::verify::run_suite;
use retcop_core::Rng;

const USAGE: &str = "\
usage: retcop <command> [options]

commands:
  pretrain   --config <path> [--resume <ckpt>] [--seed <u64>]
             run the continual pre-training pipeline
  eval       --ckpt <path> --modality <id> [--seed <u64>]
             zero-shot and linear-probe evaluation from a checkpoint
  report     --runs <dir> [<dir> ...]
             forgetting comparison table over run directories
  gradcheck  [--seed <u64>]
             finite-difference verification of every gradient path
  gen-data   --spec <path> --out <path> [--seed <u64>]
             dump a sampled synthetic dataset to a flat binary file
";

/// exit 2: usage or configuration problems; exit 1: runtime failures.
fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return ExitCode::from(2);
    };
    let result = match command.as_str() {
        "pretrain" => cmd_pretrain(&args[1..]),
        "eval" => cmd_eval(&args[1..]),
        "report" => cmd_report(&args[1..]),
        "gradcheck" => cmd_gradcheck(&args[1..]),
        "gen-data" => cmd_gen_data(&args[1..]),
        "--help" | "-h" | "help" => {
            print!("{USAGE}");
            return ExitCode::SUCCESS;
        }
        other => {
            eprintln!("error[usage]: unknown command '{other}'");
            eprint!("{USAGE}");
            return ExitCode::from(2);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error[usage]: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error{e}");
            match e {
                Error::Config(_) | Error::Parameter(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type CliResult = Result<(), CliError>;

/// Flag parser for `--key value` style options; `multi` keys may repeat
/// (also consuming bare values that follow them).
struct Flags {
    single: std::collections::BTreeMap<String, String>,
    multi: Vec<String>,
}

fn parse_flags(args: &[String], known: &[&str], multi_key: Option<&str>) -> Result<Flags, CliError> {
    let mut single = std::collections::BTreeMap::new();
    let mut multi = Vec::new();
    let mut i = 0;
    let mut in_multi = false;
    while i < args.len() {
        let arg = &args[i];
        if let Some(key) = arg.strip_prefix("--") {
            in_multi = false;
            if Some(key) == multi_key {
                in_multi = true;
                i += 1;
                continue;
            }
            if !known.contains(&key) {
                return Err(CliError::Usage(format!("unknown flag --{key}")));
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?;
            if single.insert(key.to_string(), value.clone()).is_some() {
                return Err(CliError::Usage(format!("--{key} given twice")));
            }
            i += 2;
        } else if in_multi {
            multi.push(arg.clone());
            i += 1;
        } else {
            return Err(CliError::Usage(format!("unexpected argument '{arg}'")));
        }
    }
    Ok(Flags { single, multi })
}

fn required<'a>(flags: &'a Flags, key: &str) -> Result<&'a str, CliError> {
    flags
        .single
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| CliError::Usage(format!("--{key} is required")))
}

fn seed_override(flags: &Flags) -> Result<Option<u64>, CliError> {
    flags
        .single
        .get("seed")
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| CliError::Usage(format!("--seed: cannot parse '{s}'")))
        })
        .transpose()
}

fn cmd_pretrain(args: &[String]) -> CliResult {
    let flags = parse_flags(args, &["config", "resume", "seed"], None)?;
    let config_path = required(&flags, "config")?;
    let text = std::fs::read_to_string(config_path)?;
    let config = RunConfig::parse(&text, seed_override(&flags)?)?;

    let out = match flags.single.get("resume") {
        Some(ckpt) => {
            let ckpt = Path::new(ckpt);
            if !config_hash_matches(ckpt, &config)? {
                eprintln!(
                    "warning: --config does not match the checkpoint's embedded config; \
                     resuming with the checkpoint's configuration"
                );
            }
            resume_pipeline(ckpt)?
        }
        None => run_pipeline(&config)?,
    };
    println!("run complete: {} metric records", out.metrics.len());
    println!("metrics: {}", out.metrics_path.display());
    println!("checkpoint: {}", out.final_checkpoint.display());
    Ok(())
}

fn cmd_eval(args: &[String]) -> CliResult {
    let flags = parse_flags(args, &["ckpt", "modality", "seed"], None)?;
    let ckpt = required(&flags, "ckpt")?;
    let modality: usize = required(&flags, "modality")?
        .parse()
        .map_err(|_| CliError::Usage("--modality must be an integer".into()))?;

    let state = load_checkpoint(Path::new(ckpt))?;
    let cfg = &state.config;
    if modality == 0 || modality > cfg.n_stages() {
        return Err(CliError::Core(Error::Parameter(format!(
            "modality {modality} outside the run's 1..={} stages",
            cfg.n_stages()
        ))));
    }
    let eval_seed = seed_override(&flags)?.unwrap_or_else(|| {
        Rng::derive(cfg.seed, &[0x636c695f6576616c]).next_u64()
    });
    let generator = build_modality(&cfg.stage_spec(modality))?;
    let (zs_acc, zs_auc) =
        zero_shot_eval(&state.encoders, &generator, cfg.eval_test_samples, eval_seed)?;
    let (lp_acc, lp_auc) = linear_probe_eval(
        &state.encoders,
        &generator,
        cfg.probe_train_samples,
        cfg.eval_test_samples,
        eval_seed,
    )?;
    if state.step_in_stage == 0 {
        println!(
            "modality {modality}, checkpoint after stage {} of {}",
            state.stage_index - 1,
            cfg.n_stages()
        );
    } else {
        println!(
            "modality {modality}, checkpoint at stage {} step {} of {} stages",
            state.stage_index, state.step_in_stage, cfg.n_stages()
        );
    }
    println!("zero-shot    ACC {:.1}%  AUC {:.1}%", zs_acc * 100.0, zs_auc * 100.0);
    println!("linear-probe ACC {:.1}%  AUC {:.1}%", lp_acc * 100.0, lp_auc * 100.0);
    Ok(())
}

fn cmd_report(args: &[String]) -> CliResult {
    let flags = parse_flags(args, &[], Some("runs"))?;
    if flags.multi.is_empty() {
        return Err(CliError::Usage("--runs needs at least one run directory".into()));
    }
    let mut runs = Vec::new();
    for dir in &flags.multi {
        let path = PathBuf::from(dir).join("metrics.jsonl");
        let text = std::fs::read_to_string(&path)?;
        runs.push(parse_metrics(&text)?);
    }
    print!("{}", render_report(&runs)?);
    Ok(())
}

fn cmd_gradcheck(args: &[String]) -> CliResult {
    let flags = parse_flags(args, &["seed"], None)?;
    let seed = seed_override(&flags)?.unwrap_or(2024);
    let results = run_suite(seed)?;
    let mut worst: f64 = 0.0;
    let mut all_ok = true;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{status:>4}  {:<44} max rel err {:.3e}", r.name, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
        all_ok &= r.passed();
    }
    println!("max relative error over all checks: {worst:.3e}");
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Core(Error::Contract(
            "gradient verification failed".into(),
        )))
    }
}

fn cmd_gen_data(args: &[String]) -> CliResult {
    let flags = parse_flags(args, &["spec", "out", "seed"], None)?;
    let spec_path = required(&flags, "spec")?;
    let out_path = required(&flags, "out")?;
    let text = std::fs::read_to_string(spec_path)?;
    let (spec, n_samples, sample_seed) = parse_dataset_spec(&text)?;
    let generator = build_modality(&spec)?;
    let mut rng = Rng::from_seed(seed_override(&flags)?.unwrap_or(sample_seed));
    let samples = generator.sample_pairs(n_samples, &mut rng)?;
    let bytes = write_dataset(&samples)?;
    std::fs::write(out_path, &bytes)?;
    println!(
        "wrote {} pairs ({} bytes) for modality {}",
        samples.len(),
        bytes.len(),
        spec.modality_id
    );
    Ok(())
}

/// Dataset spec file: the same flat key = value format as run configs.
fn parse_dataset_spec(text: &str) -> Result<(ModalitySpec, usize, u64), CliError> {
    let mut spec = ModalitySpec {
        modality_id: 1,
        n_classes: 8,
        latent_dim: 16,
        image_dim: 32,
        text_dim: 24,
        noise_sigma: 0.5,
        generator_seed: 42,
    };
    let mut n_samples = 1000usize;
    let mut sample_seed = 42u64;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Core(Error::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            )))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let parse_err =
            |k: &str, v: &str| CliError::Core(Error::Config(format!("{k}: cannot parse '{v}'")));
        match key {
            "modality_id" => spec.modality_id = value.parse().map_err(|_| parse_err(key, value))?,
            "n_classes" => spec.n_classes = value.parse().map_err(|_| parse_err(key, value))?,
            "latent_dim" => spec.latent_dim = value.parse().map_err(|_| parse_err(key, value))?,
            "image_dim" => spec.image_dim = value.parse().map_err(|_| parse_err(key, value))?,
            "text_dim" => spec.text_dim = value.parse().map_err(|_| parse_err(key, value))?,
            "noise_sigma" => spec.noise_sigma = value.parse().map_err(|_| parse_err(key, value))?,
            "generator_seed" => {
                spec.generator_seed = value.parse().map_err(|_| parse_err(key, value))?
            }
            "n_samples" => n_samples = value.parse().map_err(|_| parse_err(key, value))?,
            "sample_seed" => sample_seed = value.parse().map_err(|_| parse_err(key, value))?,
            other => {
                return Err(CliError::Core(Error::Config(format!("unknown key '{other}'"))));
            }
        }
    }
    Ok((spec, n_samples, sample_seed))
}
