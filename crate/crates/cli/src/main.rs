//! `pgrad` — batch driver for training, evaluation and observation
//! generation.
//!
//! Commands:
//!   pgrad train --config <file> --out <dir> [--seed N] [--workers N] [--key value ...]
//!   pgrad eval  --checkpoint <prefix> --task <task> --episodes <N> --out <dir> [--seed N]
//!   pgrad gen   --checkpoint <prefix> --spec <file> --out <dir>
//!
//! Any config key can be overridden on the train command line as `--key
//! value`. `PGRAD_SEED` supplies the seed when neither the flag nor the
//! config sets one. Exit codes: 0 success, 1 configuration error, 2 numeric
//! abort during training.

mod config;
mod run;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use config::Task;
use pgrad_core::error::Error;

struct Args {
    positional: Vec<String>,
    flags: BTreeMap<String, String>,
}

fn parse_args(argv: &[String]) -> Result<Args, String> {
    let mut positional = Vec::new();
    let mut flags = BTreeMap::new();
    let mut i = 0;
    while i < argv.len() {
        let arg = &argv[i];
        if let Some(key) = arg.strip_prefix("--") {
            let value = argv
                .get(i + 1)
                .ok_or_else(|| format!("flag --{key} needs a value"))?;
            flags.insert(key.to_string(), value.clone());
            i += 2;
        } else {
            positional.push(arg.clone());
            i += 1;
        }
    }
    Ok(Args { positional, flags })
}

fn usage() -> &'static str {
    "usage:\n  pgrad train --config <file> --out <dir> [--seed N] [--workers N] [--key value ...]\n  pgrad eval  --checkpoint <prefix> --task <task> --episodes <N> --out <dir> [--seed N]\n  pgrad gen   --checkpoint <prefix> --spec <file> --out <dir>"
}

fn fail(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    eprintln!("{}", usage());
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let mut args = match parse_args(&argv) {
        Ok(a) => a,
        Err(e) => return fail(&e),
    };
    let Some(command) = args.positional.first().cloned() else {
        return fail("missing command");
    };

    let result = match command.as_str() {
        "train" => {
            let Some(config_path) = args.flags.remove("config") else {
                return fail("train needs --config");
            };
            let Some(out) = args.flags.remove("out") else {
                return fail("train needs --out");
            };
            let overrides = args.flags; // every remaining flag is a config key
            match config::RunConfig::load(&PathBuf::from(&config_path), &overrides) {
                Ok(cfg) => run::cmd_train(&cfg, &PathBuf::from(out)),
                Err(e) => return fail(&e.to_string()),
            }
        }
        "eval" => {
            let Some(ckpt) = args.flags.remove("checkpoint") else {
                return fail("eval needs --checkpoint");
            };
            let Some(task_name) = args.flags.remove("task") else {
                return fail("eval needs --task");
            };
            let Some(episodes) = args.flags.remove("episodes") else {
                return fail("eval needs --episodes");
            };
            let Some(out) = args.flags.remove("out") else {
                return fail("eval needs --out");
            };
            let seed = match seed_flag(&mut args.flags) {
                Ok(s) => s,
                Err(e) => return fail(&e),
            };
            // tolerated for interface symmetry with train
            args.flags.remove("config");
            args.flags.remove("workers");
            if let Some((k, _)) = args.flags.iter().next() {
                return fail(&format!("unknown flag --{k}"));
            }
            let task = match Task::parse(&task_name) {
                Ok(t) => t,
                Err(e) => return fail(&e.to_string()),
            };
            let Ok(episodes) = episodes.parse::<usize>() else {
                return fail("episodes must be an integer");
            };
            run::cmd_eval(
                &PathBuf::from(ckpt),
                task,
                episodes,
                &PathBuf::from(out),
                seed,
            )
        }
        "gen" => {
            let Some(ckpt) = args.flags.remove("checkpoint") else {
                return fail("gen needs --checkpoint");
            };
            let Some(spec) = args.flags.remove("spec") else {
                return fail("gen needs --spec");
            };
            let Some(out) = args.flags.remove("out") else {
                return fail("gen needs --out");
            };
            // tolerated for interface symmetry with train
            args.flags.remove("config");
            args.flags.remove("seed");
            args.flags.remove("workers");
            if let Some((k, _)) = args.flags.iter().next() {
                return fail(&format!("unknown flag --{k}"));
            }
            run::cmd_gen(
                &PathBuf::from(ckpt),
                &PathBuf::from(spec),
                &PathBuf::from(out),
            )
        }
        other => return fail(&format!("unknown command '{other}'")),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::NumericAbort(msg)) => {
            eprintln!("numeric abort: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn seed_flag(flags: &mut BTreeMap<String, String>) -> Result<u64, String> {
    match flags.remove("seed") {
        Some(s) => s.parse::<u64>().map_err(|_| "seed must be an integer".into()),
        None => Ok(std::env::var("PGRAD_SEED")
            .ok()
            .and_then(|s| s.parse::<u64>().ok())
            .unwrap_or(1)),
    }
}
