use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use clipnet::cli::{cmd_eval_many, cmd_metrics, cmd_predict, cmd_synth, cmd_train, InitFrom};
use clipnet::config::{RunConfig, KEYS};
use clipnet::data::SynthSpec;
use clipnet::{Error, Result};

/// Short spellings for frequently overridden keys.
const ALIASES: &[(&str, &str)] = &[
    ("lr", "train.learning_rate"),
    ("momentum", "train.momentum"),
    ("seed", "train.seed"),
    ("max-iterations", "train.max_iterations"),
    ("checkpoint-every", "train.checkpoint_every"),
    ("clips-per-batch", "train.clips_per_batch"),
    ("precision", "run.precision"),
];

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

fn train_command() -> Command {
    let mut cmd = Command::new("train")
        .about("Train on a dataset, writing train.log and checkpoints")
        .args_override_self(true)
        .arg(path_arg("config", "Config file of `key = value` lines"))
        .arg(path_arg("data", "Dataset root with frames/ and annotations/"))
        .arg(path_arg("out", "Checkpoint directory").required(true))
        .arg(path_arg("init-from", "Checkpoint to initialize weights from"))
        .arg(path_arg("manifest", "`source -> target` weight mapping for --init-from"));
    for &key in KEYS {
        cmd = cmd.arg(Arg::new(key).long(key).value_name("VALUE").hide(true));
    }
    for &(alias, key) in ALIASES {
        cmd = cmd.arg(
            Arg::new(alias)
                .long(alias)
                .value_name("VALUE")
                .help(format!("Same as --{key}")),
        );
    }
    cmd
}

fn cli() -> Command {
    Command::new("clipnet")
        .about("Frame-level facial expression recognition over 8-frame video clips")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .action(ArgAction::Count)
                .global(true),
        )
        .subcommand(
            Command::new("synth")
                .about("Write a synthetic class-patterned corpus")
                .arg(path_arg("out", "Output root").required(true))
                .arg(Arg::new("videos").long("videos").value_parser(value_parser!(usize)).default_value("4"))
                .arg(Arg::new("frames").long("frames").value_parser(value_parser!(usize)).default_value("64"))
                .arg(Arg::new("size").long("size").value_parser(value_parser!(usize)).default_value("32"))
                .arg(Arg::new("seed").long("seed").value_parser(value_parser!(u64)).default_value("0"))
                .arg(
                    Arg::new("pattern-seed")
                        .long("pattern-seed")
                        .value_parser(value_parser!(u64))
                        .default_value("0"),
                ),
        )
        .subcommand(train_command())
        .subcommand(
            Command::new("eval")
                .about("Score checkpoints on an annotated dataset")
                .arg(
                    path_arg("checkpoint", "Checkpoint file; repeat to compare several")
                        .required(true)
                        .action(ArgAction::Append),
                )
                .arg(path_arg("data", "Dataset root with frames/ and annotations/").required(true)),
        )
        .subcommand(
            Command::new("predict")
                .about("Write per-frame predictions for every video directory")
                .arg(path_arg("checkpoint", "Checkpoint file").required(true))
                .arg(path_arg("frames", "Directory of <video_id>/ frame folders").required(true))
                .arg(path_arg("out", "Predictions file").required(true)),
        )
        .subcommand(
            Command::new("metrics")
                .about("Score a predictions file against annotations")
                .arg(path_arg("predictions", "Predictions file").required(true))
                .arg(path_arg("annotations", "Annotations directory").required(true)),
        )
}

fn path(m: &ArgMatches, name: &str) -> Option<PathBuf> {
    m.get_one::<PathBuf>(name).cloned()
}

/// Config file, then `--data`, then `--key value` overrides in command-line
/// order.
fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match path(m, "config") {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = path(m, "data") {
        cfg.data_root = Some(d);
    }
    let mut overrides: Vec<(usize, &str, String)> = Vec::new();
    let names = KEYS.iter().map(|&k| (k, k)).chain(ALIASES.iter().copied());
    for (arg, key) in names {
        if let (Some(mut idx), Some(mut vals)) = (m.indices_of(arg), m.get_many::<String>(arg)) {
            if let (Some(i), Some(v)) = (idx.next_back(), vals.next_back()) {
                overrides.push((i, key, v.clone()));
            }
        }
    }
    overrides.sort_by_key(|(i, _, _)| *i);
    for (_, key, value) in overrides {
        cfg.set(key, &value).map_err(|e| e.context(format!("--{key}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(m: &ArgMatches, out: &mut String) -> Result<()> {
    match m.subcommand() {
        Some(("synth", s)) => {
            let spec = SynthSpec {
                num_videos: *s.get_one("videos").unwrap(),
                frames_per_video: *s.get_one("frames").unwrap(),
                image_size: *s.get_one("size").unwrap(),
                class_pattern_seed: *s.get_one("pattern-seed").unwrap(),
            };
            let dest = path(s, "out").unwrap();
            cmd_synth(&spec, *s.get_one("seed").unwrap(), &dest)?;
            let _ = writeln!(out, "wrote {} videos to {}", spec.num_videos, dest.display());
        }
        Some(("train", s)) => {
            let cfg = run_config(s)?;
            let init = InitFrom {
                checkpoint: path(s, "init-from"),
                manifest: path(s, "manifest"),
            };
            if init.manifest.is_some() && init.checkpoint.is_none() {
                return Err(Error::Config("--manifest requires --init-from".into()));
            }
            let summary = cmd_train(&cfg, &path(s, "out").unwrap(), &init)?;
            if let Some(last) = summary.log.last() {
                let _ = writeln!(out, "iterations = {}", last.iteration + 1);
                let _ = writeln!(out, "final_loss = {:.4}", last.loss);
            }
            for c in &summary.checkpoints {
                let _ = writeln!(out, "checkpoint = {}", c.display());
            }
            for (iter, r) in &summary.validation {
                let _ = writeln!(out, "validation iter={iter} s={:.4} acc={:.4} macro_f1={:.4}", r.s, r.acc, r.macro_f1);
            }
            if let Some(best) = summary.best {
                let _ = writeln!(out, "best_iteration = {best}");
            }
        }
        Some(("eval", s)) => {
            let ckpts: Vec<PathBuf> = s.get_many::<PathBuf>("checkpoint").unwrap().cloned().collect();
            let (reports, best) = cmd_eval_many(&ckpts, &path(s, "data").unwrap())?;
            if let [(_, r)] = reports.as_slice() {
                let _ = write!(out, "{r}");
            } else {
                for (iter, r) in &reports {
                    let _ = writeln!(out, "[iteration {iter}]");
                    let _ = write!(out, "{r}");
                }
                if let Some(b) = best {
                    let _ = writeln!(out, "best_iteration = {b}");
                }
            }
        }
        Some(("predict", s)) => {
            let dest = path(s, "out").unwrap();
            let n = cmd_predict(&path(s, "checkpoint").unwrap(), &path(s, "frames").unwrap(), &dest)?;
            let _ = writeln!(out, "wrote {n} predictions to {}", dest.display());
        }
        Some(("metrics", s)) => {
            let r = cmd_metrics(&path(s, "predictions").unwrap(), &path(s, "annotations").unwrap())?;
            let _ = write!(out, "{r}");
        }
        _ => unreachable!("subcommand_required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match matches.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let mut out = String::new();
    let result = run(&matches, &mut out);
    let _ = std::io::stdout().write_all(out.as_bytes());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
