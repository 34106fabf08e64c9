//! Command-line entry point. Subcommands: train, eval, infer, verify, info.
//!
//! Exit codes: 0 success, 1 usage, 2 config/checkpoint, 3 data, 4 numeric
//! failure. Standard output carries only machine-parseable `key=value`
//! records (and verify's `name: PASS/FAIL` lines); progress goes to stderr
//! unless `VMUNET_LOG=quiet`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use vmunet_core::checkpoint::{load_checkpoint, save_checkpoint};
use vmunet_core::data::{load_dir, synth_dataset, SegmentationSample};
use vmunet_core::image::{read_ppm, write_pgm};
use vmunet_core::net::{count_params, SIZE_DIVISOR};
use vmunet_core::train::{evaluate, format_record, model_from_checkpoint, predict_mask, train};
use vmunet_core::verify::{run_suite, Fault};
use vmunet_core::{Error, RunConfig};

const USAGE: &str = "\
vmunet - selective state-space segmentation network

USAGE:
    vmunet <COMMAND> [FLAGS]

COMMANDS:
    train     --data <DIR|synth> [--config <PATH>] [--out <DIR>] [--seed <N>]
              Train a network; writes metrics.log, best.ckpt, last.ckpt
              under --out (default: out).
    eval      --checkpoint <PATH> --data <DIR|synth> [--seed <N>]
              Print one metrics record for the checkpoint on the dataset.
              `synth` regenerates the training split from config + seed.
    infer     --checkpoint <PATH> --image <PATH.ppm> --out <PATH.pgm>
              Write the predicted class mask for one image.
    verify    [--inject-fault zoh-sign]
              Run the oracle suite; one `name: PASS|FAIL` line per check.
    info      [--config <PATH>]
              Print the exact parameter count and counting assumptions.
    help      Print this text.

Exit codes: 0 ok, 1 usage, 2 config/checkpoint, 3 data, 4 numeric failure.
Set VMUNET_LOG=quiet to silence progress on stderr.
";

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Failure {
        Failure { code: 1, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let code = match &e {
            Error::Config { .. } => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn as_config_failure(e: Error) -> Failure {
    Failure { code: 2, msg: e.to_string() }
}

struct Flags {
    pairs: Vec<(String, String)>,
}

impl Flags {
    fn parse(args: &[String], allowed: &[&str]) -> Result<Flags, Failure> {
        let mut pairs = Vec::new();
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| Failure::usage(format!("unexpected argument `{arg}`")))?;
            if !allowed.contains(&key) {
                return Err(Failure::usage(format!("unknown flag `--{key}`")));
            }
            let value = it
                .next()
                .ok_or_else(|| Failure::usage(format!("flag `--{key}` needs a value")))?;
            if pairs.iter().any(|(k, _)| k == key) {
                return Err(Failure::usage(format!("flag `--{key}` given twice")));
            }
            pairs.push((key.to_string(), value.clone()));
        }
        Ok(Flags { pairs })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str, Failure> {
        self.get(key)
            .ok_or_else(|| Failure::usage(format!("missing required flag `--{key}`")))
    }

    fn seed(&self) -> Result<u64, Failure> {
        match self.get("seed") {
            None => Ok(0),
            Some(s) => s
                .parse()
                .map_err(|_| Failure::usage(format!("--seed expects an integer, got `{s}`"))),
        }
    }
}

fn chatty() -> bool {
    std::env::var("VMUNET_LOG").map(|v| v != "quiet").unwrap_or(true)
}

fn progress(msg: &str) {
    if chatty() {
        eprintln!("{msg}");
    }
}

fn load_config(path: Option<&str>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure {
                code: 2,
                msg: format!("cannot read config `{p}`: {e}"),
            })?;
            RunConfig::parse(&text).map_err(as_config_failure)
        }
    }
}

/// Training and validation splits for `--data DIR|synth`.
fn load_data(
    spec: &str,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(Vec<SegmentationSample>, Vec<SegmentationSample>), Failure> {
    if spec == "synth" {
        let total = cfg.train.synth_samples + cfg.train.synth_val_samples;
        let mut train_set = synth_dataset(total, cfg.net.input_size, cfg.net.num_classes, seed)?;
        let val_set = train_set.split_off(cfg.train.synth_samples);
        Ok((train_set, val_set))
    } else {
        let dir = Path::new(spec);
        if !dir.is_dir() {
            return Err(Failure {
                code: 3,
                msg: format!("data directory `{spec}` does not exist"),
            });
        }
        Ok((load_dir(dir, cfg.net.num_classes)?, Vec::new()))
    }
}

fn cmd_train(args: &[String]) -> Result<(), Failure> {
    let flags = Flags::parse(args, &["config", "data", "out", "seed"])?;
    let cfg = load_config(flags.get("config"))?;
    let seed = flags.seed()?;
    let data_spec = flags.require("data")?;
    let out_dir = PathBuf::from(flags.get("out").unwrap_or("out"));
    let (train_set, val_set) = load_data(data_spec, &cfg, seed)?;
    std::fs::create_dir_all(&out_dir).map_err(Error::from)?;

    progress(&format!(
        "training: {} samples (+{} val), {} epochs, batch {}, seed {seed}",
        train_set.len(),
        val_set.len(),
        cfg.train.epochs,
        cfg.train.batch_size
    ));
    let outcome = train(&cfg, &train_set, &val_set, seed, &mut |line| {
        println!("{line}");
    })?;
    std::fs::write(out_dir.join("metrics.log"), &outcome.log).map_err(Error::from)?;
    save_checkpoint(&out_dir.join("best.ckpt"), &outcome.best)?;
    save_checkpoint(&out_dir.join("last.ckpt"), &outcome.last)?;
    progress(&format!(
        "done: {} steps, best dsc {:.6}, artifacts under {}",
        outcome.steps,
        outcome.best_dsc,
        out_dir.display()
    ));
    Ok(())
}

fn cmd_eval(args: &[String]) -> Result<(), Failure> {
    let flags = Flags::parse(args, &["checkpoint", "data", "seed"])?;
    let ckpt_path = flags.require("checkpoint")?;
    let data_spec = flags.require("data")?;
    let seed = flags.seed()?;
    let ckpt = load_checkpoint(Path::new(ckpt_path)).map_err(as_config_failure)?;
    let (cfg, model) = model_from_checkpoint(&ckpt).map_err(as_config_failure)?;
    let (train_set, _) = load_data(data_spec, &cfg, seed)?;
    let record = evaluate(&model, &train_set)?;
    println!("{}", format_record(&record));
    Ok(())
}

fn cmd_infer(args: &[String]) -> Result<(), Failure> {
    let flags = Flags::parse(args, &["checkpoint", "image", "out"])?;
    let ckpt_path = flags.require("checkpoint")?;
    let image_path = flags.require("image")?;
    let out_path = flags.require("out")?;
    let ckpt = load_checkpoint(Path::new(ckpt_path)).map_err(as_config_failure)?;
    let (_, model) = model_from_checkpoint(&ckpt).map_err(as_config_failure)?;
    let image = read_ppm(Path::new(image_path))?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 {
        return Err(Failure {
            code: 3,
            msg: format!(
                "image extents {h}x{w} must be divisible by {SIZE_DIVISOR}"
            ),
        });
    }
    let logits = model.infer(&image)?;
    let mask = predict_mask(&logits);
    write_pgm(Path::new(out_path), &mask, h, w)?;
    progress(&format!("wrote {out_path}"));
    Ok(())
}

fn cmd_verify(args: &[String]) -> Result<(), Failure> {
    let flags = Flags::parse(args, &["inject-fault"])?;
    let fault = match flags.get("inject-fault") {
        None => None,
        Some("zoh-sign") => Some(Fault::ZohSignFlip),
        Some(other) => {
            return Err(Failure::usage(format!("unknown fault `{other}` (try zoh-sign)")))
        }
    };
    let checks = run_suite(fault);
    let mut all_pass = true;
    for c in &checks {
        println!("{}: {} ({})", c.name, if c.pass { "PASS" } else { "FAIL" }, c.detail);
        all_pass &= c.pass;
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure { code: 4, msg: "verification failed".into() })
    }
}

fn cmd_info(args: &[String]) -> Result<(), Failure> {
    let flags = Flags::parse(args, &["config"])?;
    let cfg = load_config(flags.get("config"))?;
    let n = count_params(&cfg.net)?;
    println!("params={n}");
    println!("params_millions={:.6}", n as f64 / 1e6);
    println!(
        "base_channels={} encoder_depths={:?} decoder_depths={:?} state_dim={} expand={} num_classes={}",
        cfg.net.base_channels,
        cfg.net.encoder_depths,
        cfg.net.decoder_depths,
        cfg.net.state_dim,
        cfg.net.ssm_expand_ratio,
        cfg.net.num_classes
    );
    for line in [
        "assume: block branch projections and patch-merge/expand reductions are bias-free",
        "assume: depthwise conv (3x3 default) and the class head carry biases",
        "assume: step-size projection is low-rank with rank max(1, channels/16), bias included",
        "assume: per-direction scan parameters (4 directions), B/C projections carry biases",
        "assume: layer norms contribute gamma+beta; skip connections add zero parameters",
        "assume: final stage expands 4x in one shot (channels -> 16x channels) before the head",
    ] {
        println!("{line}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return ExitCode::from(1);
    };
    if command == "--help" || command == "-h" || command == "help" {
        print!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    let rest = &args[1..];
    let result = match command.as_str() {
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "infer" => cmd_infer(rest),
        "verify" => cmd_verify(rest),
        "info" => cmd_info(rest),
        other => Err(Failure::usage(format!("unknown command `{other}`"))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            if f.code == 1 {
                eprint!("{USAGE}");
            }
            ExitCode::from(f.code)
        }
    }
}
