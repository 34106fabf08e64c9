//! Plain-text `key = value` run configuration: network architecture plus
//! training settings. Unknown keys are rejected; missing keys take the
//! documented defaults. `#` starts a comment.

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::net::{NetworkConfig, STAGES};
use crate::optim::Schedule;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub eta_min: f64,
    pub t_max: u32,
    pub epochs: u32,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub eval_every: u32,
    pub augment: bool,
    pub weights: LossWeights,
    pub synth_samples: usize,
    pub synth_val_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            eta_min: 1e-5,
            t_max: 50,
            epochs: 300,
            batch_size: 32,
            weight_decay: 1e-2,
            eval_every: 1,
            augment: true,
            weights: LossWeights::default(),
            synth_samples: 16,
            synth_val_samples: 4,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule { eta_max: self.lr, eta_min: self.eta_min, t_max: self.t_max }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
}

fn parse_typed<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.trim().parse().map_err(|_| {
        Error::config(
            line,
            format!(
                "key `{key}` expects a {}, got `{value}`",
                std::any::type_name::<T>()
            ),
        )
    })
}

fn parse_depths(key: &str, value: &str, line: usize) -> Result<[usize; STAGES]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != STAGES {
        return Err(Error::config(
            line,
            format!("key `{key}` expects {STAGES} comma-separated depths, got {}", parts.len()),
        ));
    }
    let mut out = [0usize; STAGES];
    for (i, p) in parts.iter().enumerate() {
        out[i] = parse_typed(key, p, line)?;
        if out[i] == 0 {
            return Err(Error::config(line, format!("key `{key}`: depths must be >= 1")));
        }
    }
    Ok(out)
}

fn depths_text(d: &[usize; STAGES]) -> String {
    d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                Error::config(line, format!("expected `key = value`, got `{content}`"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "base_channels" => cfg.net.base_channels = parse_typed(key, value, line)?,
                "encoder_depths" => cfg.net.encoder_depths = parse_depths(key, value, line)?,
                "decoder_depths" => cfg.net.decoder_depths = parse_depths(key, value, line)?,
                "state_dim" => cfg.net.state_dim = parse_typed(key, value, line)?,
                "ssm_expand_ratio" => cfg.net.ssm_expand_ratio = parse_typed(key, value, line)?,
                "dw_kernel" => cfg.net.dw_kernel = parse_typed(key, value, line)?,
                "dropout_p" => cfg.net.dropout_p = parse_typed(key, value, line)?,
                "num_classes" => cfg.net.num_classes = parse_typed(key, value, line)?,
                "input_size" => cfg.net.input_size = parse_typed(key, value, line)?,
                "skip_connections" => cfg.net.skip_connections = parse_typed(key, value, line)?,
                "lr" => cfg.train.lr = parse_typed(key, value, line)?,
                "eta_min" => cfg.train.eta_min = parse_typed(key, value, line)?,
                "t_max" => cfg.train.t_max = parse_typed(key, value, line)?,
                "epochs" => cfg.train.epochs = parse_typed(key, value, line)?,
                "batch_size" => cfg.train.batch_size = parse_typed(key, value, line)?,
                "weight_decay" => cfg.train.weight_decay = parse_typed(key, value, line)?,
                "eval_every" => cfg.train.eval_every = parse_typed(key, value, line)?,
                "augment" => cfg.train.augment = parse_typed(key, value, line)?,
                "lambda1" => cfg.train.weights.lambda1 = parse_typed(key, value, line)?,
                "lambda2" => cfg.train.weights.lambda2 = parse_typed(key, value, line)?,
                "lambda3" => cfg.train.weights.lambda3 = parse_typed(key, value, line)?,
                "lambda4" => cfg.train.weights.lambda4 = parse_typed(key, value, line)?,
                "synth_samples" => cfg.train.synth_samples = parse_typed(key, value, line)?,
                "synth_val_samples" => {
                    cfg.train.synth_val_samples = parse_typed(key, value, line)?
                }
                other => {
                    return Err(Error::config(line, format!("unknown key `{other}`")));
                }
            }
            // Surface per-key constraint violations at the offending line.
            if key == "input_size" {
                cfg.net.validate().map_err(|e| Error::config(line, e.to_string()))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.schedule().validate()?;
        self.train.weights.validate()?;
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Numeric("epochs and batch_size must be >= 1".into()));
        }
        if self.train.eval_every == 0 {
            return Err(Error::Numeric("eval_every must be >= 1".into()));
        }
        if !(self.train.weight_decay.is_finite() && self.train.weight_decay >= 0.0) {
            return Err(Error::Numeric(format!(
                "weight_decay must be non-negative, got {}",
                self.train.weight_decay
            )));
        }
        if self.train.synth_samples == 0 {
            return Err(Error::Data("synth_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical serialization: fixed key order, shortest-roundtrip floats.
    /// `parse(to_canonical_text(c)) == c`.
    pub fn to_canonical_text(&self) -> String {
        let n = &self.net;
        let t = &self.train;
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        line("base_channels", n.base_channels.to_string());
        line("encoder_depths", depths_text(&n.encoder_depths));
        line("decoder_depths", depths_text(&n.decoder_depths));
        line("state_dim", n.state_dim.to_string());
        line("ssm_expand_ratio", n.ssm_expand_ratio.to_string());
        line("dw_kernel", n.dw_kernel.to_string());
        line("dropout_p", n.dropout_p.to_string());
        line("num_classes", n.num_classes.to_string());
        line("input_size", n.input_size.to_string());
        line("skip_connections", n.skip_connections.to_string());
        line("lr", t.lr.to_string());
        line("eta_min", t.eta_min.to_string());
        line("t_max", t.t_max.to_string());
        line("epochs", t.epochs.to_string());
        line("batch_size", t.batch_size.to_string());
        line("weight_decay", t.weight_decay.to_string());
        line("eval_every", t.eval_every.to_string());
        line("augment", t.augment.to_string());
        line("lambda1", t.weights.lambda1.to_string());
        line("lambda2", t.weights.lambda2.to_string());
        line("lambda3", t.weights.lambda3.to_string());
        line("lambda4", t.weights.lambda4.to_string());
        line("synth_samples", t.synth_samples.to_string());
        line("synth_val_samples", t.synth_val_samples.to_string());
        s
    }
}
