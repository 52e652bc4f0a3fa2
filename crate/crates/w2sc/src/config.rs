//! Flat `key = value` configuration with dotted keys. Unknown keys are
//! fatal; every value is validated against the consuming module's
//! preconditions up front.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("malformed config line {line}: `{text}`")]
    MalformedLine { line: usize, text: String },
    #[error("io error on {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub signal_sample_rate: u32,
    pub signal_n_fft: usize,
    pub signal_hop: usize,
    pub signal_f_min: f64,
    pub signal_f_max: f64,
    pub signal_silence_db: f64,
    pub signal_griffin_lim_iters: usize,
    pub losses_lambda_s: f64,
    pub losses_lambda_id: f64,
    pub losses_delta: f64,
    pub losses_eq1_literal: bool,
    pub train_batch_size: usize,
    pub train_total_generator_steps: u64,
    pub train_g_steps_per_d_step: u64,
    pub train_lr_g: f64,
    pub train_lr_d: f64,
    pub train_seed: u64,
    pub train_checkpoint_interval: u64,
    pub train_adam_beta1: f64,
    pub train_adam_beta2: f64,
    pub train_sn_power_iters: usize,
    pub eval_f0_floor: f64,
    pub eval_f0_ceil: f64,
    pub eval_f0_frame_ms: f64,
    pub eval_f0_hop_ms: f64,
    pub eval_voicing_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            signal_sample_rate: 16_000,
            signal_n_fft: 1024,
            signal_hop: 256,
            signal_f_min: 0.0,
            signal_f_max: 8_000.0,
            signal_silence_db: 40.0,
            signal_griffin_lim_iters: 60,
            losses_lambda_s: 10.0,
            losses_lambda_id: 5.0,
            losses_delta: 1.0,
            losses_eq1_literal: false,
            train_batch_size: 16,
            train_total_generator_steps: 5_000,
            train_g_steps_per_d_step: 3,
            train_lr_g: 2e-4,
            train_lr_d: 1e-4,
            train_seed: 1,
            train_checkpoint_interval: 1_000,
            train_adam_beta1: 0.5,
            train_adam_beta2: 0.999,
            train_sn_power_iters: 1,
            eval_f0_floor: 60.0,
            eval_f0_ceil: 400.0,
            eval_f0_frame_ms: 25.0,
            eval_f0_hop_ms: 10.0,
            eval_voicing_threshold: 0.45,
        }
    }
}

macro_rules! keys {
    ($self:ident, $on:ident) => {
        $on!("signal.sample_rate", signal_sample_rate, u32);
        $on!("signal.n_fft", signal_n_fft, usize);
        $on!("signal.hop", signal_hop, usize);
        $on!("signal.f_min", signal_f_min, f64);
        $on!("signal.f_max", signal_f_max, f64);
        $on!("signal.silence_db", signal_silence_db, f64);
        $on!("signal.griffin_lim_iters", signal_griffin_lim_iters, usize);
        $on!("losses.lambda_s", losses_lambda_s, f64);
        $on!("losses.lambda_id", losses_lambda_id, f64);
        $on!("losses.delta", losses_delta, f64);
        $on!("losses.eq1_literal", losses_eq1_literal, bool);
        $on!("train.batch_size", train_batch_size, usize);
        $on!("train.total_generator_steps", train_total_generator_steps, u64);
        $on!("train.g_steps_per_d_step", train_g_steps_per_d_step, u64);
        $on!("train.lr_g", train_lr_g, f64);
        $on!("train.lr_d", train_lr_d, f64);
        $on!("train.seed", train_seed, u64);
        $on!("train.checkpoint_interval", train_checkpoint_interval, u64);
        $on!("train.adam_beta1", train_adam_beta1, f64);
        $on!("train.adam_beta2", train_adam_beta2, f64);
        $on!("train.sn_power_iters", train_sn_power_iters, usize);
        $on!("eval.f0_floor", eval_f0_floor, f64);
        $on!("eval.f0_ceil", eval_f0_ceil, f64);
        $on!("eval.f0_frame_ms", eval_f0_frame_ms, f64);
        $on!("eval.f0_hop_ms", eval_f0_hop_ms, f64);
        $on!("eval.voicing_threshold", eval_voicing_threshold, f64);
    };
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let invalid = |reason: String| ConfigError::InvalidValue {
            key: key.to_string(),
            reason,
        };
        macro_rules! on {
            ($name:literal, $field:ident, bool) => {
                if key == $name {
                    self.$field = match value {
                        "true" | "1" => true,
                        "false" | "0" => false,
                        other => return Err(invalid(format!("expected bool, got `{other}`"))),
                    };
                    return Ok(());
                }
            };
            ($name:literal, $field:ident, $ty:ty) => {
                if key == $name {
                    self.$field = value
                        .parse::<$ty>()
                        .map_err(|e| invalid(format!("{e}")))?;
                    return Ok(());
                }
            };
        }
        keys!(self, on);
        Err(ConfigError::UnknownKey(key.to_string()))
    }

    /// Every tunable as `(dotted key, numeric value)`, booleans as 0/1.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        macro_rules! on {
            ($name:literal, $field:ident, bool) => {
                out.push(($name, if self.$field { 1.0 } else { 0.0 }));
            };
            ($name:literal, $field:ident, $ty:ty) => {
                out.push(($name, self.$field as f64));
            };
        }
        keys!(self, on);
        out
    }

    /// Restore a field from its numeric echo.
    pub fn set_numeric(&mut self, key: &str, value: f64) -> Result<(), ConfigError> {
        macro_rules! on {
            ($name:literal, $field:ident, bool) => {
                if key == $name {
                    self.$field = value != 0.0;
                    return Ok(());
                }
            };
            ($name:literal, $field:ident, $ty:ty) => {
                if key == $name {
                    self.$field = value as $ty;
                    return Ok(());
                }
            };
        }
        keys!(self, on);
        Err(ConfigError::UnknownKey(key.to_string()))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::MalformedLine {
                    line: i + 1,
                    text: line.to_string(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! on {
            ($name:literal, $field:ident, $ty:tt) => {
                writeln!(out, "{} = {}", $name, self.$field).unwrap();
            };
        }
        keys!(self, on);
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |key: &str, reason: &str| {
            Err(ConfigError::InvalidValue {
                key: key.to_string(),
                reason: reason.to_string(),
            })
        };
        if self.signal_sample_rate == 0 {
            return fail("signal.sample_rate", "must be positive");
        }
        if !self.signal_n_fft.is_power_of_two() {
            return fail("signal.n_fft", "must be a power of two");
        }
        if self.signal_hop == 0 || self.signal_hop > self.signal_n_fft {
            return fail("signal.hop", "must be in (0, n_fft]");
        }
        if !(self.signal_f_min >= 0.0 && self.signal_f_max > self.signal_f_min) {
            return fail("signal.f_max", "need 0 <= f_min < f_max");
        }
        if self.signal_f_max > self.signal_sample_rate as f64 / 2.0 {
            return fail("signal.f_max", "exceeds Nyquist");
        }
        if self.signal_griffin_lim_iters == 0 {
            return fail("signal.griffin_lim_iters", "must be >= 1");
        }
        for (key, v) in [
            ("losses.lambda_s", self.losses_lambda_s),
            ("losses.lambda_id", self.losses_lambda_id),
            ("losses.delta", self.losses_delta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(key, "must be finite and >= 0");
            }
        }
        if self.train_batch_size < 2 {
            return fail("train.batch_size", "need >= 2 to form segment pairs");
        }
        for (key, lr) in [("train.lr_g", self.train_lr_g), ("train.lr_d", self.train_lr_d)] {
            if !(lr >= 0.0 && lr < 1.0) {
                return fail(key, "must lie in [0, 1)");
            }
        }
        if self.train_g_steps_per_d_step < 1 {
            return fail("train.g_steps_per_d_step", "must be >= 1");
        }
        if self.train_sn_power_iters == 0 {
            return fail("train.sn_power_iters", "must be >= 1");
        }
        if !(self.eval_f0_floor > 0.0 && self.eval_f0_ceil > self.eval_f0_floor) {
            return fail("eval.f0_ceil", "need 0 < floor < ceil");
        }
        if self.eval_f0_ceil > self.signal_sample_rate as f64 / 2.0 {
            return fail("eval.f0_ceil", "exceeds Nyquist");
        }
        if !(self.eval_f0_frame_ms > 0.0 && self.eval_f0_hop_ms > 0.0) {
            return fail("eval.f0_frame_ms", "frame and hop must be positive");
        }
        Ok(())
    }
}
