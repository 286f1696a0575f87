use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, DEFAULT_GAMMA, DEFAULT_LAMBDA, DEFAULT_SQUINT_LAMBDA};
use crate::model::parse_kv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Weighted cross-entropy only.
    Baseline,
    /// Cross-entropy plus the entropy hinge penalty over related pairs.
    Consistency,
    /// Cross-entropy plus attention-map matching over related pairs.
    Squint,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Consistency => "consistency",
            Method::Squint => "squint",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "consistency" => Ok(Method::Consistency),
            "squint" => Ok(Method::Squint),
            other => Err(Error::Usage(format!("unknown method {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub method: Method,
    pub lambda: f64,
    pub gamma: f64,
    pub squint_lambda: f64,
    pub stop_grad_main: bool,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub pair_quota: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("run"),
            method: Method::Consistency,
            lambda: DEFAULT_LAMBDA,
            gamma: DEFAULT_GAMMA,
            squint_lambda: DEFAULT_SQUINT_LAMBDA,
            stop_grad_main: false,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            pair_quota: 16,
            max_epochs: 100,
            patience: 20,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "method" => self.method = value.parse()?,
            "lambda" => self.lambda = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "squint_lambda" => self.squint_lambda = parse(key, value)?,
            "stop_grad_main" => self.stop_grad_main = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "pair_quota" => self.pair_quota = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Defaults overridden by every key in `text`.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(out, "{k} = {v}").expect("write to string");
        kv("data_dir", &self.data_dir.display());
        kv("output_dir", &self.output_dir.display());
        kv("method", &self.method.as_str());
        kv("lambda", &self.lambda);
        kv("gamma", &self.gamma);
        kv("squint_lambda", &self.squint_lambda);
        kv("stop_grad_main", &self.stop_grad_main);
        kv("learning_rate", &self.learning_rate);
        kv("beta1", &self.beta1);
        kv("beta2", &self.beta2);
        kv("adam_eps", &self.adam_eps);
        kv("batch_size", &self.batch_size);
        kv("pair_quota", &self.pair_quota);
        kv("max_epochs", &self.max_epochs);
        kv("patience", &self.patience);
        kv("seed", &self.seed);
        out
    }

    /// SHA-256 over the settings that influence the trained weights
    /// (directories excluded).
    pub fn digest(&self) -> String {
        let text: String = self
            .to_kv()
            .lines()
            .filter(|l| !l.starts_with("data_dir") && !l.starts_with("output_dir"))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.batch_size < 2 * self.pair_quota {
            return Err(Error::Usage(format!(
                "batch_size {} cannot hold pair_quota {} pairs",
                self.batch_size, self.pair_quota
            )));
        }
        if self.max_epochs == 0 || self.patience > self.max_epochs {
            return Err(Error::Config("need 0 < max_epochs and patience <= max_epochs".into()));
        }
        if !(self.learning_rate > 0.0 && self.adam_eps > 0.0) {
            return Err(Error::Config("learning_rate and adam_eps must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Loss weights implied by the method: only the method's own term is on.
    pub fn loss_config(&self) -> LossConfig {
        let (lambda, squint_lambda) = match self.method {
            Method::Baseline => (0.0, 0.0),
            Method::Consistency => (self.lambda, 0.0),
            Method::Squint => (0.0, self.squint_lambda),
        };
        LossConfig {
            lambda,
            gamma: self.gamma,
            squint_lambda,
            stop_grad_main: self.stop_grad_main,
            hinge_grad_scale: 1.0,
        }
    }
}
