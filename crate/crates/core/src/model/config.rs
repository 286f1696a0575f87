use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Concatenation,
}

/// Shape of the VQA network. Full-scale reference values: 448x448 RGB input
/// into a ResNet-101 backbone (2048 features), word_dim 300, an LSTM with
/// question_dim 1024, classifier_hidden 1024.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub conv_stages: Vec<ConvStage>,
    pub feature_dim: usize,
    pub token_vocab_size: usize,
    pub max_question_len: usize,
    pub word_dim: usize,
    pub question_dim: usize,
    pub glimpses: usize,
    pub dropout_rate: f64,
    pub fusion: Fusion,
    pub classifier_hidden: usize,
    pub answer_count: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            conv_stages: vec![
                ConvStage { filters: 16, kernel: 3, pool: 4 },
                ConvStage { filters: 32, kernel: 3, pool: 2 },
                ConvStage { filters: 64, kernel: 3, pool: 1 },
            ],
            feature_dim: 64,
            token_vocab_size: 17,
            max_question_len: 8,
            word_dim: 32,
            question_dim: 64,
            glimpses: 2,
            dropout_rate: 0.25,
            fusion: Fusion::Concatenation,
            classifier_hidden: 64,
            answer_count: 5,
        }
    }
}

impl ModelConfig {
    /// 16x16 input, C = 8, vocabulary 16: small enough for exhaustive
    /// finite-difference checks.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            conv_stages: vec![
                ConvStage { filters: 4, kernel: 3, pool: 2 },
                ConvStage { filters: 8, kernel: 3, pool: 2 },
            ],
            feature_dim: 8,
            token_vocab_size: 16,
            max_question_len: 8,
            word_dim: 6,
            question_dim: 8,
            glimpses: 2,
            dropout_rate: 0.25,
            fusion: Fusion::Concatenation,
            classifier_hidden: 8,
            answer_count: 5,
        }
    }

    /// Side length of the final feature map.
    pub fn feature_side(&self) -> usize {
        self.conv_stages.iter().fold(self.image_size, |s, st| s / st.pool.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.glimpses == 0 {
            return bad("glimpses must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        let dims = [
            self.image_size,
            self.channels,
            self.feature_dim,
            self.token_vocab_size,
            self.max_question_len,
            self.word_dim,
            self.question_dim,
            self.classifier_hidden,
            self.answer_count,
        ];
        if dims.contains(&0) || self.conv_stages.is_empty() {
            return bad("all dimensions must be positive".into());
        }
        if self.conv_stages.iter().any(|s| s.filters == 0 || s.kernel % 2 == 0 || s.pool == 0) {
            return bad("conv stages need positive filters, odd kernels and positive pooling".into());
        }
        if self.conv_stages.last().map(|s| s.filters) != Some(self.feature_dim) {
            return bad("feature_dim must equal the filters of the last conv stage".into());
        }
        if self.feature_side() < 2 {
            return bad("feature map must be at least 2x2".into());
        }
        Ok(())
    }

    /// Canonical `key = value` text, one entry per line.
    pub fn to_kv(&self) -> String {
        let stages = self
            .conv_stages
            .iter()
            .map(|s| format!("{}x{}x{}", s.filters, s.kernel, s.pool))
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("write to string");
        kv("image_size", self.image_size.to_string());
        kv("channels", self.channels.to_string());
        kv("conv_stages", stages);
        kv("feature_dim", self.feature_dim.to_string());
        kv("token_vocab_size", self.token_vocab_size.to_string());
        kv("max_question_len", self.max_question_len.to_string());
        kv("word_dim", self.word_dim.to_string());
        kv("question_dim", self.question_dim.to_string());
        kv("glimpses", self.glimpses.to_string());
        kv("dropout_rate", self.dropout_rate.to_string());
        kv("fusion", "concatenation".into());
        kv("classifier_hidden", self.classifier_hidden.to_string());
        kv("answer_count", self.answer_count.to_string());
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::Config(format!("model config is missing {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("model config {k} is not an integer")))
        };
        let conv_stages = get("conv_stages")?
            .split(',')
            .map(|s| {
                let parts: Vec<usize> = s
                    .trim()
                    .split('x')
                    .map(|p| p.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("bad conv stage {s}")))?;
                match parts[..] {
                    [filters, kernel, pool] => Ok(ConvStage { filters, kernel, pool }),
                    _ => Err(Error::Config(format!("bad conv stage {s}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if get("fusion")?.as_str() != "concatenation" {
            return Err(Error::Config("only concatenation fusion is supported".into()));
        }
        let cfg = Self {
            image_size: num("image_size")?,
            channels: num("channels")?,
            conv_stages,
            feature_dim: num("feature_dim")?,
            token_vocab_size: num("token_vocab_size")?,
            max_question_len: num("max_question_len")?,
            word_dim: num("word_dim")?,
            question_dim: num("question_dim")?,
            glimpses: num("glimpses")?,
            dropout_rate: get("dropout_rate")?
                .parse()
                .map_err(|_| Error::Config("dropout_rate is not a number".into()))?,
            fusion: Fusion::Concatenation,
            classifier_hidden: num("classifier_hidden")?,
            answer_count: num("answer_count")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical key-value text.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().as_bytes()))
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}
