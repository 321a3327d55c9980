//! Run configuration: a flat `key=value` text format.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every key
//! has a default, so an empty file (or no file) is a valid configuration.
//! Unknown and duplicate keys are hard errors — silent typos in experiment
//! configs are how irreproducible results happen.
//!
//! [`RunConfig::resolved`] renders the fully-resolved configuration back as
//! sorted `key=value` lines. That text is embedded verbatim in every output
//! file's metadata section and round-trips through [`parse`] to an equal
//! config.

use crate::error::{Error, Result};
use crate::gates::Stretch;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    Transformer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // model
    pub model: ModelKind,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub depth: usize,
    pub width: usize,
    // task suite
    pub suite_seed: u64,
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub train_examples: usize,
    pub val_examples: usize,
    pub anchors_per_class: usize,
    pub anchor_prob: f64,
    // training
    pub l: f64,
    pub r: f64,
    pub lambda: f64,
    pub alpha_init: f64,
    pub w_init: f64,
    pub sparsity: f64,
    pub structured: bool,
    pub epochs_train: usize,
    pub epochs_finetune: usize,
    pub pretrain_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    // sweep
    pub sweep_sparsities: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Transformer,
            layers: 2,
            heads: 2,
            d_model: 32,
            d_ff: 64,
            depth: 2,
            width: 64,
            suite_seed: 7,
            vocab: 24,
            seq_len: 12,
            classes: 8,
            train_examples: 512,
            val_examples: 256,
            anchors_per_class: 3,
            anchor_prob: 0.55,
            l: -1.5,
            r: 1.5,
            lambda: 1.25e-7,
            alpha_init: 5.0,
            w_init: 0.0,
            sparsity: 0.005,
            structured: true,
            epochs_train: 12,
            epochs_finetune: 8,
            pretrain_epochs: 24,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 1,
            sweep_sparsities: vec![0.001, 0.0025, 0.005, 0.01],
            sweep_seeds: vec![1, 2, 3],
        }
    }
}

impl RunConfig {
    pub fn stretch(&self) -> Stretch {
        Stretch::new(self.l, self.r).expect("validated at parse time")
    }

    /// All keys as sorted `key=value` lines. Floats use Rust's shortest
    /// round-trip formatting, so `parse(resolved(c)) == c`.
    pub fn resolved(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            (
                "model",
                match self.model {
                    ModelKind::Mlp => "mlp".into(),
                    ModelKind::Transformer => "transformer".into(),
                },
            ),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("depth", self.depth.to_string()),
            ("width", self.width.to_string()),
            ("suite_seed", self.suite_seed.to_string()),
            ("vocab", self.vocab.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("classes", self.classes.to_string()),
            ("train_examples", self.train_examples.to_string()),
            ("val_examples", self.val_examples.to_string()),
            ("anchors_per_class", self.anchors_per_class.to_string()),
            ("anchor_prob", self.anchor_prob.to_string()),
            ("l", self.l.to_string()),
            ("r", self.r.to_string()),
            ("lambda", self.lambda.to_string()),
            ("alpha_init", self.alpha_init.to_string()),
            ("w_init", self.w_init.to_string()),
            ("sparsity", self.sparsity.to_string()),
            ("structured", self.structured.to_string()),
            ("epochs_train", self.epochs_train.to_string()),
            ("epochs_finetune", self.epochs_finetune.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            (
                "sweep_sparsities",
                join_list(&self.sweep_sparsities),
            ),
            ("sweep_seeds", join_list(&self.sweep_seeds)),
        ];
        pairs.sort_by_key(|&(k, _)| k);
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k}={v}").expect("writing to String cannot fail");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| -> Result<()> {
            Err(Error::BadValue {
                key: key.into(),
                reason,
            })
        };
        if self.layers == 0 {
            return bad("layers", "must be at least 1".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("heads", format!("must divide d_model = {}", self.d_model));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.depth == 0 || self.width == 0 {
            return bad("d_model", "model dimensions must be positive".into());
        }
        if self.vocab < 2 {
            return bad("vocab", "need at least 2 tokens".into());
        }
        if self.classes < 2 {
            return bad("classes", "need at least 2 classes".into());
        }
        if self.seq_len == 0 {
            return bad("seq_len", "must be at least 1".into());
        }
        if self.anchors_per_class == 0 {
            return bad("anchors_per_class", "must be at least 1".into());
        }
        if self.anchors_per_class * self.classes > self.vocab {
            return bad(
                "anchors_per_class",
                format!(
                    "{} anchors x {} classes exceeds vocab {}",
                    self.anchors_per_class, self.classes, self.vocab
                ),
            );
        }
        if !(self.anchor_prob > 0.0 && self.anchor_prob < 1.0) {
            return bad("anchor_prob", "must lie strictly inside (0, 1)".into());
        }
        if self.train_examples == 0 || self.val_examples == 0 {
            return bad("train_examples", "example counts must be positive".into());
        }
        if Stretch::new(self.l, self.r).is_err() {
            return bad("l", format!("need l < 0 and r > 1, got l={}, r={}", self.l, self.r));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be finite and nonnegative".into());
        }
        if !self.alpha_init.is_finite() || !self.w_init.is_finite() {
            return bad("alpha_init", "initializations must be finite".into());
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return bad("sparsity", "target rate must lie in (0, 1]".into());
        }
        if self.epochs_train == 0 {
            return bad("epochs_train", "must be at least 1".into());
        }
        if self.pretrain_epochs == 0 {
            return bad("pretrain_epochs", "must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be finite and positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.sweep_sparsities.is_empty()
            || self
                .sweep_sparsities
                .iter()
                .any(|&t| !(t > 0.0 && t <= 1.0))
        {
            return bad(
                "sweep_sparsities",
                "need a nonempty list of rates in (0, 1]".into(),
            );
        }
        if self.sweep_seeds.is_empty() {
            return bad("sweep_seeds", "need at least one seed".into());
        }
        Ok(())
    }
}

fn join_list<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::BadValue {
        key: key.into(),
        reason: format!("cannot parse `{value}`"),
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

/// Parses config text over the defaults and validates the result.
pub fn parse(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: Vec<String> = Vec::new();
    for raw in text.lines() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::BadValue {
            key: line.into(),
            reason: "expected key=value".into(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if seen.iter().any(|k| k == key) {
            return Err(Error::DuplicateKey { key: key.into() });
        }
        seen.push(key.into());
        match key {
            "model" => {
                cfg.model = match value {
                    "mlp" => ModelKind::Mlp,
                    "transformer" => ModelKind::Transformer,
                    other => {
                        return Err(Error::BadValue {
                            key: key.into(),
                            reason: format!("`{other}` is not `mlp` or `transformer`"),
                        })
                    }
                }
            }
            "layers" => cfg.layers = parse_num(key, value)?,
            "heads" => cfg.heads = parse_num(key, value)?,
            "d_model" => cfg.d_model = parse_num(key, value)?,
            "d_ff" => cfg.d_ff = parse_num(key, value)?,
            "depth" => cfg.depth = parse_num(key, value)?,
            "width" => cfg.width = parse_num(key, value)?,
            "suite_seed" => cfg.suite_seed = parse_num(key, value)?,
            "vocab" => cfg.vocab = parse_num(key, value)?,
            "seq_len" => cfg.seq_len = parse_num(key, value)?,
            "classes" => cfg.classes = parse_num(key, value)?,
            "train_examples" => cfg.train_examples = parse_num(key, value)?,
            "val_examples" => cfg.val_examples = parse_num(key, value)?,
            "anchors_per_class" => cfg.anchors_per_class = parse_num(key, value)?,
            "anchor_prob" => cfg.anchor_prob = parse_num(key, value)?,
            "l" => cfg.l = parse_num(key, value)?,
            "r" => cfg.r = parse_num(key, value)?,
            "lambda" => cfg.lambda = parse_num(key, value)?,
            "alpha_init" => cfg.alpha_init = parse_num(key, value)?,
            "w_init" => cfg.w_init = parse_num(key, value)?,
            "sparsity" => cfg.sparsity = parse_num(key, value)?,
            "structured" => cfg.structured = parse_num(key, value)?,
            "epochs_train" => cfg.epochs_train = parse_num(key, value)?,
            "epochs_finetune" => cfg.epochs_finetune = parse_num(key, value)?,
            "pretrain_epochs" => cfg.pretrain_epochs = parse_num(key, value)?,
            "learning_rate" => cfg.learning_rate = parse_num(key, value)?,
            "batch_size" => cfg.batch_size = parse_num(key, value)?,
            "seed" => cfg.seed = parse_num(key, value)?,
            "sweep_sparsities" => cfg.sweep_sparsities = parse_list(key, value)?,
            "sweep_seeds" => cfg.sweep_seeds = parse_list(key, value)?,
            other => {
                return Err(Error::UnknownKey { key: other.into() });
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<RunConfig> {
    parse(&std::fs::read_to_string(path)?)
}

// ─── tests ───
