//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::{NoiseConfig, NoiseMode, SkewMode, Variant, VariantConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_name: String,
    pub seed: u64,

    pub num_train: usize,
    pub num_unknown: usize,
    /// Keep only the first N entries of each name list (0 = all).
    pub name_pool_limit: usize,
    /// Directory with custom pools; empty means the bundled pools.
    pub data_dir: Option<PathBuf>,

    pub variant: Variant,
    pub noise_p: f64,
    pub noise_mode: NoiseMode,
    pub noise_per_kind: bool,
    pub skew_mode: SkewMode,
    pub zipf_alpha: f64,
    pub seq_len: usize,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub context_len: usize,
    pub zero_head: bool,

    pub max_steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    pub eval_every: u64,
    pub checkpoint_every: u64,

    pub eval_k: usize,
    pub eval_resample: bool,
    /// Fraction of entities in the top / bottom frequency slices.
    pub slice_frac: f64,
    pub probe_k: usize,
    pub probe_every: u64,
    pub rank_bins: usize,
    pub rank_bin_entities: usize,
    pub emergence_threshold: f64,
    /// Documents written to the audit dump by `gen` (0 = none).
    pub dump_docs: usize,
}

impl Default for RunConfig {
    /// Full-scale defaults (8 layers, width 512, 16k steps of 128 x 512).
    fn default() -> Self {
        Self {
            run_name: "run".into(),
            seed: 0,
            num_train: 50_000,
            num_unknown: 50_000,
            name_pool_limit: 0,
            data_dir: None,
            variant: Variant::RepeatedMix,
            noise_p: 0.0,
            noise_mode: NoiseMode::PerOccurrence,
            noise_per_kind: false,
            skew_mode: SkewMode::Uniform,
            zipf_alpha: 1.0,
            seq_len: 512,
            d_model: 512,
            n_layers: 8,
            n_heads: 8,
            d_ffn: 2048,
            context_len: 512,
            zero_head: false,
            max_steps: 16_000,
            batch_size: 128,
            base_lr: 4e-4,
            weight_decay: 0.1,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            eval_every: 250,
            checkpoint_every: 1000,
            eval_k: 200,
            eval_resample: false,
            slice_frac: 0.1,
            probe_k: 200,
            probe_every: 0,
            rank_bins: 10,
            rank_bin_entities: 1000,
            emergence_threshold: 0.8,
            dump_docs: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {raw:?} for {key}"))),
    }
}

/// Splits the text into key/value pairs, rejecting malformed or repeated lines.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: key {k} set twice", i + 1)));
        }
    }
    Ok(out)
}

macro_rules! fields {
    ($mac:ident) => {
        $mac! {
            run_name: str,
            seed: num,
            num_train: num,
            num_unknown: num,
            name_pool_limit: num,
            data_dir: path,
            variant: parsed,
            noise_p: num,
            noise_mode: parsed,
            noise_per_kind: bool,
            skew_mode: parsed,
            zipf_alpha: num,
            seq_len: num,
            d_model: num,
            n_layers: num,
            n_heads: num,
            d_ffn: num,
            context_len: num,
            zero_head: bool,
            max_steps: num,
            batch_size: num,
            base_lr: num,
            weight_decay: num,
            warmup_steps: num,
            beta1: num,
            beta2: num,
            adam_eps: num,
            grad_clip: num,
            eval_every: num,
            checkpoint_every: num,
            eval_k: num,
            eval_resample: bool,
            slice_frac: num,
            probe_k: num,
            probe_every: num,
            rank_bins: num,
            rank_bin_entities: num,
            emergence_threshold: num,
            dump_docs: num,
        }
    };
}

macro_rules! apply_field {
    ($cfg:ident, $map:ident, $key:ident, str) => {
        if let Some(v) = $map.remove(stringify!($key)) {
            $cfg.$key = v;
        }
    };
    ($cfg:ident, $map:ident, $key:ident, num) => {
        if let Some(v) = $map.remove(stringify!($key)) {
            $cfg.$key = parse_value(stringify!($key), &v)?;
        }
    };
    ($cfg:ident, $map:ident, $key:ident, parsed) => {
        if let Some(v) = $map.remove(stringify!($key)) {
            $cfg.$key = v.parse()?;
        }
    };
    ($cfg:ident, $map:ident, $key:ident, bool) => {
        if let Some(v) = $map.remove(stringify!($key)) {
            $cfg.$key = parse_bool(stringify!($key), &v)?;
        }
    };
    ($cfg:ident, $map:ident, $key:ident, path) => {
        if let Some(v) = $map.remove(stringify!($key)) {
            $cfg.$key = if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        }
    };
}

macro_rules! render_field {
    ($cfg:ident, $out:ident, $key:ident, path) => {
        $out.push((
            stringify!($key),
            $cfg.$key.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        ));
    };
    ($cfg:ident, $out:ident, $key:ident, $kind:ident) => {
        $out.push((stringify!($key), $cfg.$key.to_string()));
    };
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        macro_rules! names {
            ($($key:ident: $kind:ident,)*) => { vec![$(stringify!($key)),*] };
        }
        fields!(names)
    }

    /// Parses a config document. Keys not set keep their defaults; unknown
    /// keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = parse_pairs(text)?;
        let mut cfg = RunConfig::default();
        macro_rules! apply {
            ($($key:ident: $kind:ident,)*) => { $( apply_field!(cfg, map, $key, $kind); )* };
        }
        fields!(apply);
        if !map.is_empty() {
            return Err(Error::UnknownConfigKeys(map.into_keys().collect()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its resolved value, in canonical order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let cfg = self;
        macro_rules! render {
            ($($key:ident: $kind:ident,)*) => { $( render_field!(cfg, out, $key, $kind); )* };
        }
        fields!(render);
        out
    }

    /// Canonical text form; parsing it yields the same config.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_train == 0 || self.num_unknown == 0 {
            return bad("num_train and num_unknown must be positive".into());
        }
        if self.num_unknown < 3 {
            return bad("num_unknown must be at least 3 (in-context evaluation uses two distractors)".into());
        }
        if !(0.0..=1.0).contains(&self.noise_p) {
            return bad(format!("noise_p {} outside [0, 1]", self.noise_p));
        }
        if !(self.zipf_alpha >= 0.0) {
            return bad("zipf_alpha must be >= 0".into());
        }
        if self.context_len < self.seq_len {
            return bad(format!(
                "context_len {} must be at least seq_len {}",
                self.context_len, self.seq_len
            ));
        }
        self.model_config(1).validate()?;
        if self.max_steps == 0 || self.batch_size == 0 || self.seq_len < 2 {
            return bad("max_steps, batch_size must be positive and seq_len >= 2".into());
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 {
            return bad("base_lr must be positive and weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if self.grad_clip < 0.0 {
            return bad("grad_clip must be >= 0".into());
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("eval_every and checkpoint_every must be positive".into());
        }
        if self.checkpoint_every % self.eval_every != 0 {
            return bad(format!(
                "eval_every ({}) must divide checkpoint_every ({})",
                self.eval_every, self.checkpoint_every
            ));
        }
        if self.eval_k == 0 || self.eval_k > self.num_train || self.eval_k > self.num_unknown {
            return bad(format!(
                "eval_k {} must be in 1..=min(num_train, num_unknown)",
                self.eval_k
            ));
        }
        if !(self.slice_frac > 0.0 && self.slice_frac <= 1.0) {
            return bad("slice_frac must lie in (0, 1]".into());
        }
        if self.rank_bins == 0 {
            return bad("rank_bins must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.emergence_threshold) {
            return bad("emergence_threshold must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            context_len: self.context_len,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
        }
    }

    pub fn variant_config(&self) -> VariantConfig {
        VariantConfig::new(self.variant)
    }

    pub fn noise_config(&self) -> NoiseConfig {
        NoiseConfig {
            p: self.noise_p,
            mode: self.noise_mode,
            per_kind: self.noise_per_kind,
        }
    }

    /// Evaluation snapshot steps: 0, every `eval_every`, and the last step.
    pub fn eval_steps(&self) -> Vec<u64> {
        let mut v: Vec<u64> = (0..=self.max_steps).step_by(self.eval_every as usize).collect();
        if *v.last().unwrap() != self.max_steps {
            v.push(self.max_steps);
        }
        v
    }
}

impl std::fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::fmt::Display for SkewMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
