//! Run configuration as flat `key = value` text.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! or repeated keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::inference::{AggregationScore, GenerateConfig, Mode};
use crate::model::ModelConfig;
use crate::training::{PretrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub min_freq: usize,
    pub segmenter: Option<PathBuf>,

    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_source_positions: usize,
    pub max_target_positions: usize,
    pub init_std: f64,
    pub transition_dim: usize,
    pub transition_init_std: f64,
    pub state_end: bool,
    pub start_link: bool,
    pub max_group_size: usize,

    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,

    pub epochs: usize,
    pub patience: usize,
    pub lr_model: f64,
    pub lr_transition: f64,
    pub batch_size: usize,
    /// `0` disables clipping.
    pub clip_norm: f64,
    pub use_hard_alignment: bool,
    pub dev_fraction: f64,

    pub k: usize,
    pub n: usize,
    pub beam_width: usize,
    pub max_fact_len: usize,
    pub mode: Mode,
    pub aggregation_score: AggregationScore,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let p = PretrainConfig::default();
        let t = TrainConfig::default();
        let g = GenerateConfig::default();
        RunConfig {
            seed: 1,
            min_freq: 1,
            segmenter: None,
            d_model: m.d_model,
            heads: m.heads,
            layers: m.layers,
            d_ff: m.d_ff,
            max_source_positions: m.max_source_positions,
            max_target_positions: m.max_target_positions,
            init_std: m.init_std,
            transition_dim: m.transition_dim,
            transition_init_std: m.transition_init_std,
            state_end: m.state_end,
            start_link: m.start_link,
            max_group_size: m.max_group_size,
            pretrain_epochs: p.epochs,
            pretrain_lr: p.lr,
            pretrain_batch_size: p.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            lr_model: t.lr_model,
            lr_transition: t.lr_transition,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm.unwrap_or(0.0),
            use_hard_alignment: t.use_hard_alignment,
            dev_fraction: 0.1,
            k: g.k,
            n: g.n,
            beam_width: g.beam_width,
            max_fact_len: g.max_fact_len,
            mode: g.mode,
            aggregation_score: g.aggregation_score,
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

impl FromStr for AggregationScore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boundary" => Ok(AggregationScore::Boundary),
            "boundary_and_within" | "boundary-and-within" => {
                Ok(AggregationScore::BoundaryAndWithin)
            }
            _ => Err(Error::Config(format!("unknown aggregation score `{s}`"))),
        }
    }
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Full => "full",
        Mode::NoOrdering => "no-ordering",
        Mode::NoAggregation => "no-aggregation",
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: repeated key `{k}`", i + 1)));
            }
            cfg.set(k, v).map_err(|e| {
                Error::Config(format!(
                    "line {}: {}",
                    i + 1,
                    e.to_string().trim_start_matches("config: ")
                ))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = value(key, v)?,
            "min_freq" => self.min_freq = value(key, v)?,
            "segmenter" => self.segmenter = Some(PathBuf::from(v)),
            "d_model" => self.d_model = value(key, v)?,
            "heads" => self.heads = value(key, v)?,
            "layers" => self.layers = value(key, v)?,
            "d_ff" => self.d_ff = value(key, v)?,
            "max_source_positions" => self.max_source_positions = value(key, v)?,
            "max_target_positions" => self.max_target_positions = value(key, v)?,
            "init_std" => self.init_std = value(key, v)?,
            "transition_dim" => self.transition_dim = value(key, v)?,
            "transition_init_std" => self.transition_init_std = value(key, v)?,
            "state_end" => self.state_end = value(key, v)?,
            "start_link" => self.start_link = value(key, v)?,
            "max_group_size" => self.max_group_size = value(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = value(key, v)?,
            "pretrain_lr" => self.pretrain_lr = value(key, v)?,
            "pretrain_batch_size" => self.pretrain_batch_size = value(key, v)?,
            "epochs" => self.epochs = value(key, v)?,
            "patience" => self.patience = value(key, v)?,
            "lr_model" => self.lr_model = value(key, v)?,
            "lr_transition" => self.lr_transition = value(key, v)?,
            "batch_size" => self.batch_size = value(key, v)?,
            "clip_norm" => self.clip_norm = value(key, v)?,
            "use_hard_alignment" => self.use_hard_alignment = value(key, v)?,
            "dev_fraction" => self.dev_fraction = value(key, v)?,
            "k" => self.k = value(key, v)?,
            "n" => self.n = value(key, v)?,
            "beam_width" => self.beam_width = value(key, v)?,
            "max_fact_len" => self.max_fact_len = value(key, v)?,
            "mode" => self.mode = v.parse()?,
            "aggregation_score" => self.aggregation_score = v.parse()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("min_freq", self.min_freq),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("d_ff", self.d_ff),
            ("max_source_positions", self.max_source_positions),
            ("max_target_positions", self.max_target_positions),
            ("transition_dim", self.transition_dim),
            ("max_group_size", self.max_group_size),
            ("pretrain_batch_size", self.pretrain_batch_size),
            ("epochs", self.epochs),
            ("patience", self.patience),
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("n", self.n),
            ("beam_width", self.beam_width),
            ("max_fact_len", self.max_fact_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be at least 1")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(
                "`d_model` must be divisible by `heads`".into(),
            ));
        }
        let rates = [
            ("init_std", self.init_std),
            ("transition_init_std", self.transition_init_std),
            ("pretrain_lr", self.pretrain_lr),
            ("lr_model", self.lr_model),
            ("lr_transition", self.lr_transition),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "`{name}` must be finite and non-negative"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config("`dev_fraction` must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in the format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("seed", self.seed.to_string());
        kv("min_freq", self.min_freq.to_string());
        if let Some(p) = &self.segmenter {
            kv("segmenter", p.display().to_string());
        }
        kv("d_model", self.d_model.to_string());
        kv("heads", self.heads.to_string());
        kv("layers", self.layers.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv(
            "max_source_positions",
            self.max_source_positions.to_string(),
        );
        kv(
            "max_target_positions",
            self.max_target_positions.to_string(),
        );
        kv("init_std", self.init_std.to_string());
        kv("transition_dim", self.transition_dim.to_string());
        kv("transition_init_std", self.transition_init_std.to_string());
        kv("state_end", self.state_end.to_string());
        kv("start_link", self.start_link.to_string());
        kv("max_group_size", self.max_group_size.to_string());
        kv("pretrain_epochs", self.pretrain_epochs.to_string());
        kv("pretrain_lr", self.pretrain_lr.to_string());
        kv("pretrain_batch_size", self.pretrain_batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("lr_model", self.lr_model.to_string());
        kv("lr_transition", self.lr_transition.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("use_hard_alignment", self.use_hard_alignment.to_string());
        kv("dev_fraction", self.dev_fraction.to_string());
        kv("k", self.k.to_string());
        kv("n", self.n.to_string());
        kv("beam_width", self.beam_width.to_string());
        kv("max_fact_len", self.max_fact_len.to_string());
        kv("mode", mode_name(self.mode).into());
        kv(
            "aggregation_score",
            match self.aggregation_score {
                AggregationScore::Boundary => "boundary",
                AggregationScore::BoundaryAndWithin => "boundary_and_within",
            }
            .into(),
        );
        s
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            d_ff: self.d_ff,
            max_source_positions: self.max_source_positions,
            max_target_positions: self.max_target_positions,
            init_std: self.init_std,
            transition_dim: self.transition_dim,
            transition_init_std: self.transition_init_std,
            state_end: self.state_end,
            start_link: self.start_link,
            max_group_size: self.max_group_size,
        }
    }

    fn clip(&self) -> Option<f64> {
        (self.clip_norm > 0.0).then_some(self.clip_norm)
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch_size: self.pretrain_batch_size,
            clip_norm: self.clip(),
            seed: self.seed,
        }
    }

    pub fn train(&self, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            patience: self.patience,
            lr_model: self.lr_model,
            lr_transition: self.lr_transition,
            batch_size: self.batch_size,
            clip_norm: self.clip(),
            seed: self.seed,
            max_group_size: self.max_group_size,
            use_hard_alignment: self.use_hard_alignment,
            checkpoint_dir,
        }
    }

    pub fn generate(&self) -> GenerateConfig {
        GenerateConfig {
            k: self.k,
            n: self.n,
            beam_width: self.beam_width,
            max_fact_len: self.max_fact_len,
            mode: self.mode,
            max_group_size: Some(self.max_group_size),
            aggregation_score: self.aggregation_score,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.d_model = 32;
        c.mode = Mode::NoAggregation;
        c.aggregation_score = AggregationScore::BoundaryAndWithin;
        c.segmenter = Some("seg.conf".into());
        c.clip_norm = 0.0;
        c.state_end = true;
        c.start_link = true;
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.pretrain().clip_norm, None);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_and_errors() {
        let c = RunConfig::parse("# sizes\nd_model = 16 # small\n\nheads=4\n").unwrap();
        assert_eq!((c.d_model, c.heads), (16, 4));
        for bad in [
            "d_modle = 3",
            "d_model = 3\nd_model = 4",
            "k = 0",
            "k = -1",
            "lr_model = nan",
            "mode = fast",
            "just words",
            "d_model = 30\nheads = 4",
            "dev_fraction = 1",
        ] {
            assert!(
                matches!(RunConfig::parse(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
        let e = RunConfig::parse("a = 1").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("unknown key `a`"), "{e}");
    }
}
