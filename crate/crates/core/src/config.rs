//! Run configuration: a flat, human-editable `key = value` document.
//!
//! Presets resolve to full configs before anything is hashed, so a run
//! directory's config echo plus its content hash pins every knob. Unknown
//! keys are hard errors; silent typos do not get to corrupt experiments.

use crate::data::SyntheticSpec;
use crate::episode::EpisodeConfig;
use crate::error::{Error, Result};
use crate::loss::Reduction;
use crate::model::{HeadKind, PrecSource, ProtoSource};
use crate::rng::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fewshot,
    Largescale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    File,
}

/// Precision source as configured; `Auto` derives the regime's default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecChoice {
    Auto,
    Identity,
    Estimated,
    Learned,
}

/// Every knob of a training/evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub data: DataSource,
    pub dataset_path: String,
    pub delimiter: char,
    pub synthetic: SyntheticSpec,
    pub split_fractions: (f64, f64, f64),
    pub split_seed: u64,
    pub allow_empty_splits: bool,
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    pub open_way: usize,
    pub open_query_per_class: usize,
    /// Queries per class in large-scale episodes.
    pub batch_per_class: usize,
    pub head: HeadKind,
    pub precision: PrecChoice,
    /// Hidden layer widths of both embeddings; input width comes from the
    /// data, output width is `embed_dim`.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub lambda: f64,
    pub base_lr: f64,
    /// Global gradient-norm cap; 0 disables clipping (the default).
    pub grad_clip: f64,
    pub milestones: Vec<u64>,
    pub lr_factor: f64,
    pub episodes: u64,
    pub eval_episodes: u64,
    pub seed: u64,
    pub reduction: Reduction,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    /// The `desk` preset: a run that finishes in minutes on one core.
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Fewshot,
            data: DataSource::Synthetic,
            dataset_path: String::new(),
            delimiter: ',',
            synthetic: SyntheticSpec {
                n_classes: 20,
                dim: 8,
                samples_per_class: 200,
                center_scale: 1.0,
                within_std: 0.14,
                seed: 7,
            },
            // 5-way + 5-open evaluation needs 10 disjoint test classes, so
            // the 20 synthetic classes split in half with no validation part.
            split_fractions: (0.5, 0.0, 0.5),
            split_seed: 1,
            allow_empty_splits: true,
            way: 5,
            shot: 1,
            query_per_class: 15,
            open_way: 5,
            open_query_per_class: 15,
            batch_per_class: 8,
            head: HeadKind::Mahalanobis,
            precision: PrecChoice::Auto,
            hidden: vec![64, 64],
            embed_dim: 16,
            lambda: 0.5,
            base_lr: 1e-3,
            grad_clip: 0.0,
            milestones: vec![1000, 1500],
            lr_factor: 0.1,
            episodes: 2000,
            eval_episodes: 600,
            seed: 42,
            reduction: Reduction::Mean,
            log_every: 100,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// Resolve a named preset to a full config.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::default()),
            "paper-fewshot" => Ok(TrainConfig {
                episodes: 30_000,
                milestones: vec![10_000, 20_000],
                eval_episodes: 600,
                ..TrainConfig::default()
            }),
            "paper-largescale" => Ok(TrainConfig {
                mode: Mode::Largescale,
                episodes: 10_000,
                milestones: vec![6_000, 8_000],
                eval_episodes: 600,
                open_way: 2,
                batch_per_class: 8,
                split_fractions: (0.6, 0.0, 0.4),
                allow_empty_splits: true,
                ..TrainConfig::default()
            }),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected desk, paper-fewshot, or paper-largescale"
            ))),
        }
    }

    /// Parse a config document. A `preset` key, if present, is applied
    /// first; remaining keys override it in file order.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            pairs.push((lineno + 1, k.trim().to_string(), v.trim().to_string()));
        }

        let mut cfg = TrainConfig::default();
        if let Some((_, _, name)) = pairs.iter().find(|(_, k, _)| k == "preset") {
            cfg = TrainConfig::preset(name)?;
        }
        for (line, key, value) in &pairs {
            if key == "preset" {
                continue;
            }
            cfg.apply(key, value)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn pu(v: &str) -> Result<u64> {
            v.parse().map_err(|_| Error::Config(format!("expected an integer, got {v:?}")))
        }
        fn pus(v: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("expected an integer, got {v:?}")))
        }
        fn pf(v: &str) -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("expected a number, got {v:?}")))
        }
        fn pb(v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("expected true or false, got {v:?}"))),
            }
        }
        fn plist_u64(v: &str) -> Result<Vec<u64>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|s| pu(s.trim())).collect()
        }
        fn plist_usize(v: &str) -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|s| pus(s.trim())).collect()
        }

        match key {
            "mode" => {
                self.mode = match value {
                    "fewshot" => Mode::Fewshot,
                    "largescale" => Mode::Largescale,
                    _ => {
                        return Err(Error::Config(format!(
                            "mode must be fewshot or largescale, got {value:?}"
                        )))
                    }
                }
            }
            "data" => {
                self.data = match value {
                    "synthetic" => DataSource::Synthetic,
                    "file" => DataSource::File,
                    _ => {
                        return Err(Error::Config(format!(
                            "data must be synthetic or file, got {value:?}"
                        )))
                    }
                }
            }
            "dataset_path" => self.dataset_path = value.to_string(),
            "delimiter" => {
                self.delimiter = match value {
                    "comma" => ',',
                    "tab" => '\t',
                    _ => {
                        return Err(Error::Config(format!(
                            "delimiter must be comma or tab, got {value:?}"
                        )))
                    }
                }
            }
            "synthetic_classes" => self.synthetic.n_classes = pus(value)?,
            "synthetic_dim" => self.synthetic.dim = pus(value)?,
            "synthetic_samples_per_class" => self.synthetic.samples_per_class = pus(value)?,
            "synthetic_center_scale" => self.synthetic.center_scale = pf(value)?,
            "synthetic_within_std" => self.synthetic.within_std = pf(value)?,
            "synthetic_seed" => self.synthetic.seed = pu(value)?,
            "split_train" => self.split_fractions.0 = pf(value)?,
            "split_val" => self.split_fractions.1 = pf(value)?,
            "split_test" => self.split_fractions.2 = pf(value)?,
            "split_seed" => self.split_seed = pu(value)?,
            "allow_empty_splits" => self.allow_empty_splits = pb(value)?,
            "way" => self.way = pus(value)?,
            "shot" => self.shot = pus(value)?,
            "query_per_class" => self.query_per_class = pus(value)?,
            "open_way" => self.open_way = pus(value)?,
            "open_query_per_class" => self.open_query_per_class = pus(value)?,
            "batch_per_class" => self.batch_per_class = pus(value)?,
            "head" => {
                self.head = match value {
                    "euclidean" => HeadKind::Euclidean,
                    "mahalanobis" => HeadKind::Mahalanobis,
                    _ => {
                        return Err(Error::Config(format!(
                            "head must be euclidean or mahalanobis, got {value:?}"
                        )))
                    }
                }
            }
            "precision" => {
                self.precision = match value {
                    "auto" => PrecChoice::Auto,
                    "identity" => PrecChoice::Identity,
                    "estimated" => PrecChoice::Estimated,
                    "learned" => PrecChoice::Learned,
                    _ => {
                        return Err(Error::Config(format!(
                            "precision must be auto, identity, estimated, or learned, got {value:?}"
                        )))
                    }
                }
            }
            "hidden" => self.hidden = plist_usize(value)?,
            "embed_dim" => self.embed_dim = pus(value)?,
            "lambda" => self.lambda = pf(value)?,
            "base_lr" => self.base_lr = pf(value)?,
            "grad_clip" => self.grad_clip = pf(value)?,
            "milestones" => self.milestones = plist_u64(value)?,
            "lr_factor" => self.lr_factor = pf(value)?,
            "episodes" => self.episodes = pu(value)?,
            "eval_episodes" => self.eval_episodes = pu(value)?,
            "seed" => self.seed = pu(value)?,
            "reduction" => {
                self.reduction = match value {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => {
                        return Err(Error::Config(format!(
                            "reduction must be mean or sum, got {value:?}"
                        )))
                    }
                }
            }
            "log_every" => self.log_every = pu(value)?,
            "checkpoint_every" => self.checkpoint_every = pu(value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data == DataSource::File && self.dataset_path.is_empty() {
            return Err(Error::Config("data = file requires dataset_path".into()));
        }
        if self.data == DataSource::Synthetic {
            self.synthetic.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.episode_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.mode == Mode::Largescale && self.open_way < 1 {
            return Err(Error::Config("large-scale mode needs open_way >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(Error::Config(format!(
                "grad_clip must be nonnegative, got {}",
                self.grad_clip
            )));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!(
                "lr_factor must be in (0, 1), got {}",
                self.lr_factor
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be positive".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("log_every and checkpoint_every must be positive".into()));
        }
        self.prec_source()?;
        Ok(())
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            way: self.way,
            shot: self.shot,
            query_per_class: self.query_per_class,
            open_way: self.open_way,
            open_query_per_class: self.open_query_per_class,
        }
    }

    pub fn proto_source(&self) -> ProtoSource {
        match self.mode {
            Mode::Fewshot => ProtoSource::Estimated,
            Mode::Largescale => ProtoSource::Learned,
        }
    }

    /// Effective precision source, resolving `auto` and rejecting
    /// combinations that break the head invariants.
    pub fn prec_source(&self) -> Result<PrecSource> {
        let auto = match (self.head, self.mode) {
            (HeadKind::Euclidean, _) => PrecSource::Identity,
            (HeadKind::Mahalanobis, Mode::Fewshot) => PrecSource::Estimated,
            (HeadKind::Mahalanobis, Mode::Largescale) => PrecSource::Learned,
        };
        let chosen = match self.precision {
            PrecChoice::Auto => auto,
            PrecChoice::Identity => PrecSource::Identity,
            PrecChoice::Estimated => PrecSource::Estimated,
            PrecChoice::Learned => PrecSource::Learned,
        };
        if chosen != auto {
            return Err(Error::Config(format!(
                "precision {:?} is incompatible with head {:?} in {:?} mode",
                self.precision, self.head, self.mode
            )));
        }
        Ok(chosen)
    }

    /// Canonical echo: every field, sorted by key, one `key = value` line.
    /// Parsing the echo reproduces the config exactly.
    pub fn echo(&self) -> String {
        let mut lines = vec![
            format!("allow_empty_splits = {}", self.allow_empty_splits),
            format!("base_lr = {}", self.base_lr),
            format!("batch_per_class = {}", self.batch_per_class),
            format!(
                "data = {}",
                match self.data {
                    DataSource::Synthetic => "synthetic",
                    DataSource::File => "file",
                }
            ),
            format!("dataset_path = {}", self.dataset_path),
            format!(
                "delimiter = {}",
                if self.delimiter == '\t' { "tab" } else { "comma" }
            ),
            format!("embed_dim = {}", self.embed_dim),
            format!("episodes = {}", self.episodes),
            format!("eval_episodes = {}", self.eval_episodes),
            format!("grad_clip = {}", self.grad_clip),
            format!(
                "head = {}",
                match self.head {
                    HeadKind::Euclidean => "euclidean",
                    HeadKind::Mahalanobis => "mahalanobis",
                }
            ),
            format!(
                "hidden = {}",
                self.hidden.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            ),
            format!("lambda = {}", self.lambda),
            format!("log_every = {}", self.log_every),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("lr_factor = {}", self.lr_factor),
            format!(
                "milestones = {}",
                self.milestones.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            ),
            format!(
                "mode = {}",
                match self.mode {
                    Mode::Fewshot => "fewshot",
                    Mode::Largescale => "largescale",
                }
            ),
            format!("open_query_per_class = {}", self.open_query_per_class),
            format!("open_way = {}", self.open_way),
            format!(
                "precision = {}",
                match self.precision {
                    PrecChoice::Auto => "auto",
                    PrecChoice::Identity => "identity",
                    PrecChoice::Estimated => "estimated",
                    PrecChoice::Learned => "learned",
                }
            ),
            format!("query_per_class = {}", self.query_per_class),
            format!(
                "reduction = {}",
                match self.reduction {
                    Reduction::Mean => "mean",
                    Reduction::Sum => "sum",
                }
            ),
            format!("seed = {}", self.seed),
            format!("shot = {}", self.shot),
            format!("split_seed = {}", self.split_seed),
            format!("split_test = {}", self.split_fractions.2),
            format!("split_train = {}", self.split_fractions.0),
            format!("split_val = {}", self.split_fractions.1),
            format!("synthetic_center_scale = {}", self.synthetic.center_scale),
            format!("synthetic_classes = {}", self.synthetic.n_classes),
            format!("synthetic_dim = {}", self.synthetic.dim),
            format!("synthetic_samples_per_class = {}", self.synthetic.samples_per_class),
            format!("synthetic_seed = {}", self.synthetic.seed),
            format!("synthetic_within_std = {}", self.synthetic.within_std),
            format!("way = {}", self.way),
        ];
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// FNV-1a over the canonical echo.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.echo().as_bytes())
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips_exactly() {
        for preset in ["desk", "paper-fewshot", "paper-largescale"] {
            let cfg = TrainConfig::preset(preset).unwrap();
            let back = TrainConfig::parse_str(&cfg.echo()).unwrap();
            assert_eq!(cfg, back, "{preset}");
            assert_eq!(cfg.hash(), back.hash());
        }
    }

    #[test]
    fn unknown_key_is_a_hard_error_naming_the_key() {
        let err = TrainConfig::parse_str("wayy = 5\n").unwrap_err();
        assert!(err.to_string().contains("wayy"), "{err}");
    }

    #[test]
    fn preset_applies_before_overrides() {
        let cfg = TrainConfig::parse_str("preset = paper-fewshot\nway = 10\n").unwrap();
        assert_eq!(cfg.episodes, 30_000);
        assert_eq!(cfg.milestones, vec![10_000, 20_000]);
        assert_eq!(cfg.way, 10);
    }

    #[test]
    fn evaluation_defaults_to_six_hundred_episodes() {
        assert_eq!(TrainConfig::default().eval_episodes, 600);
    }

    #[test]
    fn paper_fewshot_matches_published_schedule() {
        let cfg = TrainConfig::preset("paper-fewshot").unwrap();
        assert_eq!(cfg.way, 5);
        assert_eq!(cfg.open_way, 5);
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.base_lr, 1e-3);
        assert_eq!(cfg.episodes, 30_000);
        assert_eq!(cfg.milestones, vec![10_000, 20_000]);
        assert_eq!(cfg.eval_episodes, 600);
    }

    #[test]
    fn incompatible_precision_is_rejected() {
        let mut cfg = TrainConfig {
            head: HeadKind::Euclidean,
            precision: PrecChoice::Estimated,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.precision = PrecChoice::Identity;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = TrainConfig::parse_str("# a comment\n\nway = 7  # trailing\n").unwrap();
        assert_eq!(cfg.way, 7);
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 43;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn file_source_requires_path() {
        let err = TrainConfig::parse_str("data = file\n").unwrap_err();
        assert!(err.to_string().contains("dataset_path"), "{err}");
    }
}
