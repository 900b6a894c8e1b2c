//! Experiment settings shared by config files and command-line flags.
//!
//! The file format is plain text, one `key = value` per line. Blank lines
//! and lines starting with `#` are ignored. Values use the same tokens as
//! the command line (`variant = vs`, `episode.mode = tosfl-category`);
//! lists are comma-separated (`decoder.aspp_rates = 6,12,18`). A `preset`
//! line (`desk`, `full-static`, `full-video`) resets everything to that
//! preset, so it belongs first. Later lines win, and command-line overrides
//! are applied after the file through the same [`Settings::apply`] path.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::coattention::Variant;
use crate::decoder::DecoderConfig;
use crate::episodes::EpisodeMode;
use crate::error::{Error, Result};
use crate::model::{EncoderChoice, Interaction, ModelConfig};
use crate::stacker::StackConfig;
use crate::trainer::TrainConfig;

/// Everything one run needs beyond the dataset itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Dataset manifest directory.
    pub data_root: Option<PathBuf>,
    /// Word-vector file; hashed fallback vectors are used when absent.
    pub embeddings_path: Option<PathBuf>,
    /// Fold scheme: the class list is split into this many folds.
    pub n_folds: usize,
    pub fold: usize,
    /// Keep going and report failures per seed instead of aborting.
    pub allow_partial: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self::full_static()
    }
}

pub fn variant_token(v: Variant) -> &'static str {
    match v {
        Variant::VisualSemantic => "vs",
        Variant::Visual => "v",
        Variant::SemanticOnly => "s",
    }
}

pub fn parse_variant(s: &str) -> Result<Variant> {
    match s {
        "vs" => Ok(Variant::VisualSemantic),
        "v" => Ok(Variant::Visual),
        "s" => Ok(Variant::SemanticOnly),
        other => Err(Error::Parse(format!("unknown variant {other:?}; use vs, v, or s"))),
    }
}

pub fn interaction_token(i: Interaction) -> &'static str {
    match i {
        Interaction::Conditioning => "cond",
        Interaction::CoAttention => "coatt",
        Interaction::StackedCoAttention => "scoatt",
    }
}

pub fn parse_interaction(s: &str) -> Result<Interaction> {
    match s {
        "cond" => Ok(Interaction::Conditioning),
        "coatt" => Ok(Interaction::CoAttention),
        "scoatt" => Ok(Interaction::StackedCoAttention),
        other => Err(Error::Parse(format!(
            "unknown interaction {other:?}; use cond, coatt, or scoatt"
        ))),
    }
}

pub fn mode_token(m: EpisodeMode) -> &'static str {
    match m {
        EpisodeMode::Static => "static",
        EpisodeMode::TosflInstance => "tosfl-instance",
        EpisodeMode::TosflCategory => "tosfl-category",
    }
}

pub fn parse_mode(s: &str) -> Result<EpisodeMode> {
    match s {
        "static" => Ok(EpisodeMode::Static),
        "tosfl-instance" => Ok(EpisodeMode::TosflInstance),
        "tosfl-category" => Ok(EpisodeMode::TosflCategory),
        other => Err(Error::Parse(format!(
            "unknown mode {other:?}; use static, tosfl-instance, or tosfl-category"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl Settings {
    /// Minutes-scale settings: tiny encoder, synthetic-shape geometry, three
    /// short epochs.
    pub fn desk() -> Self {
        Settings {
            model: ModelConfig {
                variant: Variant::VisualSemantic,
                interaction: Interaction::StackedCoAttention,
                encoder: EncoderChoice::Tiny { channels: 16, seed: 7 },
                embed_dim: 16,
                semantic_dim: 8,
                stack: StackConfig {
                    depth: 2,
                    share_weights: false,
                },
                decoder: DecoderConfig {
                    iterations: 2,
                    mid_channels: 32,
                    aspp_channels: 16,
                    aspp_rates: vec![1, 2],
                },
                separate_support_gate: false,
            },
            train: TrainConfig::desk(),
            data_root: None,
            embeddings_path: None,
            n_folds: 5,
            fold: 0,
            allow_partial: false,
        }
    }

    /// Full-scale static-image settings; point `encoder.path` at converted
    /// pretrained weights for real runs.
    pub fn full_static() -> Self {
        Settings {
            model: ModelConfig::default(),
            train: TrainConfig::full_static(),
            data_root: None,
            embeddings_path: None,
            n_folds: 4,
            fold: 0,
            allow_partial: false,
        }
    }

    /// Full-scale video settings: instance-mode episodes, fewer epochs, five
    /// folds.
    pub fn full_video() -> Self {
        Settings {
            train: TrainConfig::full_video(),
            n_folds: 5,
            ..Self::full_static()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full-static" => Ok(Self::full_static()),
            "full-video" => Ok(Self::full_video()),
            other => Err(Error::Parse(format!(
                "unknown preset {other:?}; use desk, full-static, or full-video"
            ))),
        }
    }

    /// Applies one key. Unknown keys are rejected so typos fail loudly.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => *self = Self::preset(value)?,
            "variant" => self.model.variant = parse_variant(value)?,
            "interaction" => self.model.interaction = parse_interaction(value)?,
            "encoder.channels" => {
                let channels = parse_num(key, value)?;
                self.model.encoder = match self.model.encoder {
                    EncoderChoice::Tiny { seed, .. } => EncoderChoice::Tiny { channels, seed },
                    _ => EncoderChoice::Tiny { channels, seed: 0 },
                };
            }
            "encoder.seed" => {
                let seed = parse_num(key, value)?;
                self.model.encoder = match self.model.encoder {
                    EncoderChoice::Tiny { channels, .. } => EncoderChoice::Tiny { channels, seed },
                    _ => EncoderChoice::Tiny { channels: 16, seed },
                };
            }
            "encoder.path" => {
                self.model.encoder = EncoderChoice::FromFile {
                    path: value.to_string(),
                }
            }
            "embed.dim" => self.model.embed_dim = parse_num(key, value)?,
            "semantic.dim" => self.model.semantic_dim = parse_num(key, value)?,
            "stack.depth" => self.model.stack.depth = parse_num(key, value)?,
            "stack.share_weights" => self.model.stack.share_weights = parse_bool(key, value)?,
            "separate_support_gate" => {
                self.model.separate_support_gate = parse_bool(key, value)?
            }
            "decoder.iterations" => self.model.decoder.iterations = parse_num(key, value)?,
            "decoder.mid_channels" => self.model.decoder.mid_channels = parse_num(key, value)?,
            "decoder.aspp_channels" => self.model.decoder.aspp_channels = parse_num(key, value)?,
            "decoder.aspp_rates" => self.model.decoder.aspp_rates = parse_list(key, value)?,
            "train.lr" => self.train.lr = parse_num(key, value)?,
            "train.momentum" => self.train.momentum = parse_num(key, value)?,
            "train.decay_epochs" => self.train.decay_epochs = parse_list(key, value)?,
            "train.decay_factor" => self.train.decay_factor = parse_num(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "train.max_epochs" => self.train.max_epochs = parse_num(key, value)?,
            "train.train_tasks" => self.train.train_tasks = parse_num(key, value)?,
            "train.eval_tasks" => self.train.eval_tasks = parse_num(key, value)?,
            "train.seeds" => self.train.seeds = parse_list(key, value)?,
            "train.size" => self.train.train_size = parse_num(key, value)?,
            "test.size" => self.train.test_size = parse_num(key, value)?,
            "train.augment" => self.train.augment = parse_bool(key, value)?,
            "episode.k" => self.train.k = parse_num(key, value)?,
            "episode.queries" => self.train.query_count = parse_num(key, value)?,
            "episode.mode" => self.train.mode = parse_mode(value)?,
            "workers" => self.train.workers = parse_num(key, value)?,
            "data.root" => self.data_root = Some(PathBuf::from(value)),
            "data.folds" => self.n_folds = parse_num(key, value)?,
            "fold" => self.fold = parse_num(key, value)?,
            "embeddings.path" => self.embeddings_path = Some(PathBuf::from(value)),
            "report.allow_partial" => self.allow_partial = parse_bool(key, value)?,
            other => return Err(Error::Parse(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    /// Parses a whole document, applying keys in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected key = value, got {line:?}", ln + 1))
            })?;
            self.apply(key.trim(), value.trim())
                .map_err(|e| Error::Parse(format!("line {}: {e}", ln + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Canonical snapshot of every setting; parsing it back reproduces the
    /// value exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("variant", variant_token(self.model.variant).into());
        line("interaction", interaction_token(self.model.interaction).into());
        match &self.model.encoder {
            EncoderChoice::Tiny { channels, seed } => {
                line("encoder.channels", channels.to_string());
                line("encoder.seed", seed.to_string());
            }
            EncoderChoice::FromFile { path } => line("encoder.path", path.clone()),
        }
        line("embed.dim", self.model.embed_dim.to_string());
        line("semantic.dim", self.model.semantic_dim.to_string());
        line("stack.depth", self.model.stack.depth.to_string());
        line("stack.share_weights", self.model.stack.share_weights.to_string());
        line(
            "separate_support_gate",
            self.model.separate_support_gate.to_string(),
        );
        line("decoder.iterations", self.model.decoder.iterations.to_string());
        line("decoder.mid_channels", self.model.decoder.mid_channels.to_string());
        line("decoder.aspp_channels", self.model.decoder.aspp_channels.to_string());
        line("decoder.aspp_rates", join(&self.model.decoder.aspp_rates));
        line("train.lr", self.train.lr.to_string());
        line("train.momentum", self.train.momentum.to_string());
        line("train.decay_epochs", join(&self.train.decay_epochs));
        line("train.decay_factor", self.train.decay_factor.to_string());
        line("train.weight_decay", self.train.weight_decay.to_string());
        line("train.batch_size", self.train.batch_size.to_string());
        line("train.max_epochs", self.train.max_epochs.to_string());
        line("train.train_tasks", self.train.train_tasks.to_string());
        line("train.eval_tasks", self.train.eval_tasks.to_string());
        line("train.seeds", join(&self.train.seeds));
        line("train.size", self.train.train_size.to_string());
        line("test.size", self.train.test_size.to_string());
        line("train.augment", self.train.augment.to_string());
        line("episode.k", self.train.k.to_string());
        line("episode.queries", self.train.query_count.to_string());
        line("episode.mode", mode_token(self.train.mode).into());
        line("workers", self.train.workers.to_string());
        if let Some(root) = &self.data_root {
            line("data.root", root.display().to_string());
        }
        line("data.folds", self.n_folds.to_string());
        line("fold", self.fold.to_string());
        if let Some(path) = &self.embeddings_path {
            line("embeddings.path", path.display().to_string());
        }
        line("report.allow_partial", self.allow_partial.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.n_folds == 0 {
            return Err(Error::Config("data.folds must be positive".into()));
        }
        if self.fold >= self.n_folds {
            return Err(Error::Config(format!(
                "fold {} out of range for {} folds",
                self.fold, self.n_folds
            )));
        }
        Ok(())
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips_every_preset() {
        for name in ["desk", "full-static", "full-video"] {
            let settings = Settings::preset(name).unwrap();
            let mut reparsed = Settings::preset(name).unwrap();
            reparsed.apply("variant", "s").unwrap();
            reparsed.apply_text(&settings.to_text()).unwrap();
            assert_eq!(reparsed, settings, "{name} snapshot drifted");
        }
    }

    #[test]
    fn overrides_take_the_cli_token_vocabulary() {
        let mut s = Settings::desk();
        s.apply("variant", "v").unwrap();
        s.apply("interaction", "coatt").unwrap();
        s.apply("episode.mode", "tosfl-category").unwrap();
        s.apply("fold", "3").unwrap();
        s.apply("train.seeds", "7").unwrap();
        assert_eq!(s.model.variant, Variant::Visual);
        assert_eq!(s.model.interaction, Interaction::CoAttention);
        assert_eq!(s.train.mode, EpisodeMode::TosflCategory);
        assert_eq!(s.fold, 3);
        assert_eq!(s.train.seeds, vec![7]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected_with_context() {
        let mut s = Settings::desk();
        let err = s.apply_text("train.lr = 0.02\nbogus.key = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("bogus.key"), "{err}");
        assert_eq!(s.train.lr, 0.02, "earlier lines still apply");
        assert!(s.apply("train.lr", "fast").is_err());
        assert!(s.apply("train.augment", "yes").is_err());
        assert!(s.apply_text("just words\n").is_err());
    }

    #[test]
    fn comments_blanks_and_preset_lines_parse() {
        let mut s = Settings::full_static();
        s.apply_text("# comment\n\npreset = desk\ntrain.max_epochs = 5\ntrain.train_tasks = 400\n")
            .unwrap();
        assert_eq!(s.train.max_epochs, 5);
        assert_eq!(s.train.train_tasks, 400);
        assert_eq!(s.train.batch_size, TrainConfig::desk().batch_size);
        assert!(Settings::preset("galaxy").is_err());
    }

    #[test]
    fn encoder_keys_cover_both_choices() {
        let mut s = Settings::desk();
        s.apply("encoder.channels", "24").unwrap();
        s.apply("encoder.seed", "9").unwrap();
        assert_eq!(
            s.model.encoder,
            EncoderChoice::Tiny {
                channels: 24,
                seed: 9
            }
        );
        s.apply("encoder.path", "weights/encoder.ckpt").unwrap();
        assert_eq!(
            s.model.encoder,
            EncoderChoice::FromFile {
                path: "weights/encoder.ckpt".into()
            }
        );
    }

    #[test]
    fn fold_bounds_are_validated() {
        let mut s = Settings::desk();
        s.validate().unwrap();
        s.fold = 5;
        assert!(s.validate().is_err());
        s.fold = 0;
        s.n_folds = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn float_fields_round_trip_through_text() {
        let mut s = Settings::full_static();
        s.train.lr = 0.017;
        s.train.weight_decay = 5e-4;
        let mut t = Settings::desk();
        t.apply_text(&s.to_text()).unwrap();
        assert_eq!(t.train.lr, 0.017);
        assert_eq!(t.train.weight_decay, 5e-4);
        assert_eq!(t, s);
    }
}
