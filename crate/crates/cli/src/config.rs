//! Run settings resolved from defaults, an optional `key = value` file and flags
//! (flags win over the file, the file over defaults).

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vesselseg::network::{layers::DropoutKind, parse_pairs, ArchConfig};
use vesselseg::predict::PredictionMode;
use vesselseg::training::{Augmentation, TrainConfig};
use vesselseg::wavelet::ChannelMode;

/// Keys accepted in a config file; each matches the flag of the same name.
pub const KEYS: &[&str] = &[
    "arch",
    "augment",
    "batch",
    "channels",
    "checkpoint-every",
    "consecutive-rotations",
    "dropout",
    "epochs",
    "k",
    "manifest",
    "mode",
    "out",
    "patches-per-image",
    "precision",
    "seed",
    "threshold",
];

/// A problem with the command line or config file (exit code 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub type UsageResult<T> = std::result::Result<T, UsageError>;

fn usage<T>(msg: impl Into<String>) -> UsageResult<T> {
    Err(UsageError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision {s:?} (f32 or f64)")),
        }
    }
}

/// Values read from a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FileLayer {
    values: BTreeMap<String, String>,
    dir: PathBuf,
}

impl FileLayer {
    pub fn parse(text: &str, dir: &Path) -> UsageResult<Self> {
        let pairs = parse_pairs(text).map_err(|e| UsageError(format!("config file: {e}")))?;
        let mut values = BTreeMap::new();
        for (k, v) in pairs {
            let key = k.replace('_', "-");
            if !KEYS.contains(&key.as_str()) {
                return usage(format!("config file: unknown key {k:?}"));
            }
            if values.insert(key, v).is_some() {
                return usage(format!("config file: key {k:?} given twice"));
            }
        }
        Ok(FileLayer {
            values,
            dir: dir.to_path_buf(),
        })
    }

    pub fn load(path: Option<&Path>) -> UsageResult<Self> {
        let Some(path) = path else {
            return Ok(FileLayer::default());
        };
        let text = fs::read_to_string(path).map_err(|e| UsageError(format!("config file {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// The flag value if given, else the parsed file value.
    pub fn pick<T: FromStr>(&self, key: &str, flag: Option<T>) -> UsageResult<Option<T>>
    where
        T::Err: Display,
    {
        debug_assert!(KEYS.contains(&key));
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| UsageError(format!("config file: {key} = {v:?}: {e}"))),
        }
    }

    /// Like [`pick`](Self::pick) for paths; file paths are relative to the file.
    pub fn pick_path(&self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        flag.or_else(|| self.values.get(key).map(|v| self.dir.join(v)))
    }

    pub fn pick_flag(&self, key: &str, flag: bool) -> UsageResult<bool> {
        if flag {
            return Ok(true);
        }
        Ok(self.pick::<bool>(key, None)?.unwrap_or(false))
    }
}

fn parse_with<T>(
    what: &str,
    v: Option<String>,
    parse: impl Fn(&str) -> Option<T>,
    choices: &str,
) -> UsageResult<Option<T>> {
    match v {
        None => Ok(None),
        Some(s) => parse(&s)
            .map(Some)
            .ok_or_else(|| UsageError(format!("invalid {what} {s:?} (expected {choices})"))),
    }
}

/// Model, data and optimization settings for `train` and `crossval`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub arch: ArchConfig,
    pub channels: ChannelMode,
    pub train: TrainConfig,
    /// Save a checkpoint every this many epochs (0: only the final model).
    pub checkpoint_every: usize,
    pub precision: Precision,
}

/// Raw train-related flag values.
#[derive(Debug, Clone, Default)]
pub struct TrainFlags {
    pub arch: Option<PathBuf>,
    pub channels: Option<String>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub seed: Option<u64>,
    pub augment: Option<String>,
    pub consecutive_rotations: bool,
    pub dropout: Option<String>,
    pub patches_per_image: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub precision: Option<String>,
}

pub fn resolve_channels(file: &FileLayer, flag: Option<String>) -> UsageResult<Option<ChannelMode>> {
    parse_with(
        "channel set",
        file.pick("channels", flag)?,
        ChannelMode::parse,
        "1, 4d1, 4d2 or 7",
    )
}

pub fn resolve_precision(file: &FileLayer, flag: Option<String>) -> UsageResult<Precision> {
    let p: Option<String> = file.pick("precision", flag)?;
    p.map_or(Ok(Precision::F32), |s| s.parse().map_err(UsageError))
}

pub fn resolve_train(file: &FileLayer, flags: TrainFlags) -> UsageResult<TrainSettings> {
    let channels = resolve_channels(file, flags.channels)?.unwrap_or(ChannelMode::D2);
    let mut arch = ArchConfig::default();
    if let Some(path) = file.pick_path("arch", flags.arch) {
        let text =
            fs::read_to_string(&path).map_err(|e| UsageError(format!("architecture file {}: {e}", path.display())))?;
        let pairs = parse_pairs(&text).map_err(|e| UsageError(format!("architecture file: {e}")))?;
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "in_channels") {
            if v.parse::<usize>().ok() != Some(channels.channel_count()) {
                return usage(format!(
                    "architecture file sets in_channels = {v} but channel set {} has {}",
                    channels.as_str(),
                    channels.channel_count()
                ));
            }
        }
        arch.apply_pairs(&pairs)
            .map_err(|e| UsageError(format!("architecture file: {e}")))?;
    }
    arch.in_channels = channels.channel_count();
    if let Some(kind) = parse_with(
        "dropout",
        file.pick("dropout", flags.dropout)?,
        DropoutKind::parse,
        "spatial or standard",
    )? {
        arch.dropout_kind = kind;
    }
    arch.validate().map_err(|e| UsageError(format!("architecture: {e}")))?;

    let mut train = TrainConfig::default();
    if let Some(v) = file.pick("epochs", flags.epochs)? {
        train.epochs = v;
    }
    if let Some(v) = file.pick("batch", flags.batch)? {
        train.batch_size = v;
    }
    if let Some(v) = file.pick("seed", flags.seed)? {
        train.seed = v;
    }
    if let Some(v) = file.pick("patches-per-image", flags.patches_per_image)? {
        train.patches_per_image = v;
    }
    if let Some(a) = parse_with(
        "augmentation",
        file.pick("augment", flags.augment)?,
        Augmentation::parse,
        "rotations, none, oversample or elastic",
    )? {
        train.augmentation = a;
    }
    train.consecutive_rotations = file.pick_flag("consecutive-rotations", flags.consecutive_rotations)?;
    train.validate().map_err(|e| UsageError(e.to_string()))?;

    Ok(TrainSettings {
        arch,
        channels,
        train,
        checkpoint_every: file.pick("checkpoint-every", flags.checkpoint_every)?.unwrap_or(0),
        precision: resolve_precision(file, flags.precision)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictSettings {
    pub mode: PredictionMode,
    pub threshold: f64,
}

pub fn resolve_predict(file: &FileLayer, mode: Option<String>, threshold: Option<f64>) -> UsageResult<PredictSettings> {
    let mode = parse_with(
        "prediction mode",
        file.pick("mode", mode)?,
        PredictionMode::parse,
        "simple or multiple",
    )?
    .unwrap_or(PredictionMode::Multiple);
    let threshold = file.pick("threshold", threshold)?.unwrap_or(0.5);
    if !(0.0..=1.0).contains(&threshold) {
        return usage(format!("threshold {threshold} outside [0, 1]"));
    }
    Ok(PredictSettings { mode, threshold })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_settings() {
        let s = resolve_train(&FileLayer::default(), TrainFlags::default()).unwrap();
        assert_eq!(s.channels, ChannelMode::D2);
        assert_eq!(s.arch, ArchConfig::default());
        assert_eq!(s.train, TrainConfig::default());
        assert_eq!(s.precision, Precision::F32);
        let p = resolve_predict(&FileLayer::default(), None, None).unwrap();
        assert_eq!((p.mode, p.threshold), (PredictionMode::Multiple, 0.5));
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file = FileLayer::parse(
            "epochs = 7\nbatch = 2\nchannels = 7\nconsecutive_rotations = true\n",
            Path::new("."),
        )
        .unwrap();
        let s = resolve_train(
            &file,
            TrainFlags {
                epochs: Some(3),
                ..TrainFlags::default()
            },
        )
        .unwrap();
        assert_eq!(s.train.epochs, 3);
        assert_eq!(s.train.batch_size, 2);
        assert_eq!(s.arch.in_channels, 7);
        assert!(s.train.consecutive_rotations);
    }

    #[test]
    fn unknown_and_bad_values_are_usage_errors() {
        assert!(FileLayer::parse("learning_rate = 3\n", Path::new(".")).is_err());
        assert!(FileLayer::parse("seed = 1\nseed = 2\n", Path::new(".")).is_err());
        let file = FileLayer::parse("epochs = many\n", Path::new(".")).unwrap();
        assert!(resolve_train(&file, TrainFlags::default()).is_err());
        let flags = TrainFlags {
            augment: Some("flips".into()),
            ..TrainFlags::default()
        };
        assert!(resolve_train(&FileLayer::default(), flags).is_err());
        assert!(resolve_predict(&FileLayer::default(), Some("both".into()), None).is_err());
        assert!(resolve_predict(&FileLayer::default(), None, Some(1.5)).is_err());
    }
}
