//! Run configuration: `key = value` files plus `--section.key value` flags.
//!
//! Keys are grouped under `backbone.`, `csra.`, `optim.`, `data.` and `run.`.
//! Later sources override earlier ones key by key; keys are then applied in a
//! fixed order so `backbone.preset` is always resolved before the fields it
//! seeds, and `csra.heads` before an explicit `csra.temperatures`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneConfig, BlockKind, Stem};
use crate::csra::{default_temperatures, CsraHeadConfig, DEFAULT_LAMBDA};
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::training::{LrDecay, OptimConfig};

/// Every accepted key, in application order.
pub const KEYS: &[&str] = &[
    "backbone.preset",
    "backbone.block",
    "backbone.stage_blocks",
    "backbone.stage_widths",
    "backbone.stage_strides",
    "backbone.scale",
    "backbone.stem",
    "backbone.stem_width",
    "backbone.bottleneck_ratio",
    "backbone.batch_norm",
    "csra.classes",
    "csra.heads",
    "csra.temperatures",
    "csra.lambda",
    "optim.lr_head",
    "optim.lr_backbone",
    "optim.momentum",
    "optim.weight_decay",
    "optim.warmup_steps",
    "optim.decay",
    "optim.epochs",
    "optim.batch_size",
    "data.manifest",
    "data.test_manifest",
    "data.image_size",
    "data.train_fraction",
    "data.augment",
    "data.flip_prob",
    "data.min_crop_area",
    "data.prefetch",
    "run.seed",
    "run.out_dir",
];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Manifest CSV; split into train and test unless `test_manifest` is set.
    pub manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Square side every image is resized to.
    pub image_size: usize,
    pub train_fraction: f64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub prefetch: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            test_manifest: None,
            image_size: 32,
            train_fraction: 0.8,
            augment: true,
            augmentation: AugmentConfig::default(),
            prefetch: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub backbone: BackboneConfig,
    /// `num_classes == 0` means "take it from the manifest".
    pub head: CsraHeadConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            preset: "tiny".to_string(),
            backbone: BackboneConfig {
                input_size: data.image_size,
                ..BackboneConfig::tiny()
            },
            head: CsraHeadConfig::new(0, 2, DEFAULT_LAMBDA),
            optim: OptimConfig::default(),
            data,
            seed: 0,
            out_dir: PathBuf::from("run"),
        }
    }
}

fn bad_value(key: &str, value: &str, expected: &str) -> Error {
    Error::usage(format!("invalid value {value:?} for key {key}: expected {expected}"))
}

fn parse_num<V: FromStr>(key: &str, value: &str, expected: &str) -> Result<V> {
    value.parse().map_err(|_| bad_value(key, value, expected))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad_value(key, value, "true or false")),
    }
}

fn parse_list<V: FromStr>(key: &str, value: &str, expected: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(|part| parse_num(key, part.trim(), expected))
        .collect()
}

fn parse_four(key: &str, value: &str) -> Result<[usize; 4]> {
    let list: Vec<usize> = parse_list(key, value, "four comma-separated integers")?;
    list.try_into()
        .map_err(|_| bad_value(key, value, "four comma-separated integers"))
}

fn join<V: ToString>(values: &[V]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Apply one key. Unknown keys and unparsable values are usage errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "backbone.preset" => {
                self.backbone = BackboneConfig {
                    input_size: self.data.image_size,
                    ..BackboneConfig::preset(value)
                        .map_err(|_| bad_value(key, value, "paper50, paper101 or tiny"))?
                };
                self.preset = value.to_string();
            }
            "backbone.block" => {
                self.backbone.block_kind = match value {
                    "res2net" => BlockKind::Res2Net,
                    "resnet" => BlockKind::ResNet,
                    _ => return Err(bad_value(key, value, "res2net or resnet")),
                }
            }
            "backbone.stage_blocks" => self.backbone.stage_blocks = parse_four(key, value)?,
            "backbone.stage_widths" => self.backbone.stage_widths = parse_four(key, value)?,
            "backbone.stage_strides" => self.backbone.stage_strides = parse_four(key, value)?,
            "backbone.scale" => self.backbone.scale = parse_num(key, value, "an integer")?,
            "backbone.stem" => {
                self.backbone.stem = match value {
                    "full" => Stem::Full,
                    "tiny" => Stem::Tiny,
                    _ => return Err(bad_value(key, value, "full or tiny")),
                }
            }
            "backbone.stem_width" => self.backbone.stem_width = parse_num(key, value, "an integer")?,
            "backbone.bottleneck_ratio" => {
                self.backbone.bottleneck_ratio = parse_num(key, value, "an integer")?
            }
            "backbone.batch_norm" => self.backbone.batch_norm = parse_bool(key, value)?,
            "csra.classes" => self.head.num_classes = parse_num(key, value, "an integer")?,
            "csra.heads" => {
                let heads: usize = parse_num(key, value, "a positive integer")?;
                if heads == 0 {
                    return Err(bad_value(key, value, "a positive integer"));
                }
                self.head.num_heads = heads;
                self.head.temperatures = default_temperatures(heads);
            }
            "csra.temperatures" => {
                self.head.temperatures = parse_list(key, value, "comma-separated numbers")?
            }
            "csra.lambda" => self.head.lambda = parse_num(key, value, "a number")?,
            "optim.lr_head" => self.optim.lr_head = parse_num(key, value, "a number")?,
            "optim.lr_backbone" => self.optim.lr_backbone = parse_num(key, value, "a number")?,
            "optim.momentum" => self.optim.momentum = parse_num(key, value, "a number")?,
            "optim.weight_decay" => self.optim.weight_decay = parse_num(key, value, "a number")?,
            "optim.warmup_steps" => {
                self.optim.warmup_steps = match value {
                    "epoch" => None,
                    _ => Some(parse_num(key, value, "an integer or \"epoch\"")?),
                }
            }
            "optim.decay" => {
                self.optim.decay = match value {
                    "constant" => LrDecay::Constant,
                    "cosine" => LrDecay::Cosine,
                    _ => return Err(bad_value(key, value, "constant or cosine")),
                }
            }
            "optim.epochs" => self.optim.epochs = parse_num(key, value, "an integer")?,
            "optim.batch_size" => self.optim.batch_size = parse_num(key, value, "an integer")?,
            "data.manifest" => self.data.manifest = optional_path(value),
            "data.test_manifest" => self.data.test_manifest = optional_path(value),
            "data.image_size" => {
                self.data.image_size = parse_num(key, value, "an integer")?;
                self.backbone.input_size = self.data.image_size;
            }
            "data.train_fraction" => self.data.train_fraction = parse_num(key, value, "a number")?,
            "data.augment" => self.data.augment = parse_bool(key, value)?,
            "data.flip_prob" => self.data.augmentation.flip_prob = parse_num(key, value, "a number")?,
            "data.min_crop_area" => {
                self.data.augmentation.min_area = parse_num(key, value, "a number")?
            }
            "data.prefetch" => self.data.prefetch = parse_num(key, value, "an integer")?,
            "run.seed" => self.seed = parse_num(key, value, "an unsigned integer")?,
            "run.out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::usage(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    /// Current value of a key in the syntax [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let b = &self.backbone;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "backbone.preset" => self.preset.clone(),
            "backbone.block" => match b.block_kind {
                BlockKind::Res2Net => "res2net".into(),
                BlockKind::ResNet => "resnet".into(),
            },
            "backbone.stage_blocks" => join(&b.stage_blocks),
            "backbone.stage_widths" => join(&b.stage_widths),
            "backbone.stage_strides" => join(&b.stage_strides),
            "backbone.scale" => b.scale.to_string(),
            "backbone.stem" => match b.stem {
                Stem::Full => "full".into(),
                Stem::Tiny => "tiny".into(),
            },
            "backbone.stem_width" => b.stem_width.to_string(),
            "backbone.bottleneck_ratio" => b.bottleneck_ratio.to_string(),
            "backbone.batch_norm" => b.batch_norm.to_string(),
            "csra.classes" => self.head.num_classes.to_string(),
            "csra.heads" => self.head.num_heads.to_string(),
            "csra.temperatures" => join(&self.head.temperatures),
            "csra.lambda" => self.head.lambda.to_string(),
            "optim.lr_head" => self.optim.lr_head.to_string(),
            "optim.lr_backbone" => self.optim.lr_backbone.to_string(),
            "optim.momentum" => self.optim.momentum.to_string(),
            "optim.weight_decay" => self.optim.weight_decay.to_string(),
            "optim.warmup_steps" => match self.optim.warmup_steps {
                Some(n) => n.to_string(),
                None => "epoch".into(),
            },
            "optim.decay" => match self.optim.decay {
                LrDecay::Constant => "constant".into(),
                LrDecay::Cosine => "cosine".into(),
            },
            "optim.epochs" => self.optim.epochs.to_string(),
            "optim.batch_size" => self.optim.batch_size.to_string(),
            "data.manifest" => path(&self.data.manifest),
            "data.test_manifest" => path(&self.data.test_manifest),
            "data.image_size" => self.data.image_size.to_string(),
            "data.train_fraction" => self.data.train_fraction.to_string(),
            "data.augment" => self.data.augment.to_string(),
            "data.flip_prob" => self.data.augmentation.flip_prob.to_string(),
            "data.min_crop_area" => self.data.augmentation.min_area.to_string(),
            "data.prefetch" => self.data.prefetch.to_string(),
            "run.seed" => self.seed.to_string(),
            "run.out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Every key with its value, one `key = value` per line. Parsing the echo
    /// reproduces the configuration.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// Head configuration with the class count filled in.
    pub fn head_for(&self, num_classes: usize) -> Result<CsraHeadConfig> {
        if self.head.num_classes != 0 && self.head.num_classes != num_classes {
            return Err(Error::data(format!(
                "csra.classes is {} but the data has {num_classes} classes",
                self.head.num_classes
            )));
        }
        let head = CsraHeadConfig {
            num_classes,
            ..self.head.clone()
        };
        head.validate()?;
        Ok(head)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.optim.validate()?;
        if self.head.num_classes != 0 {
            self.head.validate()?;
        } else {
            CsraHeadConfig {
                num_classes: 1,
                ..self.head.clone()
            }
            .validate()?;
        }
        if self.data.augment {
            self.data.augmentation.validate()?;
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "data.train_fraction {} must lie in (0, 1)",
                self.data.train_fraction
            )));
        }
        Ok(())
    }

    pub fn augmentation(&self) -> Option<AugmentConfig> {
        self.data.augment.then_some(self.data.augmentation)
    }
}

/// Parse `key = value` lines. Blank lines and lines starting with `#` are
/// skipped; a later line for the same key wins.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::usage(format!("line {}: expected \"key = value\", got {line:?}", n + 1)))?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Turn `["--optim.epochs", "5", ...]` into key/value pairs.
pub fn parse_flag_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut iter = args.iter();
    while let Some(flag) = iter.next() {
        let key = flag
            .strip_prefix("--")
            .filter(|k| k.contains('.'))
            .ok_or_else(|| Error::usage(format!("unexpected argument {flag:?}")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let value = iter
                    .next()
                    .ok_or_else(|| Error::usage(format!("flag --{key} needs a value")))?;
                (key.to_string(), value.clone())
            }
        };
        pairs.push((key, value));
    }
    Ok(pairs)
}

/// Resolve defaults, then `file_pairs`, then `flag_pairs`.
pub fn resolve(base: RunConfig, file_pairs: &[(String, String)], flag_pairs: &[(String, String)]) -> Result<RunConfig> {
    let mut latest: BTreeMap<&str, &str> = BTreeMap::new();
    for (key, value) in file_pairs.iter().chain(flag_pairs) {
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::usage(format!("unknown config key {key}")));
        }
        latest.insert(key, value);
    }
    let mut config = base;
    for key in KEYS {
        if let Some(value) = latest.get(key) {
            config.set(key, value)?;
        }
    }
    Ok(config)
}

/// Defaults, overridden by an optional config file, overridden by flags.
pub fn parse_config(file: Option<&Path>, flags: &[String]) -> Result<RunConfig> {
    let file_pairs = match file {
        Some(path) => {
            if !path.exists() {
                return Err(Error::usage(format!("config file {} does not exist", path.display())));
            }
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_config_text(&text)?
        }
        None => Vec::new(),
    };
    let config = resolve(RunConfig::default(), &file_pairs, &parse_flag_overrides(flags)?)?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(args: &[&str]) -> Vec<String> {
        args.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn empty_file_gives_defaults() {
        let config = resolve(RunConfig::default(), &parse_config_text("").unwrap(), &[]).unwrap();
        assert_eq!(config.optim.lr_head, 0.1);
        assert_eq!(config.optim.lr_backbone, 0.01);
        assert_eq!(config.optim.momentum, 0.9);
        assert_eq!(config.optim.weight_decay, 1e-4);
        assert_eq!(config.optim.epochs, 30);
        assert_eq!(config, RunConfig::default());
    }

    #[test]
    fn flags_override_file() {
        let file = parse_config_text("# heads\ncsra.heads = 2\noptim.epochs = 7\n").unwrap();
        let over = parse_flag_overrides(&flags(&["--csra.heads", "8"])).unwrap();
        let config = resolve(RunConfig::default(), &file, &over).unwrap();
        assert_eq!(config.head.num_heads, 8);
        assert_eq!(config.head.temperatures, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 99.0]);
        assert_eq!(config.optim.epochs, 7);
    }

    #[test]
    fn bad_keys_and_values_name_the_key() {
        let err = resolve(RunConfig::default(), &parse_config_text("csra.heads = banana").unwrap(), &[]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert!(err.to_string().contains("csra.heads"), "{err}");

        let err = resolve(RunConfig::default(), &parse_config_text("optim.speed = 3").unwrap(), &[]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert!(err.to_string().contains("optim.speed"));

        assert!(parse_config_text("no equals sign").is_err());
        assert!(parse_flag_overrides(&flags(&["--optim.epochs"])).is_err());
        assert!(parse_flag_overrides(&flags(&["positional"])).is_err());
    }

    #[test]
    fn preset_applies_before_its_fields() {
        let file = parse_config_text("backbone.scale = 2\nbackbone.preset = paper50\ndata.image_size = 64").unwrap();
        let config = resolve(RunConfig::default(), &file, &[]).unwrap();
        assert_eq!(config.backbone.stage_blocks, [3, 4, 6, 3]);
        assert_eq!(config.backbone.scale, 2);
        assert_eq!(config.backbone.input_size, 64);
    }

    #[test]
    fn echo_round_trips() {
        let over = parse_flag_overrides(&flags(&[
            "--backbone.block=resnet",
            "--csra.heads",
            "3",
            "--csra.lambda",
            "0.25",
            "--optim.warmup_steps",
            "12",
            "--optim.decay",
            "cosine",
            "--data.manifest",
            "some/manifest.csv",
            "--run.seed",
            "42",
        ]))
        .unwrap();
        let config = resolve(RunConfig::default(), &[], &over).unwrap();
        let echo = config.echo();
        let again = resolve(RunConfig::default(), &parse_config_text(&echo).unwrap(), &[]).unwrap();
        assert_eq!(again, config);
        assert_eq!(again.echo(), echo);
        assert!(echo.lines().count() == KEYS.len());
    }

    #[test]
    fn validation_catches_inconsistent_heads() {
        let file = parse_config_text("csra.heads = 3\ncsra.temperatures = 1,2").unwrap();
        let config = resolve(RunConfig::default(), &file, &[]).unwrap();
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig::default().head_for(6).is_ok());
        let fixed = resolve(RunConfig::default(), &parse_config_text("csra.classes = 4").unwrap(), &[]).unwrap();
        assert!(fixed.head_for(6).is_err());
    }
}
