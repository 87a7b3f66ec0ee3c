//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown and duplicate keys are
//! errors; keys that are absent keep their defaults.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::LrSchedule;
use crate::synthdata::SceneSpec;
use crate::trainer::{TrainConfig, UpdateOrder};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits a config text into entries, rejecting malformed and duplicate lines.
pub fn parse_kv(text: &str, path: &str) -> Result<Vec<KvEntry>> {
    let mut out: Vec<KvEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(Error::ConfigLine {
                path: path.to_string(),
                line,
                message: format!("expected `key = value`, got {content:?}"),
            });
        };
        let (key, value) = (k.trim(), v.trim());
        if key.is_empty() {
            return Err(Error::ConfigLine {
                path: path.to_string(),
                line,
                message: "empty key".into(),
            });
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::ConfigLine {
                path: path.to_string(),
                line,
                message: format!("duplicate key `{key}` (first set on line {})", prev.line),
            });
        }
        out.push(KvEntry {
            key: key.to_string(),
            value: value.to_string(),
            line,
        });
    }
    Ok(out)
}

/// A configuration type readable from and writable to flat key-value text.
pub trait KvConfig: Default {
    /// Applies one entry; the error message should name the key.
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String>;
    /// All keys with their current values, in documentation order.
    fn entries(&self) -> Vec<(&'static str, String)>;
    fn check(&self) -> Result<()>;
}

pub fn parse_config<C: KvConfig>(text: &str, path: &str) -> Result<C> {
    let mut cfg = C::default();
    for e in parse_kv(text, path)? {
        cfg.set(&e.key, &e.value).map_err(|message| Error::ConfigLine {
            path: path.to_string(),
            line: e.line,
            message,
        })?;
    }
    cfg.check()?;
    Ok(cfg)
}

pub fn load_config<C: KvConfig>(path: &Path) -> Result<C> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

pub fn emit_config<C: KvConfig>(cfg: &C) -> String {
    cfg.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn nonneg(key: &str, v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(key, v)?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{key} must be >= 0, got {v}"))
    }
}

fn positive(key: &str, v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(key, v)?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{key} must be > 0, got {v}"))
    }
}

fn unit_open(key: &str, v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(key, v)?;
    if (0.0..1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{key} must lie in [0, 1), got {v}"))
    }
}

fn fraction(key: &str, v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(key, v)?;
    if x > 0.0 && x <= 1.0 {
        Ok(x)
    } else {
        Err(format!("{key} must lie in (0, 1], got {v}"))
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn unknown(key: &str, known: &[&str]) -> String {
    format!("unknown key `{key}` (known keys: {})", known.join(", "))
}

pub const TRAIN_KEYS: [&str; 16] = [
    "lambda_dep",
    "lambda_adv",
    "gen_lr",
    "gen_momentum",
    "gen_weight_decay",
    "disc_lr",
    "disc_beta1",
    "disc_beta2",
    "disc_base_width",
    "iterations",
    "seed",
    "lr_schedule",
    "eval_every",
    "berhu_fraction",
    "source_fraction",
    "update_order",
];

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "lambda_dep" => self.lambda_dep = nonneg(key, v)?,
            "lambda_adv" => self.lambda_adv = nonneg(key, v)?,
            "gen_lr" => self.gen_lr = positive(key, v)?,
            "gen_momentum" => self.gen_momentum = unit_open(key, v)?,
            "gen_weight_decay" => self.gen_weight_decay = nonneg(key, v)?,
            "disc_lr" => self.disc_lr = positive(key, v)?,
            "disc_beta1" => self.disc_beta1 = unit_open(key, v)?,
            "disc_beta2" => self.disc_beta2 = unit_open(key, v)?,
            "disc_base_width" => {
                self.disc_base_width = num(key, v)?;
                if self.disc_base_width == 0 {
                    return Err(format!("{key} must be >= 1"));
                }
            }
            "iterations" => self.iterations = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "lr_schedule" => {
                self.lr_schedule = match v.split_once(':') {
                    None if v == "constant" => LrSchedule::Constant,
                    None if v == "poly" => LrSchedule::Poly { power: 0.9 },
                    Some(("poly", p)) => LrSchedule::Poly {
                        power: positive("lr_schedule power", p.trim())?,
                    },
                    _ => return Err(format!("{key}: expected constant, poly or poly:<power>, got {v:?}")),
                }
            }
            "eval_every" => self.eval_every = num(key, v)?,
            "berhu_fraction" => self.berhu_fraction = fraction(key, v)?,
            "source_fraction" => self.source_fraction = fraction(key, v)?,
            "update_order" => {
                self.update_order = match v {
                    "discriminator_first" => UpdateOrder::DiscriminatorFirst,
                    "generator_first" => UpdateOrder::GeneratorFirst,
                    other => return Err(format!("{key}: expected discriminator_first|generator_first, got {other:?}")),
                }
            }
            _ => return Err(unknown(key, &TRAIN_KEYS)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let schedule = match self.lr_schedule {
            LrSchedule::Constant => "constant".to_string(),
            LrSchedule::Poly { power } => format!("poly:{power}"),
        };
        let mut out = vec![
            ("lambda_dep", self.lambda_dep.to_string()),
            ("lambda_adv", self.lambda_adv.to_string()),
            ("gen_lr", self.gen_lr.to_string()),
            ("gen_momentum", self.gen_momentum.to_string()),
            ("gen_weight_decay", self.gen_weight_decay.to_string()),
            ("disc_lr", self.disc_lr.to_string()),
            ("disc_beta1", self.disc_beta1.to_string()),
            ("disc_beta2", self.disc_beta2.to_string()),
            ("disc_base_width", self.disc_base_width.to_string()),
            ("iterations", self.iterations.to_string()),
            ("seed", self.seed.to_string()),
            ("lr_schedule", schedule),
        ];
        out.extend([
            ("eval_every", self.eval_every.to_string()),
            ("berhu_fraction", self.berhu_fraction.to_string()),
            ("source_fraction", self.source_fraction.to_string()),
            (
                "update_order",
                match self.update_order {
                    UpdateOrder::DiscriminatorFirst => "discriminator_first",
                    UpdateOrder::GeneratorFirst => "generator_first",
                }
                .to_string(),
            ),
        ]);
        out
    }

    fn check(&self) -> Result<()> {
        self.validate()
    }
}

pub const MODEL_KEYS: [&str; 6] = [
    "backbone_channels",
    "backbone_depth",
    "classifier_dilation",
    "num_classes",
    "input_height",
    "input_width",
];

impl KvConfig for ModelConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "backbone_channels" => self.backbone_channels = list(key, v)?,
            "backbone_depth" => self.backbone_depth = num(key, v)?,
            "classifier_dilation" => self.classifier_dilation = num(key, v)?,
            "num_classes" => self.num_classes = num(key, v)?,
            "input_height" => self.input_size.0 = num(key, v)?,
            "input_width" => self.input_size.1 = num(key, v)?,
            _ => return Err(unknown(key, &MODEL_KEYS)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let channels: Vec<String> = self.backbone_channels.iter().map(|c| c.to_string()).collect();
        vec![
            ("backbone_channels", channels.join(", ")),
            ("backbone_depth", self.backbone_depth.to_string()),
            ("classifier_dilation", self.classifier_dilation.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("input_height", self.input_size.0.to_string()),
            ("input_width", self.input_size.1.to_string()),
        ]
    }

    fn check(&self) -> Result<()> {
        self.validate()
    }
}

pub const SCENE_KEYS: [&str; 6] = ["height", "width", "num_classes", "class_names", "near_plane", "far_plane"];

impl KvConfig for SceneSpec {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "height" => self.height = num(key, v)?,
            "width" => self.width = num(key, v)?,
            "num_classes" => self.num_classes = num(key, v)?,
            "class_names" => self.class_names = v.split(',').map(|s| s.trim().to_string()).collect(),
            "near_plane" => self.near_plane = positive(key, v)?,
            "far_plane" => self.far_plane = positive(key, v)?,
            _ => return Err(unknown(key, &SCENE_KEYS)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("class_names", self.class_names.join(", ")),
            ("near_plane", self.near_plane.to_string()),
            ("far_plane", self.far_plane.to_string()),
        ]
    }

    fn check(&self) -> Result<()> {
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: TrainConfig = parse_config("", "t").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!((c.lambda_dep, c.lambda_adv, c.gen_lr, c.disc_lr), (1e-3, 1e-3, 2.5e-4, 1e-4));
        assert_eq!((c.gen_momentum, c.gen_weight_decay), (0.9, 1e-4));
        assert_eq!((c.disc_beta1, c.disc_beta2), (0.9, 0.999));
    }

    #[test]
    fn negative_lambda_is_rejected_with_line() {
        let err = parse_config::<TrainConfig>("# c\nlambda_adv = -1\n", "t.cfg").unwrap_err();
        match err {
            Error::ConfigLine { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("lambda_adv"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn duplicate_key_names_both_lines() {
        let err = parse_config::<TrainConfig>("seed = 1\n\nseed = 2\n", "t.cfg").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":3:") && msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = parse_config::<TrainConfig>("learning_rate = 1\n", "t").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        assert!(parse_config::<ModelConfig>("colour = 1", "t").is_err());
    }

    #[test]
    fn round_trips() {
        let mut c = TrainConfig {
            gen_lr: 0.0123,
            lr_schedule: LrSchedule::Poly { power: 0.75 },
            update_order: UpdateOrder::GeneratorFirst,
            ..TrainConfig::default()
        };
        c.seed = 99;
        assert_eq!(parse_config::<TrainConfig>(&emit_config(&c), "t").unwrap(), c);
        let m = ModelConfig::default();
        assert_eq!(parse_config::<ModelConfig>(&emit_config(&m), "t").unwrap(), m);
        let s = SceneSpec::default();
        assert_eq!(parse_config::<SceneSpec>(&emit_config(&s), "t").unwrap(), s);
    }
}
