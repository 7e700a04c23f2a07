use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{parse_groups, Group};

/// Random rotation, mirroring and scaling applied per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Allowed rotations in quarter turns (0..=3), sampled uniformly.
    pub rotations: Vec<u8>,
    pub mirror: bool,
    /// Scale factor drawn uniformly from `[lo, hi]`.
    pub scale_range: (f64, f64),
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            rotations: vec![0],
            mirror: false,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotations.iter().all(|&r| r == 0) && !self.mirror && self.scale_range == (1.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotations.is_empty() || self.rotations.iter().any(|&r| r > 3) {
            return Err(Error::Config(format!("rotations must be quarter turns 0..=3, got {:?}", self.rotations)));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0 && hi.is_finite()) {
            return Err(Error::Config(format!("scale range [{lo}, {hi}] must satisfy 0 < lo <= 1 <= hi")));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotations: vec![0, 1, 2, 3],
            mirror: true,
            scale_range: (0.9, 1.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub lr0: f64,
    pub lr_step: usize,
    pub lr_factor: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub freeze: Vec<Group>,
    pub seed: u64,
    pub shuffle: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            momentum: 0.9,
            lr0: 0.01,
            lr_step: 30,
            lr_factor: 0.1,
            epochs: 90,
            weight_decay: 0.0,
            freeze: Vec::new(),
            seed: 0,
            shuffle: true,
            augment: AugmentConfig::default(),
        }
    }
}

/// Step schedule: `lr0 * factor^floor(epoch / step)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_factor.powi((epoch / cfg.lr_step) as i32)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", i + 1)))?;
        let v = v.trim().trim_matches('"');
        if map.insert(k.trim().to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{}'", i + 1, k.trim())));
        }
    }
    Ok(map)
}

pub(crate) fn parse_value<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{v}' for {key}"))),
    }
}

impl TrainConfig {
    /// Applies and removes the training keys of `map`, leaving other keys in place.
    pub fn apply(&mut self, map: &mut BTreeMap<String, String>) -> Result<()> {
        let keys: Vec<String> = map.keys().cloned().collect();
        for key in keys {
            let v = map[&key].clone();
            match key.as_str() {
                "batch_size" => self.batch_size = parse_value(&key, &v)?,
                "momentum" => self.momentum = parse_value(&key, &v)?,
                "lr0" | "lr" => self.lr0 = parse_value(&key, &v)?,
                "lr_step" => self.lr_step = parse_value(&key, &v)?,
                "lr_factor" => self.lr_factor = parse_value(&key, &v)?,
                "epochs" => self.epochs = parse_value(&key, &v)?,
                "weight_decay" => self.weight_decay = parse_value(&key, &v)?,
                "freeze" => self.freeze = parse_groups(&v)?,
                "seed" => self.seed = parse_value(&key, &v)?,
                "shuffle" => self.shuffle = parse_bool(&key, &v)?,
                "augment" => {
                    if !parse_bool(&key, &v)? {
                        self.augment = AugmentConfig::none();
                    }
                }
                "rotations" => {
                    self.augment.rotations = v
                        .split(',')
                        .map(|d| match d.trim() {
                            "0" => Ok(0),
                            "90" => Ok(1),
                            "180" => Ok(2),
                            "270" => Ok(3),
                            other => Err(Error::Config(format!("rotation {other} is not a quarter turn in degrees"))),
                        })
                        .collect::<Result<_>>()?
                }
                "mirror" => self.augment.mirror = parse_bool(&key, &v)?,
                "scale_min" => self.augment.scale_range.0 = parse_value(&key, &v)?,
                "scale_max" => self.augment.scale_range.1 = parse_value(&key, &v)?,
                _ => continue,
            }
            map.remove(&key);
        }
        Ok(())
    }

    /// Parses a complete training config; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = parse_key_values(text)?;
        let mut cfg = TrainConfig::default();
        cfg.apply(&mut map)?;
        if let Some(k) = map.keys().next() {
            return Err(Error::Config(format!("unknown training key '{k}'")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!("lr_factor must be in (0, 1), got {}", self.lr_factor)));
        }
        if self.lr_step == 0 {
            return Err(Error::Config("lr_step must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be nonnegative, got {}", self.weight_decay)));
        }
        self.augment.validate()
    }
}
