//! Flat `section.key=value` run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use d3_core::datamix::SourceKind;
use d3_core::networks::{NetworkConfig, ProjectionMode};
use d3_core::scenegen::{PseudoNoise, SceneConfig};
use d3_core::trainer::{Stage, TrainConfig};
use d3_core::{Error, Result, Task};

/// Keys set by `TrainConfig::to_text` that the stage fixes itself.
const STAGE_FIXED: &[&str] = &["stage"];

fn train_defaults(section: &str, cfg: &TrainConfig) -> Vec<(String, String)> {
    cfg.to_text()
        .lines()
        .filter_map(|l| l.split_once('='))
        .filter(|(k, _)| !STAGE_FIXED.contains(k))
        .map(|(k, v)| (format!("{section}.{k}"), v.to_string()))
        .collect()
}

fn defaults() -> BTreeMap<String, String> {
    let scene = SceneConfig::default();
    let noise = PseudoNoise::default();
    let net = NetworkConfig::default();
    let taps: Vec<String> = net.tap_indices.iter().map(usize::to_string).collect();
    let mut map: BTreeMap<String, String> = [
        ("seed", "0".to_string()),
        ("data.n", "100".into()),
        ("data.size", "64".into()),
        ("data.supersample", "2".into()),
        ("data.pseudo_fraction", "0".into()),
        ("data.clean_rate", "0.76".into()),
        ("data.min_objects", scene.min_primitives.to_string()),
        ("data.max_objects", scene.max_primitives.to_string()),
        ("data.box_probability", scene.box_probability.to_string()),
        ("data.depth_noise", noise.depth_sigma.to_string()),
        ("data.normal_noise", noise.normal_sigma.to_string()),
        ("net.base_channels", net.base_channels.to_string()),
        ("net.depth_levels", net.depth_levels.to_string()),
        ("net.taps", taps.join(",")),
        ("net.embed_dim", net.timestep_embed_dim.to_string()),
        ("train.projection", ProjectionMode::Conditioned.to_string()),
        ("eval.align", "on".into()),
        ("eval.batch_size", "32".into()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    map.extend(train_defaults("pretrain", &TrainConfig::pretrain()));
    map.extend(train_defaults("train", &TrainConfig::predict_train(Task::Depth)));
    map
}

/// Effective configuration: defaults, then the config file, then overrides.
#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// `section` resolves bare override keys such as `lambda=0`.
    pub fn load(file: Option<&Path>, overrides: &[String], section: &str, seed: Option<u64>) -> Result<Self> {
        let mut cfg = Self { values: defaults() };
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
                })?;
                cfg.set(k.trim(), v.trim(), section)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim(), section)?;
        }
        if let Some(seed) = seed {
            cfg.values.insert("seed".into(), seed.to_string());
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, section: &str) -> Result<()> {
        let full = if self.values.contains_key(key) {
            key.to_string()
        } else {
            format!("{section}.{key}")
        };
        if !self.values.contains_key(&full) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        self.values.insert(full, value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key has a default")
    }

    pub fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.num("seed")
    }

    /// Sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.txt");
        fs::write(&path, self.to_text()).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })
    }

    pub fn scene(&self) -> Result<SceneConfig> {
        let cfg = SceneConfig {
            min_primitives: self.num("data.min_objects")?,
            max_primitives: self.num("data.max_objects")?,
            box_probability: self.num("data.box_probability")?,
            ..SceneConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pseudo_noise(&self) -> Result<PseudoNoise> {
        Ok(PseudoNoise {
            depth_sigma: self.num("data.depth_noise")?,
            normal_sigma: self.num("data.normal_noise")?,
        })
    }

    pub fn network(&self, input_size: (usize, usize), output_channels: usize) -> Result<NetworkConfig> {
        let tap_indices = self
            .get("net.taps")
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("net.taps: cannot parse {s:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let cfg = NetworkConfig {
            input_size,
            base_channels: self.num("net.base_channels")?,
            depth_levels: self.num("net.depth_levels")?,
            tap_indices,
            output_channels,
            timestep_embed_dim: self.num("net.embed_dim")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training settings for `stage`, read from its section.
    pub fn train(&self, stage: Stage) -> Result<TrainConfig> {
        let (section, mut cfg) = match stage {
            Stage::Pretrain => ("pretrain", TrainConfig::pretrain()),
            Stage::PredictTrain => ("train", TrainConfig::predict_train(Task::Depth)),
        };
        let prefix = format!("{section}.");
        for (k, v) in &self.values {
            if let Some(key) = k.strip_prefix(&prefix) {
                if key != "projection" {
                    cfg.set(key, v)?;
                }
            }
        }
        cfg.stage = stage;
        cfg.seed = self.seed()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn projection(&self) -> Result<ProjectionMode> {
        self.get("train.projection").parse()
    }

    pub fn align(&self) -> Result<bool> {
        parse_switch("eval.align", self.get("eval.align"))
    }

    pub fn source_kind(pseudo: bool) -> SourceKind {
        if pseudo {
            SourceKind::Pseudo
        } else {
            SourceKind::Synthetic
        }
    }
}

pub fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on or off, got {v:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_and_resolve_bare_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\ntrain.steps=7\ntrain.lambda=0.5\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["lambda=2".into()], "train", Some(9)).unwrap();
        let t = cfg.train(Stage::PredictTrain).unwrap();
        assert_eq!(t.steps, 7);
        assert_eq!(t.weights.lambda, 2.0);
        assert_eq!(t.seed, 9);
        assert_eq!(t.learning_rate, 1e-5);
    }

    #[test]
    fn unknown_keys_and_zero_lambda_are_config_errors() {
        assert!(matches!(
            RunConfig::load(None, &["train.nope=1".into()], "train", None),
            Err(Error::Config(_))
        ));
        let cfg = RunConfig::load(None, &["lambda=0".into()], "train", None).unwrap();
        assert!(matches!(cfg.train(Stage::PredictTrain), Err(Error::Config(_))));
    }

    #[test]
    fn echoed_config_reloads_identically() {
        let cfg = RunConfig::load(None, &["data.n=5".into(), "net.taps=0,2".into()], "data", Some(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        cfg.write_to(dir.path()).unwrap();
        let back = RunConfig::load(Some(&dir.path().join("config.txt")), &[], "data", None).unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
    }
}
