use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Architecture of the teacher/student U-Net.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// `(height, width)` in pixels.
    pub input_size: (usize, usize),
    pub base_channels: usize,
    /// Number of resolution levels; the deepest is downsampled `depth_levels - 1` times.
    pub depth_levels: usize,
    /// Decoder-block indices whose outputs are tapped, 0 = deepest block.
    pub tap_indices: Vec<usize>,
    pub output_channels: usize,
    pub timestep_embed_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            base_channels: 8,
            depth_levels: 3,
            tap_indices: vec![0, 1, 2],
            output_channels: 1,
            timestep_embed_dim: 32,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if self.depth_levels == 0 {
            return Err(Error::Config("depth_levels must be at least 1".into()));
        }
        let factor = 1usize << (self.depth_levels - 1);
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a positive multiple of {factor} for {} levels",
                self.depth_levels
            )));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "base_channels must be even and at least 2, got {}",
                self.base_channels
            )));
        }
        if self.timestep_embed_dim < 2 || self.timestep_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "timestep_embed_dim must be even and at least 2, got {}",
                self.timestep_embed_dim
            )));
        }
        if !matches!(self.output_channels, 1 | 3) {
            return Err(Error::Config(format!(
                "output_channels must be 1 or 3, got {}",
                self.output_channels
            )));
        }
        if self.tap_indices.is_empty() {
            return Err(Error::Config("at least one tap index is required".into()));
        }
        if self.tap_indices.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Config(format!(
                "tap indices must be strictly increasing, got {:?}",
                self.tap_indices
            )));
        }
        if let Some(&bad) = self.tap_indices.iter().find(|&&k| k >= self.depth_levels) {
            return Err(Error::Config(format!(
                "tap index {bad} is beyond the {} decoder blocks",
                self.depth_levels
            )));
        }
        Ok(())
    }

    /// Channel width at resolution level `level` (0 = full resolution).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Resolution level of decoder block `block`.
    pub fn decoder_level(&self, block: usize) -> usize {
        self.depth_levels - 1 - block
    }

    /// `(channels, height, width)` of the output of decoder block `block`.
    pub fn tap_shape(&self, block: usize) -> (usize, usize, usize) {
        let level = self.decoder_level(block);
        let (h, w) = self.input_size;
        (self.level_channels(level), h >> level, w >> level)
    }

    /// True when two configs can share backbone weights.
    pub fn same_backbone(&self, other: &NetworkConfig) -> bool {
        self.input_size == other.input_size
            && self.base_channels == other.base_channels
            && self.depth_levels == other.depth_levels
            && self.timestep_embed_dim == other.timestep_embed_dim
            && self.tap_indices == other.tap_indices
    }

    pub fn to_text(&self) -> String {
        let taps: Vec<String> = self.tap_indices.iter().map(usize::to_string).collect();
        format!(
            "input_height={}\ninput_width={}\nbase_channels={}\ndepth_levels={}\ntap_indices={}\noutput_channels={}\ntimestep_embed_dim={}\n",
            self.input_size.0,
            self.input_size.1,
            self.base_channels,
            self.depth_levels,
            taps.join(","),
            self.output_channels,
            self.timestep_embed_dim
        )
    }

    /// Parse the `key=value` lines produced by [`NetworkConfig::to_text`];
    /// keys not belonging to the network are returned untouched.
    pub fn from_text(text: &str) -> Result<(Self, BTreeMap<String, String>)> {
        let mut map = parse_kv(text)?;
        let mut take = |key: &str| {
            map.remove(key)
                .ok_or_else(|| Error::Config(format!("network config is missing {key}")))
        };
        let num = |key: &str, v: String| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
        };
        let h = num("input_height", take("input_height")?)?;
        let w = num("input_width", take("input_width")?)?;
        let base_channels = num("base_channels", take("base_channels")?)?;
        let depth_levels = num("depth_levels", take("depth_levels")?)?;
        let taps = take("tap_indices")?;
        let tap_indices = taps
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| num("tap_indices", s.trim().to_string()))
            .collect::<Result<Vec<_>>>()?;
        let output_channels = num("output_channels", take("output_channels")?)?;
        let timestep_embed_dim = num("timestep_embed_dim", take("timestep_embed_dim")?)?;
        let cfg = Self {
            input_size: (h, w),
            base_channels,
            depth_levels,
            tap_indices,
            output_channels,
            timestep_embed_dim,
        };
        cfg.validate()?;
        Ok((cfg, map))
    }
}

pub(crate) fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected key=value, got {line:?}",
                lineno + 1
            ))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}
