use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::unet::Conv;
use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, ParamStore};

/// How student taps are mapped into each expert's feature space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProjectionMode {
    /// Per-tap timestep-conditioned heads.
    #[default]
    Conditioned,
    /// No heads: student taps are compared to expert taps directly.
    Identity,
}

impl fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectionMode::Conditioned => "conditioned",
            ProjectionMode::Identity => "identity",
        })
    }
}

impl FromStr for ProjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditioned" | "heads" | "on" => Ok(Self::Conditioned),
            "identity" | "none" | "off" => Ok(Self::Identity),
            other => Err(Error::Config(format!("unknown projection mode {other:?}"))),
        }
    }
}

/// `conv2(silu(film(conv1(x), t)))` with 1x1 convolutions; the scale and
/// shift come from a linear map of the sinusoidal timestep embedding.
#[derive(Clone, Debug)]
pub(crate) struct ProjectionHead {
    conv1: Conv,
    modulation: Conv,
    conv2: Conv,
    channels: usize,
}

impl ProjectionHead {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        embed: usize,
    ) -> Self {
        Self {
            conv1: Conv::build(store, rng, &format!("{name}.conv1"), channels, channels, 1),
            modulation: Conv::build(store, rng, &format!("{name}.film"), embed, 2 * channels, 1),
            conv2: Conv::build(store, rng, &format!("{name}.conv2"), channels, channels, 1),
            channels,
        }
    }

    /// `embedding` is the raw `[n, e, 1, 1]` sinusoidal timestep embedding.
    pub fn forward(&self, g: &mut Graph, x: NodeId, embedding: NodeId) -> NodeId {
        let h = self.conv1.forward(g, x);
        let m = self.modulation.forward(g, embedding);
        let scale = g.channels(m, 0, self.channels);
        let shift = g.channels(m, self.channels, self.channels);
        let h = g.film(h, scale, shift);
        let h = g.silu(h);
        self.conv2.forward(g, h)
    }
}
