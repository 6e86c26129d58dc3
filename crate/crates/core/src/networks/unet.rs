//! Timestep-conditioned U-Net backbone shared by teacher and student.

use rand::Rng;

use super::config::NetworkConfig;
use crate::nn::{Graph, NodeId, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Sinusoidal embedding of timestep `t`: `[sin(t f_i)..., cos(t f_i)...]`
/// with `f_i = 10000^(-i / (dim/2))`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f32> = freqs.iter().map(|f| (t * f).sin() as f32).collect();
    out.extend(freqs.iter().map(|f| (t * f).cos() as f32));
    out
}

/// `[n, dim, 1, 1]` embeddings for a batch of timesteps.
pub fn timestep_embeddings(timesteps: &[usize], dim: usize) -> Tensor {
    let data = timesteps
        .iter()
        .flat_map(|&t| timestep_embedding(t as f64, dim))
        .collect();
    Tensor::from_vec([timesteps.len(), dim, 1, 1], data).expect("embedding shape")
}

/// Number of normalisation groups for `channels`.
pub(crate) fn norm_groups(channels: usize) -> usize {
    [4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl Conv {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = store.insert_uniform(rng, format!("{name}.w"), [cout, cin, k, k], fan_in);
        let b = store.insert_uniform(rng, format!("{name}.b"), [1, cout, 1, 1], fan_in);
        Self { w, b, k }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.conv(x, self.w, Some(self.b), self.k)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn build(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.insert(
            format!("{name}.gamma"),
            Tensor::full([1, channels, 1, 1], 1.0),
        );
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1]));
        Self {
            gamma,
            beta,
            groups: norm_groups(channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.group_norm(x, self.gamma, self.beta, self.groups)
    }
}

/// Pre-activation residual block with an additive timestep bias.
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Conv,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        embed: usize,
    ) -> Self {
        Self {
            norm1: Norm::build(store, &format!("{name}.norm1"), cin),
            conv1: Conv::build(store, rng, &format!("{name}.conv1"), cin, cout, 3),
            time: Conv::build(store, rng, &format!("{name}.time"), embed, cout, 1),
            norm2: Norm::build(store, &format!("{name}.norm2"), cout),
            conv2: Conv::build(store, rng, &format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout)
                .then(|| Conv::build(store, rng, &format!("{name}.skip"), cin, cout, 1)),
        }
    }

    /// `temb` is the already activated `[n, embed, 1, 1]` timestep embedding.
    pub fn forward(&self, g: &mut Graph, x: NodeId, temb: NodeId) -> NodeId {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, h);
        let bias = self.time.forward(g, temb);
        let h = g.add_channel(h, bias);
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let skip = match &self.skip {
            Some(conv) => conv.forward(g, x),
            None => x,
        };
        g.add(h, skip)
    }
}

/// Encoder-decoder backbone. Parameters live under the `unet.` prefix.
#[derive(Clone, Debug)]
pub(crate) struct UNet {
    conv_in: Conv,
    time1: Conv,
    time2: Conv,
    encoder: Vec<ResBlock>,
    middle: ResBlock,
    decoder: Vec<ResBlock>,
    taps: Vec<usize>,
}

pub(crate) struct BackboneOutput {
    /// Output of the last decoder block (full resolution).
    pub features: NodeId,
    /// One node per configured tap, in tap order.
    pub taps: Vec<NodeId>,
}

pub(crate) const BACKBONE_PREFIX: &str = "unet.";

impl UNet {
    pub fn build<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &NetworkConfig) -> Self {
        let e = cfg.timestep_embed_dim;
        let levels = cfg.depth_levels;
        let ch = |l: usize| cfg.level_channels(l);
        let conv_in = Conv::build(store, rng, "unet.conv_in", 3, ch(0), 3);
        let time1 = Conv::build(store, rng, "unet.time1", e, e, 1);
        let time2 = Conv::build(store, rng, "unet.time2", e, e, 1);
        let mut encoder = Vec::with_capacity(levels);
        for l in 0..levels {
            let cin = if l == 0 { ch(0) } else { ch(l - 1) };
            encoder.push(ResBlock::build(
                store,
                rng,
                &format!("unet.enc{l}"),
                cin,
                ch(l),
                e,
            ));
        }
        let deep = ch(levels - 1);
        let middle = ResBlock::build(store, rng, "unet.mid", deep, deep, e);
        let mut decoder = Vec::with_capacity(levels);
        for block in 0..levels {
            let l = cfg.decoder_level(block);
            let from_below = if block == 0 { deep } else { ch(l + 1) };
            decoder.push(ResBlock::build(
                store,
                rng,
                &format!("unet.dec{block}"),
                from_below + ch(l),
                ch(l),
                e,
            ));
        }
        Self {
            conv_in,
            time1,
            time2,
            encoder,
            middle,
            decoder,
            taps: cfg.tap_indices.clone(),
        }
    }

    /// `x: [n, 3, h, w]`, `embedding: [n, e, 1, 1]` raw timestep embedding.
    pub fn forward(&self, g: &mut Graph, x: NodeId, embedding: NodeId) -> BackboneOutput {
        let t = self.time1.forward(g, embedding);
        let t = g.silu(t);
        let t = self.time2.forward(g, t);
        let temb = g.silu(t);

        let mut h = self.conv_in.forward(g, x);
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (l, block) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = g.avg_pool2(h);
            }
            h = block.forward(g, h, temb);
            skips.push(h);
        }
        h = self.middle.forward(g, h, temb);
        let mut taps = Vec::with_capacity(self.taps.len());
        for (block, dec) in self.decoder.iter().enumerate() {
            if block > 0 {
                h = g.upsample2(h);
            }
            let skip = skips.pop().expect("one skip per level");
            let cat = g.concat(h, skip);
            h = dec.forward(g, cat, temb);
            if self.taps.contains(&block) {
                taps.push(h);
            }
        }
        BackboneOutput { features: h, taps }
    }
}

/// Normalisation, activation and a 3x3 conv mapping features to outputs.
#[derive(Clone, Debug)]
pub(crate) struct OutputHead {
    norm: Norm,
    conv: Conv,
}

impl OutputHead {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            norm: Norm::build(store, &format!("{name}.norm"), cin),
            conv: Conv::build(store, rng, &format!("{name}.conv"), cin, cout, 3),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.norm.forward(g, x);
        let h = g.silu(h);
        self.conv.forward(g, h)
    }
}
