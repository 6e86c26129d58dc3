use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::NetworkConfig;
use super::heads::{ProjectionHead, ProjectionMode};
use super::unet::{timestep_embedding, timestep_embeddings, OutputHead, UNet, BACKBONE_PREFIX};
use crate::diffusion::{forward_noise_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, ParamId, ParamStore};
use crate::task::Task;
use crate::tensor::Tensor;

/// Where a [`TapBundle`] came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TapSource {
    /// Student backbone on a clean image.
    StudentClean,
    /// Frozen teacher on noisy images, one timestep per batch item.
    Teacher { timesteps: Vec<usize> },
    /// Student taps mapped through the projection heads.
    Projected { timesteps: Vec<usize> },
}

/// Intermediate feature maps at the configured taps, keyed by decoder-block index.
#[derive(Clone, Debug, PartialEq)]
pub struct TapBundle {
    pub source: TapSource,
    pub taps: Vec<(usize, Tensor)>,
}

impl TapBundle {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn shapes(&self) -> Vec<(usize, [usize; 4])> {
        self.taps.iter().map(|(k, t)| (*k, t.shape())).collect()
    }

    pub fn get(&self, k: usize) -> Option<&Tensor> {
        self.taps.iter().find(|(i, _)| *i == k).map(|(_, t)| t)
    }
}

fn check_image(cfg: &NetworkConfig, x: &Tensor) -> Result<()> {
    let (h, w) = cfg.input_size;
    if x.channels() != 3 || x.height() != h || x.width() != w || x.batch() == 0 {
        return Err(Error::Shape(format!(
            "expected [n, 3, {h}, {w}] image batch, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// The frozen diffusion teacher: one network queried at different timesteps.
#[derive(Clone, Debug)]
pub struct Teacher {
    config: NetworkConfig,
    params: ParamStore,
    unet: UNet,
    head: OutputHead,
}

pub(crate) const TEACHER_HEAD: &str = "teacher.out";

impl Teacher {
    /// Build a randomly initialised teacher. Identical seeds give identical weights.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let unet = UNet::build(&mut params, &mut rng, config);
        let head = OutputHead::build(&mut params, &mut rng, TEACHER_HEAD, config.base_channels, 3);
        Ok(Self {
            config: config.clone(),
            params,
            unet,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Returns `(eps_prediction, taps)`.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        x_noisy: NodeId,
        timesteps: &[usize],
    ) -> (NodeId, Vec<NodeId>) {
        let emb = g.input(timestep_embeddings(
            timesteps,
            self.config.timestep_embed_dim,
        ));
        let out = self.unet.forward(g, x_noisy, emb);
        let eps = self.head.forward(g, out.features);
        (eps, out.taps)
    }

    /// Predict the noise in `x_noisy` at the given per-item timesteps.
    pub fn predict_noise(&self, x_noisy: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        check_image(&self.config, x_noisy)?;
        if timesteps.len() != x_noisy.batch() {
            return Err(Error::Shape(
                "one timestep per batch item is required".into(),
            ));
        }
        let mut g = Graph::frozen(&self.params);
        let x = g.input(x_noisy.clone());
        let (eps, _) = self.forward_graph(&mut g, x, timesteps);
        Ok(g.value(eps).clone())
    }

    /// Noise `x` to the given timesteps and return the teacher's taps.
    ///
    /// The teacher is evaluated on a frozen graph, so no gradient reaches it.
    pub fn taps(
        &self,
        x: &Tensor,
        eps: &Tensor,
        timesteps: &[usize],
        sched: &NoiseSchedule,
    ) -> Result<TapBundle> {
        check_image(&self.config, x)?;
        let noisy = forward_noise_batch(x, timesteps, eps, sched)?;
        let mut g = Graph::frozen(&self.params);
        let xn = g.input(noisy);
        let (_, taps) = self.forward_graph(&mut g, xn, timesteps);
        Ok(TapBundle {
            source: TapSource::Teacher {
                timesteps: timesteps.to_vec(),
            },
            taps: self
                .config
                .tap_indices
                .iter()
                .zip(taps)
                .map(|(&k, n)| (k, g.value(n).clone()))
                .collect(),
        })
    }

    pub(crate) fn from_parts(config: NetworkConfig, params: ParamStore) -> Result<Self> {
        let mut teacher = Teacher::build(&config, 0)?;
        load_named(&mut teacher.params, &params)?;
        Ok(teacher)
    }
}

/// Copy every tensor of `src` into `dst` by name, requiring identical name
/// sets and shapes.
fn load_named(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, architecture expects {}",
            src.len(),
            dst.len()
        )));
    }
    for (name, t) in src.iter() {
        dst.set(name, t.clone())?;
    }
    Ok(())
}

pub(crate) const NULL_EMBED: &str = "student.null_embed";
pub(crate) const STUDENT_HEAD: &str = "student.out";
pub(crate) const PROJECTION_PREFIX: &str = "head.";

/// Graph nodes produced by one student pass.
pub(crate) struct StudentNodes {
    /// Post-activation prediction.
    pub prediction: NodeId,
    pub taps: Vec<NodeId>,
}

/// Student weights, projection heads and training metadata.
#[derive(Debug)]
pub struct PredictorState {
    config: NetworkConfig,
    task: Task,
    projection: ProjectionMode,
    params: ParamStore,
    unet: UNet,
    out: OutputHead,
    null_embed: ParamId,
    heads: Vec<ProjectionHead>,
    /// Completed optimisation steps.
    pub step: u64,
    pub seed: u64,
    evaluations: AtomicU64,
}

impl Clone for PredictorState {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            task: self.task,
            projection: self.projection,
            params: self.params.clone(),
            unet: self.unet.clone(),
            out: self.out.clone(),
            null_embed: self.null_embed,
            heads: self.heads.clone(),
            step: self.step,
            seed: self.seed,
            evaluations: AtomicU64::new(0),
        }
    }
}

impl PredictorState {
    /// Fresh, randomly initialised student structure (no teacher weights).
    pub(crate) fn skeleton(
        config: &NetworkConfig,
        task: Task,
        projection: ProjectionMode,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if config.output_channels != task.output_channels() {
            return Err(Error::Config(format!(
                "{task} needs {} output channels, config has {}",
                task.output_channels(),
                config.output_channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let unet = UNet::build(&mut params, &mut rng, config);
        let e = config.timestep_embed_dim;
        let null = Tensor::from_vec([1, e, 1, 1], timestep_embedding(0.0, e))?;
        let null_embed = params.insert(NULL_EMBED, null);
        let out = OutputHead::build(
            &mut params,
            &mut rng,
            STUDENT_HEAD,
            config.base_channels,
            config.output_channels,
        );
        let heads = match projection {
            ProjectionMode::Conditioned => config
                .tap_indices
                .iter()
                .map(|&k| {
                    let (c, _, _) = config.tap_shape(k);
                    ProjectionHead::build(&mut params, &mut rng, &format!("head.{k}"), c, e)
                })
                .collect(),
            ProjectionMode::Identity => Vec::new(),
        };
        Ok(Self {
            config: config.clone(),
            task,
            projection,
            params,
            unet,
            out,
            null_embed,
            heads,
            step: 0,
            seed,
            evaluations: AtomicU64::new(0),
        })
    }

    /// Initialise a student from `teacher`: backbone weights are copied, the
    /// timestep pathway is fed a learned null embedding starting at the
    /// `t = 0` embedding, and the prediction and projection heads are fresh.
    pub fn from_teacher(
        config: &NetworkConfig,
        task: Task,
        teacher: &Teacher,
        projection: ProjectionMode,
        seed: u64,
    ) -> Result<Self> {
        if !config.same_backbone(teacher.config()) {
            return Err(Error::Config(format!(
                "student architecture does not match teacher:\n{}vs\n{}",
                config.to_text(),
                teacher.config().to_text()
            )));
        }
        let mut state = Self::skeleton(config, task, projection, seed)?;
        for (name, t) in teacher.params().iter() {
            if name.starts_with(BACKBONE_PREFIX) {
                state.params.set(name, t.clone())?;
            }
        }
        Ok(state)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn projection(&self) -> ProjectionMode {
        self.projection
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Scalar parameter count of the projection heads.
    pub fn head_parameter_count(&self) -> usize {
        self.params.num_scalars_with_prefix(PROJECTION_PREFIX)
    }

    /// Number of student forward evaluations performed so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub(crate) fn forward_graph(&self, g: &mut Graph, x: NodeId) -> StudentNodes {
        let n = g.value(x).batch();
        let null = g.param(self.null_embed);
        let emb = g.repeat(null, n);
        let out = self.unet.forward(g, x, emb);
        let raw = self.out.forward(g, out.features);
        let prediction = match self.task {
            Task::Depth | Task::Matting => g.sigmoid(raw),
            Task::Normal => raw,
        };
        StudentNodes {
            prediction,
            taps: out.taps,
        }
    }

    pub(crate) fn project_graph(
        &self,
        g: &mut Graph,
        taps: &[NodeId],
        timesteps: &[usize],
    ) -> Vec<NodeId> {
        match self.projection {
            ProjectionMode::Identity => taps.to_vec(),
            ProjectionMode::Conditioned => {
                let emb = g.input(timestep_embeddings(
                    timesteps,
                    self.config.timestep_embed_dim,
                ));
                self.heads
                    .iter()
                    .zip(taps)
                    .map(|(head, &tap)| head.forward(g, tap, emb))
                    .collect()
            }
        }
    }

    /// One deterministic forward pass on clean images `x: [n, 3, h, w]`.
    ///
    /// Returns the prediction `[n, output_channels, h, w]` and the student taps.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, TapBundle)> {
        check_image(&self.config, x)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        let mut g = Graph::frozen(&self.params);
        let xn = g.input(x.clone());
        let nodes = self.forward_graph(&mut g, xn);
        let taps = TapBundle {
            source: TapSource::StudentClean,
            taps: self
                .config
                .tap_indices
                .iter()
                .zip(&nodes.taps)
                .map(|(&k, &n)| (k, g.value(n).clone()))
                .collect(),
        };
        Ok((g.value(nodes.prediction).clone(), taps))
    }

    /// Prediction only; still exactly one forward evaluation.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }

    /// Map clean student taps into the expert spaces of the given per-item timesteps.
    pub fn project(&self, taps: &TapBundle, timesteps: &[usize]) -> Result<TapBundle> {
        if taps.source != TapSource::StudentClean {
            return Err(Error::Usage(format!(
                "only clean student taps can be projected, got {:?}",
                taps.source
            )));
        }
        if taps.len() != self.config.tap_indices.len() {
            return Err(Error::Usage(format!(
                "expected {} taps, got {}",
                self.config.tap_indices.len(),
                taps.len()
            )));
        }
        let batch = taps.taps[0].1.batch();
        if timesteps.len() != batch {
            return Err(Error::Shape(format!(
                "{} timesteps for a batch of {batch}",
                timesteps.len()
            )));
        }
        let mut g = Graph::frozen(&self.params);
        let nodes: Vec<NodeId> = taps.taps.iter().map(|(_, t)| g.input(t.clone())).collect();
        let projected = self.project_graph(&mut g, &nodes, timesteps);
        Ok(TapBundle {
            source: TapSource::Projected {
                timesteps: timesteps.to_vec(),
            },
            taps: taps
                .taps
                .iter()
                .zip(projected)
                .map(|((k, _), n)| (*k, g.value(n).clone()))
                .collect(),
        })
    }

    pub(crate) fn from_parts(
        config: NetworkConfig,
        task: Task,
        projection: ProjectionMode,
        seed: u64,
        step: u64,
        params: ParamStore,
    ) -> Result<Self> {
        let mut state = Self::skeleton(&config, task, projection, seed)?;
        load_named(&mut state.params, &params)?;
        state.step = step;
        Ok(state)
    }
}
