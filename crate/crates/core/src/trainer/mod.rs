//! Teacher pretraining and joint student training.

mod config;
mod log;


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use config::{Stage, TrainConfig};
pub use log::{parse_log, LogRecord, PretrainRecord, LOG_HEADER, PRETRAIN_HEADER};

use crate::datamix::{assemble, batcher, image_tensor, mix_sampler, Dataset, Draw};
use crate::diffusion::{forward_noise_batch, sample_timesteps, teacher_denoise_loss_with_grad};
use crate::error::{Error, Result};
use crate::losses::{loss_agg, loss_depth, loss_matting, loss_normal, Field, LossBreakdown, LossValue};
use crate::networks::{PredictorState, TapBundle, TapSource, Teacher};
use crate::nn::{warmup_lr, Adam, Graph};
use crate::task::Task;
use crate::tensor::Tensor;

/// Offset between the data-sampling and noise seeds so the two streams differ.
const NOISE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

fn gaussian(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

fn source_counts(draws: &[Draw], data: &Dataset) -> Vec<(String, usize)> {
    let mut counts: Vec<(String, usize)> = data.sources.iter().map(|s| (s.name.clone(), 0)).collect();
    for d in draws {
        counts[d.source].1 += 1;
    }
    counts
}

fn warn_long_warmup(cfg: &TrainConfig) {
    if cfg.warmup_steps >= cfg.steps {
        ::log::warn!(
            "warm-up of {} steps outlasts the {}-step run; the peak learning rate is never reached",
            cfg.warmup_steps,
            cfg.steps
        );
    }
}

/// Train the teacher to predict the noise added to forward-noised images.
///
/// `observer` sees every record and may stop training by returning an error.
pub fn pretrain_teacher(
    teacher: &mut Teacher,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&PretrainRecord) -> Result<()>,
) -> Result<Vec<PretrainRecord>> {
    cfg.validate()?;
    if cfg.stage != Stage::Pretrain {
        return Err(Error::Config("pretrain_teacher needs a pretrain-stage config".into()));
    }
    warn_long_warmup(cfg);
    let sched = cfg.schedule()?;
    let sampler = mix_sampler(data.sources.clone(), ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut batches = batcher(sampler, cfg.batch_size)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM);
    let mut opt = Adam::new(teacher.params(), cfg.weight_decay as f32);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let draws = batches.next().expect("sampler is endless");
        let picked: Vec<_> = draws.iter().map(|d| &data.samples[d.sample]).collect();
        let x = image_tensor(&picked)?;
        let ts = sample_timesteps(&mut noise_rng, &sched, x.batch())?;
        let eps = gaussian(&mut noise_rng, x.shape());
        let noisy = forward_noise_batch(&x, &ts, &eps, &sched)?;
        let lr = warmup_lr(cfg.learning_rate, cfg.warmup_steps, step);
        let grads = {
            let mut g = Graph::new(teacher.params());
            let xn = g.input(noisy);
            let (pred, _) = teacher.forward_graph(&mut g, xn, &ts);
            let (loss, grad) = teacher_denoise_loss_with_grad(g.value(pred).data(), eps.data())?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("denoising loss {loss}"),
                });
            }
            let record = PretrainRecord { step, loss, lr };
            observer(&record)?;
            log.push(record);
            g.backward(vec![(pred, Tensor::from_vec(eps.shape(), grad)?)])
        };
        opt.step(teacher.params_mut(), &grads, lr as f32, |_| true);
    }
    Ok(log)
}

/// Weighted task loss for a batch prediction.
pub fn task_loss(task: Task, pred: &Field, target: &Field, mask: &[bool], cfg: &TrainConfig) -> Result<LossValue> {
    match task {
        Task::Depth => loss_depth(pred, target, mask, &cfg.weights),
        Task::Normal => loss_normal(pred, target, mask, &cfg.weights),
        Task::Matting => loss_matting(pred, target, &cfg.weights),
    }
}

/// Train the student and its projection heads on `L_agg + λ·L_task`; the
/// teacher is only read.
///
/// `observer` sees each record with the updated state and may stop training
/// by returning an error. On a non-finite loss the state is left as it was
/// after the last finite step.
pub fn train_predictor(
    state: &mut PredictorState,
    teacher: &Teacher,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&LogRecord, &PredictorState) -> Result<()>,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if cfg.stage != Stage::PredictTrain {
        return Err(Error::Config("train_predictor needs a predict-train config".into()));
    }
    if cfg.task != state.task() {
        return Err(Error::Config(format!(
            "config trains {} but the student predicts {}",
            cfg.task,
            state.task()
        )));
    }
    if !state.config().same_backbone(teacher.config()) {
        return Err(Error::Config("teacher and student architectures differ".into()));
    }
    warn_long_warmup(cfg);
    let sched = cfg.schedule()?;
    let lambda = cfg.weights.lambda;
    let sampler = mix_sampler(data.sources.clone(), ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut batches = batcher(sampler, cfg.batch_size)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM);
    let mut opt = Adam::new(state.params(), cfg.weight_decay as f32);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let draws = batches.next().expect("sampler is endless");
        let batch = assemble(&data.samples, &draws, cfg.task)?;
        let ts = sample_timesteps(&mut noise_rng, &sched, draws.len())?;
        let eps = gaussian(&mut noise_rng, batch.images.shape());
        let expert = teacher.taps(&batch.images, &eps, &ts, &sched)?;
        let lr = warmup_lr(cfg.learning_rate, cfg.warmup_steps, step);

        let (record, grads) = {
            let mut g = Graph::new(state.params());
            let xn = g.input(batch.images.clone());
            let nodes = state.forward_graph(&mut g, xn);
            let proj_nodes = state.project_graph(&mut g, &nodes.taps, &ts);
            let projected = TapBundle {
                source: TapSource::Projected { timesteps: ts.clone() },
                taps: state
                    .config()
                    .tap_indices
                    .iter()
                    .zip(&proj_nodes)
                    .map(|(&k, &n)| (k, g.value(n).clone()))
                    .collect(),
            };
            let pred = g.value(nodes.prediction);
            if !pred.all_finite() || projected.taps.iter().any(|(_, t)| !t.all_finite()) {
                return Err(Error::NonFinite {
                    step,
                    detail: "student forward pass produced non-finite values".into(),
                });
            }
            let pred = Field::from_tensor(pred);
            let agg = loss_agg(&projected, &expert)?;
            let task = task_loss(cfg.task, &pred, &batch.target, &batch.mask, cfg)?;
            let mut terms = std::collections::BTreeMap::new();
            for (k, v) in &agg.per_tap {
                terms.insert(format!("agg.tap{k}"), *v);
            }
            for (name, v) in &task.terms {
                terms.insert(format!("task.{name}"), *v);
            }
            let breakdown = LossBreakdown::new(agg.value, task.value, lambda, terms)?;
            if !(breakdown.total.is_finite() && agg.value.is_finite() && task.value.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("agg={} task={} total={}", agg.value, task.value, breakdown.total),
                });
            }
            let mut task_grad = task.grad;
            task_grad.data_mut().iter_mut().for_each(|v| *v *= lambda);
            let mut seeds = vec![(nodes.prediction, task_grad.to_tensor())];
            for (k, grad) in agg.grads {
                let pos = state
                    .config()
                    .tap_indices
                    .iter()
                    .position(|&t| t == k)
                    .expect("aggregation taps come from the config");
                seeds.push((proj_nodes[pos], grad.to_tensor()));
            }
            let record = LogRecord {
                step: state.step + 1,
                breakdown,
                lr,
                source_counts: source_counts(&draws, data),
            };
            (record, g.backward(seeds))
        };
        opt.step(state.params_mut(), &grads, lr as f32, |_| true);
        state.step += 1;
        observer(&record, state)?;
        log.push(record);
    }
    Ok(log)
}
