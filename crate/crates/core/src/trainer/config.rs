use std::fmt;
use std::str::FromStr;

use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::task::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    PredictTrain,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::PredictTrain => "predict-train",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "predict-train" | "train" => Ok(Self::PredictTrain),
            other => Err(Error::Config(format!("unknown training stage {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub task: Task,
    pub steps: u64,
    pub batch_size: usize,
    /// Peak learning rate reached after the warm-up.
    pub learning_rate: f64,
    pub warmup_steps: u64,
    /// Loss weights, including λ.
    pub weights: LossWeights,
    pub seed: u64,
    /// Schedule name accepted by [`ScheduleKind::parse`].
    pub schedule: String,
    pub num_timesteps: usize,
    /// Steps between held-out evaluations; 0 disables them.
    pub eval_every: u64,
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            task: Task::Depth,
            steps: 5000,
            batch_size: 32,
            learning_rate: 1e-4,
            warmup_steps: 250,
            weights: LossWeights::default(),
            seed: 0,
            schedule: "linear-beta-scaled".into(),
            num_timesteps: 100,
            eval_every: 0,
            weight_decay: 0.0,
        }
    }

    pub fn predict_train(task: Task) -> Self {
        Self {
            stage: Stage::PredictTrain,
            task,
            steps: 10_000,
            learning_rate: 1e-5,
            warmup_steps: 500,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        self.weights.validate()?;
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(
            ScheduleKind::parse(&self.schedule, self.num_timesteps)?,
            self.num_timesteps,
        )
    }

    /// Set one field from its textual key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        let w = &mut self.weights;
        match key {
            "stage" => self.stage = value.parse()?,
            "task" => self.task = value.parse()?,
            "steps" => self.steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "lambda" => w.lambda = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "schedule" => self.schedule = value.to_string(),
            "num_timesteps" => self.num_timesteps = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "depth_mse" => w.depth_mse = num(key, value)?,
            "depth_aff" => w.depth_aff = num(key, value)?,
            "depth_grad" => w.depth_grad = num(key, value)?,
            "normal_mse" => w.normal_mse = num(key, value)?,
            "normal_ang" => w.normal_ang = num(key, value)?,
            "matting_mse" => w.matting_mse = num(key, value)?,
            "matting_l1" => w.matting_l1 = num(key, value)?,
            "matting_grad" => w.matting_grad = num(key, value)?,
            other => return Err(Error::Config(format!("unknown training key {other:?}"))),
        }
        Ok(())
    }

    /// `key=value` lines accepted by [`TrainConfig::set`].
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        format!(
            "stage={}\ntask={}\nsteps={}\nbatch_size={}\nlearning_rate={}\nwarmup_steps={}\nlambda={}\nseed={}\nschedule={}\nnum_timesteps={}\neval_every={}\nweight_decay={}\ndepth_mse={}\ndepth_aff={}\ndepth_grad={}\nnormal_mse={}\nnormal_ang={}\nmatting_mse={}\nmatting_l1={}\nmatting_grad={}\n",
            self.stage,
            self.task,
            self.steps,
            self.batch_size,
            self.learning_rate,
            self.warmup_steps,
            w.lambda,
            self.seed,
            self.schedule,
            self.num_timesteps,
            self.eval_every,
            self.weight_decay,
            w.depth_mse,
            w.depth_aff,
            w.depth_grad,
            w.normal_mse,
            w.normal_ang,
            w.matting_mse,
            w.matting_l1,
            w.matting_grad,
        )
    }
}
