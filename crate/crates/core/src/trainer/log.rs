use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

pub const LOG_HEADER: &str = "step\tagg\ttask\ttotal\tlr\tsource_counts";
pub const PRETRAIN_HEADER: &str = "step\tloss\tlr";

/// One student optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub lr: f64,
    /// Items drawn from each source, in source order.
    pub source_counts: Vec<(String, usize)>,
}

impl LogRecord {
    /// Tab-separated line; floats use the shortest exact representation.
    pub fn to_line(&self) -> String {
        let counts: Vec<String> = self
            .source_counts
            .iter()
            .map(|(n, c)| format!("{n}:{c}"))
            .collect();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            self.breakdown.agg,
            self.breakdown.task,
            self.breakdown.total,
            self.lr,
            counts.join(",")
        )
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::Input(format!("log line {line:?}: bad {what}"));
        let f: Vec<&str> = line.split('\t').collect();
        let [step, agg, task, total, lr, counts] = f[..] else {
            return Err(bad("field count"));
        };
        let float = |v: &str, what: &str| v.parse::<f64>().map_err(|_| bad(what));
        let source_counts = counts
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|item| {
                let (n, c) = item.rsplit_once(':').ok_or_else(|| bad("source count"))?;
                Ok((n.to_string(), c.parse().map_err(|_| bad("source count"))?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            step: step.parse().map_err(|_| bad("step"))?,
            breakdown: LossBreakdown {
                total: float(total, "total")?,
                agg: float(agg, "agg")?,
                task: float(task, "task")?,
                terms: BTreeMap::new(),
            },
            lr: float(lr, "lr")?,
            source_counts,
        })
    }
}

/// Parse a training log written with [`LOG_HEADER`].
pub fn parse_log(text: &str) -> Result<Vec<LogRecord>> {
    text.lines()
        .filter(|l| !l.is_empty() && *l != LOG_HEADER)
        .map(LogRecord::from_line)
        .collect()
}

/// One teacher pretraining step.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

impl PretrainRecord {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.step, self.loss, self.lr)
    }
}
