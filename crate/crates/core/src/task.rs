use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Dense prediction task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Depth,
    Normal,
    Matting,
}

impl Task {
    pub fn output_channels(self) -> usize {
        match self {
            Task::Depth | Task::Matting => 1,
            Task::Normal => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Depth => "depth",
            Task::Normal => "normal",
            Task::Matting => "matting",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Task::Depth),
            "normal" | "normals" => Ok(Task::Normal),
            "matting" | "matte" => Ok(Task::Matting),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}
