//! One comma-separated line per optimizer step.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const HEADER: &str = "step,loss,lr,wall_time";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Seconds since the run (or resumed run) started.
    pub wall_time: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:.8e},{:.6e},{:.3}", self.step, self.loss, self.lr, self.wall_time)
    }
}

impl FromStr for LogLine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(',').collect();
        let bad = || Error::Malformed(format!("log line {s:?}"));
        if parts.len() != 4 {
            return Err(bad());
        }
        Ok(Self {
            step: parts[0].parse().map_err(|_| bad())?,
            loss: parts[1].parse().map_err(|_| bad())?,
            lr: parts[2].parse().map_err(|_| bad())?,
            wall_time: parts[3].parse().map_err(|_| bad())?,
        })
    }
}

/// Renders a full log with header.
pub fn to_csv(lines: &[LogLine]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for l in lines {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<LogLine>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == HEADER => {}
        _ => return Err(Error::Malformed("missing log header".into())),
    }
    lines.filter(|l| !l.trim().is_empty()).map(str::parse).collect()
}
