//! Memory frame selection policies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which past frames form the memory when segmenting frame `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum MemoryPolicy {
    FirstOnly,
    PreviousOnly,
    FirstAndPrevious,
    /// Frame 0, every multiple of `k`, and the previous frame.
    EveryK(usize),
    /// At most `n` frames evenly spaced over `[0, t−1]`, endpoints included.
    FixedN(usize),
}

impl Default for MemoryPolicy {
    fn default() -> Self {
        MemoryPolicy::FixedN(7)
    }
}

impl MemoryPolicy {
    pub fn validate(self) -> Result<Self> {
        match self {
            MemoryPolicy::EveryK(0) => Err(Error::Config("every-k needs k >= 1".into())),
            MemoryPolicy::FixedN(n) if n < 2 => Err(Error::Config(
                "fixed-n needs n >= 2 to hold the first and previous frames".into(),
            )),
            p => Ok(p),
        }
    }

    /// Strictly increasing frame indices in `[0, t−1]` used to segment frame `t`.
    pub fn select(self, t: usize) -> Result<Vec<usize>> {
        select(t, self)
    }
}

/// `round(num / den)` with halves rounded up, in exact integer arithmetic.
fn round_div(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

pub fn select(t: usize, policy: MemoryPolicy) -> Result<Vec<usize>> {
    if t < 1 {
        return Err(Error::contract("memory selection needs t >= 1"));
    }
    let prev = t - 1;
    let mut out = match policy.validate()? {
        MemoryPolicy::FirstOnly => vec![0],
        MemoryPolicy::PreviousOnly => vec![prev],
        MemoryPolicy::FirstAndPrevious => vec![0, prev],
        MemoryPolicy::EveryK(k) => {
            let mut v: Vec<usize> = (0..=prev).step_by(k).collect();
            v.push(prev);
            v
        }
        MemoryPolicy::FixedN(n) => {
            if t <= n {
                (0..t).collect()
            } else {
                (0..n).map(|i| round_div(i * prev, n - 1)).collect()
            }
        }
    };
    out.dedup();
    Ok(out)
}

impl fmt::Display for MemoryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemoryPolicy::FirstOnly => write!(f, "first"),
            MemoryPolicy::PreviousOnly => write!(f, "prev"),
            MemoryPolicy::FirstAndPrevious => write!(f, "first-prev"),
            MemoryPolicy::EveryK(k) => write!(f, "every-k:{k}"),
            MemoryPolicy::FixedN(n) => write!(f, "fixed-n:{n}"),
        }
    }
}

impl FromStr for MemoryPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "unknown memory policy {s:?}; expected first|prev|first-prev|every-k:K|fixed-n:N"
            ))
        };
        let policy = match s.split_once(':') {
            None => match s {
                "first" => MemoryPolicy::FirstOnly,
                "prev" => MemoryPolicy::PreviousOnly,
                "first-prev" => MemoryPolicy::FirstAndPrevious,
                _ => return Err(bad()),
            },
            Some((kind, arg)) => {
                let n: usize = arg.parse().map_err(|_| bad())?;
                match kind {
                    "every-k" => MemoryPolicy::EveryK(n),
                    "fixed-n" => MemoryPolicy::FixedN(n),
                    _ => return Err(bad()),
                }
            }
        };
        policy.validate()
    }
}

impl From<MemoryPolicy> for String {
    fn from(p: MemoryPolicy) -> Self {
        p.to_string()
    }
}

impl TryFrom<String> for MemoryPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}
