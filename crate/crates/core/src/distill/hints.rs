use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which intermediate layers feed the hint loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum HintMode {
    None,
    /// `m` distinct layers drawn uniformly once per epoch.
    Random(usize),
    All,
}

impl fmt::Display for HintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HintMode::None => f.write_str("none"),
            HintMode::Random(m) => write!(f, "random-{m}"),
            HintMode::All => f.write_str("all"),
        }
    }
}

impl FromStr for HintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(HintMode::None),
            "all" => Ok(HintMode::All),
            _ => s
                .strip_prefix("random-")
                .and_then(|m| m.parse().ok())
                .filter(|&m| m > 0)
                .map(HintMode::Random)
                .ok_or_else(|| {
                    Error::Config(format!("unknown hint mode `{s}` (none, random-<m>, all)"))
                }),
        }
    }
}

impl TryFrom<String> for HintMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<HintMode> for String {
    fn from(m: HintMode) -> String {
        m.to_string()
    }
}

/// Generator for epoch `epoch`'s draws; `purpose` separates independent
/// streams (shuffling vs hint selection).
pub(crate) fn epoch_rng(seed: u64, epoch: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_mul(2).wrapping_add(purpose));
    rng
}

/// Sorted 1-based hint layers for `epoch`, always a subset of
/// `1..num_layers` (the last layer belongs to the feature loss).
pub fn select_hint_layers(
    mode: HintMode,
    epoch: u64,
    seed: u64,
    num_layers: usize,
) -> Result<Vec<usize>> {
    if num_layers < 2 {
        return Err(Error::arg(
            "select_hint_layers",
            format!("need at least 2 layers, got {num_layers}"),
        ));
    }
    let pool = num_layers - 1;
    Ok(match mode {
        HintMode::None => Vec::new(),
        HintMode::All => (1..num_layers).collect(),
        HintMode::Random(m) => {
            if m > pool {
                return Err(Error::arg(
                    "select_hint_layers",
                    format!("cannot draw {m} of {pool} intermediate layers"),
                ));
            }
            let mut rng = epoch_rng(seed, epoch, 1);
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool, m)
                .into_iter()
                .map(|i| i + 1)
                .collect();
            picked.sort_unstable();
            picked
        }
    })
}
