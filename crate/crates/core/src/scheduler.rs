//! Chain-of-domain curriculum: which pool target batches come from at each
//! iteration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Stream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("stage {0}: sample pool is empty")]
    EmptyPool(&'static str),
    #[error("invalid budgets: {0}")]
    Budgets(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    M1,
    M2,
    Mixed,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::M1 => "m1",
            Stage::M2 => "m2",
            Stage::Mixed => "mixed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Tradition,
    Cod,
    #[default]
    CodTra,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Tradition => "tradition",
            Strategy::Cod => "cod",
            Strategy::CodTra => "cod_tra",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tradition" => Ok(Strategy::Tradition),
            "cod" => Ok(Strategy::Cod),
            "cod_tra" => Ok(Strategy::CodTra),
            _ => Err(format!("unknown strategy `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBudgets {
    pub m1_iters: u64,
    pub m2_iters: u64,
    pub chain_end: u64,
    pub total_iters: u64,
    /// Cycle M1→M2 until `chain_end`; when false the chain runs once and
    /// mixed sampling starts right after it.
    #[serde(default = "yes")]
    pub repeat: bool,
}

fn yes() -> bool {
    true
}

impl StageBudgets {
    pub const PAPER: StageBudgets = StageBudgets {
        m1_iters: 1200,
        m2_iters: 4000,
        chain_end: 12000,
        total_iters: 40000,
        repeat: true,
    };

    /// Every budget multiplied by `factor`, rounded.
    pub fn scaled(&self, factor: f64) -> StageBudgets {
        let s = |v: u64| ((v as f64 * factor).round() as u64).max(1);
        StageBudgets {
            m1_iters: s(self.m1_iters),
            m2_iters: s(self.m2_iters),
            chain_end: s(self.chain_end),
            total_iters: s(self.total_iters),
            repeat: self.repeat,
        }
    }

    pub fn desk() -> StageBudgets {
        Self::PAPER.scaled(0.05)
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.m1_iters == 0 || self.m2_iters == 0 {
            return Err(SchedulerError::Budgets("m1_iters and m2_iters must be positive".into()));
        }
        if self.chain_end > self.total_iters {
            return Err(SchedulerError::Budgets(format!(
                "chain_end {} exceeds total_iters {}",
                self.chain_end, self.total_iters
            )));
        }
        Ok(())
    }

    fn chain_stop(&self) -> u64 {
        if self.repeat {
            self.chain_end
        } else {
            self.chain_end.min(self.m1_iters + self.m2_iters)
        }
    }
}

impl Default for StageBudgets {
    fn default() -> Self {
        Self::desk()
    }
}

pub fn stage_at(t: u64, b: &StageBudgets) -> Stage {
    if t >= b.chain_stop() {
        Stage::Mixed
    } else if t % (b.m1_iters + b.m2_iters) < b.m1_iters {
        Stage::M1
    } else {
        Stage::M2
    }
}

/// Stage function for a sampling strategy.
pub fn strategy_select(strategy: Strategy, b: StageBudgets) -> impl Fn(u64) -> Stage {
    move |t| match strategy {
        Strategy::Tradition => Stage::Mixed,
        Strategy::Cod => stage_at(
            t,
            &StageBudgets {
                chain_end: u64::MAX,
                repeat: true,
                ..b
            },
        ),
        Strategy::CodTra => stage_at(t, &b),
    }
}

/// Sample indices grouped by domain.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pools {
    pub source: Vec<usize>,
    pub m1: Vec<usize>,
    pub m2: Vec<usize>,
    pub target: Vec<usize>,
}

fn draw(pool: &[usize], n: usize, rng: &mut Stream) -> Vec<usize> {
    (0..n).map(|_| pool[rng.below(pool.len())]).collect()
}

/// Uniform draws (with replacement) from the stage's pool; `Mixed` draws
/// from M1 ∪ M2 ∪ target.
pub fn sample_target_batch(
    stage: Stage,
    pools: &Pools,
    n: usize,
    rng: &mut Stream,
) -> Result<Vec<usize>, SchedulerError> {
    let mixed;
    let pool: &[usize] = match stage {
        Stage::M1 => &pools.m1,
        Stage::M2 => &pools.m2,
        Stage::Mixed => {
            mixed = [pools.m1.as_slice(), &pools.m2, &pools.target].concat();
            &mixed
        }
    };
    if pool.is_empty() {
        return Err(SchedulerError::EmptyPool(stage.name()));
    }
    Ok(draw(pool, n, rng))
}

pub fn sample_source_batch(pools: &Pools, n: usize, rng: &mut Stream) -> Result<Vec<usize>, SchedulerError> {
    if pools.source.is_empty() {
        return Err(SchedulerError::EmptyPool("source"));
    }
    Ok(draw(&pools.source, n, rng))
}

/// One line of the stage trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub t: u64,
    pub stage: Stage,
    pub batch_ids: Vec<String>,
}
