//! Numerical experiments on the approximated joint-probability update.
//!
//! [`simulate_slack`] iterates the update of one bit pair's joint probability
//! along the approximated derivative while the marginals drift under their own
//! gradients, tracking the slack `ε = P(B_i,B_j) − P(B_i)P(B_j)`.
//! [`scatter_experiment`] trains a hash model on mutual information alone and
//! records every sample's code as a point on a 2-D integer grid.

use crate::encoder::HashModel;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, SeededRng};
use crate::training::mi_descent_step;

/// Step-size schedule `η^t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// `η₀ / (1 + t)`
    Harmonic { eta0: f64 },
    /// `η₀ / (1 + t)^p`
    Power { eta0: f64, power: f64 },
    /// `η₀ · r^t`
    Geometric { eta0: f64, ratio: f64 },
    Constant { eta: f64 },
}

impl Schedule {
    pub fn at(&self, t: usize) -> f64 {
        let t = t as f64;
        match *self {
            Schedule::Harmonic { eta0 } => eta0 / (1.0 + t),
            Schedule::Power { eta0, power } => eta0 / (1.0 + t).powf(power),
            Schedule::Geometric { eta0, ratio } => eta0 * ratio.powf(t),
            Schedule::Constant { eta } => eta,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::Harmonic { eta0 } => eta0 > 0.0,
            Schedule::Power { eta0, power } => eta0 > 0.0 && power > 0.0,
            Schedule::Geometric { eta0, ratio } => eta0 > 0.0 && ratio > 0.0 && ratio < 1.0,
            Schedule::Constant { eta } => eta > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid schedule {self:?}")))
        }
    }
}

/// Initial state and dynamics of one bit pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlackSetup {
    /// `P(B_i, B_j)`
    pub joint: f64,
    /// `(P(B_i), P(B_j))`
    pub marginals: (f64, f64),
    /// Strength of the marginal drift toward ½; `0` freezes the marginals.
    pub marginal_pull: f64,
}

impl SlackSetup {
    /// Builds a setup from a full 2×2 table `[(+,+), (+,−), (−,+), (−,−)]`.
    pub fn from_table(table: [f64; 4], marginal_pull: f64) -> Result<Self> {
        let sum: f64 = table.iter().sum();
        if table.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("{table:?} is not a probability table")));
        }
        Ok(Self {
            joint: table[0],
            marginals: (table[0] + table[1], table[0] + table[2]),
            marginal_pull,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlackTrace {
    pub steps: usize,
    /// `ε^0 … ε^T`, one longer than `lr_series`.
    pub epsilon_series: Vec<f64>,
    pub lr_series: Vec<f64>,
    /// Marginal updates `Δ_i^t`, `Δ_j^t`.
    pub delta_i: Vec<f64>,
    pub delta_j: Vec<f64>,
    /// Number of steps where a probability had to be pulled back into range.
    pub clamp_events: usize,
}

impl SlackTrace {
    pub fn initial(&self) -> f64 {
        self.epsilon_series[0]
    }

    pub fn last(&self) -> f64 {
        *self.epsilon_series.last().expect("never empty")
    }

    /// Largest `|ε^{t+1} − ε^t|` over the final `window` steps.
    pub fn max_recent_change(&self, window: usize) -> f64 {
        let e = &self.epsilon_series;
        let from = e.len().saturating_sub(window + 1);
        e[from..].windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
    }
}

const CELL_FLOOR: f64 = 1e-12;

/// Log odds ratio of the table, i.e. `∂I/∂P(B_i,B_j)` when the other three
/// cells move to keep the marginals fixed. Zero exactly at independence.
fn log_odds(q: f64, pi: f64, pj: f64) -> f64 {
    let c11 = q.max(CELL_FLOOR);
    let c10 = (pi - q).max(CELL_FLOOR);
    let c01 = (pj - q).max(CELL_FLOOR);
    let c00 = (1.0 - pi - pj + q).max(CELL_FLOOR);
    (c11 * c00 / (c10 * c01)).ln()
}

/// Iterates, for `t = 0 … steps−1`:
///
/// ```text
/// P(B_i,B_j) ← P(B_i,B_j) − η^t · g^t · P(B_j)
/// P(B_i)     ← P(B_i) − Δ_i^t,   Δ_i^t = η^t · pull · (P(B_i) − ½)
/// P(B_j)     ← P(B_j) − Δ_j^t
/// ```
///
/// where `g^t` is the log odds ratio of the current table. Probabilities
/// leaving their feasible range are clamped and counted.
pub fn simulate_slack(setup: SlackSetup, schedule: Schedule, steps: usize) -> Result<SlackTrace> {
    schedule.validate()?;
    let (mut pi, mut pj) = setup.marginals;
    let mut q = setup.joint;
    let valid = |p: f64| (0.0..=1.0).contains(&p);
    if !valid(pi) || !valid(pj) || q < (pi + pj - 1.0).max(0.0) - 1e-12 || q > pi.min(pj) + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "joint {q} is infeasible for marginals ({pi}, {pj})"
        )));
    }
    if !(setup.marginal_pull >= 0.0) {
        return Err(Error::InvalidArgument("marginal_pull must be ≥ 0".into()));
    }
    let mut trace = SlackTrace {
        steps,
        epsilon_series: Vec::with_capacity(steps + 1),
        lr_series: Vec::with_capacity(steps),
        delta_i: Vec::with_capacity(steps),
        delta_j: Vec::with_capacity(steps),
        clamp_events: 0,
    };
    trace.epsilon_series.push(q - pi * pj);
    for t in 0..steps {
        let eta = schedule.at(t);
        let g = log_odds(q, pi, pj);
        let di = eta * setup.marginal_pull * (pi - 0.5);
        let dj = eta * setup.marginal_pull * (pj - 0.5);
        let mut nq = q - eta * g * pj;
        let mut npi = pi - di;
        let mut npj = pj - dj;
        let mut clamped = false;
        for p in [&mut npi, &mut npj] {
            if !(0.0..=1.0).contains(p) {
                *p = p.clamp(0.0, 1.0);
                clamped = true;
            }
        }
        let hi = npi.min(npj);
        let lo = (npi + npj - 1.0).max(0.0).min(hi);
        if nq < lo || nq > hi {
            nq = nq.clamp(lo, hi);
            clamped = true;
        }
        trace.clamp_events += clamped as usize;
        (q, pi, pj) = (nq, npi, npj);
        trace.lr_series.push(eta);
        trace.delta_i.push(di);
        trace.delta_j.push(dj);
        trace.epsilon_series.push(q - pi * pj);
    }
    Ok(trace)
}

/// Samples' codes split into two halves, each read as an unsigned integer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScatterFrame {
    pub step: usize,
    pub points: Vec<(u32, u32)>,
}

impl ScatterFrame {
    pub fn distinct_points(&self) -> usize {
        let mut p = self.points.clone();
        p.sort_unstable();
        p.dedup();
        p.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScatterInit {
    /// Fan-in random weights.
    Random,
    /// Fan-in random weights with each bias raised until every sample's
    /// output is at least `margin`, so all samples share the all-`+1` code.
    Collapsed { margin: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterConfig {
    pub code_len: usize,
    pub lr: f64,
    pub beta: f64,
    pub steps: usize,
    pub seed: u64,
    pub init: ScatterInit,
}

impl Default for ScatterConfig {
    fn default() -> Self {
        Self {
            code_len: 16,
            lr: 1e-5,
            beta: 400.0,
            steps: 30,
            seed: 0,
            init: ScatterInit::Collapsed { margin: 1e-3 },
        }
    }
}

/// Grid coordinates of every code: the first `K/2` bits give `x`, the rest
/// `y`, most significant bit first, `+1` read as 1.
pub fn scatter_points(codes: &crate::encoder::CodeMatrix) -> Result<Vec<(u32, u32)>> {
    let k = codes.bits();
    if k % 2 != 0 || k > 64 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "scatter needs an even code length ≤ 64, got {k}"
        )));
    }
    let half = k / 2;
    let read = |bits: &[i8]| bits.iter().fold(0u32, |acc, &b| (acc << 1) | (b > 0) as u32);
    Ok((0..codes.rows())
        .map(|r| {
            let row = codes.row(r);
            (read(&row[..half]), read(&row[half..]))
        })
        .collect())
}

/// Initial model for the scatter run.
pub fn scatter_model(features: &Matrix, config: &ScatterConfig) -> Result<HashModel> {
    let mut model = HashModel::init(features.cols(), config.code_len, &mut SeededRng::new(config.seed))?;
    if let ScatterInit::Collapsed { margin } = config.init {
        let h = model.project(features)?;
        for k in 0..config.code_len {
            let lowest = (0..h.rows()).map(|n| h.get(n, k)).fold(f64::INFINITY, f64::min);
            model.bias[k] = margin - lowest;
        }
    }
    Ok(model)
}

/// Mutual-information-only training; frame `t` shows the codes after `t` steps.
pub fn scatter_experiment(features: &Matrix, config: &ScatterConfig) -> Result<Vec<ScatterFrame>> {
    if config.code_len % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "scatter needs an even code length, got {}",
            config.code_len
        )));
    }
    if features.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut model = scatter_model(features, config)?;
    let mut frames = Vec::with_capacity(config.steps + 1);
    frames.push(ScatterFrame {
        step: 0,
        points: scatter_points(&model.encode(features)?)?,
    });
    for step in 1..=config.steps {
        mi_descent_step(&mut model, features, config.beta, config.lr)?;
        frames.push(ScatterFrame {
            step,
            points: scatter_points(&model.encode(features)?)?,
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::CodeMatrix;

    #[test]
    fn independence_is_a_fixed_point() {
        let setup = SlackSetup {
            joint: 0.3 * 0.6,
            marginals: (0.3, 0.6),
            marginal_pull: 0.0,
        };
        let t = simulate_slack(setup, Schedule::Harmonic { eta0: 1e-2 }, 1000).unwrap();
        assert!(t.epsilon_series.iter().all(|e| e.abs() < 1e-15));
        assert_eq!(t.clamp_events, 0);
    }

    #[test]
    fn infeasible_start_rejected() {
        let setup = SlackSetup {
            joint: 0.5,
            marginals: (0.3, 0.6),
            marginal_pull: 1.0,
        };
        assert!(simulate_slack(setup, Schedule::Harmonic { eta0: 1e-2 }, 10).is_err());
        assert!(SlackSetup::from_table([0.5, 0.5, 0.5, 0.0], 1.0).is_err());
        let ok = SlackSetup::from_table([0.4, 0.1, 0.2, 0.3], 1.0).unwrap();
        assert!(simulate_slack(ok, Schedule::Constant { eta: -1.0 }, 10).is_err());
    }

    #[test]
    fn slack_settles_under_harmonic_schedule() {
        let setup = SlackSetup::from_table([0.4, 0.1, 0.2, 0.3], 1.0).unwrap();
        let t = simulate_slack(setup, Schedule::Harmonic { eta0: 1e-2 }, 10_000).unwrap();
        assert!(t.last().abs() < t.initial().abs());
        assert!(t.max_recent_change(1) < 1e-6);
        assert!(t.epsilon_series.iter().all(|e| e.abs() <= 0.25));
    }

    #[test]
    fn large_constant_step_keeps_moving() {
        let setup = SlackSetup::from_table([0.4, 0.1, 0.2, 0.3], 1.0).unwrap();
        let t = simulate_slack(setup, Schedule::Constant { eta: 0.5 }, 10_000).unwrap();
        assert!(t.max_recent_change(100) > 1e-3);
    }

    #[test]
    fn certain_marginal_keeps_joint_feasible() {
        for pi in [0.1, 0.6408600094600745, 0.9] {
            let setup = SlackSetup::from_table([pi, 0.0, 1.0 - pi, 0.0], 0.0).unwrap();
            let t = simulate_slack(setup, Schedule::Constant { eta: 1.5 }, 50).unwrap();
            assert!(t.epsilon_series.iter().all(|e| e.abs() < 1e-12));
        }
    }

    #[test]
    fn scatter_points_layout() {
        let c = CodeMatrix::new(1, 4, vec![1, -1, -1, 1]).unwrap();
        assert_eq!(scatter_points(&c).unwrap(), vec![(2, 1)]);
        let odd = CodeMatrix::new(1, 3, vec![1, 1, 1]).unwrap();
        assert!(scatter_points(&odd).is_err());
    }

    #[test]
    fn collapsed_start_has_one_point() {
        let x = crate::tensor::rand_uniform(&mut SeededRng::new(3), 100, 8, -1.0, 1.0).unwrap();
        let cfg = ScatterConfig {
            steps: 0,
            ..Default::default()
        };
        let frames = scatter_experiment(&x, &cfg).unwrap();
        assert_eq!(frames[0].distinct_points(), 1);
        let odd = ScatterConfig {
            code_len: 15,
            ..Default::default()
        };
        assert!(scatter_experiment(&x, &odd).is_err());
    }
}
