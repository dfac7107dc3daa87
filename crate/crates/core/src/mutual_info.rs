//! Dataset-level bit statistics, pairwise mutual information between bits and
//! the approximated gradient of that information w.r.t. individual codes.
//!
//! Logarithms are natural. For each pair `(i, j)` the joint table is kept in
//! the cell order `[(+,+), (+,−), (−,+), (−,−)]` where `+` means the bit is `+1`.

use crate::encoder::CodeMatrix;
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Matrix;

use std::sync::atomic::{AtomicBool, Ordering};

/// One cell of a 2×2 joint table, named from the point of view of bit `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    /// `B_i = +1, B_j = +1`
    PosPos = 0,
    /// `B_i = +1, B_j = −1`
    PosNeg = 1,
    /// `B_i = −1, B_j = +1`
    NegPos = 2,
    /// `B_i = −1, B_j = −1`
    NegNeg = 3,
}

impl Cell {
    pub const ALL: [Cell; 4] = [Cell::PosPos, Cell::PosNeg, Cell::NegPos, Cell::NegNeg];

    #[inline]
    pub fn of(bi: i8, bj: i8) -> Cell {
        match (bi > 0, bj > 0) {
            (true, true) => Cell::PosPos,
            (true, false) => Cell::PosNeg,
            (false, true) => Cell::NegPos,
            (false, false) => Cell::NegNeg,
        }
    }

    #[inline]
    pub fn i_positive(self) -> bool {
        matches!(self, Cell::PosPos | Cell::PosNeg)
    }

    #[inline]
    pub fn j_positive(self) -> bool {
        matches!(self, Cell::PosPos | Cell::NegPos)
    }

    /// Same cell seen from bit `j`.
    #[inline]
    pub fn transposed(self) -> Cell {
        match self {
            Cell::PosNeg => Cell::NegPos,
            Cell::NegPos => Cell::PosNeg,
            c => c,
        }
    }
}

/// Upper-triangular index of pair `i < j` among `k` bits.
#[inline]
pub fn pair_index(k: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < k);
    i * (2 * k - i - 1) / 2 + (j - i - 1)
}

#[inline]
pub fn pair_count(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

/// Empirical marginals and pairwise joint tables of a code matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStats {
    n_samples: usize,
    marginals: Vec<f64>,
    joints: Vec<[f64; 4]>,
}

impl PairStats {
    /// Builds stats from explicit probabilities, checking the table invariants.
    pub fn from_probabilities(n_samples: usize, marginals: Vec<f64>, joints: Vec<[f64; 4]>) -> Result<Self> {
        let k = marginals.len();
        if joints.len() != pair_count(k) {
            return Err(Error::dim("PairStats", pair_count(k), joints.len()));
        }
        let stats = Self {
            n_samples,
            marginals,
            joints,
        };
        stats.validate(1e-9)?;
        Ok(stats)
    }

    /// Checks: probabilities in `[0, 1]`, cells sum to one, rows and columns
    /// of each table agree with the marginals.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let k = self.bits();
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        for (i, &p) in self.marginals.iter().enumerate() {
            if !(-tol..=1.0 + tol).contains(&p) {
                return bad(format!("marginal {i} = {p} outside [0,1]"));
            }
        }
        for i in 0..k {
            for j in i + 1..k {
                let t = self.joints[pair_index(k, i, j)];
                if t.iter().any(|&p| !(-tol..=1.0 + tol).contains(&p)) {
                    return bad(format!("pair ({i},{j}) has a cell outside [0,1]"));
                }
                if (t.iter().sum::<f64>() - 1.0).abs() > tol {
                    return bad(format!("pair ({i},{j}) cells do not sum to 1"));
                }
                if (t[0] + t[1] - self.marginals[i]).abs() > tol
                    || (t[0] + t[2] - self.marginals[j]).abs() > tol
                {
                    return bad(format!("pair ({i},{j}) disagrees with marginals"));
                }
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn bits(&self) -> usize {
        self.marginals.len()
    }

    /// `P(B_i = +1)` for each bit.
    pub fn marginals(&self) -> &[f64] {
        &self.marginals
    }

    pub fn marginal(&self, i: usize) -> f64 {
        self.marginals[i]
    }

    /// Joint table of the pair, oriented so cell names refer to `(i, j)`.
    pub fn joint(&self, i: usize, j: usize) -> [f64; 4] {
        assert!(i != j, "joint table needs two distinct bits");
        let k = self.bits();
        if i < j {
            self.joints[pair_index(k, i, j)]
        } else {
            let t = self.joints[pair_index(k, j, i)];
            [t[0], t[2], t[1], t[3]]
        }
    }

    pub fn joint_cell(&self, i: usize, j: usize, cell: Cell) -> f64 {
        self.joint(i, j)[cell as usize]
    }

    /// Entropy of bit `i` in nats.
    pub fn entropy(&self, i: usize) -> f64 {
        let p = self.marginals[i];
        -(plogp(p) + plogp(1.0 - p))
    }
}

#[inline]
fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Per-bit sample bitsets: bit `n` of column `i` is set iff code `n` has `+1` at `i`.
fn column_bitsets(codes: &CodeMatrix) -> Vec<Vec<u64>> {
    let n = codes.rows();
    let words = n.div_ceil(64);
    exec::map_indexed(codes.bits(), |i| {
        let mut col = vec![0u64; words];
        for s in 0..n {
            if codes.get(s, i) > 0 {
                col[s / 64] |= 1u64 << (s % 64);
            }
        }
        col
    })
}

/// Empirical marginals and joint tables over every sample in `codes`.
pub fn estimate_stats(codes: &CodeMatrix) -> Result<PairStats> {
    let n = codes.rows();
    let k = codes.bits();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "pair statistics need at least 2 bits, got {k}"
        )));
    }
    let cols = column_bitsets(codes);
    let ones: Vec<u64> = cols
        .iter()
        .map(|c| c.iter().map(|w| w.count_ones() as u64).sum())
        .collect();
    let nf = n as f64;
    let marginals = ones.iter().map(|&c| c as f64 / nf).collect();
    // integer counts, so the parallel split cannot change the result
    let rows: Vec<Vec<[f64; 4]>> = exec::map_indexed(k, |i| {
        (i + 1..k)
            .map(|j| {
                let both: u64 = cols[i]
                    .iter()
                    .zip(&cols[j])
                    .map(|(a, b)| (a & b).count_ones() as u64)
                    .sum();
                let pos_neg = ones[i] - both;
                let neg_pos = ones[j] - both;
                let neg_neg = n as u64 + both - ones[i] - ones[j];
                [
                    both as f64 / nf,
                    pos_neg as f64 / nf,
                    neg_pos as f64 / nf,
                    neg_neg as f64 / nf,
                ]
            })
            .collect()
    });
    Ok(PairStats {
        n_samples: n,
        marginals,
        joints: rows.into_iter().flatten().collect(),
    })
}

/// `I(B_i; B_j)` in nats, with `0 · ln 0 = 0`.
pub fn mutual_information(stats: &PairStats, i: usize, j: usize) -> f64 {
    let t = stats.joint(i, j);
    let pi = stats.marginal(i);
    let pj = stats.marginal(j);
    let mut mi = 0.0;
    for cell in Cell::ALL {
        let p = t[cell as usize];
        let mi_ = if cell.i_positive() { pi } else { 1.0 - pi };
        let mj = if cell.j_positive() { pj } else { 1.0 - pj };
        // a cell under a zero marginal can only hold rounding dust
        if p > 0.0 && mi_ * mj > 0.0 {
            mi += p * (p / (mi_ * mj)).ln();
        }
    }
    // rounding can leave a tiny negative at independence
    mi.max(0.0)
}

/// Pairwise mutual information accumulated over the upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct MiReport {
    pub bits: usize,
    pub total: f64,
    /// Indexed by [`pair_index`].
    pub per_pair: Vec<f64>,
}

impl MiReport {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.per_pair[pair_index(self.bits, a, b)]
    }
}

pub fn mi_report(stats: &PairStats) -> MiReport {
    let k = stats.bits();
    let mut per_pair = Vec::with_capacity(pair_count(k));
    for i in 0..k {
        for j in i + 1..k {
            per_pair.push(mutual_information(stats, i, j));
        }
    }
    MiReport {
        bits: k,
        total: per_pair.iter().sum(),
        per_pair,
    }
}

/// Sum of `I(B_i; B_j)` over all pairs `i < j`. The caller applies `β`.
pub fn mi_loss(stats: &PairStats) -> f64 {
    mi_report(stats).total
}

/// Approximate `∂P(cell)/∂B_i` obtained by replacing the joint with the
/// product of marginals: `±P(B_j)` or `±(1 − P(B_j))`, negative when the
/// cell has `B_i = −1`.
#[inline]
pub fn approx_joint_derivative_from(cell: Cell, p_j: f64) -> f64 {
    match cell {
        Cell::PosPos => p_j,
        Cell::PosNeg => 1.0 - p_j,
        Cell::NegPos => -p_j,
        Cell::NegNeg => -(1.0 - p_j),
    }
}

pub fn approx_joint_derivative(stats: &PairStats, cell: Cell, i: usize, j: usize) -> f64 {
    assert!(i != j, "derivative needs two distinct bits");
    approx_joint_derivative_from(cell, stats.marginal(j))
}

/// `∂I/∂P(cell)` with the marginals held fixed: `ln(P / (P_i · P_j)) + 1`.
/// Returns `None` for an empty cell or one under a zero marginal.
#[inline]
pub fn mi_cell_derivative(stats: &PairStats, i: usize, j: usize, cell: Cell) -> Option<f64> {
    let p = stats.joint_cell(i, j, cell);
    let pi = stats.marginal(i);
    let pj = stats.marginal(j);
    let mi_ = if cell.i_positive() { pi } else { 1.0 - pi };
    let mj = if cell.j_positive() { pj } else { 1.0 - pj };
    if p <= 0.0 || mi_ * mj <= 0.0 {
        return None;
    }
    Some((p / (mi_ * mj)).ln() + 1.0)
}

/// Gradient of the total pairwise MI w.r.t. every code entry.
///
/// Sample `n` receives, for bit `i`, the sum over `j ≠ i` of
/// `∂I/∂P(cell) · ∂P(cell)/∂B_i / N`, where `cell` is the one the sample
/// occupies for the pair.
pub fn mi_gradient(codes: &CodeMatrix, stats: &PairStats) -> Result<Matrix> {
    let n = codes.rows();
    let k = codes.bits();
    if stats.n_samples() != n || stats.bits() != k {
        return Err(Error::dim(
            "mi_gradient",
            format!("stats for {}×{}", n, k),
            format!("{}×{}", stats.n_samples(), stats.bits()),
        ));
    }
    let inv_n = 1.0 / n as f64;
    // coef[(i * k + j) * 4 + cell]; NaN marks an empty cell
    let mut coef = vec![0.0; k * k * 4];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            for cell in Cell::ALL {
                let v = match mi_cell_derivative(stats, i, j, cell) {
                    Some(g) => g * approx_joint_derivative(stats, cell, i, j) * inv_n,
                    None => f64::NAN,
                };
                coef[(i * k + j) * 4 + cell as usize] = v;
            }
        }
    }
    let mut grad = Matrix::zeros(n, k);
    let mismatch = AtomicBool::new(false);
    exec::for_each_row_mut(grad.as_mut_slice(), k, |s, row| {
        let code = codes.row(s);
        for i in 0..k {
            let mut acc = 0.0;
            for j in 0..k {
                if j != i {
                    let c = coef[(i * k + j) * 4 + Cell::of(code[i], code[j]) as usize];
                    if c.is_nan() {
                        mismatch.store(true, Ordering::Relaxed);
                    }
                    acc += c;
                }
            }
            row[i] = acc;
        }
    });
    if mismatch.load(Ordering::Relaxed) {
        return Err(Error::InvalidArgument(
            "a code occupies a cell with zero probability; stats were not estimated from these codes".into(),
        ));
    }
    Ok(grad)
}
