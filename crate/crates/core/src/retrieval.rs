//! Exhaustive Hamming-space retrieval over packed codes and the evaluation
//! metrics built on it: MAP@k, precision–recall by rank cutoff and code-space
//! utilization.

use std::collections::{HashMap, HashSet};
use std::fmt;

use crate::encoder::{CodeMatrix, PackedCodes};
use crate::error::{Error, Result};
use crate::exec;

/// Sorted, deduplicated label ids of one sample.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct LabelSet(Vec<u32>);

impl LabelSet {
    pub fn new(mut ids: Vec<u32>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Self(ids)
    }

    pub fn single(id: u32) -> Self {
        Self(vec![id])
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Two samples are relevant to each other when they share a label.
    pub fn intersects(&self, other: &LabelSet) -> bool {
        let (mut a, mut b) = (self.0.iter().peekable(), other.0.iter().peekable());
        while let (Some(&&x), Some(&&y)) = (a.peek(), b.peek()) {
            match x.cmp(&y) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }
}

/// Number of differing bits between two packed rows.
pub fn hamming_distance(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::dim("hamming_distance", a.len(), b.len()));
    }
    Ok(hamming_unchecked(a, b))
}

#[inline]
fn hamming_unchecked(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Immutable database of packed codes with ids and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct HammingIndex {
    codes: PackedCodes,
    ids: Vec<u64>,
    labels: Option<Vec<LabelSet>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hit {
    pub row: usize,
    pub id: u64,
    pub distance: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopK {
    pub hits: Vec<Hit>,
    /// Set when `k` exceeded the database size.
    pub truncated: bool,
}

impl HammingIndex {
    /// Index with ids `0..N`.
    pub fn new(codes: PackedCodes) -> Self {
        let ids = (0..codes.rows() as u64).collect();
        Self {
            codes,
            ids,
            labels: None,
        }
    }

    pub fn with_ids(codes: PackedCodes, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != codes.rows() {
            return Err(Error::dim("HammingIndex ids", codes.rows(), ids.len()));
        }
        let unique: HashSet<u64> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err(Error::InvalidArgument("index ids must be unique".into()));
        }
        Ok(Self {
            codes,
            ids,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<LabelSet>) -> Result<Self> {
        if labels.len() != self.codes.rows() {
            return Err(Error::dim("HammingIndex labels", self.codes.rows(), labels.len()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.rows() == 0
    }

    pub fn bits(&self) -> usize {
        self.codes.bits()
    }

    pub fn codes(&self) -> &PackedCodes {
        &self.codes
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[LabelSet]> {
        self.labels.as_deref()
    }

    fn check_query(&self, query: &[u64]) -> Result<()> {
        if query.len() != self.codes.words_per_row() {
            return Err(Error::dim("query", self.codes.words_per_row(), query.len()));
        }
        Ok(())
    }

    /// Database rows bucketed by distance to `query`, each bucket in
    /// ascending id order.
    fn buckets(&self, query: &[u64]) -> Vec<Vec<usize>> {
        let mut buckets = vec![Vec::new(); self.bits() + 1];
        for r in 0..self.len() {
            let d = hamming_unchecked(query, self.codes.row(r)) as usize;
            buckets[d].push(r);
        }
        for b in &mut buckets {
            b.sort_by_key(|&r| self.ids[r]);
        }
        buckets
    }

    /// All database rows ordered by `(distance, id)`.
    pub fn ranking(&self, query: &[u64]) -> Result<Vec<usize>> {
        self.check_query(query)?;
        Ok(self.buckets(query).into_iter().flatten().collect())
    }

    /// The `k` nearest rows; ties resolved by ascending id.
    pub fn query_topk(&self, query: &[u64], k: usize) -> Result<TopK> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        self.check_query(query)?;
        let truncated = k > self.len();
        let mut hits = Vec::with_capacity(k.min(self.len()));
        'outer: for (d, bucket) in self.buckets(query).into_iter().enumerate() {
            for r in bucket {
                if hits.len() == k {
                    break 'outer;
                }
                hits.push(Hit {
                    row: r,
                    id: self.ids[r],
                    distance: d as u32,
                });
            }
        }
        Ok(TopK { hits, truncated })
    }

    fn relevance_labels<'a>(&'a self, queries: &PackedCodes, query_labels: &[LabelSet]) -> Result<&'a [LabelSet]> {
        let db = self.labels.as_deref().ok_or(Error::MissingLabels)?;
        if query_labels.len() != queries.rows() {
            return Err(Error::dim("query labels", queries.rows(), query_labels.len()));
        }
        if queries.bits() != self.bits() {
            return Err(Error::dim("query bits", self.bits(), queries.bits()));
        }
        Ok(db)
    }
}

/// Average precision over the top `k`, normalized by `min(k, relevant)`.
/// `None` when the query has no relevant item in the database.
fn average_precision(ranked_rel: impl Iterator<Item = bool>, k: usize, relevant: usize) -> Option<f64> {
    if relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, rel) in ranked_rel.take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Some(sum / k.min(relevant) as f64)
}

/// Mean over queries of AP@k. Queries without any relevant database item
/// are skipped.
pub fn map_at_k(index: &HammingIndex, queries: &PackedCodes, query_labels: &[LabelSet], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let db = index.relevance_labels(queries, query_labels)?;
    let aps: Vec<Option<f64>> = exec::map_indexed(queries.rows(), |q| {
        let ql = &query_labels[q];
        let relevant = db.iter().filter(|l| l.intersects(ql)).count();
        if relevant == 0 {
            return None;
        }
        let top = index.query_topk(queries.row(q), k).ok()?;
        average_precision(top.hits.iter().map(|h| db[h.row].intersects(ql)), k, relevant)
    });
    let (sum, count) = aps.iter().flatten().fold((0.0, 0usize), |(s, c), ap| (s + ap, c + 1));
    if count == 0 {
        return Err(Error::InvalidArgument("no query has a relevant database item".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub rank: usize,
    pub recall: f64,
    pub precision: f64,
}

/// Precision and recall averaged over queries at every rank cutoff
/// `1..=N`. Queries without a relevant database item are skipped.
pub fn pr_curve(index: &HammingIndex, queries: &PackedCodes, query_labels: &[LabelSet]) -> Result<Vec<PrPoint>> {
    let db = index.relevance_labels(queries, query_labels)?;
    let n = index.len();
    // per-chunk partial sums in fixed chunk order keep the result independent
    // of the thread count
    let chunks = queries.rows().div_ceil(exec::REDUCE_CHUNK);
    let partials: Vec<(Vec<u64>, Vec<f64>, usize)> = exec::map_indexed(chunks, |c| {
        let mut hits_sum = vec![0u64; n];
        let mut recall_sum = vec![0.0; n];
        let mut used = 0;
        let lo = c * exec::REDUCE_CHUNK;
        let hi = (lo + exec::REDUCE_CHUNK).min(queries.rows());
        for q in lo..hi {
            let ql = &query_labels[q];
            let relevant = db.iter().filter(|l| l.intersects(ql)).count();
            if relevant == 0 {
                continue;
            }
            used += 1;
            let ranking = index.ranking(queries.row(q)).expect("validated");
            let mut hits = 0u64;
            for (r, &row) in ranking.iter().enumerate() {
                if db[row].intersects(ql) {
                    hits += 1;
                }
                hits_sum[r] += hits;
                recall_sum[r] += hits as f64 / relevant as f64;
            }
        }
        (hits_sum, recall_sum, used)
    });
    let mut hits_sum = vec![0u64; n];
    let mut recall_sum = vec![0.0; n];
    let mut used = 0;
    for (h, r, u) in partials {
        used += u;
        for i in 0..n {
            hits_sum[i] += h[i];
            recall_sum[i] += r[i];
        }
    }
    if used == 0 {
        return Err(Error::InvalidArgument("no query has a relevant database item".into()));
    }
    let qn = used as f64;
    Ok((0..n)
        .map(|r| PrPoint {
            rank: r + 1,
            recall: recall_sum[r] / qn,
            precision: hits_sum[r] as f64 / (r + 1) as f64 / qn,
        })
        .collect())
}

/// A code's bit pattern, exact for any length.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeKey(pub Box<[u64]>);

impl fmt::Display for CodeKey {
    /// Hex, most significant word first.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, w) in self.0.iter().rev().enumerate() {
            if i == 0 {
                write!(f, "{w:x}")?;
            } else {
                write!(f, "{w:016x}")?;
            }
        }
        Ok(())
    }
}

/// Count of every distinct code, most used first (ties by key).
pub fn utilization_histogram(codes: &CodeMatrix) -> Vec<(CodeKey, usize)> {
    let packed = codes.pack();
    let mut counts: HashMap<&[u64], usize> = HashMap::new();
    for r in 0..packed.rows() {
        *counts.entry(packed.row(r)).or_default() += 1;
    }
    let mut out: Vec<(CodeKey, usize)> = counts
        .into_iter()
        .map(|(k, c)| (CodeKey(k.into()), c))
        .collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

pub fn distinct_codes(codes: &CodeMatrix) -> usize {
    let packed = codes.pack();
    (0..packed.rows()).map(|r| packed.row(r)).collect::<HashSet<_>>().len()
}

/// Every metric for one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub map_at_k: f64,
    pub pr_points: Vec<PrPoint>,
    pub utilization: Vec<(CodeKey, usize)>,
}

pub fn evaluate(index: &HammingIndex, queries: &PackedCodes, query_labels: &[LabelSet], k: usize) -> Result<EvalReport> {
    Ok(EvalReport {
        k,
        map_at_k: map_at_k(index, queries, query_labels, k)?,
        pr_points: pr_curve(index, queries, query_labels)?,
        utilization: utilization_histogram(&index.codes().unpack()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    fn packed(rows: &[&[i8]]) -> PackedCodes {
        let bits = rows[0].len();
        CodeMatrix::new(rows.len(), bits, rows.iter().flat_map(|r| r.iter().copied()).collect())
            .unwrap()
            .pack()
    }

    fn random_packed(rng: &mut SeededRng, n: usize, k: usize) -> PackedCodes {
        let v = (0..n * k).map(|_| if rng.next_u64() & 1 == 1 { 1 } else { -1 }).collect();
        CodeMatrix::new(n, k, v).unwrap().pack()
    }

    #[test]
    fn distance_cases() {
        let a = packed(&[&[1, -1, 1, 1, -1, -1, 1, -1, 1, 1]]);
        let c = packed(&[&[-1, 1, -1, -1, 1, 1, -1, 1, -1, -1]]);
        assert_eq!(hamming_distance(a.row(0), a.row(0)).unwrap(), 0);
        assert_eq!(hamming_distance(a.row(0), c.row(0)).unwrap(), 10);
        assert!(hamming_distance(&[0, 0], &[0]).is_err());
    }

    #[test]
    fn topk_basics() {
        let mut rng = SeededRng::new(0);
        let db = random_packed(&mut rng, 40, 16);
        let index = HammingIndex::new(db.clone());
        let top = index.query_topk(db.row(7), 3).unwrap();
        assert_eq!(top.hits[0].distance, 0);
        assert!(!top.truncated);

        let all = index.query_topk(db.row(0), 40).unwrap();
        let mut ids: Vec<u64> = all.hits.iter().map(|h| h.id).collect();
        ids.sort();
        assert_eq!(ids, (0..40).collect::<Vec<_>>());
        assert!(all.hits.windows(2).all(|w| w[0].distance <= w[1].distance));

        let over = index.query_topk(db.row(0), 50).unwrap();
        assert!(over.truncated);
        assert_eq!(over.hits.len(), 40);
        assert!(index.query_topk(db.row(0), 0).is_err());
    }

    #[test]
    fn ties_by_id() {
        let db = packed(&[&[1, 1], &[1, 1], &[1, 1]]);
        let index = HammingIndex::with_ids(db.clone(), vec![9, 2, 5]).unwrap();
        let ids: Vec<u64> = index.query_topk(db.row(0), 3).unwrap().hits.iter().map(|h| h.id).collect();
        assert_eq!(ids, vec![2, 5, 9]);
        assert!(HammingIndex::with_ids(db, vec![1, 1, 2]).is_err());
    }

    #[test]
    fn map_hand_cases() {
        let db = packed(&[&[1, 1, 1, 1], &[-1, -1, -1, -1]]);
        let index = HammingIndex::new(db)
            .with_labels(vec![LabelSet::single(0), LabelSet::single(1)])
            .unwrap();
        let q = packed(&[&[1, 1, 1, 1]]);
        assert_eq!(map_at_k(&index, &q, &[LabelSet::single(0)], 1).unwrap(), 1.0);

        // relevant at ranks 2 and 4 of 5
        let db = packed(&[&[1, 1, 1, 1], &[1, 1, 1, -1], &[1, 1, -1, -1], &[1, -1, -1, -1], &[-1, -1, -1, -1]]);
        let labels = [0, 1, 0, 1, 0].map(LabelSet::single).to_vec();
        let index = HammingIndex::new(db).with_labels(labels).unwrap();
        let q = packed(&[&[1, 1, 1, 1]]);
        let m = map_at_k(&index, &q, &[LabelSet::single(1)], 5).unwrap();
        assert!((m - 0.5).abs() < 1e-15);
    }

    #[test]
    fn map_requires_labels() {
        let db = packed(&[&[1, 1]]);
        let index = HammingIndex::new(db.clone());
        assert!(matches!(
            map_at_k(&index, &db, &[LabelSet::single(0)], 1),
            Err(Error::MissingLabels)
        ));
    }

    #[test]
    fn multilabel_relevance() {
        let a = LabelSet::new(vec![3, 1, 7]);
        assert!(a.intersects(&LabelSet::new(vec![7, 9])));
        assert!(!a.intersects(&LabelSet::new(vec![2, 4])));
        assert!(!a.intersects(&LabelSet::default()));
    }

    #[test]
    fn pr_limits() {
        let mut rng = SeededRng::new(1);
        let db = random_packed(&mut rng, 20, 8);
        let all_rel = HammingIndex::new(db.clone()).with_labels(vec![LabelSet::single(0); 20]).unwrap();
        let q = random_packed(&mut rng, 3, 8);
        let pr = pr_curve(&all_rel, &q, &vec![LabelSet::single(0); 3]).unwrap();
        assert!(pr.iter().all(|p| p.precision == 1.0));
        assert_eq!(pr.last().unwrap().recall, 1.0);

        // one relevant item ranked last
        let db = packed(&[&[1, 1], &[1, -1], &[-1, -1]]);
        let idx = HammingIndex::new(db)
            .with_labels(vec![LabelSet::single(1), LabelSet::single(1), LabelSet::single(0)])
            .unwrap();
        let pr = pr_curve(&idx, &packed(&[&[1, 1]]), &[LabelSet::single(0)]).unwrap();
        let last = pr.last().unwrap();
        assert_eq!(last.recall, 1.0);
        assert!((last.precision - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(pr[0].recall, 0.0);
    }

    #[test]
    fn utilization_cases() {
        let same = CodeMatrix::new(4, 3, vec![1, -1, 1].repeat(4)).unwrap();
        let h = utilization_histogram(&same);
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].1, 4);
        assert_eq!(h[0].0.to_string(), "5");

        let distinct = CodeMatrix::new(2, 2, vec![1, 1, -1, 1]).unwrap();
        let h = utilization_histogram(&distinct);
        assert_eq!(h.iter().map(|e| e.1).collect::<Vec<_>>(), vec![1, 1]);
        assert_eq!(distinct_codes(&distinct), 2);
    }

    #[test]
    fn utilization_matches_counting_oracle() {
        let mut rng = SeededRng::new(2);
        let v = (0..500 * 4).map(|_| if rng.next_u64() & 1 == 1 { 1 } else { -1 }).collect();
        let codes = CodeMatrix::new(500, 4, v).unwrap();
        let h = utilization_histogram(&codes);
        assert_eq!(h.iter().map(|e| e.1).sum::<usize>(), 500);
        let mut oracle: HashMap<Vec<i8>, usize> = HashMap::new();
        for r in 0..500 {
            *oracle.entry(codes.row(r).to_vec()).or_default() += 1;
        }
        assert_eq!(h.len(), oracle.len());
        let mut a: Vec<usize> = h.iter().map(|e| e.1).collect();
        let mut b: Vec<usize> = oracle.values().copied().collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(h.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn code_key_hex_is_msw_first() {
        let k = CodeKey(vec![0x1, 0xab].into());
        assert_eq!(k.to_string(), "ab0000000000000001");
    }

    #[test]
    fn distance_matches_bit_loop_on_random_pairs() {
        let mut rng = SeededRng::new(3);
        for _ in 0..10_000 {
            let k = 1 + rng.below(130);
            let p = random_packed(&mut rng, 2, k);
            let c = p.unpack();
            let naive = (0..k).filter(|&j| c.get(0, j) != c.get(1, j)).count() as u32;
            assert_eq!(hamming_distance(p.row(0), p.row(1)).unwrap(), naive);
        }
    }

    #[test]
    fn map_is_one_when_top_k_all_relevant() {
        let mut rng = SeededRng::new(4);
        let db = random_packed(&mut rng, 30, 12);
        let index = HammingIndex::new(db).with_labels(vec![LabelSet::single(5); 30]).unwrap();
        let q = random_packed(&mut rng, 6, 12);
        let m = map_at_k(&index, &q, &vec![LabelSet::single(5); 6], 10).unwrap();
        assert_eq!(m, 1.0);
    }

    proptest::proptest! {
        #[test]
        fn hamming_is_a_metric(seed in proptest::prelude::any::<u64>(), k in 1usize..200) {
            let mut rng = SeededRng::new(seed);
            let p = random_packed(&mut rng, 3, k);
            let d = |i: usize, j: usize| hamming_distance(p.row(i), p.row(j)).unwrap();
            proptest::prop_assert_eq!(d(0, 0), 0);
            proptest::prop_assert_eq!(d(0, 1), d(1, 0));
            proptest::prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2));
        }

        #[test]
        fn topk_and_map_invariants(seed in proptest::prelude::any::<u64>(), n in 1usize..60, k in 1usize..70) {
            let mut rng = SeededRng::new(seed);
            let db = random_packed(&mut rng, n, 10);
            let labels: Vec<LabelSet> = (0..n).map(|_| LabelSet::single(rng.below(3) as u32)).collect();
            let index = HammingIndex::new(db).with_labels(labels).unwrap();
            let q = random_packed(&mut rng, 4, 10);
            let top = index.query_topk(q.row(0), k).unwrap();
            proptest::prop_assert_eq!(top.hits.len(), k.min(n));
            proptest::prop_assert_eq!(top.truncated, k > n);
            proptest::prop_assert!(top.hits.windows(2).all(|w| (w[0].distance, w[0].id) < (w[1].distance, w[1].id)));
            let ql: Vec<LabelSet> = (0..4).map(|_| LabelSet::single(rng.below(3) as u32)).collect();
            if let Ok(m) = map_at_k(&index, &q, &ql, k) {
                proptest::prop_assert!((0.0..=1.0).contains(&m));
            }
        }
    }
}
