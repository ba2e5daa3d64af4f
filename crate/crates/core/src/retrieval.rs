//! Text-to-video retrieval metrics and dual-softmax re-scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Query-by-candidate scores with one correct candidate per query.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    scores: Tensor,
    ground_truth: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn new(scores: Tensor, ground_truth: Vec<usize>) -> Result<Self> {
        let (q, n) = scores.expect_2d("SimilarityMatrix")?;
        if q == 0 || n == 0 {
            return Err(Error::Input("similarity matrix must be non-empty".into()));
        }
        if ground_truth.len() != q {
            return Err(Error::Input(format!("{} ground-truth entries for {q} queries", ground_truth.len())));
        }
        if let Some(&bad) = ground_truth.iter().find(|&&g| g >= n) {
            return Err(Error::Input(format!("ground truth {bad} out of range for {n} candidates")));
        }
        if !scores.is_finite() {
            return Err(Error::Input("similarity scores must be finite".into()));
        }
        Ok(Self { scores, ground_truth })
    }

    /// Query `i` matches candidate `i`.
    pub fn diagonal(scores: Tensor) -> Result<Self> {
        let q = scores.rows();
        Self::new(scores, (0..q).collect())
    }

    /// Scores of `queries[Q,d]` against `candidates[N,d]` by dot product.
    pub fn from_embeddings(queries: &Tensor, candidates: &Tensor, ground_truth: Vec<usize>) -> Result<Self> {
        let scores = crate::ops::matmul(queries, &candidates.transpose()?)?;
        Self::new(scores, ground_truth)
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn ground_truth(&self) -> &[usize] {
        &self.ground_truth
    }

    pub fn n_queries(&self) -> usize {
        self.scores.rows()
    }

    pub fn n_candidates(&self) -> usize {
        self.scores.cols()
    }

    /// 1-based rank of query `i`'s correct candidate. Candidates with a
    /// strictly greater score rank ahead; equal scores are ordered by index.
    pub fn rank(&self, i: usize) -> usize {
        let row = self.scores.row(i);
        let gt = self.ground_truth[i];
        let target = row[gt];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > target || (s == target && j < gt))
            .count();
        ahead + 1
    }

    pub fn ranks(&self) -> Vec<usize> {
        (0..self.n_queries()).map(|i| self.rank(i)).collect()
    }
}

/// Percentage of queries whose correct candidate ranks within the top `k`.
pub fn recall_at_k(sim: &SimilarityMatrix, k: usize) -> Result<f64> {
    if k == 0 || k > sim.n_candidates() {
        return Err(Error::Input(format!("k = {k} outside [1, {}]", sim.n_candidates())));
    }
    let hits = sim.ranks().into_iter().filter(|&r| r <= k).count();
    Ok(100.0 * hits as f64 / sim.n_queries() as f64)
}

/// Median ground-truth rank; the lower median for an even query count.
pub fn median_rank(sim: &SimilarityMatrix) -> f64 {
    let mut ranks = sim.ranks();
    ranks.sort_unstable();
    ranks[(ranks.len() - 1) / 2] as f64
}

/// Dual-softmax re-scoring: every score is multiplied by the softmax of its
/// column (over queries) at temperature 1.
pub fn dsl_postprocess(sim: &SimilarityMatrix) -> SimilarityMatrix {
    let (q, n) = (sim.n_queries(), sim.n_candidates());
    let s = sim.scores();
    let mut out = vec![0.0; q * n];
    for j in 0..n {
        let max = (0..q).map(|i| s.get2(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..q {
            let e = (s.get2(i, j) - max).exp();
            out[i * n + j] = e;
            sum += e;
        }
        for i in 0..q {
            out[i * n + j] = s.get2(i, j) * (out[i * n + j] / sum);
        }
    }
    SimilarityMatrix {
        scores: Tensor::new(vec![q, n], out).expect("shape"),
        ground_truth: sim.ground_truth.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    /// Average of R@1, R@5 and R@10.
    pub mean_r: f64,
    pub mdr: f64,
}

impl RetrievalMetrics {
    /// Recall cut-offs larger than the candidate count are clamped to it.
    pub fn compute(sim: &SimilarityMatrix) -> Self {
        let n = sim.n_candidates();
        let at = |k: usize| recall_at_k(sim, k.min(n)).expect("k clamped into range");
        let (r1, r5, r10) = (at(1), at(5), at(10));
        Self { r1, r5, r10, mean_r: (r1 + r5 + r10) / 3.0, mdr: median_rank(sim) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reversed(n: usize) -> SimilarityMatrix {
        let mut rows = Vec::new();
        for i in 0..n {
            rows.push((0..n).map(|j| if i == j { -1.0 } else { j as f64 }).collect());
        }
        SimilarityMatrix::diagonal(Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn perfect_retrieval() {
        let sim = SimilarityMatrix::diagonal(Tensor::identity(12)).unwrap();
        assert_eq!(recall_at_k(&sim, 1).unwrap(), 100.0);
        assert_eq!(median_rank(&sim), 1.0);
    }

    #[test]
    fn worst_case() {
        let sim = reversed(10);
        assert_eq!(recall_at_k(&sim, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&sim, 9).unwrap(), 0.0);
        assert_eq!(recall_at_k(&sim, 10).unwrap(), 100.0);
        assert_eq!(median_rank(&sim), 10.0);
    }

    #[test]
    fn k_out_of_range() {
        let sim = reversed(4);
        assert!(recall_at_k(&sim, 0).is_err());
        assert!(recall_at_k(&sim, 5).is_err());
    }

    #[test]
    fn lower_median() {
        // ranks 1, 2, 3, 4
        let scores = Tensor::from_rows(&[
            vec![4.0, 3.0, 2.0, 1.0],
            vec![4.0, 3.0, 2.0, 1.0],
            vec![4.0, 3.0, 2.0, 1.0],
            vec![4.0, 3.0, 2.0, 1.0],
        ])
        .unwrap();
        let sim = SimilarityMatrix::new(scores, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(sim.ranks(), vec![1, 2, 3, 4]);
        assert_eq!(median_rank(&sim), 2.0);
    }

    #[test]
    fn ties_break_by_index() {
        let sim = SimilarityMatrix::new(Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap(), vec![1]).unwrap();
        assert_eq!(sim.rank(0), 2);
    }

    #[test]
    fn bad_ground_truth() {
        assert!(SimilarityMatrix::new(Tensor::identity(2), vec![0, 2]).is_err());
        assert!(SimilarityMatrix::new(Tensor::identity(2), vec![0]).is_err());
    }

    #[test]
    fn dsl_singleton() {
        let sim = SimilarityMatrix::diagonal(Tensor::from_rows(&[vec![0.37]]).unwrap()).unwrap();
        assert_eq!(dsl_postprocess(&sim).scores().data(), &[0.37]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn dsl_hand_computed() {
        let rows = vec![vec![0.2, -0.1, 0.5], vec![0.9, 0.3, -0.4], vec![0.0, 0.7, 0.1]];
        let sim = SimilarityMatrix::diagonal(Tensor::from_rows(&rows).unwrap()).unwrap();
        let out = dsl_postprocess(&sim);
        for j in 0..3 {
            let denom: f64 = (0..3).map(|i| f64::exp(rows[i][j])).sum();
            for i in 0..3 {
                let want = rows[i][j] * f64::exp(rows[i][j]) / denom;
                assert!((out.scores().get2(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn metrics_record_schema() {
        let sim = SimilarityMatrix::diagonal(Tensor::identity(3)).unwrap();
        let m = RetrievalMetrics::compute(&sim);
        let json = serde_json::to_value(m).unwrap();
        for key in ["r1", "r5", "r10", "mean_r", "mdr"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(m.mean_r, 100.0);
    }
}
