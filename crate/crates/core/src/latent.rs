//! Numeric kernels over embeddings: cosine similarity, density, quantiles and
//! distances to the set center. All accumulation is in `f64` with a fixed
//! summation order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CandidateSet, Embedding};

/// Similarity used for the density score that seeds farthest-first selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityMetric {
    /// Raw inner products.
    #[default]
    Inner,
    /// Inner products of unit-normalized embeddings.
    Cosine,
}

impl std::str::FromStr for DensityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner" => Ok(DensityMetric::Inner),
            "cosine" => Ok(DensityMetric::Cosine),
            other => Err(Error::Config(format!(
                "unknown density metric {other:?} (expected inner or cosine)"
            ))),
        }
    }
}

impl std::fmt::Display for DensityMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DensityMetric::Inner => "inner",
            DensityMetric::Cosine => "cosine",
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine from a precomputed inner product and norms, clamped to [-1, 1].
#[inline]
pub(crate) fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(a.dim(), b.dim()));
    }
    // Embedding guarantees non-zero norms.
    Ok(cosine_from_parts(
        dot(a.as_slice(), b.as_slice()),
        a.norm(),
        b.norm(),
    ))
}

/// Dense symmetric matrix of pairwise cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_embeddings(embeddings: &[&Embedding]) -> Result<Self> {
        let n = embeddings.len();
        if let Some(first) = embeddings.first() {
            if let Some(bad) = embeddings.iter().find(|e| e.dim() != first.dim()) {
                return Err(Error::Dimension(first.dim(), bad.dim()));
            }
        }
        let norms: Vec<f64> = embeddings.iter().map(|e| e.norm()).collect();
        let values = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let norms = &norms;
                (0..n).map(move |j| {
                    if i == j {
                        1.0
                    } else {
                        let d = dot(embeddings[i].as_slice(), embeddings[j].as_slice());
                        cosine_from_parts(d, norms[i], norms[j])
                    }
                })
            })
            .collect();
        Ok(SimilarityMatrix { n, values })
    }

    pub fn from_set(set: &CandidateSet) -> Result<Self> {
        let embs: Vec<&Embedding> = set.embeddings().collect();
        Self::from_embeddings(&embs)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

fn check_rows(rows: &[&[f64]], what: &'static str) -> Result<usize> {
    let first = rows.first().ok_or(Error::Empty(what))?;
    let d = first.len();
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::Dimension(d, bad.len()));
    }
    Ok(d)
}

/// Density of each row: the sum of its similarity to every row of the set,
/// itself included.
///
/// Computed as `<e_i, sum_j e_j>`, which equals the pairwise sum up to
/// rounding and runs in O(n d).
pub fn density_scores_with(rows: &[&[f64]], metric: DensityMetric) -> Result<Vec<f64>> {
    let d = check_rows(rows, "density of an empty set")?;
    let rows: Vec<Vec<f64>> = match metric {
        DensityMetric::Inner => rows.iter().map(|r| r.to_vec()).collect(),
        DensityMetric::Cosine => rows
            .iter()
            .map(|r| {
                let n = dot(r, r).sqrt();
                if n == 0.0 {
                    return Err(Error::InvalidEmbedding("embedding has zero norm".into()));
                }
                Ok(r.iter().map(|v| v / n).collect())
            })
            .collect::<Result<_>>()?,
    };
    let mut total = vec![0.0; d];
    for row in &rows {
        for (t, v) in total.iter_mut().zip(row) {
            *t += v;
        }
    }
    Ok(rows.iter().map(|row| dot(row, &total)).collect())
}

pub fn density_scores(set: &CandidateSet) -> Result<Vec<f64>> {
    density_scores_with(&rows_of(set), DensityMetric::Inner)
}

/// Nearest-rank quantile: the element of 1-based rank `ceil(q * n)` in
/// ascending order, with `q = 0` giving the minimum.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // 0.7 * 10 evaluates to 7.000000000000001; the slack keeps exact products
    // on their intended rank.
    let rank = ((q * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(n) - 1])
}

pub(crate) fn rows_of(set: &CandidateSet) -> Vec<&[f64]> {
    set.embeddings().map(Embedding::as_slice).collect()
}

/// Euclidean distance of each row to the mean row.
pub fn distances_to_center_of(rows: &[&[f64]]) -> Result<Vec<f64>> {
    let d = check_rows(rows, "center of an empty set")?;
    let mut center = vec![0.0; d];
    for r in rows {
        for (c, v) in center.iter_mut().zip(r.iter()) {
            *c += v;
        }
    }
    let n = rows.len() as f64;
    center.iter_mut().for_each(|c| *c /= n);
    Ok(rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&center)
                .map(|(v, c)| (v - c) * (v - c))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

pub fn distances_to_center(set: &CandidateSet) -> Result<Vec<f64>> {
    distances_to_center_of(&rows_of(set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn refs(v: &[Embedding]) -> Vec<&Embedding> {
        v.iter().collect()
    }

    fn rows(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    const H: f64 = std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn cosine_examples() {
        assert_eq!(
            cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(),
            0.0
        );
        assert_eq!(
            cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[1.0, 0.0])).unwrap(),
            1.0
        );
        let c = cosine_similarity(&emb(&[1.0, 0.0]), &emb(&[3.0, 3.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(cosine_similarity(&emb(&[1.0]), &emb(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn density_examples() {
        let s = [vec![1.0, 0.0]];
        assert_eq!(
            density_scores_with(&rows(&s), DensityMetric::Inner).unwrap(),
            vec![1.0]
        );
        let s = [vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(
            density_scores_with(&rows(&s), DensityMetric::Inner).unwrap(),
            vec![1.0, 1.0]
        );
        let s = [vec![1.0, 0.0], vec![0.0, 1.0], vec![H, H]];
        let got = density_scores_with(&rows(&s), DensityMetric::Inner).unwrap();
        for (g, want) in got.iter().zip([1.7071, 1.7071, 2.4142]) {
            assert!((g - want).abs() < 1e-4, "{got:?}");
        }
        assert!(density_scores_with(&[], DensityMetric::Inner).is_err());
    }

    #[test]
    fn cosine_density_ignores_scale() {
        let a = [vec![2.0, 0.0], vec![0.0, 5.0]];
        let inner = density_scores_with(&rows(&a), DensityMetric::Inner).unwrap();
        let cos = density_scores_with(&rows(&a), DensityMetric::Cosine).unwrap();
        assert_eq!(inner, vec![4.0, 25.0]);
        assert_eq!(cos, vec![1.0, 1.0]);
    }

    #[test]
    fn quantile_examples() {
        let v: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(quantile(&v, 0.9).unwrap(), 0.9);
        assert_eq!(quantile(&v, 0.7).unwrap(), 0.7);
        assert_eq!(quantile(&[5.0], 0.5).unwrap(), 5.0);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.0).unwrap(), 1.0);
        assert!(quantile(&[], 0.5).is_err());
        assert!(quantile(&[1.0], 1.5).is_err());
    }

    #[test]
    fn quantile_at_warmup_size() {
        // rank ceil(0.9 * 720) = 648
        let v: Vec<f64> = (1..=720).map(|i| i as f64).collect();
        assert_eq!(quantile(&v, 1.0 - 0.1).unwrap(), 648.0);
    }

    #[test]
    fn center_distance_examples() {
        assert_eq!(distances_to_center_of(&[&[0.0, 0.0]]).unwrap(), vec![0.0]);
        let s = [vec![0.0], vec![2.0]];
        assert_eq!(distances_to_center_of(&rows(&s)).unwrap(), vec![1.0, 1.0]);
        let s: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        assert_eq!(
            distances_to_center_of(&rows(&s)).unwrap(),
            vec![2.0, 1.0, 0.0, 1.0, 2.0]
        );
    }

    #[test]
    fn similarity_matrix_properties() {
        let s = [
            emb(&[1.0, 0.0]),
            emb(&[0.0, 1.0]),
            emb(&[H, H]),
            emb(&[-3.0, 0.1]),
        ];
        let m = SimilarityMatrix::from_embeddings(&refs(&s)).unwrap();
        for i in 0..4 {
            assert!((m.get(i, i) - 1.0).abs() < 1e-9);
            for j in 0..4 {
                assert!((m.get(i, j) - m.get(j, i)).abs() < 1e-9);
                assert!(m.get(i, j).abs() <= 1.0 + 1e-9);
                let direct = cosine_similarity(&s[i], &s[j]).unwrap();
                assert!((m.get(i, j) - direct).abs() < 1e-12);
            }
        }
    }

    fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0..10.0f64, d)
            .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    fn set(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1..5usize).prop_flat_map(move |d| prop::collection::vec(vector(d), 1..max))
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_scale_free(
            (a, b) in (1..6usize).prop_flat_map(|d| (vector(d), vector(d))),
            lambda in 0.01..100.0f64,
        ) {
            let (ea, eb) = (emb(&a), emb(&b));
            let ab = cosine_similarity(&ea, &eb).unwrap();
            prop_assert!((ab - cosine_similarity(&eb, &ea).unwrap()).abs() < 1e-12);
            prop_assert!((cosine_similarity(&ea, &ea).unwrap() - 1.0).abs() < 1e-12);
            let scaled = emb(&a.iter().map(|x| x * lambda).collect::<Vec<_>>());
            prop_assert!((cosine_similarity(&scaled, &eb).unwrap() - ab).abs() < 1e-12);
        }

        #[test]
        fn quantile_extremes_and_permutation(
            mut v in prop::collection::vec(-1e6..1e6f64, 1..50),
            q in 0.0..=1.0f64,
        ) {
            let max = v.iter().cloned().fold(f64::MIN, f64::max);
            let min = v.iter().cloned().fold(f64::MAX, f64::min);
            prop_assert_eq!(quantile(&v, 1.0).unwrap(), max);
            prop_assert_eq!(quantile(&v, 0.0).unwrap(), min);
            let before = quantile(&v, q).unwrap();
            v.reverse();
            prop_assert_eq!(quantile(&v, q).unwrap(), before);
        }

        #[test]
        fn density_matches_pairwise_sum_and_is_equivariant(s in set(12), rot in 0..12usize) {
            let scores = density_scores_with(&rows(&s), DensityMetric::Inner).unwrap();
            for (i, e) in s.iter().enumerate() {
                let pairwise: f64 = s.iter().map(|f| dot(e, f)).sum();
                prop_assert!((scores[i] - pairwise).abs() <= 1e-9 * (1.0 + pairwise.abs()));
            }
            let k = rot % s.len();
            let mut rotated = s.clone();
            rotated.rotate_left(k);
            let rs = density_scores_with(&rows(&rotated), DensityMetric::Inner).unwrap();
            for (i, r) in rs.iter().enumerate() {
                let j = (i + k) % s.len();
                prop_assert!((r - scores[j]).abs() <= 1e-9 * (1.0 + scores[j].abs()));
            }
        }

        #[test]
        fn center_distances_match_variance(s in set(20)) {
            let dist = distances_to_center_of(&rows(&s)).unwrap();
            let n = s.len() as f64;
            let d = s[0].len();
            let mut var_sum = 0.0;
            for k in 0..d {
                let mean = s.iter().map(|e| e[k]).sum::<f64>() / n;
                var_sum += s.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / n;
            }
            let sq: f64 = dist.iter().map(|x| x * x).sum();
            prop_assert!((sq - n * var_sum).abs() <= 1e-9 * (1.0 + sq));
        }
    }
}
