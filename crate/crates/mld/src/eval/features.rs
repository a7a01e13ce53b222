//! Distribution-level metrics over feature vectors: Frechet distance,
//! diversity, per-condition multimodality, and text-motion retrieval.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{read_mot, write_mot};
use crate::numerics::{sqrt_spd, Tensor, TensorG};
use crate::rng::CounterRng;

/// Default repetition count for metrics reported with confidence intervals.
pub const DEFAULT_METRIC_REPS: usize = 20;

/// A set of feature vectors, one per row, with save and load helpers so
/// extracted features can be cached between evaluation runs.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub feats: Tensor,
}

impl FeatureSet {
    pub fn new(feats: Tensor) -> Result<Self> {
        if feats.rows() == 0 || feats.cols() == 0 {
            return Err(Error::InvalidArgument(
                "feature set needs at least one row and one column".into(),
            ));
        }
        Ok(Self { feats })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_mot(path, &self.feats)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_mot(path)?)
    }
}

fn check_rows(x: &Tensor, op: &'static str, min_rows: usize) -> Result<()> {
    if x.rows() < min_rows {
        return Err(Error::InvalidArgument(format!(
            "{op} needs at least {min_rows} rows, got {}",
            x.rows()
        )));
    }
    Ok(())
}

/// Column means and the unbiased sample covariance of `x`, in f64. A small
/// ridge keeps the covariance usable when there are fewer samples than
/// dimensions plus one.
pub fn mean_and_cov(x: &Tensor) -> Result<(Vec<f64>, TensorG<f64>)> {
    check_rows(x, "covariance", 2)?;
    let (n, d) = (x.rows(), x.cols());
    let mut mu = vec![0.0f64; d];
    for r in 0..n {
        for (j, v) in x.row(r).iter().enumerate() {
            mu[j] += *v as f64;
        }
    }
    for v in mu.iter_mut() {
        *v /= n as f64;
    }
    let mut cov = TensorG::<f64>::zeros(&[d, d]);
    for r in 0..n {
        let row = x.row(r);
        for j in 0..d {
            let cj = row[j] as f64 - mu[j];
            for k in j..d {
                let ck = row[k] as f64 - mu[k];
                cov.data_mut()[j * d + k] += cj * ck;
            }
        }
    }
    let denom = (n - 1) as f64;
    for j in 0..d {
        for k in j..d {
            let v = cov.at(j, k) / denom;
            cov.data_mut()[j * d + k] = v;
            cov.data_mut()[k * d + j] = v;
        }
    }
    if n < d + 1 {
        for j in 0..d {
            cov.data_mut()[j * d + j] += 1e-6;
        }
    }
    Ok((mu, cov))
}

/// Frechet distance between two Gaussians given by their moments:
/// |mu_a - mu_b|^2 + tr(cov_a + cov_b - 2 (cov_a^1/2 cov_b cov_a^1/2)^1/2).
pub fn frechet_distance(
    mu_a: &[f64],
    cov_a: &TensorG<f64>,
    mu_b: &[f64],
    cov_b: &TensorG<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.dims() != [d, d] || cov_b.dims() != [d, d] {
        return Err(Error::ShapeMismatch {
            op: "frechet_distance",
            detail: format!(
                "means {} and {}, covariances {:?} and {:?}",
                mu_a.len(),
                mu_b.len(),
                cov_a.dims(),
                cov_b.dims()
            ),
        });
    }
    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let sa = sqrt_spd(cov_a)?;
    let inner = sa.matmul(cov_b)?.matmul(&sa)?;
    let cross = sqrt_spd(&inner)?;
    let mut trace = 0.0f64;
    for j in 0..d {
        trace += cov_a.at(j, j) + cov_b.at(j, j) - 2.0 * cross.at(j, j);
    }
    Ok((mean_term + trace).max(0.0))
}

/// Frechet distance between the Gaussian fits of two feature sets.
pub fn fid(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "fid",
            detail: format!("{} columns vs {}", a.cols(), b.cols()),
        });
    }
    let (mu_a, cov_a) = mean_and_cov(a)?;
    let (mu_b, cov_b) = mean_and_cov(b)?;
    frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b)
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// First `count` entries of a partial Fisher-Yates shuffle of `0..n`.
fn sample_distinct(rng: &mut CounterRng, n: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx
}

/// Mean distance between `x_d` disjoint random pairs of rows.
pub fn diversity(x: &Tensor, x_d: usize, seed: u64) -> Result<f64> {
    if x_d == 0 {
        return Err(Error::InvalidArgument("diversity needs x_d >= 1".into()));
    }
    check_rows(x, "diversity", 2 * x_d)?;
    let mut rng = CounterRng::new(seed).fork_str("diversity");
    let picks = sample_distinct(&mut rng, x.rows(), 2 * x_d);
    let mut total = 0.0;
    for i in 0..x_d {
        total += euclid(x.row(picks[i]), x.row(picks[x_d + i]));
    }
    Ok(total / x_d as f64)
}

/// Mean within-condition distance: `j_m` conditions are drawn among those
/// with at least `2 * x_m` rows, and `x_m` disjoint pairs are averaged per
/// drawn condition.
pub fn multimodality(
    x: &Tensor,
    labels: &[usize],
    j_m: usize,
    x_m: usize,
    seed: u64,
) -> Result<f64> {
    if labels.len() != x.rows() {
        return Err(Error::ShapeMismatch {
            op: "multimodality",
            detail: format!("{} labels vs {} rows", labels.len(), x.rows()),
        });
    }
    if j_m == 0 || x_m == 0 {
        return Err(Error::InvalidArgument(
            "multimodality needs j_m >= 1 and x_m >= 1".into(),
        ));
    }
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (row, label) in labels.iter().enumerate() {
        match groups.iter_mut().find(|(l, _)| l == label) {
            Some((_, rows)) => rows.push(row),
            None => groups.push((*label, vec![row])),
        }
    }
    let eligible: Vec<&Vec<usize>> = groups
        .iter()
        .filter(|(_, rows)| rows.len() >= 2 * x_m)
        .map(|(_, rows)| rows)
        .collect();
    if eligible.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "multimodality needs a condition with at least {} rows",
            2 * x_m
        )));
    }
    let mut rng = CounterRng::new(seed).fork_str("multimodality");
    let mut total = 0.0;
    for _ in 0..j_m {
        let rows = eligible[rng.below(eligible.len())];
        let picks = sample_distinct(&mut rng, rows.len(), 2 * x_m);
        for i in 0..x_m {
            total += euclid(x.row(rows[picks[i]]), x.row(rows[picks[x_m + i]]));
        }
    }
    Ok(total / (j_m * x_m) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub mm_dist: f64,
}

/// Text-to-motion retrieval over matched feature rows. Each motion is ranked
/// against its own text plus `pool - 1` mismatched texts; `r(k)` is the
/// fraction of motions whose own text lands in the top `k` by Euclidean
/// distance, and `mm_dist` is the mean matched distance.
pub fn retrieval_metrics(
    text_feats: &Tensor,
    motion_feats: &Tensor,
    pool: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    if text_feats.rows() != motion_feats.rows() || text_feats.cols() != motion_feats.cols() {
        return Err(Error::ShapeMismatch {
            op: "retrieval_metrics",
            detail: format!(
                "text {:?} vs motion {:?}",
                text_feats.dims(),
                motion_feats.dims()
            ),
        });
    }
    if pool < 2 {
        return Err(Error::InvalidArgument("retrieval pool must be >= 2".into()));
    }
    check_rows(text_feats, "retrieval", pool)?;
    let n = text_feats.rows();
    let rng = CounterRng::new(seed).fork_str("retrieval");
    let mut hits = [0usize; 3];
    let mut mm_dist = 0.0;
    for i in 0..n {
        let own = euclid(motion_feats.row(i), text_feats.row(i));
        mm_dist += own;
        let mut r = rng.fork(i as u64);
        // Draw pool - 1 distinct mismatched texts by sampling from the other
        // n - 1 rows and skipping past the query index.
        let mut closer = 0usize;
        for pick in sample_distinct(&mut r, n - 1, pool - 1) {
            let j = if pick >= i { pick + 1 } else { pick };
            if euclid(motion_feats.row(i), text_feats.row(j)) < own {
                closer += 1;
            }
        }
        for (k, hit) in hits.iter_mut().enumerate() {
            if closer <= k {
                *hit += 1;
            }
        }
    }
    Ok(RetrievalReport {
        r1: hits[0] as f64 / n as f64,
        r2: hits[1] as f64 / n as f64,
        r3: hits[2] as f64 / n as f64,
        mm_dist: mm_dist / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
    pub ci95: f64,
    pub reps: usize,
}

/// Collected metric values with 95 percent confidence half-widths, ready to
/// serialize as JSON or CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a metric from repeated measurements: the value is their mean
    /// and the half-width is 1.96 standard errors.
    pub fn push(&mut self, metric: &str, samples: &[f64]) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "metric {metric} has no samples"
            )));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let ci95 = if samples.len() > 1 {
            let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        } else {
            0.0
        };
        self.entries.push(MetricEntry {
            metric: metric.to_string(),
            value: mean,
            ci95,
            reps: samples.len(),
        });
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(Error::from)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,ci95,reps\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.metric, e.value, e.ci95, e.reps));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn_tensor(seed: u64, rows: usize, cols: usize) -> Tensor {
        let mut rng = CounterRng::new(seed).fork_str("feat");
        let mut t = Tensor::zeros(&[rows, cols]);
        for v in t.data_mut() {
            *v = rng.normal() as f32;
        }
        t
    }

    #[test]
    fn fid_of_identical_sets_is_zero() {
        let a = randn_tensor(10, 40, 6);
        let v = fid(&a, &a).unwrap();
        assert!(v.abs() < 1e-6, "fid(a, a) = {v}");
    }

    #[test]
    fn fid_matches_gaussian_mean_shift() {
        // Same unit covariance, means differing by a vector of squared norm
        // 4, so the exact distance is 4.
        let n = 4000;
        let d = 4;
        let a = randn_tensor(11, n, d);
        let mut b = randn_tensor(12, n, d);
        for r in 0..n {
            b.data_mut()[r * d] += 2.0;
        }
        let v = fid(&a, &b).unwrap();
        assert!((v - 4.0).abs() < 0.4, "fid = {v}, expected about 4");
    }

    #[test]
    fn fid_rejects_mismatched_or_tiny_inputs() {
        let a = randn_tensor(13, 10, 4);
        let b = randn_tensor(14, 10, 5);
        assert!(fid(&a, &b).is_err());
        let one = randn_tensor(15, 1, 4);
        assert!(fid(&one, &one).is_err());
    }

    // Denman-Beavers iteration with a Gauss-Jordan inverse, an independent
    // route to the matrix square root for the oracle comparison below.
    fn gauss_jordan_inverse(m: &TensorG<f64>) -> TensorG<f64> {
        let d = m.rows();
        let mut a: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut row: Vec<f64> = (0..d).map(|j| m.at(i, j)).collect();
                let mut eye = vec![0.0; d];
                eye[i] = 1.0;
                row.extend(eye);
                row
            })
            .collect();
        for col in 0..d {
            let pivot = (col..d)
                .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            let p = a[col][col];
            for v in a[col].iter_mut() {
                *v /= p;
            }
            for row in 0..d {
                if row != col {
                    let f = a[row][col];
                    let (lead, tail) = if row < col {
                        let (lo, hi) = a.split_at_mut(col);
                        (&mut lo[row], &hi[0])
                    } else {
                        let (lo, hi) = a.split_at_mut(row);
                        (&mut hi[0], &lo[col])
                    };
                    for (dst, src) in lead.iter_mut().zip(tail.iter()) {
                        *dst -= f * src;
                    }
                }
            }
        }
        let mut out = TensorG::<f64>::zeros(&[d, d]);
        for (i, row) in a.iter().enumerate() {
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&row[d..]);
        }
        out
    }

    fn denman_beavers_sqrt(m: &TensorG<f64>) -> TensorG<f64> {
        let d = m.rows();
        let mut y = m.clone();
        let mut z = TensorG::<f64>::zeros(&[d, d]);
        for i in 0..d {
            z.data_mut()[i * d + i] = 1.0;
        }
        for _ in 0..60 {
            let y_inv = gauss_jordan_inverse(&y);
            let z_inv = gauss_jordan_inverse(&z);
            let mut y_next = TensorG::<f64>::zeros(&[d, d]);
            let mut z_next = TensorG::<f64>::zeros(&[d, d]);
            for i in 0..d {
                for j in 0..d {
                    y_next.data_mut()[i * d + j] = 0.5 * (y.at(i, j) + z_inv.at(i, j));
                    z_next.data_mut()[i * d + j] = 0.5 * (z.at(i, j) + y_inv.at(i, j));
                }
            }
            y = y_next;
            z = z_next;
        }
        y
    }

    fn random_spd(seed: u64, d: usize) -> TensorG<f64> {
        let m = randn_tensor(seed, d, d).to_f64();
        let mut spd = m.transpose().matmul(&m).unwrap();
        for i in 0..d {
            spd.data_mut()[i * d + i] += 0.5;
        }
        spd
    }

    #[test]
    fn frechet_distance_matches_denman_beavers_oracle() {
        let d = 5;
        let cov_a = random_spd(20, d);
        let cov_b = random_spd(21, d);
        let mut rng = CounterRng::new(22).fork_str("mu");
        let mu_a: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let mu_b: Vec<f64> = (0..d).map(|_| rng.normal()).collect();

        let ours = frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b).unwrap();

        let sa = denman_beavers_sqrt(&cov_a);
        let inner = sa.matmul(&cov_b).unwrap().matmul(&sa).unwrap();
        let cross = denman_beavers_sqrt(&inner);
        let mut expected: f64 = mu_a
            .iter()
            .zip(&mu_b)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        for i in 0..d {
            expected += cov_a.at(i, i) + cov_b.at(i, i) - 2.0 * cross.at(i, i);
        }
        assert!(
            (ours - expected).abs() < 1e-4,
            "{ours} vs oracle {expected}"
        );
    }

    #[test]
    fn diversity_trivial_cases() {
        let mut same = Tensor::zeros(&[6, 3]);
        for v in same.data_mut() {
            *v = 2.5;
        }
        assert!(diversity(&same, 3, 0).unwrap() < 1e-12);

        // Two rows at distance 5: the only pair.
        let two = Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let v = diversity(&two, 1, 7).unwrap();
        assert!((v - 5.0).abs() < 1e-9);

        assert!(diversity(&two, 0, 0).is_err());
        assert!(diversity(&two, 2, 0).is_err());
    }

    #[test]
    fn diversity_mean_over_seeds_matches_enumeration() {
        let pts = Tensor::from_vec(
            vec![4, 2],
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0, -1.5, 0.5],
        )
        .unwrap();
        let mut pair_mean = 0.0;
        let mut pairs = 0usize;
        for i in 0..4 {
            for j in i + 1..4 {
                pair_mean += euclid(pts.row(i), pts.row(j));
                pairs += 1;
            }
        }
        pair_mean /= pairs as f64;

        let reps = 2000;
        let samples: Vec<f64> = (0..reps)
            .map(|s| diversity(&pts, 1, s as u64).unwrap())
            .collect();
        let mean = samples.iter().sum::<f64>() / reps as f64;
        let sd = (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (reps as f64 - 1.0))
            .sqrt();
        let band = 4.0 * sd / (reps as f64).sqrt();
        assert!(
            (mean - pair_mean).abs() < band,
            "mean {mean} vs enumeration {pair_mean}, band {band}"
        );
    }

    #[test]
    fn multimodality_trivial_cases() {
        let two = Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 0.0, 3.0]).unwrap();
        let v = multimodality(&two, &[9, 9], 1, 1, 0).unwrap();
        assert!((v - 3.0).abs() < 1e-9);

        assert!(multimodality(&two, &[9], 1, 1, 0).is_err());
        assert!(multimodality(&two, &[0, 1], 1, 1, 0).is_err());
        assert!(multimodality(&two, &[9, 9], 0, 1, 0).is_err());
    }

    #[test]
    fn multimodality_mean_over_seeds_matches_enumeration() {
        // Two conditions of three rows each; x_m = 1 picks one pair from a
        // uniformly drawn condition, so the expectation is the average of
        // the two per-condition pair means.
        let pts = Tensor::from_vec(
            vec![6, 1],
            vec![0.0, 1.0, 5.0, 10.0, 12.0, 20.0],
        )
        .unwrap();
        let labels = [0usize, 0, 0, 1, 1, 1];
        let per_cond = |rows: [usize; 3]| {
            let mut total = 0.0;
            let mut count = 0;
            for i in 0..3 {
                for j in i + 1..3 {
                    total += euclid(pts.row(rows[i]), pts.row(rows[j]));
                    count += 1;
                }
            }
            total / count as f64
        };
        let expected = 0.5 * (per_cond([0, 1, 2]) + per_cond([3, 4, 5]));

        let reps = 2000;
        let samples: Vec<f64> = (0..reps)
            .map(|s| multimodality(&pts, &labels, 1, 1, s as u64).unwrap())
            .collect();
        let mean = samples.iter().sum::<f64>() / reps as f64;
        let sd = (samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (reps as f64 - 1.0))
            .sqrt();
        let band = 4.0 * sd / (reps as f64).sqrt();
        assert!(
            (mean - expected).abs() < band,
            "mean {mean} vs enumeration {expected}, band {band}"
        );
    }

    #[test]
    fn retrieval_is_perfect_for_matched_features() {
        let feats = randn_tensor(30, 64, 8);
        let rep = retrieval_metrics(&feats, &feats, 32, 0).unwrap();
        assert_eq!(rep.r1, 1.0);
        assert_eq!(rep.r2, 1.0);
        assert_eq!(rep.r3, 1.0);
        assert!(rep.mm_dist < 1e-9);
    }

    #[test]
    fn retrieval_ranks_nest_and_sit_at_chance_for_noise() {
        let text = randn_tensor(31, 2000, 6);
        let motion = randn_tensor(32, 2000, 6);
        let rep = retrieval_metrics(&text, &motion, 32, 5).unwrap();
        assert!(rep.r1 <= rep.r2 && rep.r2 <= rep.r3);
        let sigma = |p: f64| (p * (1.0 - p) / 2000.0).sqrt();
        for (r, k) in [(rep.r1, 1.0), (rep.r2, 2.0), (rep.r3, 3.0)] {
            let p = k / 32.0;
            assert!(
                (r - p).abs() < 3.0 * sigma(p),
                "r@{k} = {r}, chance {p}"
            );
        }
        assert!(rep.mm_dist > 1.0);
    }

    #[test]
    fn retrieval_rejects_bad_inputs() {
        let a = randn_tensor(33, 10, 4);
        let b = randn_tensor(34, 12, 4);
        assert!(retrieval_metrics(&a, &b, 4, 0).is_err());
        assert!(retrieval_metrics(&a, &a, 1, 0).is_err());
        assert!(retrieval_metrics(&a, &a, 11, 0).is_err());
    }

    #[test]
    fn metric_report_serializes_and_summarizes() {
        let mut report = MetricReport::new();
        report.push("fid", &[1.0, 3.0]).unwrap();
        report.push("div", &[2.0]).unwrap();
        assert!(report.push("empty", &[]).is_err());

        let fid_entry = &report.entries[0];
        assert_eq!(fid_entry.value, 2.0);
        // sd = sqrt(2), se = 1, so the half-width is 1.96.
        assert!((fid_entry.ci95 - 1.96).abs() < 1e-12);
        assert_eq!(report.entries[1].ci95, 0.0);

        let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(json["entries"][0]["metric"], "fid");
        assert_eq!(json["entries"][0]["reps"], 2);

        let csv = report.to_csv();
        assert!(csv.starts_with("metric,value,ci95,reps\n"));
        assert!(csv.contains("div,2,0,1"));
    }

    #[test]
    fn feature_set_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.mot");
        let set = FeatureSet::new(randn_tensor(40, 7, 3)).unwrap();
        set.save(&path).unwrap();
        let back = FeatureSet::load(&path).unwrap();
        assert_eq!(back.feats.max_abs_diff(&set.feats), 0.0);
        assert!(FeatureSet::new(Tensor::zeros(&[0, 3])).is_err());
    }
}
