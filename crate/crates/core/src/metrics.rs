//! Two-sample statistics, label-weighted reports, correlation estimates and
//! the invertibility audit.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::condgen::generate;
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, InverseOptions};
use crate::linalg::DenseMatrix;

/// Kernel parameters of `k(x, y) = exp(−α‖x − y‖²)` used in reports.
pub const ALPHAS: [f64; 4] = [0.1, 1.0, 5.0, 10.0];

fn check_pair(p: &DenseMatrix, q: &DenseMatrix, op: &'static str) -> Result<()> {
    if p.cols() != q.cols() {
        return Err(Error::shape(
            op,
            format!("dimension {} vs {}", p.cols(), q.cols()),
        ));
    }
    if p.rows() == 0 || q.rows() == 0 {
        return Err(Error::Precondition(format!("{op} needs nonempty samples")));
    }
    Ok(())
}

fn sq_dists(a: &DenseMatrix, b: &DenseMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.rows() * b.rows());
    for i in 0..a.rows() {
        let ra = a.row(i);
        for j in 0..b.rows() {
            out.push(
                ra.iter()
                    .zip(b.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum(),
            );
        }
    }
    out
}

/// Squared pairwise distances within and across two samples, computed once
/// and shared by every statistic.
#[derive(Clone, Debug)]
pub struct Pairwise {
    n: usize,
    m: usize,
    xx: Vec<f64>,
    yy: Vec<f64>,
    xy: Vec<f64>,
}

impl Pairwise {
    pub fn new(p: &DenseMatrix, q: &DenseMatrix) -> Result<Self> {
        check_pair(p, q, "pairwise")?;
        Ok(Self {
            n: p.rows(),
            m: q.rows(),
            xx: sq_dists(p, p),
            yy: sq_dists(q, q),
            xy: sq_dists(p, q),
        })
    }

    /// Unbiased MMD². With equal sample sizes the cross term also skips the
    /// diagonal, so identical inputs give exactly zero.
    pub fn mmd(&self, alpha: f64) -> Result<f64> {
        let (n, m) = (self.n, self.m);
        if n < 2 || m < 2 {
            return Err(Error::Precondition(
                "unbiased MMD needs at least two samples per set".into(),
            ));
        }
        let k = |d: f64| (-alpha * d).exp();
        let off = |v: &[f64], s: usize| {
            let mut t = 0.0;
            for i in 0..s {
                for j in 0..s {
                    if i != j {
                        t += k(v[i * s + j]);
                    }
                }
            }
            t / (s * (s - 1)) as f64
        };
        let kxx = off(&self.xx, n);
        let kyy = off(&self.yy, m);
        let kxy = if n == m {
            off(&self.xy, n)
        } else {
            self.xy.iter().map(|&d| k(d)).sum::<f64>() / (n * m) as f64
        };
        Ok(kxx + kyy - 2.0 * kxy)
    }

    /// Biased (V-statistic) MMD², means over all pairs.
    pub fn mmd_biased(&self, alpha: f64) -> f64 {
        let mean = |v: &[f64]| v.iter().map(|&d| (-alpha * d).exp()).sum::<f64>() / v.len() as f64;
        mean(&self.xx) + mean(&self.yy) - 2.0 * mean(&self.xy)
    }

    /// `2 E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖` with plain means over all pairs.
    pub fn energy(&self) -> f64 {
        let mean = |v: &[f64]| v.iter().map(|d| d.sqrt()).sum::<f64>() / v.len() as f64;
        2.0 * mean(&self.xy) - mean(&self.xx) - mean(&self.yy)
    }
}

pub fn mmd(p: &DenseMatrix, q: &DenseMatrix, alpha: f64) -> Result<f64> {
    Pairwise::new(p, q)?.mmd(alpha)
}

pub fn mmd_biased(p: &DenseMatrix, q: &DenseMatrix, alpha: f64) -> Result<f64> {
    Ok(Pairwise::new(p, q)?.mmd_biased(alpha))
}

pub fn energy_distance(p: &DenseMatrix, q: &DenseMatrix) -> Result<f64> {
    Ok(Pairwise::new(p, q)?.energy())
}

/// Statistic values under `n_perm` random relabellings of the pooled
/// sample, keeping the two group sizes.
pub fn permutation_null(
    p: &DenseMatrix,
    q: &DenseMatrix,
    n_perm: usize,
    rng: &mut impl Rng,
    stat: impl Fn(&DenseMatrix, &DenseMatrix) -> Result<f64>,
) -> Result<Vec<f64>> {
    check_pair(p, q, "permutation_null")?;
    let pooled = DenseMatrix::vstack(&[p, q])?;
    let mut idx: Vec<usize> = (0..pooled.rows()).collect();
    let mut out = Vec::with_capacity(n_perm);
    for _ in 0..n_perm {
        idx.shuffle(rng);
        let a = pooled.select_rows(&idx[..p.rows()]);
        let b = pooled.select_rows(&idx[p.rows()..]);
        out.push(stat(&a, &b)?);
    }
    Ok(out)
}

fn pooled_kernel(
    p: &DenseMatrix,
    q: &DenseMatrix,
    f: impl Fn(f64) -> f64,
) -> Result<(DenseMatrix, usize)> {
    check_pair(p, q, "permutation_null")?;
    let pooled = DenseMatrix::vstack(&[p, q])?;
    let n = pooled.rows();
    let d = sq_dists(&pooled, &pooled);
    Ok((
        DenseMatrix::new(n, n, d.into_iter().map(f).collect())?,
        p.rows(),
    ))
}

/// Group sums of a pooled pair matrix under a relabelling: within the first
/// group (off-diagonal), within the second, across, and along the pairing
/// `idx[i] ↔ idx[n + i]`.
fn group_sums(k: &DenseMatrix, idx: &[usize], n: usize) -> (f64, f64, f64, f64) {
    let total = idx.len();
    let mut first = vec![false; total];
    for &i in &idx[..n] {
        first[i] = true;
    }
    let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
    for i in 0..total {
        let row = k.row(i);
        for j in (i + 1)..total {
            match (first[i], first[j]) {
                (true, true) => aa += row[j],
                (false, false) => bb += row[j],
                _ => ab += row[j],
            }
        }
    }
    let diag = if 2 * n == total {
        (0..n).map(|i| k.get(idx[i], idx[n + i])).sum()
    } else {
        0.0
    };
    (2.0 * aa, 2.0 * bb, ab, diag)
}

/// Permutation null of the unbiased MMD², reusing one pooled kernel matrix.
pub fn mmd_permutation_null(
    p: &DenseMatrix,
    q: &DenseMatrix,
    alpha: f64,
    n_perm: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let (k, n) = pooled_kernel(p, q, |d| (-alpha * d).exp())?;
    let m = k.rows() - n;
    if n < 2 || m < 2 {
        return Err(Error::Precondition(
            "unbiased MMD needs at least two samples per set".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..k.rows()).collect();
    Ok((0..n_perm)
        .map(|_| {
            idx.shuffle(rng);
            let (aa, bb, ab, diag) = group_sums(&k, &idx, n);
            let kxy = if n == m {
                (ab - diag) / (n * (n - 1)) as f64
            } else {
                ab / (n * m) as f64
            };
            aa / (n * (n - 1)) as f64 + bb / (m * (m - 1)) as f64 - 2.0 * kxy
        })
        .collect())
}

/// Permutation null of the energy distance.
pub fn energy_permutation_null(
    p: &DenseMatrix,
    q: &DenseMatrix,
    n_perm: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let (k, n) = pooled_kernel(p, q, f64::sqrt)?;
    let m = k.rows() - n;
    let mut idx: Vec<usize> = (0..k.rows()).collect();
    Ok((0..n_perm)
        .map(|_| {
            idx.shuffle(rng);
            let (aa, bb, ab, _) = group_sums(&k, &idx, n);
            2.0 * ab / (n * m) as f64 - aa / (n * n) as f64 - bb / (m * m) as f64
        })
        .collect())
}

/// Empirical `q`-quantile (nearest rank).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleStats {
    pub mmd: Vec<f64>,
    pub energy: f64,
}

pub fn two_sample_stats(p: &DenseMatrix, q: &DenseMatrix) -> Result<TwoSampleStats> {
    let pw = Pairwise::new(p, q)?;
    Ok(TwoSampleStats {
        mmd: ALPHAS.iter().map(|&a| pw.mmd(a)).collect::<Result<_>>()?,
        energy: pw.energy(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: Vec<usize>,
    pub count: usize,
    pub weight: f64,
    pub mmd: Vec<f64>,
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub alphas: Vec<f64>,
    pub rows: Vec<ReportRow>,
    pub weighted: TwoSampleStats,
    pub total_count: usize,
}

/// One group per label vector: `(label, true samples, generated samples)`.
/// Weights are the true-sample counts normalised to sum to one.
pub fn weighted_report(groups: &[(Vec<usize>, DenseMatrix, DenseMatrix)]) -> Result<MetricsReport> {
    if groups.is_empty() {
        return Err(Error::Precondition(
            "weighted_report needs at least one label vector".into(),
        ));
    }
    let total: usize = groups.iter().map(|g| g.1.rows()).sum();
    let mut rows = Vec::with_capacity(groups.len());
    let mut wm = vec![0.0; ALPHAS.len()];
    let mut we = 0.0;
    for (label, truth, generated) in groups {
        let s = two_sample_stats(truth, generated)?;
        let w = truth.rows() as f64 / total as f64;
        for (a, b) in wm.iter_mut().zip(&s.mmd) {
            *a += w * b;
        }
        we += w * s.energy;
        rows.push(ReportRow {
            label: label.clone(),
            count: truth.rows(),
            weight: w,
            mmd: s.mmd,
            energy: s.energy,
        });
    }
    Ok(MetricsReport {
        alphas: ALPHAS.to_vec(),
        rows,
        weighted: TwoSampleStats {
            mmd: wm,
            energy: we,
        },
        total_count: total,
    })
}

/// Generates as many samples per label vector as `ds` holds and compares
/// them with the true rows.
pub fn generation_report(
    model: &FlowModel,
    ds: &LabeledDataset,
    rng: &mut impl Rng,
    opts: InverseOptions,
) -> Result<MetricsReport> {
    let mut groups = Vec::new();
    for y in ds.label_vector_counts().into_keys() {
        let truth = ds.rows_with_labels(&y);
        let generated = generate(model, &y, truth.rows(), rng, opts)?;
        groups.push((y, truth, generated));
    }
    weighted_report(&groups)
}

impl MetricsReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Table layout: one row per label vector plus a `weighted` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let alphas: Vec<String> = self
            .alphas
            .iter()
            .map(|a| format!("MMD(alpha={a})"))
            .collect();
        writeln!(f, "label,count,{},Energy", alphas.join(","))?;
        for r in &self.rows {
            let label: Vec<String> = r.label.iter().map(usize::to_string).collect();
            let m: Vec<String> = r.mmd.iter().map(f64::to_string).collect();
            writeln!(
                f,
                "{},{},{},{}",
                label.join(" "),
                r.count,
                m.join(","),
                r.energy
            )?;
        }
        let m: Vec<String> = self.weighted.mmd.iter().map(f64::to_string).collect();
        writeln!(
            f,
            "weighted,{},{},{}",
            self.total_count,
            m.join(","),
            self.weighted.energy
        )?;
        f.flush()?;
        Ok(())
    }
}

pub fn sample_covariance(x: &DenseMatrix) -> DenseMatrix {
    let n = x.rows() as f64;
    let d = x.cols();
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..x.rows()).map(|i| x.get(i, j)).sum::<f64>() / n)
        .collect();
    let c = DenseMatrix::from_fn(x.rows(), d, |i, j| x.get(i, j) - mean[j]);
    c.t_matmul(&c).expect("same rows").scale(1.0 / (n - 1.0))
}

/// Pearson correlation of the columns; the diagonal is exactly one.
pub fn sample_correlation(x: &DenseMatrix) -> DenseMatrix {
    let cov = sample_covariance(x);
    let d = cov.rows();
    DenseMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else {
            cov.get(i, j) / (cov.get(i, i) * cov.get(j, j)).sqrt()
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    /// `‖F⁻¹(F(X)) − X‖∞`
    pub inverse_of_forward: f64,
    /// `‖F(F⁻¹(X)) − X‖∞`
    pub forward_of_inverse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub in_distribution: RoundTrip,
    pub out_of_distribution: RoundTrip,
}

impl AuditReport {
    pub fn max_error(&self) -> f64 {
        [
            self.in_distribution.inverse_of_forward,
            self.in_distribution.forward_of_inverse,
            self.out_of_distribution.inverse_of_forward,
            self.out_of_distribution.forward_of_inverse,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn round_trip(model: &FlowModel, x: &DenseMatrix, opts: InverseOptions) -> Result<RoundTrip> {
    let z = model.transform(x)?;
    let back = model.inverse(&z, opts)?;
    let inv = model.inverse(x, opts)?;
    let fwd = model.transform(&inv)?;
    Ok(RoundTrip {
        inverse_of_forward: back.max_abs_diff(x)?,
        forward_of_inverse: fwd.max_abs_diff(x)?,
    })
}

/// Round-trip errors on in-distribution rows and on out-of-distribution
/// rows. Inversion failures are returned as errors.
pub fn invertibility_audit(
    model: &FlowModel,
    x_in: &DenseMatrix,
    x_ood: &DenseMatrix,
    opts: InverseOptions,
) -> Result<AuditReport> {
    Ok(AuditReport {
        in_distribution: round_trip(model, x_in, opts)?,
        out_of_distribution: round_trip(model, x_ood, opts)?,
    })
}

/// `n` rows uniform on the bounding box of `x`.
pub fn uniform_in_box(x: &DenseMatrix, n: usize, rng: &mut impl Rng) -> DenseMatrix {
    let d = x.cols();
    let lo: Vec<f64> = (0..d)
        .map(|j| {
            (0..x.rows())
                .map(|i| x.get(i, j))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let hi: Vec<f64> = (0..d)
        .map(|j| {
            (0..x.rows())
                .map(|i| x.get(i, j))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    DenseMatrix::from_fn(n, d, |_, j| lo[j] + (hi[j] - lo[j]) * rng.random::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> DenseMatrix {
        DenseMatrix::from_fn(n, d, |_, _| {
            let e: f64 = StandardNormal.sample(rng);
            e + shift
        })
    }

    fn d2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    /// Double-loop oracles written independently of [`Pairwise`].
    fn mmd_oracle(p: &DenseMatrix, q: &DenseMatrix, alpha: f64) -> f64 {
        let k = |a: &[f64], b: &[f64]| (-alpha * d2(a, b)).exp();
        let (n, m) = (p.rows(), q.rows());
        let mut xx = 0.0;
        let mut yy = 0.0;
        let mut xy = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    xx += k(p.row(i), p.row(j));
                }
            }
        }
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    yy += k(q.row(i), q.row(j));
                }
            }
        }
        let mut cnt = 0.0;
        for i in 0..n {
            for j in 0..m {
                if n != m || i != j {
                    xy += k(p.row(i), q.row(j));
                    cnt += 1.0;
                }
            }
        }
        xx / (n * (n - 1)) as f64 + yy / (m * (m - 1)) as f64 - 2.0 * xy / cnt
    }

    fn energy_oracle(p: &DenseMatrix, q: &DenseMatrix) -> f64 {
        let dist = |a: &[f64], b: &[f64]| d2(a, b).sqrt();
        let (n, m) = (p.rows(), q.rows());
        let mut s = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..m {
                s.0 += dist(p.row(i), q.row(j));
            }
        }
        for i in 0..n {
            for j in 0..n {
                s.1 += dist(p.row(i), p.row(j));
            }
        }
        for i in 0..m {
            for j in 0..m {
                s.2 += dist(q.row(i), q.row(j));
            }
        }
        2.0 * s.0 / (n * m) as f64 - s.1 / (n * n) as f64 - s.2 / (m * m) as f64
    }

    #[test]
    fn identical_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = normal(&mut rng, 50, 2, 0.0);
        for a in ALPHAS {
            assert!(mmd(&p, &p, a).unwrap().abs() <= 1e-12);
        }
        assert!(energy_distance(&p, &p).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn point_masses() {
        let p = DenseMatrix::row_vector(&[0.0, 0.0]);
        let q = DenseMatrix::row_vector(&[3.0, 4.0]);
        let r: f64 = 5.0;
        for a in [0.1, 1.0] {
            let expect = 2.0 * (1.0 - (-a * r * r).exp());
            assert!((mmd_biased(&p, &q, a).unwrap() - expect).abs() < 1e-15);
        }
        assert!((energy_distance(&p, &q).unwrap() - 2.0 * r).abs() < 1e-15);
        assert!(matches!(mmd(&p, &q, 1.0), Err(Error::Precondition(_))));
    }

    #[test]
    fn dimension_mismatch() {
        let p = DenseMatrix::zeros(3, 2);
        let q = DenseMatrix::zeros(3, 3);
        assert!(matches!(mmd(&p, &q, 1.0), Err(Error::Shape { .. })));
        assert!(matches!(energy_distance(&p, &q), Err(Error::Shape { .. })));
    }

    #[test]
    fn matches_double_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (n, m) in [(100, 100), (50, 50), (37, 61)] {
            let p = normal(&mut rng, n, 3, 0.0);
            let q = normal(&mut rng, m, 3, 0.5);
            for a in ALPHAS {
                assert!((mmd(&p, &q, a).unwrap() - mmd_oracle(&p, &q, a)).abs() <= 1e-10);
            }
            assert!((energy_distance(&p, &q).unwrap() - energy_oracle(&p, &q)).abs() <= 1e-10);
        }
    }

    #[test]
    fn symmetric_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = normal(&mut rng, 40, 2, 0.0);
        let q = normal(&mut rng, 30, 2, 1.0);
        let mut idx: Vec<usize> = (0..40).collect();
        idx.shuffle(&mut rng);
        let pp = p.select_rows(&idx);
        for a in ALPHAS {
            let s = mmd(&p, &q, a).unwrap();
            assert!((s - mmd(&q, &p, a).unwrap()).abs() < 1e-12);
            assert!((s - mmd(&pp, &q, a).unwrap()).abs() < 1e-12);
        }
        let e = energy_distance(&p, &q).unwrap();
        assert!((e - energy_distance(&q, &p).unwrap()).abs() < 1e-12);
        assert!((e - energy_distance(&pp, &q).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn shifted_normals_exceed_permutation_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = normal(&mut rng, 1000, 1, 0.0);
        let q = normal(&mut rng, 1000, 1, 3.0);
        let stat = mmd(&p, &q, 1.0).unwrap();
        let null = mmd_permutation_null(&p, &q, 1.0, 200, &mut rng).unwrap();
        assert!(stat > quantile(&null, 0.99));
    }

    #[test]
    fn fast_null_matches_generic_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (n, m) in [(20, 20), (15, 25)] {
            let p = normal(&mut rng, n, 2, 0.0);
            let q = normal(&mut rng, m, 2, 0.2);
            let fast =
                mmd_permutation_null(&p, &q, 1.0, 30, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let slow = permutation_null(&p, &q, 30, &mut ChaCha8Rng::seed_from_u64(9), |a, b| {
                mmd(a, b, 1.0)
            })
            .unwrap();
            let fe =
                energy_permutation_null(&p, &q, 30, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let se = permutation_null(
                &p,
                &q,
                30,
                &mut ChaCha8Rng::seed_from_u64(9),
                energy_distance,
            )
            .unwrap();
            for i in 0..30 {
                assert!((fast[i] - slow[i]).abs() < 1e-12);
                assert!((fe[i] - se[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weighting_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = normal(&mut rng, 60, 2, 0.0);
        let b = normal(&mut rng, 60, 2, 0.3);
        let c = normal(&mut rng, 20, 2, 0.0);
        let d = normal(&mut rng, 20, 2, 1.0);
        let single = weighted_report(&[(vec![0], a.clone(), b.clone())]).unwrap();
        assert_eq!(single.weighted.mmd, single.rows[0].mmd);
        let rep = weighted_report(&[(vec![0], a, b), (vec![1], c, d)]).unwrap();
        assert_eq!(rep.rows[0].weight, 0.75);
        let expect = 0.75 * rep.rows[0].energy + 0.25 * rep.rows[1].energy;
        assert!((rep.weighted.energy - expect).abs() < 1e-15);
        for k in 0..4 {
            let e = 0.75 * rep.rows[0].mmd[k] + 0.25 * rep.rows[1].mmd[k];
            assert!((rep.weighted.mmd[k] - e).abs() < 1e-15);
        }
        let w: f64 = rep.rows.iter().map(|r| r.weight).sum();
        assert!((w - 1.0).abs() < 1e-15);
    }

    #[test]
    fn report_serialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = normal(&mut rng, 10, 2, 0.0);
        let b = normal(&mut rng, 10, 2, 0.0);
        let rep = weighted_report(&[(vec![0, 1, 0], a, b)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        rep.write_json(&dir.path().join("r.json")).unwrap();
        rep.write_csv(&dir.path().join("r.csv")).unwrap();
        let back: MetricsReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap())
                .unwrap();
        assert_eq!(back, rep);
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "label,count,MMD(alpha=0.1),MMD(alpha=1),MMD(alpha=5),MMD(alpha=10),Energy"
        );
        assert!(lines[1].starts_with("0 1 0,10,"));
        assert!(lines[2].starts_with("weighted,10,"));
    }

    #[test]
    fn correlation_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = normal(&mut rng, 4000, 4, 0.0);
        let c = sample_correlation(&x);
        for i in 0..4 {
            assert_eq!(c.get(i, i), 1.0);
            for j in 0..4 {
                if i != j {
                    assert!(c.get(i, j).abs() <= 0.06);
                }
            }
        }
        let g = crate::datasets::gp_local(4000, 7).unwrap();
        let c = sample_correlation(&g.features);
        assert!((c.get(0, 1) - 0.6).abs() <= 0.06);
        assert!((c.get(1, 2) + 0.4).abs() <= 0.06);
        assert!(c.get(0, 2).abs() <= 0.06);
    }
}
