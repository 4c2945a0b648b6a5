//! Representation diagnostics: uniformity on the unit hypersphere, k-means
//! clustering agreement (adjusted Rand index), and mutual-information
//! estimates for the shared and task-specific representations.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::numeric::{Tape, Tensor};
use crate::objectives::{infonce, kl_diag_gaussian_value};
use crate::rng::{seeded, substream};

fn normalized_rows(x: &Tensor, op: &'static str) -> Result<Vec<Vec<f64>>> {
    if x.shape().len() != 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("{op} expects a matrix"),
        });
    }
    (0..x.rows())
        .map(|i| {
            let r = x.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Domain {
                    op,
                    detail: format!("row {i} has norm {n}"),
                });
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

/// `log mean_{i≠j} exp(−2‖ẑ_i − ẑ_j‖²)` over L2-normalized rows; at most 0.
pub fn uniformity(reprs: &Tensor) -> Result<f64> {
    let rows = normalized_rows(reprs, "uniformity")?;
    let n = rows.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "uniformity needs at least 2 rows".into(),
        ));
    }
    // Every exponent is in [-8, 0]; a log-sum-exp keeps tiny potentials.
    let mut exps = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d2: f64 = rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                exps.push(-2.0 * d2);
            }
        }
    }
    let m = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = exps.iter().map(|e| (e - m).exp()).sum();
    Ok((m + (s / exps.len() as f64).ln()).min(0.0))
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index of two labelings by pair counting. When both
/// labelings are trivial in the same way (the chance-corrected denominator
/// vanishes) the result is 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "labelings have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_a: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = choose2(a.len());
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn kmeans_once(points: &[&[f64]], k: usize, seed: u64, max_iter: usize) -> KMeansResult {
    let mut rng = seeded(seed);
    let n = points.len();
    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = vec![points[rng.gen_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(&mut rng),
            // All remaining points coincide with a center.
            Err(_) => rng.gen_range(0..n),
        };
        centers.push(points[next].to_vec());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().expect("non-empty")));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, ctr) in centers.iter().enumerate() {
                let d = sq_dist(p, ctr);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = points
        .iter()
        .zip(&assign)
        .map(|(p, &a)| sq_dist(p, &centers[a]))
        .sum();
    KMeansResult {
        assignments: assign,
        inertia,
    }
}

/// k-means with k-means++ seeding; the restart with the lowest inertia wins
/// (the earliest on ties). Restart `r` uses its own substream of `seed`.
pub fn kmeans(
    data: &Tensor,
    k: usize,
    restarts: usize,
    seed: u64,
    execution: Execution,
) -> Result<KMeansResult> {
    if data.shape().len() != 2 {
        return Err(Error::InvalidShape {
            shape: data.shape().to_vec(),
            reason: "k-means expects a matrix".into(),
        });
    }
    let n = data.rows();
    if k < 2 || n < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs N ≥ k ≥ 2, got N = {n}, k = {k}"
        )));
    }
    let restarts = restarts.max(1);
    let points: Vec<&[f64]> = (0..n).map(|i| data.row(i)).collect();
    let seeds: Vec<u64> = (0..restarts)
        .map(|r| substream(seed, "kmeans", r as u64).gen::<u64>())
        .collect();
    let runs = exec::map(seeds, execution, |s| kmeans_once(&points, k, s, 300));
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.inertia < runs[best].inertia {
            best = i;
        }
    }
    Ok(runs.into_iter().nth(best).expect("at least one restart"))
}

/// ARI between gold labels and a k-means clustering of `reprs` with
/// `k = classes` and 10 restarts.
pub fn clustering_ari(
    reprs: &Tensor,
    gold: &[usize],
    classes: usize,
    seed: u64,
    execution: Execution,
) -> Result<f64> {
    if reprs.shape().first() != Some(&gold.len()) {
        return Err(Error::InvalidArgument(
            "one gold label per representation row is required".into(),
        ));
    }
    let km = kmeans(reprs, classes, 10, seed, execution)?;
    adjusted_rand_index(gold, &km.assignments)
}

/// `log B − infonce(z, z⁺, τ)`, the contrastive lower bound on I(X; Z).
pub fn mi_xz_estimate(z: &Tensor, z_pos: &Tensor, tau: f64) -> Result<f64> {
    let tape = Tape::new();
    let a = tape.constant(z.clone())?;
    let b = tape.constant(z_pos.clone())?;
    let loss = infonce(a, b, tau)?.item();
    Ok((z.rows() as f64).ln() - loss)
}

/// Mean `KL(q(z_t|z) ‖ N(0, I))` over rows, the variational upper bound on
/// I(Z; Z_t).
pub fn mi_zzt_estimate(mean: &Tensor, log_var: &Tensor) -> Result<f64> {
    if mean.shape() != log_var.shape() || mean.shape().len() != 2 || mean.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "mi_zzt_estimate",
            lhs: mean.shape().to_vec(),
            rhs: log_var.shape().to_vec(),
        });
    }
    let n = mean.rows();
    let total: f64 = (0..n)
        .map(|i| kl_diag_gaussian_value(mean.row(i), log_var.row(i)))
        .sum();
    Ok(total / n as f64)
}

fn project(x: &Tensor, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    let dir: Vec<f64> = (0..x.cols()).map(|_| rng.sample(StandardNormal)).collect();
    (0..x.rows())
        .map(|i| x.row(i).iter().zip(&dir).map(|(a, b)| a * b).sum())
        .collect()
}

fn bin(values: &[f64], bins: usize) -> Vec<usize> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    values
        .iter()
        .map(|v| {
            if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect()
}

/// Plug-in mutual information (nats) between seeded one-dimensional random
/// projections of `z` and `zt`, each cut into `bins` equal-width bins. Used
/// for deterministic heads, which have no posterior to measure a KL from.
pub fn histogram_mi(z: &Tensor, zt: &Tensor, bins: usize, seed: u64) -> Result<f64> {
    if z.shape().len() != 2 || zt.shape().len() != 2 || z.rows() != zt.rows() || z.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "histogram_mi",
            lhs: z.shape().to_vec(),
            rhs: zt.shape().to_vec(),
        });
    }
    if bins < 2 {
        return Err(Error::InvalidArgument(
            "histogram MI needs at least 2 bins".into(),
        ));
    }
    let a = bin(&project(z, substream(seed, "hist", 0).gen()), bins);
    let b = bin(&project(zt, substream(seed, "hist", 1).gen()), bins);
    let n = a.len() as f64;
    let mut joint = vec![vec![0.0; bins]; bins];
    for (&i, &j) in a.iter().zip(&b) {
        joint[i][j] += 1.0 / n;
    }
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pb: Vec<f64> = (0..bins)
        .map(|j| joint.iter().map(|r| r[j]).sum())
        .collect();
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i][j];
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniformity_closed_forms() {
        let same = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(uniformity(&same).unwrap().abs() < 1e-15);
        let anti = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, -3.0, 0.0, 0.0]).unwrap();
        assert!((uniformity(&anti).unwrap() + 8.0).abs() < 1e-12);
        let zero = Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap();
        assert!(matches!(uniformity(&zero), Err(Error::Domain { .. })));
    }

    #[test]
    fn uniformity_ignores_row_scale() {
        let x = Tensor::matrix(3, 2, vec![1.0, 0.5, -0.2, 1.0, 0.3, -0.9]).unwrap();
        let mut y = x.clone();
        for (i, s) in [2.0, 0.1, 7.0].iter().enumerate() {
            for v in &mut y.data_mut()[i * 2..i * 2 + 2] {
                *v *= s;
            }
        }
        assert!((uniformity(&x).unwrap() - uniformity(&y).unwrap()).abs() < 1e-12);
    }

    /// Brute-force ARI over all pairs as an oracle.
    fn ari_brute(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut only_a, mut only_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                both += f64::from(u8::from(sa && sb));
                only_a += f64::from(u8::from(sa));
                only_b += f64::from(u8::from(sb));
                pairs += 1.0;
            }
        }
        let expected = only_a * only_b / pairs;
        (both - expected) / (0.5 * (only_a + only_b) - expected)
    }

    #[test]
    fn ari_pair_counting() {
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((v + 0.5).abs() < 1e-12);
        assert!((v - ari_brute(&[0, 0, 1, 1], &[0, 1, 0, 1])).abs() < 1e-12);
        let gold = [0, 0, 1, 1, 2, 2, 2];
        let perm = [2, 2, 0, 0, 1, 1, 1];
        assert_eq!(adjusted_rand_index(&gold, &perm).unwrap(), 1.0);
        let other = [1, 0, 1, 1, 2, 0, 2];
        assert!(
            (adjusted_rand_index(&gold, &other).unwrap() - ari_brute(&gold, &other)).abs() < 1e-12
        );
        // One cluster against several classes implies zero.
        assert_eq!(adjusted_rand_index(&gold, &[0; 7]).unwrap(), 0.0);
    }

    #[test]
    fn random_clusterings_average_to_zero() {
        let mut rng = seeded(77);
        let draws = 1000;
        let mut total = 0.0;
        for _ in 0..draws {
            let a: Vec<usize> = (0..60).map(|_| rng.gen_range(0..3)).collect();
            let b: Vec<usize> = (0..60).map(|_| rng.gen_range(0..4)).collect();
            total += adjusted_rand_index(&a, &b).unwrap();
        }
        assert!((total / draws as f64).abs() < 0.02);
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = seeded(3);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut data = Vec::new();
        let mut gold = Vec::new();
        for i in 0..90 {
            let c = i % 3;
            gold.push(c);
            for mean in centers[c] {
                data.push(mean + 0.3 * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let x = Tensor::matrix(90, 2, data).unwrap();
        for exec in [Execution::Sequential, Execution::Parallel] {
            let ari = clustering_ari(&x, &gold, 3, 1, exec).unwrap();
            assert!((ari - 1.0).abs() < 1e-12);
        }
        let a = kmeans(&x, 3, 10, 5, Execution::Sequential).unwrap();
        let b = kmeans(&x, 3, 10, 5, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(kmeans(&x, 1, 10, 5, Execution::Sequential).is_err());
    }

    #[test]
    fn mi_xz_closed_forms() {
        let eq = Tensor::matrix(3, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(mi_xz_estimate(&eq, &eq, 1.0).unwrap().abs() < 1e-12);
        let id = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let expected = 2f64.ln() - (1.0 + (-1f64).exp()).ln();
        assert!((mi_xz_estimate(&id, &id, 1.0).unwrap() - expected).abs() < 1e-12);
        for b in [2usize, 4, 8] {
            let mut d = vec![0.0; b * b];
            for i in 0..b {
                d[i * b + i] = 1.0;
            }
            let z = Tensor::matrix(b, b, d).unwrap();
            for tau in [0.1, 1.0] {
                let v = mi_xz_estimate(&z, &z, tau).unwrap();
                let want = (b as f64).ln() - (1.0 + (b as f64 - 1.0) * (-1.0 / tau).exp()).ln();
                assert!((v - want).abs() < 1e-12);
                assert!(v <= (b as f64).ln());
            }
        }
    }

    #[test]
    fn mi_zzt_closed_forms() {
        let z = Tensor::zeros(&[4, 3]);
        assert_eq!(mi_zzt_estimate(&z, &z).unwrap(), 0.0);
        let m = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let lv = Tensor::zeros(&[1, 3]);
        assert!((mi_zzt_estimate(&m, &lv).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn histogram_mi_sees_dependence() {
        let mut rng = seeded(8);
        let n = 4000;
        let a: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        // One column: the projection is a rescaling, so binning keeps the
        // dependence exact.
        let x = Tensor::matrix(n, 1, a.clone()).unwrap();
        let scaled = Tensor::matrix(n, 1, a.iter().map(|v| 3.0 * v).collect()).unwrap();
        let indep = Tensor::matrix(n, 1, b).unwrap();
        let dep = histogram_mi(&x, &scaled, 16, 1).unwrap();
        let ind = histogram_mi(&x, &indep, 16, 1).unwrap();
        assert!(dep > 1.5, "{dep}");
        assert!(ind < 0.05, "{ind}");
        assert_eq!(histogram_mi(&x, &x, 16, 1).unwrap(), dep);
    }
}
