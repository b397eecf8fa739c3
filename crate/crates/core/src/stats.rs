//! Distances between samples, bootstrap errors and density estimators.

use crate::rng::SeedLineage;
use rand::Rng;
use rand_distr::StandardNormal;

/// `(mean, standard error)`; the error is the ideal-bootstrap one, `sd / √n`.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|v| *v == values[0]) {
        return (values[0], 0.0);
    }
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, (var / n).sqrt())
}

pub fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Empirical quantile of sorted data, linear interpolation.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[n - 1]
    }
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let s = sorted(sample);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = cdf(x);
            (c - i as f64 / n).max((i + 1) as f64 / n - c)
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Wasserstein-1 distance between two 1D samples, `∫|F_a - F_b|`.
pub fn w1_1d(a: &[f64], b: &[f64]) -> f64 {
    w1_sorted(&sorted(a), &sorted(b))
}

pub fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut total = 0.0;
    let mut prev = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => break,
        };
        total += (x - prev) * (i as f64 / na - j as f64 / nb).abs();
        prev = x;
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
    }
    total
}

/// Projection directions for sliced distances: the axes, then seeded random unit vectors.
pub fn slice_directions(d: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let mut e = vec![0.0; d];
            e[k] = 1.0;
            e
        })
        .collect();
    let mut rng = SeedLineage::new(seed).block_rng(7);
    while dirs.len() < count.max(d) {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-8 {
            dirs.push(v.iter().map(|c| c / n).collect());
        }
    }
    dirs
}

fn project(points: &[f64], d: usize, dir: &[f64]) -> Vec<f64> {
    points.chunks_exact(d).map(|p| p.iter().zip(dir).map(|(a, b)| a * b).sum()).collect()
}

/// W1 in d = 1, sliced W1 (average over `slices` directions) otherwise.
pub fn w1(a: &[f64], b: &[f64], d: usize, slices: usize, seed: u64) -> f64 {
    if d == 1 {
        return w1_1d(a, b);
    }
    let dirs = slice_directions(d, slices, seed);
    dirs.iter().map(|u| w1_1d(&project(a, d, u), &project(b, d, u))).sum::<f64>() / dirs.len() as f64
}

fn resample_rows(points: &[f64], d: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&points[i * d..(i + 1) * d]);
    }
    out
}

fn draw_indices<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Bootstrap noise floor for W1 between two independent clouds:
/// `sqrt(mean W1(A, A*)² + mean W1(B, B*)²)` over `reps` resamples.
pub fn w1_bootstrap_floor(a: &[f64], b: &[f64], d: usize, reps: usize, slices: usize, seed: u64) -> f64 {
    let mut rng = SeedLineage::new(seed).block_rng(11);
    let mut floor = |x: &[f64]| {
        let n = x.len() / d;
        (0..reps)
            .map(|_| {
                let idx = draw_indices(&mut rng, n);
                let w = w1(x, &resample_rows(x, d, &idx), d, slices, seed);
                w * w
            })
            .sum::<f64>()
            / reps as f64
    };
    let fa = floor(a);
    let fb = floor(b);
    (fa + fb).sqrt()
}

/// Bootstrap standard deviation of a statistic of resampled row indices.
pub fn bootstrap_se(n: usize, reps: usize, seed: u64, stat: impl Fn(&[usize]) -> f64) -> f64 {
    let mut rng = SeedLineage::new(seed).block_rng(13);
    let vals: Vec<f64> = (0..reps).map(|_| stat(&draw_indices(&mut rng, n))).collect();
    let m = vals.iter().sum::<f64>() / reps as f64;
    (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (reps as f64 - 1.0).max(1.0)).sqrt()
}

/// Silverman's rule of thumb in 1D; per-axis Scott-type rule for `d >= 2`.
pub fn silverman_bandwidth(points: &[f64], d: usize) -> Vec<f64> {
    let n = (points.len() / d) as f64;
    (0..d)
        .map(|k| {
            let col: Vec<f64> = points.chunks_exact(d).map(|p| p[k]).collect();
            let (_, se) = mean_se(&col);
            let sd = se * n.sqrt();
            if d == 1 {
                let s = sorted(&col);
                let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
                let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
                0.9 * spread * n.powf(-0.2)
            } else {
                sd * (4.0 / ((d + 2) as f64 * n)).powf(1.0 / (d as f64 + 4.0))
            }
        })
        .collect()
}

/// Exact Gaussian KDE in 1D at the given points (kernel truncated at 8 bandwidths).
pub fn kde_1d(sample_sorted: &[f64], h: f64, at: &[f64]) -> Vec<f64> {
    let n = sample_sorted.len() as f64;
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    at.iter()
        .map(|&x| {
            let lo = sample_sorted.partition_point(|v| *v < x - 8.0 * h);
            let hi = sample_sorted.partition_point(|v| *v <= x + 8.0 * h);
            sample_sorted[lo..hi]
                .iter()
                .map(|v| {
                    let z = (x - v) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect()
}

/// Linear binning onto a uniform tensor grid (`nodes` per axis from `lo` with step `dx`),
/// then a separable Gaussian convolution. Returns density values at the nodes (first axis
/// fastest). Mass outside the grid is dropped.
pub fn kde_binned(points: &[f64], d: usize, h: &[f64], lo: f64, dx: f64, nodes: usize) -> Vec<f64> {
    let n = (points.len() / d) as f64;
    let total = nodes.pow(d as u32);
    let mut w = vec![0.0; total];
    for p in points.chunks_exact(d) {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut inside = true;
        for k in 0..d {
            let s = (p[k] - lo) / dx;
            if !(s >= 0.0 && s <= (nodes - 1) as f64) {
                inside = false;
                break;
            }
            let i = (s.floor() as usize).min(nodes - 2);
            base[k] = i;
            frac[k] = s - i as f64;
        }
        if !inside {
            continue;
        }
        for corner in 0..(1usize << d) {
            let mut idx = 0;
            let mut stride = 1;
            let mut weight = 1.0;
            for k in 0..d {
                let up = (corner >> k) & 1;
                idx += (base[k] + up) * stride;
                stride *= nodes;
                weight *= if up == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            w[idx] += weight;
        }
    }
    // separable convolution, one axis at a time
    let mut stride = 1;
    for k in 0..d {
        let radius = ((8.0 * h[k]) / dx).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|m| {
                let z = m as f64 * dx / h[k];
                (-0.5 * z * z).exp() / (h[k] * (2.0 * std::f64::consts::PI).sqrt())
            })
            .collect();
        let mut out = vec![0.0; total];
        for (idx, o) in out.iter_mut().enumerate() {
            let i = ((idx / stride) % nodes) as isize;
            let mut acc = 0.0;
            for (m, kv) in kernel.iter().enumerate() {
                let j = i + m as isize - radius;
                if j < 0 || j >= nodes as isize {
                    continue;
                }
                acc += kv * w[(idx as isize + (j - i) * stride as isize) as usize];
            }
            *o = acc;
        }
        w = out;
        stride *= nodes;
    }
    w.iter().map(|v| v / n).collect()
}

/// Histogram density with cells centred on the nodes of a uniform grid.
pub fn histogram(points: &[f64], d: usize, lo: f64, dx: f64, nodes: usize) -> Vec<f64> {
    let n = (points.len() / d) as f64;
    let mut c = vec![0.0; nodes.pow(d as u32)];
    'p: for p in points.chunks_exact(d) {
        let mut idx = 0;
        let mut stride = 1;
        for &x in p.iter().take(d) {
            let i = ((x - lo) / dx).round();
            if i < 0.0 || i > (nodes - 1) as f64 {
                continue 'p;
            }
            idx += i as usize * stride;
            stride *= nodes;
        }
        c[idx] += 1.0;
    }
    let vol = dx.powi(d as i32);
    c.iter().map(|v| v / (n * vol)).collect()
}

/// Ordinary least-squares slope and intercept.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_functions::{normal_cdf, normal_pdf};
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = SeedLineage::new(seed).block_rng(0);
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn w1_of_shift_is_shift() {
        let a = normals(1000, 1);
        let b: Vec<f64> = a.iter().map(|x| x + 0.3).collect();
        assert!((w1_1d(&a, &b) - 0.3).abs() < 1e-12);
        // unequal sizes through the CDF formula: {0,1} vs {0,0,1,1} coincide
        assert!(w1_1d(&[0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]).abs() < 1e-15);
        assert!((w1_1d(&[0.0], &[1.0, 3.0]) - 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn w1_is_a_metric(a in proptest::collection::vec(-5.0..5.0f64, 1..30),
                          b in proptest::collection::vec(-5.0..5.0f64, 1..30),
                          c in proptest::collection::vec(-5.0..5.0f64, 1..30)) {
            let ab = w1_1d(&a, &b);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - w1_1d(&b, &a)).abs() < 1e-9);
            prop_assert!(ab <= w1_1d(&a, &c) + w1_1d(&c, &b) + 1e-9);
            prop_assert_eq!(w1_1d(&a, &a), 0.0);
        }

        #[test]
        fn unequal_size_formula_matches_equal_size_one(a in proptest::collection::vec(-5.0..5.0f64, 1..20),
                                                       b in proptest::collection::vec(-5.0..5.0f64, 1..20)) {
            // duplicating every point leaves the empirical law unchanged
            let a2: Vec<f64> = a.iter().flat_map(|x| [*x, *x]).collect();
            let direct = if a.len() == b.len() { w1_1d(&a, &b) } else { w1_1d(&a2, &b) };
            prop_assert!((direct - w1_1d(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn ks_of_normal_sample_is_small() {
        let a = normals(100_000, 2);
        assert!(ks_statistic(&a, normal_cdf) < 0.01);
        let b = normals(100_000, 3);
        assert!(ks_two_sample(&a, &b) < 0.01);
        let shifted: Vec<f64> = b.iter().map(|x| x + 0.5).collect();
        assert!(ks_two_sample(&a, &shifted) > 0.15);
    }

    #[test]
    fn kde_recovers_normal_density() {
        let a = sorted(&normals(100_000, 4));
        let h = silverman_bandwidth(&a, 1)[0];
        assert!((h - 0.9 * 100_000f64.powf(-0.2)).abs() < 0.01);
        let xs: Vec<f64> = (0..=80).map(|i| -2.0 + 0.05 * i as f64).collect();
        let f = kde_1d(&a, h, &xs);
        let err = xs.iter().zip(&f).map(|(x, v)| (v - normal_pdf(*x)).abs()).fold(0.0, f64::max);
        assert!(err < 0.02, "{err}");
        // binned estimate agrees with the exact one
        let nodes = 161;
        let binned = kde_binned(&a, 1, &[h], -4.0, 0.05, nodes);
        for (i, x) in xs.iter().enumerate() {
            let k = ((x + 4.0) / 0.05).round() as usize;
            assert!((binned[k] - f[i]).abs() < 2e-3, "{x}");
        }
    }

    #[test]
    fn histogram_normalizes() {
        let a = normals(50_000, 5);
        let hst = histogram(&a, 1, -6.0, 0.1, 121);
        let mass: f64 = hst.iter().sum::<f64>() * 0.1;
        assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sliced_w1_reduces_to_axes_in_product_shift() {
        let mut a = normals(4000, 6);
        a.truncate(4000);
        let b: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        // every projection of a (1,1) shift moves by u1+u2; on the axes by exactly 1
        let w = w1(&a, &b, 2, 2, 1);
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_floor_shrinks_with_n() {
        let f1 = w1_bootstrap_floor(&normals(1000, 7), &normals(1000, 8), 1, 50, 1, 9);
        let f2 = w1_bootstrap_floor(&normals(16000, 7), &normals(16000, 8), 1, 50, 1, 9);
        assert!(f1 / f2 > 2.5 && f1 / f2 < 6.0, "{f1} {f2}");
    }

    #[test]
    fn bootstrap_se_of_mean_matches_closed_form() {
        let a = normals(2000, 10);
        let se = bootstrap_se(a.len(), 400, 1, |idx| idx.iter().map(|&i| a[i]).sum::<f64>() / idx.len() as f64);
        let (_, closed) = mean_se(&a);
        assert!((se / closed - 1.0).abs() < 0.15, "{se} {closed}");
    }

    #[test]
    fn least_squares_slope() {
        let x = [1.0, 2.0, 3.0];
        let (s, c) = linear_fit(&x, &[3.0, 5.0, 7.0]);
        assert!((s - 2.0).abs() < 1e-14 && (c - 1.0).abs() < 1e-14);
    }
}
