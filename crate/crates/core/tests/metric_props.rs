use proptest::prelude::*;
use qac_core::metrics::{curvature, wasserstein2};
use qac_core::rng;
use qac_core::samplers::TrajectoryRecord;

fn brute_force(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let n = a.len() / dim;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm over all n! matchings.
    fn cost(a: &[f64], b: &[f64], dim: usize, p: &[usize]) -> f64 {
        p.iter()
            .enumerate()
            .map(|(i, &j)| (0..dim).map(|k| (a[i * dim + k] - b[j * dim + k]).powi(2)).sum::<f64>())
            .sum()
    }
    let mut c = vec![0usize; n];
    best = best.min(cost(a, b, dim, &perm));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(a, b, dim, &perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (best / n as f64).sqrt()
}

fn cloud(seed: u64, n: usize, dim: usize) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    rng::normals(&mut r, n * dim)
}

proptest! {
    #[test]
    fn matches_permutation_enumeration(seed in any::<u64>(), n in 1usize..=7, dim in 1usize..=3) {
        let a = cloud(seed, n, dim);
        let b = cloud(seed ^ 0x9e37, n, dim);
        let w = wasserstein2(&a, &b, dim).unwrap();
        prop_assert!((w - brute_force(&a, &b, dim)).abs() < 1e-9);
    }

    #[test]
    fn metric_axioms(seed in any::<u64>(), n in 1usize..40) {
        let (a, b, c) = (cloud(seed, n, 2), cloud(seed.wrapping_add(1), n, 2), cloud(seed.wrapping_add(2), n, 2));
        let ab = wasserstein2(&a, &b, 2).unwrap();
        prop_assert_eq!(ab, wasserstein2(&b, &a, 2).unwrap());
        prop_assert_eq!(wasserstein2(&a, &a, 2).unwrap(), 0.0);
        prop_assert!(ab > 0.0);
        let ac = wasserstein2(&a, &c, 2).unwrap();
        let bc = wasserstein2(&b, &c, 2).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn curvature_ignores_interior_time_labels(seed in any::<u64>(), n in 3usize..12, shift in -2f64..2.0) {
        let mut r = rng::seeded(seed);
        let times: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / (n - 1) as f64).collect();
        let rec = TrajectoryRecord {
            states: (0..n).map(|_| rng::normals(&mut r, 4)).collect(),
            velocities: (0..n).map(|_| Some(rng::normals(&mut r, 4))).collect(),
            times: times.clone(),
            nfe: 0,
        };
        // Same endpoints' span, shifted and non-uniformly re-gridded inside.
        let mut regrid = rec.clone();
        regrid.times = times
            .iter()
            .enumerate()
            .map(|(i, &t)| if i == 0 || i == n - 1 { t + shift } else { (t * t) + shift })
            .collect();
        let a = curvature(&[rec], 2).unwrap();
        let b = curvature(&[regrid], 2).unwrap();
        prop_assert!(a.mean >= 0.0);
        for (x, y) in a.per_trajectory.iter().zip(&b.per_trajectory) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}
