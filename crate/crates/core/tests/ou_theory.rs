use iflow::datasets::{gp_local_covariance, gp_spectral_covariance};
use iflow::graph::{build_graph, GraphSpec};
use iflow::linalg::{eig_sym, inverse, DenseMatrix};
use iflow::metrics::sample_covariance;
use iflow::ou::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn entrywise_rel_close(a: &DenseMatrix, b: &DenseMatrix, rel: f64, abs: f64) -> bool {
    a.data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| (x - y).abs() <= rel * y.abs() + abs)
}

#[test]
fn sigma_t_matches_exact_transition_monte_carlo() {
    let (_, s) = gp_local_covariance();
    let spec = OuSpec::new(s.clone()).unwrap();
    let n = 200_000;
    let t = 0.5f64;
    let x0 = initial_particles(&spec, n, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = (-t).exp();
    let b = (1.0 - (-2.0 * t).exp()).sqrt();
    let xt = DenseMatrix::from_fn(n, 3, |i, j| {
        let e: f64 = StandardNormal.sample(&mut rng);
        a * x0.get(i, j) + b * e
    });
    let mc = sample_covariance(&xt);
    let exact = sigma_t(&s, t).unwrap();
    // 5% relative, with a small absolute floor for the zero corner entry.
    assert!(
        entrywise_rel_close(&mc, &exact, 0.05, 0.01),
        "{mc:?} vs {exact:?}"
    );
}

#[test]
fn ode_transport_follows_closed_form() {
    let (_, s) = gp_spectral_covariance();
    let spec = OuSpec::new(s.clone()).unwrap();
    let mut opts = SimOptions::ode(5.0);
    opts.record_every = 50;
    let tr = ode_transport(&spec, 20_000, opts).unwrap();
    assert!(
        tr.final_covariance()
            .max_abs_diff(&DenseMatrix::identity(7))
            .unwrap()
            <= 0.05
    );
    for (&t, c) in tr.times.iter().zip(&tr.covariances) {
        let d = c.max_abs_diff(&sigma_t(&s, t).unwrap()).unwrap();
        assert!(d <= 0.05, "t={t}: {d}");
    }
    let i = tr.nearest(1.0);
    assert!((tr.times[i] - 1.0).abs() < 1e-9);
}

#[test]
fn sde_covariance_and_self_convergence() {
    let spec = OuSpec::new(DenseMatrix::identity(3)).unwrap();
    let tr = sde_simulate(&spec, 50_000, SimOptions::sde(1.0), 1).unwrap();
    for c in &tr.covariances {
        assert!(c.max_abs_diff(&DenseMatrix::identity(3)).unwrap() <= 0.05);
    }

    let (_, s) = gp_local_covariance();
    let spec = OuSpec::new(s.clone()).unwrap();
    let coarse = sde_simulate(&spec, 50_000, SimOptions::sde(1.0), 2).unwrap();
    for (&t, c) in coarse.times.iter().zip(&coarse.covariances) {
        assert!(
            c.max_abs_diff(&sigma_t(&s, t).unwrap()).unwrap() <= 0.05,
            "t={t}"
        );
    }
    let mut fine_opts = SimOptions::sde(1.0);
    fine_opts.dt /= 2.0;
    fine_opts.record_every *= 2;
    let fine = sde_simulate(&spec, 50_000, fine_opts, 1).unwrap();
    let d = fine
        .final_covariance()
        .max_abs_diff(coarse.final_covariance())
        .unwrap();
    assert!(d < 0.01, "{d}");
}

#[test]
fn trace_exports() {
    let (_, s) = gp_local_covariance();
    let spec = OuSpec::new(s).unwrap();
    let tr = ode_transport(&spec, 5, SimOptions::ode(0.1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    tr.write_csv(&dir.path().join("trace.csv")).unwrap();
    tr.write_covariance_json(&dir.path().join("cov.json"))
        .unwrap();
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,particle_id,x0,x1,x2");
    assert_eq!(csv.lines().count(), 1 + 5 * tr.times.len());
    let snaps: Vec<CovarianceSnapshot> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cov.json")).unwrap())
            .unwrap();
    assert_eq!(snaps.len(), tr.times.len());
}

fn random_connected_graph(rng: &mut ChaCha8Rng, n: usize) -> GraphSpec {
    let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    for _ in 0..n {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            edges.push((a, b));
        }
    }
    build_graph(n, &edges).unwrap()
}

/// Monomial coefficients whose polynomial is positive on `[0, λ_max]`.
fn random_positive_poly(rng: &mut ChaCha8Rng, lmax: f64) -> Vec<f64> {
    let a1 = rng.random_range(-0.5..0.5) / lmax;
    let a2 = rng.random_range(0.0..0.3) / (lmax * lmax);
    let a0 = 0.2 + a1.abs() * lmax + rng.random_range(0.0..1.0);
    vec![a0, a1, a2]
}

#[test]
fn spectral_and_corollary_checks_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..20 {
        let n = rng.random_range(3..9);
        let g = random_connected_graph(&mut rng, n);
        let l = g.laplacian();
        let (lam, _) = eig_sym(l).unwrap();
        let p = random_positive_poly(&mut rng, lam[n - 1]);
        let s = matrix_polynomial(l, &p).unwrap();
        let t = rng.random_range(0.0..3.0);
        let a = spectral_sigma_t_inv(&g, &p, t).unwrap();
        let b = inverse(&sigma_t(&s, t).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-9);

        let mut pt = p.clone();
        pt[0] += rng.random_range(-0.1..0.1);
        let gap = corollary_gap(&s, &pt, l, t).unwrap();
        assert!(gap.holds(), "{gap:?}");
    }
}

#[test]
fn series_checks_on_random_local_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..20 {
        let n = rng.random_range(3..8);
        let g = GraphSpec::path(n).unwrap();
        // Diagonally dominant tridiagonal, hence SPD and 1-local.
        let mut s = DenseMatrix::identity(n);
        for i in 0..n - 1 {
            let r = rng.random_range(-0.45..0.45);
            s.set(i, i + 1, r);
            s.set(i + 1, i, r);
        }
        let t = rng.random_range(0.8..2.0);
        let mut last = f64::INFINITY;
        for k in [1, 2, 4, 8] {
            let r = local_series_inverse(&g, &s, t, k).unwrap();
            assert_eq!(r.branch, SeriesBranch::LongTime);
            assert!(r.error < last);
            assert!(r.locality.unwrap() <= k);
            last = r.error;
        }
    }
}
