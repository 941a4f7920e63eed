use iflow::flow::{ArchConfig, FlowModel, InverseOptions, LayerTemplate};
use iflow::graph::GraphSpec;
use iflow::linalg::{eig_sym, logabsdet, solve};
use iflow::metrics::{energy_distance, mmd, quantile};
use iflow::ou::sigma_t;
use iflow::DenseMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |d| DenseMatrix::new(rows, cols, d).unwrap())
}

fn sample_pair() -> impl Strategy<Value = (DenseMatrix, DenseMatrix)> {
    (3usize..12, 3usize..12, 1usize..4).prop_flat_map(|(n, m, d)| (matrix(n, d), matrix(m, d)))
}

/// `B Bᵀ + εI` is symmetric positive definite.
fn spd(n: usize) -> impl Strategy<Value = DenseMatrix> {
    matrix(n, n).prop_map(move |b| {
        b.matmul_t(&b)
            .unwrap()
            .add(&DenseMatrix::identity(n).scale(0.1))
            .unwrap()
    })
}

fn reversed(x: &DenseMatrix) -> DenseMatrix {
    let idx: Vec<usize> = (0..x.rows()).rev().collect();
    x.select_rows(&idx)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn statistics_are_symmetric((p, q) in sample_pair(), alpha in 0.1f64..10.0) {
        prop_assert!(close(mmd(&p, &q, alpha).unwrap(), mmd(&q, &p, alpha).unwrap(), 1e-12));
        prop_assert!(close(energy_distance(&p, &q).unwrap(), energy_distance(&q, &p).unwrap(), 1e-12));
    }

    #[test]
    fn statistics_ignore_row_order((p, q) in sample_pair(), alpha in 0.1f64..10.0) {
        // With equal sizes the MMD cross term pairs row i of each sample, so
        // only a joint reordering leaves it unchanged.
        let joint = if p.rows() == q.rows() { reversed(&q) } else { q.clone() };
        prop_assert!(close(mmd(&p, &q, alpha).unwrap(), mmd(&reversed(&p), &joint, alpha).unwrap(), 1e-12));
        prop_assert!(close(energy_distance(&p, &q).unwrap(), energy_distance(&p, &reversed(&q)).unwrap(), 1e-12));
    }

    #[test]
    fn identical_samples_have_zero_statistics(p in (3usize..12, 1usize..4).prop_flat_map(|(n, d)| matrix(n, d))) {
        prop_assert!(mmd(&p, &p, 1.0).unwrap().abs() < 1e-12);
        prop_assert!(energy_distance(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn energy_is_nonnegative((p, q) in sample_pair()) {
        prop_assert!(energy_distance(&p, &q).unwrap() >= -1e-12);
    }

    #[test]
    fn quantile_is_monotone(v in prop::collection::vec(-100.0f64..100.0, 1..50), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantile(&v, lo) <= quantile(&v, hi));
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(quantile(&v, hi) <= max);
    }

    #[test]
    fn sigma_t_stays_positive_definite(s in (2usize..6).prop_flat_map(spd), t in 0.0f64..6.0) {
        let st = sigma_t(&s, t).unwrap();
        prop_assert!(st.is_symmetric(1e-12));
        let (eigs, _) = eig_sym(&st).unwrap();
        prop_assert!(eigs[0] > 0.0);
        prop_assert!(sigma_t(&s, 0.0).unwrap().max_abs_diff(&s).unwrap() < 1e-14);
    }

    #[test]
    fn sigma_t_eigenvalues_move_toward_one(s in (2usize..6).prop_flat_map(spd), t in 0.0f64..6.0, dt in 0.0f64..2.0) {
        let gap = |m: &DenseMatrix| {
            let (e, _) = eig_sym(m).unwrap();
            e.iter().fold(0.0f64, |a, x| a.max((x - 1.0).abs()))
        };
        let now = gap(&sigma_t(&s, t).unwrap());
        let later = gap(&sigma_t(&s, t + dt).unwrap());
        prop_assert!(later <= now + 1e-12);
    }

    #[test]
    fn kron_mixed_product(a in matrix(2, 3), b in matrix(2, 2), c in matrix(3, 2), d in matrix(2, 3)) {
        let lhs = a.kron(&b).matmul(&c.kron(&d)).unwrap();
        let rhs = a.matmul(&c).unwrap().kron(&b.matmul(&d).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn lu_solve_residual_is_small(a in (1usize..7).prop_flat_map(|n| (spd(n), matrix(n, 2)))) {
        let (m, b) = a;
        let x = solve(&m, &b).unwrap();
        let r = m.matmul(&x).unwrap().sub(&b).unwrap();
        prop_assert!(r.max_abs() < 1e-8 * (1.0 + b.max_abs()) * (1.0 + m.max_abs()));
    }

    #[test]
    fn logabsdet_of_product_adds(n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || DenseMatrix::from_fn(n, n, |i, j| {
            use rand::Rng;
            rng.random_range(-1.0..1.0) + if i == j { 3.0 } else { 0.0 }
        });
        let (a, b) = (m(), m());
        let (la, sa) = logabsdet(&a).unwrap();
        let (lb, sb) = logabsdet(&b).unwrap();
        let (lab, sab) = logabsdet(&a.matmul(&b).unwrap()).unwrap();
        prop_assert!(close(la + lb, lab, 1e-10));
        prop_assert_eq!(sa * sb, sab);
    }
}

fn small_model(seed: u64, scale: f64) -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchConfig {
        blocks: 3,
        hidden: 4,
        layers: vec![
            LayerTemplate::node_fc(),
            LayerTemplate::cheb(2),
            LayerTemplate::l3(&[0, 1]),
        ],
    };
    let mut m = FlowModel::new(GraphSpec::path(3).unwrap(), 2, 2, &arch, 0.5, &mut rng).unwrap();
    // Shrinking every layer keeps each residual map a contraction.
    for p in m.params_mut() {
        *p = p.scale(scale);
    }
    m.apply_masks();
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn contractive_models_round_trip(seed in any::<u64>(), x in matrix(5, 6)) {
        let m = small_model(seed, 0.5);
        let z = m.transform(&x).unwrap();
        let back = m.inverse(&z, InverseOptions::default()).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-8);
    }

    #[test]
    fn saved_models_transform_identically(seed in any::<u64>(), x in matrix(4, 6)) {
        let m = small_model(seed, 1.0);
        let copy = FlowModel::from_json(&m.to_json().unwrap()).unwrap();
        prop_assert_eq!(m.transform(&x).unwrap(), copy.transform(&x).unwrap());
    }
}
