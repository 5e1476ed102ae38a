use freebrw_core::group::{ConePolicy, FreeProduct};
use freebrw_core::walk::{self, StepLaw};
use proptest::prelude::*;

const CAP: usize = 1 << 22;

fn tree() -> (FreeProduct, StepLaw) {
    let g = FreeProduct::cyclic(&[2, 2, 2]).unwrap();
    let law = StepLaw::simple(&g).unwrap();
    (g, law)
}

fn normalize(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    let mut v: Vec<f64> = w.iter().map(|x| x / s).collect();
    // put the rounding residue on the largest entry so the sum is 1 to within an ulp
    let (imax, _) = v.iter().enumerate().fold((0, 0.0), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
    let rest: f64 = v.iter().enumerate().filter(|(i, _)| *i != imax).map(|(_, x)| x).sum();
    v[imax] = 1.0 - rest;
    v
}

/// A product of 2 or 3 small cyclic groups with a random step law.
fn random_walk() -> impl Strategy<Value = (FreeProduct, StepLaw)> {
    prop::collection::vec(2usize..=4, 2..=3).prop_flat_map(|orders| {
        let r = orders.len();
        let laws: Vec<_> = orders
            .iter()
            .map(|&m| prop::collection::vec(0.05f64..1.0, m))
            .collect();
        (Just(orders), prop::collection::vec(0.1f64..1.0, r), laws)
    })
    .prop_map(|(orders, alphas, laws)| {
        let g = FreeProduct::cyclic(&orders).unwrap();
        let laws = laws.iter().map(|l| normalize(l)).collect();
        let law = StepLaw::new(&g, normalize(&alphas), laws).unwrap();
        (g, law)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn convolution_composes((g, law) in random_walk(), a in 1usize..4, b in 1usize..4) {
        let da = walk::exact_distribution(&g, &law, a, CAP).unwrap();
        let db = walk::exact_distribution(&g, &law, b, CAP).unwrap();
        let dab = walk::exact_distribution(&g, &law, a + b, CAP).unwrap();
        let conv = walk::convolve(&g, &da, &db, CAP).unwrap();
        prop_assert!((dab.total_mass() - 1.0).abs() < 1e-12);
        prop_assert_eq!(conv.support.len(), dab.support.len());
        for (w, &p) in &dab.support {
            prop_assert!((conv.prob(w) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_support_lies_in_ball((g, law) in random_walk(), n in 0usize..5) {
        let d = walk::exact_distribution(&g, &law, n, CAP).unwrap();
        let reach = n as u32 * law.k();
        prop_assert!(d.support.keys().all(|w| g.word_length(w) <= reach));
        prop_assert!(d.support.values().all(|&p| p > 0.0));
    }
}

/// Length of the simple walk on the 3-regular tree as a birth-death chain.
fn lumped_length_law(n: usize) -> Vec<f64> {
    let mut p = vec![1.0];
    for _ in 0..n {
        let mut q = vec![0.0; p.len() + 1];
        for (k, &m) in p.iter().enumerate() {
            if k == 0 {
                q[1] += m;
            } else {
                q[k + 1] += m * 2.0 / 3.0;
                q[k - 1] += m / 3.0;
            }
        }
        p = q;
    }
    p
}

#[test]
fn tree_length_law_matches_lumped_chain() {
    let (g, law) = tree();
    for n in [1, 4, 9, 12] {
        let d = walk::exact_distribution(&g, &law, n, CAP).unwrap();
        let lengths = d.length_distribution(&g);
        let oracle = lumped_length_law(n);
        for (k, &p) in oracle.iter().enumerate() {
            let got = lengths.get(k).copied().unwrap_or(0.0);
            assert!((got - p).abs() < 1e-13, "n = {n}, |x| = {k}: {got} vs {p}");
        }
    }
}

#[test]
fn exit_probability_matches_lumped_chain() {
    let (g, law) = tree();
    // P(T_n <= m) for the birth-death chain absorbed at n
    let n = 5u32;
    let m = 14u64;
    let mut p = vec![0.0; n as usize];
    p[0] = 1.0;
    let mut absorbed = 0.0;
    for _ in 0..m {
        let mut q = vec![0.0; n as usize];
        for (k, &w) in p.iter().enumerate() {
            let (up, down) = if k == 0 { (1.0, 0.0) } else { (2.0 / 3.0, 1.0 / 3.0) };
            if k + 1 == n as usize {
                absorbed += w * up;
            } else {
                q[k + 1] += w * up;
            }
            if k > 0 {
                q[k - 1] += w * down;
            }
        }
        p = q;
    }
    let exact = walk::exact_exit_probability(&g, &law, n, m, None, CAP).unwrap();
    assert!((exact - absorbed).abs() < 1e-13, "{exact} vs {absorbed}");

    let in_cone = walk::exact_exit_probability(&g, &law, n, m, Some((0, ConePolicy::IdentityAdmitted)), CAP).unwrap();
    assert!(in_cone < exact && in_cone > 0.0);
}

#[test]
fn exact_drift_sequence_matches_lumped_chain() {
    let (g, law) = tree();
    let est = walk::estimate_drift(&g, &law, 200, 200, 10, CAP, 1, Some(1)).unwrap();
    for &(m, v) in &est.exact {
        let oracle: f64 = lumped_length_law(m).iter().enumerate().map(|(k, p)| k as f64 * p).sum::<f64>() / m as f64;
        assert!((v - oracle).abs() < 1e-13);
    }
    assert_eq!(est.burn_in, 20);
}

#[test]
fn return_probabilities_on_tree() {
    let (g, law) = tree();
    let p = walk::return_probabilities(&g, &law, 16, CAP).unwrap();
    let oracle: Vec<f64> = (0..=16).map(|n| lumped_length_law(n)[0]).collect();
    for (a, b) in p.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-14);
    }
    assert!(p.iter().skip(1).step_by(2).all(|&x| x == 0.0));
}

#[test]
fn monte_carlo_is_thread_independent() {
    let (g, law) = tree();
    let one = walk::compare_exact_mc(&g, &law, 6, 3000, CAP, 9, "t", Some(1)).unwrap();
    let many = walk::compare_exact_mc(&g, &law, 6, 3000, CAP, 9, "t", Some(4)).unwrap();
    assert_eq!(one, many);
    assert_eq!(one.off_support, 0);
}

#[test]
fn exit_probability_is_nondecreasing_in_the_deadline() {
    let g = FreeProduct::cyclic(&[2, 3, 4]).unwrap();
    let law = StepLaw::new(&g, vec![0.2, 0.3, 0.5], StepLaw::uniform_generator_laws(&g, 0.25)).unwrap();
    for n in [1u32, 3, 5] {
        let mut prev = 0.0;
        for m in 0..12u64 {
            let p = walk::exact_exit_probability(&g, &law, n, m, None, CAP).unwrap();
            assert!(p >= prev - 1e-15, "n = {n}, m = {m}");
            prev = p;
        }
        assert!(prev > 0.0);
    }
}
