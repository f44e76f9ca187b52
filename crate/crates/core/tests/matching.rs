use proptest::prelude::*;
use proto_align::matching::{brute_force_assignment, hungarian, CostMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter()
        .all(|&j| j < p.len() && !std::mem::replace(&mut seen[j], true))
}

fn matrix(n: usize, entries: &[f64]) -> CostMatrix {
    CostMatrix::new(entries.chunks(n).map(|r| r.to_vec()).collect()).unwrap()
}

#[test]
fn random_float_matrices_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 2..=6 {
        for _ in 0..200 {
            let e: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect();
            let c = matrix(n, &e);
            let h = hungarian(&c);
            let b = brute_force_assignment(&c).unwrap();
            assert!(is_permutation(&h.perm));
            assert_eq!(h, b);
        }
    }
}

#[test]
fn known_three_by_three() {
    let c = CostMatrix::new(vec![
        vec![4.0, 1.0, 3.0],
        vec![2.0, 0.0, 5.0],
        vec![3.0, 2.0, 2.0],
    ])
    .unwrap();
    let m = hungarian(&c);
    assert_eq!(m.perm, vec![1, 0, 2]);
    assert_eq!(m.total_cost, 5.0);
}

#[test]
fn single_entry() {
    let c = CostMatrix::new(vec![vec![-2.5]]).unwrap();
    let m = hungarian(&c);
    assert_eq!(m.perm, vec![0]);
    assert_eq!(m.total_cost, -2.5);
}

proptest! {
    #[test]
    fn integer_costs_agree_exactly(n in 1usize..=6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0..20) as f64).collect();
        let c = matrix(n, &e);
        let h = hungarian(&c);
        let b = brute_force_assignment(&c).unwrap();
        prop_assert!(is_permutation(&h.perm));
        prop_assert_eq!(h.total_cost, b.total_cost);
        prop_assert_eq!(h.perm, b.perm);
    }

    #[test]
    fn adding_a_row_constant_keeps_the_assignment(n in 2usize..=6, seed in any::<u64>(), shift in 0u32..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0..30) as f64).collect();
        let mut shifted = e.clone();
        shifted[..n].iter_mut().for_each(|v| *v += shift as f64);
        let a = hungarian(&matrix(n, &e));
        let b = hungarian(&matrix(n, &shifted));
        prop_assert_eq!(a.perm, b.perm);
        prop_assert_eq!(b.total_cost, a.total_cost + shift as f64);
    }
}
