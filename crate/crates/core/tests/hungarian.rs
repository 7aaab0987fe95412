//! Assignment optimality against exhaustive search.

mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use taxovis::matching::hungarian_match;
use taxovis::tensor::Mat;

/// Every injection of `g` tracks into `n` queries, in lexicographic order of
/// the query sequence; returns the first one of minimum cost.
fn exhaustive(cost: &Mat) -> (f64, Vec<usize>) {
    fn rec(cost: &Mat, t: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, acc: f64, best: &mut Option<(f64, Vec<usize>)>) {
        if t == cost.cols() {
            if best.as_ref().is_none_or(|(b, _)| acc < *b) {
                *best = Some((acc, cur.clone()));
            }
            return;
        }
        for q in 0..cost.rows() {
            if !used[q] {
                used[q] = true;
                cur.push(q);
                rec(cost, t + 1, used, cur, acc + cost.get(q, t), best);
                cur.pop();
                used[q] = false;
            }
        }
    }
    let mut best = None;
    rec(cost, 0, &mut vec![false; cost.rows()], &mut Vec::new(), 0.0, &mut best);
    best.unwrap()
}

fn total(cost: &Mat, q_of_t: &[usize]) -> f64 {
    q_of_t.iter().enumerate().map(|(t, &q)| cost.get(q, t)).sum()
}

fn random_real_costs_match_exhaustive_search() {
    let mut r = rng(2024);
    for case in 0..200 {
        let n = r.gen_range(1..=7);
        let g = r.gen_range(0..=n);
        let cost = Mat::from_fn(n, g, |_, _| r.gen_range(-5.0..5.0));
        let a = hungarian_match(&cost).unwrap();
        a.validate(n, g).unwrap();
        let (best, seq) = exhaustive(&cost);
        assert_eq!(a.query_of_track(), seq, "case {case}");
        assert!((total(&cost, &a.query_of_track()) - best).abs() <= 1e-12 * (1.0 + best.abs()));
        let shifted = cost.map(|v| v + 3.25);
        assert_eq!(hungarian_match(&shifted).unwrap().query_of_track(), seq, "shift, case {case}");
    }
}

fn integer_costs_with_ties_pick_the_lexicographic_optimum() {
    let mut r = rng(7);
    for case in 0..200 {
        let n = r.gen_range(1..=7);
        let g = r.gen_range(0..=n);
        let cost = Mat::from_fn(n, g, |_, _| r.gen_range(0..4) as f64);
        let (best, seq) = exhaustive(&cost);
        let a = hungarian_match(&cost).unwrap().query_of_track();
        assert_eq!(total(&cost, &a), best, "case {case}");
        assert_eq!(a, seq, "case {case}");
        for shift in [-2.0, 1.0, 17.0] {
            let s = cost.map(|v| v + shift);
            assert_eq!(hungarian_match(&s).unwrap().query_of_track(), seq, "case {case} shift {shift}");
        }
    }
}

proptest! {
    fn optimal_cost_equals_exhaustive(n in 1usize..=6, extra in 0usize..=3, seed in any::<u64>()) {
        let g = n.min(extra + 1);
        let mut r = rng(seed);
        let cost = Mat::from_fn(n, g, |_, _| r.gen_range(-1.0..1.0));
        let a = hungarian_match(&cost).unwrap();
        let (best, _) = exhaustive(&cost);
        prop_assert!((total(&cost, &a.query_of_track()) - best).abs() < 1e-9);
        prop_assert_eq!(a.pairs.len(), g);
        prop_assert_eq!(a.unmatched.len(), n - g);
    }
}

/// Every check above, callable outside the test harness.
#[allow(dead_code)]
pub fn checks() -> Vec<(&'static str, fn())> {
    vec![
        ("random_real_costs_match_exhaustive_search", random_real_costs_match_exhaustive_search),
        ("integer_costs_with_ties_pick_the_lexicographic_optimum", integer_costs_with_ties_pick_the_lexicographic_optimum),
        ("optimal_cost_equals_exhaustive", optimal_cost_equals_exhaustive),
    ]
}

#[cfg(test)]
mod harness {
    #[test]
    fn random_real_costs_match_exhaustive_search() {
        super::random_real_costs_match_exhaustive_search()
    }
    #[test]
    fn integer_costs_with_ties_pick_the_lexicographic_optimum() {
        super::integer_costs_with_ties_pick_the_lexicographic_optimum()
    }
    #[test]
    fn optimal_cost_equals_exhaustive() {
        super::optimal_cost_equals_exhaustive()
    }
}
