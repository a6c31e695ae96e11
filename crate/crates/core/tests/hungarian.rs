use proptest::prelude::*;
use querymix::matching::hungarian;
use querymix::tensor::Tensor;

/// Every injection of the columns into rows, as `(pred, gt)` pairs sorted by
/// pred, with its cost summed over columns in order.
fn all_assignments(cost: &Tensor) -> Vec<(f64, Vec<(usize, usize)>)> {
    fn go(cost: &Tensor, j: usize, rows: &mut Vec<usize>, out: &mut Vec<(f64, Vec<(usize, usize)>)>) {
        if j == cost.cols() {
            let mut total = 0.0;
            for (c, r) in rows.iter().enumerate() {
                total += cost.get2(*r, c);
            }
            let mut pairs: Vec<(usize, usize)> = rows.iter().enumerate().map(|(c, r)| (*r, c)).collect();
            pairs.sort();
            out.push((total, pairs));
            return;
        }
        for i in 0..cost.rows() {
            if !rows.contains(&i) {
                rows.push(i);
                go(cost, j + 1, rows, out);
                rows.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(cost, 0, &mut Vec::new(), &mut out);
    out
}

fn brute_force(cost: &Tensor) -> (f64, Vec<(usize, usize)>) {
    all_assignments(cost)
        .into_iter()
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)))
        .unwrap()
}

fn matrix(n: usize, m: usize, vals: &[f64]) -> Tensor {
    Tensor::new(vec![n, m], vals[..n * m].to_vec()).unwrap()
}

#[test]
fn hand_worked_three_by_three() {
    let c = Tensor::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]]).unwrap();
    let m = hungarian(&c).unwrap();
    assert_eq!(m.pairs, vec![(0, 1), (1, 0), (2, 2)]);
    assert_eq!(m.cost, 5.0);
    assert!(m.unmatched.is_empty());
}

#[test]
fn all_equal_costs_pick_identity_prefix() {
    let c = Tensor::new(vec![4, 2], vec![1.0; 8]).unwrap();
    let m = hungarian(&c).unwrap();
    assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
    assert_eq!(m.unmatched, vec![2, 3]);
}

#[test]
fn empty_ground_truth() {
    let c = Tensor::new(vec![3, 0], vec![]).unwrap();
    let m = hungarian(&c).unwrap();
    assert!(m.pairs.is_empty());
    assert_eq!(m.unmatched, vec![0, 1, 2]);
    assert_eq!(m.cost, 0.0);
}

#[test]
fn rejects_more_targets_than_predictions_and_non_finite() {
    assert!(hungarian(&Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap()).is_err());
    assert!(hungarian(&Tensor::new(vec![2, 1], vec![f64::NAN, 1.0]).unwrap()).is_err());
    assert!(hungarian(&Tensor::new(vec![2, 1], vec![f64::INFINITY, 1.0]).unwrap()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn integer_costs_match_lexicographic_brute_force(
        n in 1usize..=6,
        m_frac in 0.0f64..=1.0,
        vals in proptest::collection::vec(0u8..4, 36),
    ) {
        let m = ((n as f64) * m_frac).round() as usize;
        let vals: Vec<f64> = vals.iter().map(|v| *v as f64).collect();
        let c = matrix(n, m, &vals);
        let got = hungarian(&c).unwrap();
        let (cost, pairs) = brute_force(&c);
        prop_assert_eq!(got.cost, cost);
        prop_assert_eq!(&got.pairs, &pairs);
        let matched: Vec<usize> = got.pairs.iter().map(|p| p.0).collect();
        prop_assert!(got.unmatched.iter().all(|u| !matched.contains(u)));
        prop_assert_eq!(got.unmatched.len() + got.pairs.len(), n);
    }

    #[test]
    fn real_costs_match_brute_force(
        n in 1usize..=7,
        m_frac in 0.0f64..=1.0,
        vals in proptest::collection::vec(-10.0f64..10.0, 49),
    ) {
        let m = ((n as f64) * m_frac).round() as usize;
        let c = matrix(n, m, &vals);
        prop_assert_eq!(hungarian(&c).unwrap().cost, brute_force(&c).0);
    }
}
