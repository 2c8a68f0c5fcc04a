use degm_core::autodiff::Tape;
use degm_core::Tensor;
use proptest::prelude::*;

fn central_diff(f: impl Fn(&[f64]) -> f64, at: &[f64], i: usize) -> f64 {
    let h = 1e-6;
    let mut up = at.to_vec();
    let mut dn = at.to_vec();
    up[i] += h;
    dn[i] -= h;
    (f(&up) - f(&dn)) / (2.0 * h)
}

fn matmul_loss(w: &[f64], x: &Tensor, rows: usize, cols: usize) -> (f64, Vec<f64>) {
    let wt = Tensor::matrix(rows, cols, w.to_vec()).unwrap().with_grad();
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let wv = tape.param(&wt);
    let y = tape.matmul(xv, wv).unwrap();
    let s = tape.sigmoid(y);
    let l = tape.mean(s);
    let value = tape.scalar(l);
    let g = tape.backward(l).unwrap();
    (value, g.get(&wt).unwrap().to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_sigmoid_gradient(w in prop::collection::vec(-2.0f64..2.0, 6), x in prop::collection::vec(-1.0f64..1.0, 8)) {
        let x = Tensor::matrix(4, 2, x).unwrap();
        let (_, g) = matmul_loss(&w, &x, 2, 3);
        for i in 0..6 {
            let num = central_diff(|w| matmul_loss(w, &x, 2, 3).0, &w, i);
            prop_assert!((g[i] - num).abs() < 1e-7, "coordinate {}: {} vs {}", i, g[i], num);
        }
    }

    #[test]
    fn logsumexp_rows_is_shift_stable(v in prop::collection::vec(-5.0f64..5.0, 4), shift in 0.0f64..800.0) {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 4], v.clone()).unwrap();
        let b = tape.constant(vec![1, 4], v.iter().map(|x| x + shift).collect()).unwrap();
        let la = tape.logsumexp_rows(a).unwrap();
        let lb = tape.logsumexp_rows(b).unwrap();
        let (la, lb) = (tape.scalar(la), tape.scalar(lb));
        prop_assert!(lb.is_finite());
        prop_assert!((lb - la - shift).abs() < 1e-9 * (1.0 + shift));
    }
}

#[test]
fn shared_param_accumulates() {
    let w = Tensor::vector(vec![0.5, -1.5]).unwrap().with_grad();
    let mut tape = Tape::new();
    let a = tape.param(&w);
    let b = tape.param(&w);
    let p = tape.mul(a, b).unwrap();
    let l = tape.sum(p);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(&w).unwrap(), &[1.0, -3.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let w = Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad();
    let mut tape = Tape::new();
    let v = tape.param(&w);
    assert!(tape.backward(v).is_err());
}
