use mealrec::autograd::{attention, grad_check, Graph, Matrix};
use proptest::prelude::*;

/// `sum_j coeffs_j * out_j` as a 1 x 1 node: a linear layer with slope 1.
fn project(g: &mut Graph, out: mealrec::autograd::Var, coeffs: &[f64]) -> mealrec::autograd::Var {
    let w = g.leaf(Matrix::row_vector(coeffs.to_vec()));
    let zero = g.leaf(Matrix::zeros(1, 1));
    g.leaky_affine(out, w, zero, 1.0).unwrap()
}

fn attention_loss(x: &[f64], n: usize, d: usize, mask: &[bool], coeffs: &[f64]) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let q = g.leaf(Matrix::from_vec(1, d, x[..d].to_vec()).unwrap());
    let k = g.leaf(Matrix::from_vec(n, d, x[d..d + n * d].to_vec()).unwrap());
    let v = g.leaf(Matrix::from_vec(n, d, x[d + n * d..].to_vec()).unwrap());
    let out = g.attention(q, k, v, mask).unwrap();
    let root = project(&mut g, out, coeffs);
    g.backward(root).unwrap();
    let mut grad = g.grad(q).unwrap().as_slice().to_vec();
    grad.extend_from_slice(g.grad(k).unwrap().as_slice());
    grad.extend_from_slice(g.grad(v).unwrap().as_slice());
    (g.value(root).value(), grad)
}

#[test]
fn attention_gradients_match_finite_differences() {
    let (n, d) = (4, 3);
    let x: Vec<f64> = (0..d + 2 * n * d).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect();
    let mask = [true, false, true, true];
    let coeffs = [0.7, -1.3, 0.4];
    let (_, grad) = attention_loss(&x, n, d, &mask, &coeffs);
    let err = grad_check(|p| attention_loss(p, n, d, &mask, &coeffs).0, &x, &grad, 1e-3).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn two_dimensional_attention_weights_gradient() {
    // Gradient of the first attention weight with respect to the query.
    let weight0 = |q: &[f64]| {
        let k = Matrix::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0]]).unwrap();
        attention(&Matrix::row_vector(q.to_vec()), &k, &k, &[true, true]).unwrap().weights[0]
    };
    let w = weight0(&[1.0, 0.0]);
    assert!((w - 0.8044).abs() < 1e-4);
    // Value rows (1, 0) and (0, 0) make the output's first entry equal weight 0.
    let mut g = Graph::new();
    let q = g.leaf(Matrix::row_vector(vec![1.0, 0.0]));
    let k = g.leaf(Matrix::from_rows(&[&[1.0, 0.0], &[-1.0, 0.0]]).unwrap());
    let v = g.leaf(Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap());
    let out = g.attention(q, k, v, &[true, true]).unwrap();
    let root = project(&mut g, out, &[1.0, 0.0]);
    assert!((g.value(root).value() - w).abs() < 1e-15);
    g.backward(root).unwrap();
    let analytic = g.grad(q).unwrap().as_slice().to_vec();
    let err = grad_check(weight0, &[1.0, 0.0], &analytic, 1e-3).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn affine_chain_gradients_match_finite_differences() {
    // x: 1x4, W1: 3x4, b1: 1x3, W2: 2x3, b2: 1x2, then concat with x * x.
    let shapes = [(1, 4), (3, 4), (1, 3), (2, 3), (1, 2)];
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    let point: Vec<f64> = (0..total).map(|i| ((i * 53 % 17) as f64 - 8.0) / 7.0 + 0.013).collect();
    let run = |p: &[f64]| {
        let mut g = Graph::new();
        let mut off = 0;
        let vars: Vec<_> = shapes
            .iter()
            .map(|&(r, c)| {
                let v = g.leaf(Matrix::from_vec(r, c, p[off..off + r * c].to_vec()).unwrap());
                off += r * c;
                v
            })
            .collect();
        let h1 = g.leaky_affine(vars[0], vars[1], vars[2], 0.01).unwrap();
        let h2 = g.leaky_affine(h1, vars[3], vars[4], 0.01).unwrap();
        let sq = g.mul(vars[0], vars[0]).unwrap();
        let cat = g.concat_cols(&[h2, sq]).unwrap();
        let root = project(&mut g, cat, &[1.0, -2.0, 0.5, 0.25, -0.75, 1.5]);
        g.backward(root).unwrap();
        let grad: Vec<f64> = vars.iter().flat_map(|&v| g.grad(v).unwrap().as_slice().to_vec()).collect();
        (g.value(root).value(), grad)
    };
    let (_, grad) = run(&point);
    let err = grad_check(|p| run(p).0, &point, &grad, 1e-3).unwrap();
    assert!(err < 1e-4, "{err}");
}

fn attention_case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<bool>)> {
    (1usize..8, 1usize..6).prop_flat_map(|(n, d)| {
        (
            Just(d),
            prop::collection::vec(-3.0f64..3.0, d),
            prop::collection::vec(-3.0f64..3.0, n * d),
            prop::collection::vec(-3.0f64..3.0, n * d),
            prop::collection::vec(any::<bool>(), n).prop_map(|mut m| {
                m[0] = true;
                m
            }),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn attention_weights_form_a_distribution((d, q, k, v, mask) in attention_case()) {
        let n = mask.len();
        let out = attention(
            &Matrix::row_vector(q), &Matrix::from_vec(n, d, k).unwrap(), &Matrix::from_vec(n, d, v.clone()).unwrap(), &mask,
        ).unwrap();
        let total: f64 = out.weights.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for (w, &m) in out.weights.iter().zip(&mask) {
            prop_assert!(*w >= 0.0);
            if !m { prop_assert_eq!(*w, 0.0); }
        }
        for j in 0..d {
            let col = (0..n).filter(|&i| mask[i]).map(|i| v[i * d + j]);
            let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            let o = out.output.as_slice()[j];
            prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12, "{} outside [{}, {}]", o, lo, hi);
        }
    }

    #[test]
    fn attention_is_permutation_invariant((d, q, k, v, mask) in attention_case(), rot in 0usize..8) {
        let n = mask.len();
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
        let permute = |x: &[f64]| order.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect::<Vec<_>>();
        let mask2: Vec<bool> = order.iter().map(|&i| mask[i]).collect();
        let qm = Matrix::row_vector(q);
        let a = attention(&qm, &Matrix::from_vec(n, d, k.clone()).unwrap(), &Matrix::from_vec(n, d, v.clone()).unwrap(), &mask).unwrap();
        let b = attention(&qm, &Matrix::from_vec(n, d, permute(&k)).unwrap(), &Matrix::from_vec(n, d, permute(&v)).unwrap(), &mask2).unwrap();
        for (x, y) in a.output.as_slice().iter().zip(b.output.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
