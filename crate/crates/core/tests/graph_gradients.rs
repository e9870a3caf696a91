use flowcon::nd::{finite_diff_grad, relative_error, Bindings, Graph, NodeId, Tensor};
use proptest::prelude::*;

/// Builds a scalar expression over one `[rows, cols]` leaf and checks its
/// reverse-mode gradient against central differences.
fn check<F>(x: Tensor, build: F) -> f64
where
    F: Fn(&mut Graph, NodeId) -> NodeId,
{
    let eval = |t: &Tensor, grad: bool| {
        let mut g = Graph::new();
        let leaf = g.leaf("x");
        let root = build(&mut g, leaf);
        let mut b = Bindings::new();
        b.insert(leaf, t.clone().with_grad(grad));
        g.evaluate(b).unwrap();
        let v = g.value(root).item();
        let grads = grad.then(|| g.gradients(root).unwrap().remove(&leaf).unwrap());
        (v, grads)
    };
    let analytic = eval(&x, true).1.unwrap();
    let numeric = finite_diff_grad(|t| Ok(eval(t, false).0), &x, 1e-6).unwrap();
    relative_error(analytic.data(), numeric.data())
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.5f64..1.5, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn elementwise_chain(x in matrix(3, 4)) {
        let err = check(x, |g, x| {
            let t = g.tanh(x);
            let e = g.exp(t);
            let sq = g.square(x);
            let p = g.mul(e, sq);
            let q = g.sub(p, x);
            let n = g.neg(q);
            let s = g.scale(n, 0.7);
            let o = g.offset(s, 3.0);
            let sp = g_square_plus_one(g, o);
            let l = g.log(sp);
            g.sum(l)
        });
        prop_assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn matmul_affine_transpose(x in matrix(3, 4), w in matrix(4, 2), b in prop::collection::vec(-1.0f64..1.0, 2)) {
        let err = check(x, |g, x| {
            let w = g.constant(w.clone());
            let bias = g.constant(Tensor::vector(b.clone()));
            let a = g.affine(x, w, bias);
            let xt = g.transpose(x);
            let gram = g.matmul(x, xt);
            let ta = g.tanh(a);
            let s1 = g.mean(ta);
            let s2 = g.sum(gram);
            let s2 = g.scale(s2, 0.1);
            g.add(s1, s2)
        });
        prop_assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn slicing_concat_and_rows(x in matrix(2, 6)) {
        let err = check(x, |g, x| {
            let a = g.slice(x, 0, 2);
            let b = g.slice(x, 3, 6);
            let c = g.concat(b, a);
            let sq = g.square(c);
            let r = g.sum_last(sq);
            let v = g.constant(Tensor::vector(vec![0.5, -2.0]));
            let m = g.mul(r, v);
            g.sum(m)
        });
        prop_assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn broadcast_rhs(x in matrix(3, 2), row in prop::collection::vec(-1.0f64..1.0, 2)) {
        let err = check(x, |g, x| {
            let r = g.constant(Tensor::vector(row.clone()));
            let a = g.add(x, r);
            let m = g.mul(a, r);
            let s = g.sub(m, r);
            let t = g.tanh(s);
            g.sum(t)
        });
        prop_assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn clamp_interior(x in matrix(2, 3)) {
        // bounds well outside the sampled range, so the clamp is the identity
        let err = check(x, |g, x| {
            let c = g.clamp(x, -10.0, 10.0);
            let e = g.exp(c);
            g.sum(e)
        });
        prop_assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn masked_logsumexp(x in matrix(3, 3)) {
        let mask: Vec<bool> = (0..9).map(|i| i % 4 != 0).collect();
        let err = check(x, move |g, x| {
            let l = g.logsumexp_masked(x, mask.clone());
            let w = g.constant(Tensor::vector(vec![1.0, -0.5, 2.0]));
            let p = g.mul(l, w);
            g.sum(p)
        });
        prop_assert!(err < 1e-6, "relative error {err}");
    }
}

fn g_square_plus_one(g: &mut Graph, x: NodeId) -> NodeId {
    let s = g.square(x);
    g.offset(s, 1.0)
}

#[test]
fn clamp_blocks_gradient_outside_bounds() {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let c = g.clamp(x, -1.0, 1.0);
    let s = g.sum(c);
    let mut b = Bindings::new();
    b.insert(x, Tensor::vector(vec![-3.0, 0.5, 4.0]).with_grad(true));
    g.evaluate(b).unwrap();
    assert_eq!(g.value(s).item(), -1.0 + 0.5 + 1.0);
    assert_eq!(g.gradients(s).unwrap()[&x].data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn overflow_names_the_exp_node() {
    let mut g = Graph::new();
    let x = g.leaf("x");
    let e = g.exp(x);
    let s = g.sum(e);
    let mut b = Bindings::new();
    b.insert(x, Tensor::vector(vec![1000.0]));
    match g.evaluate(b) {
        Err(flowcon::Error::NumericOverflow { node, op }) => {
            assert_eq!(node, e.index());
            assert_eq!(op, "exp");
        }
        other => panic!("expected overflow, got {other:?}"),
    }
    let _ = s;
}
