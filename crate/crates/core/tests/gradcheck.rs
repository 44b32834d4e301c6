use std::rc::Rc;

use diffgda::autodiff::{hcat, Tape, Var};
use diffgda::nn::{self, bind, finite_diff_grad, max_relative_error, Gcn, Gmh, Head, Mlp, Params};
use diffgda::rng::{normal_matrix, rng_from_seed};
use diffgda::Matrix;

/// Checks the tape gradient of `f` at each input against central differences.
fn check(inputs: &[Matrix], f: impl for<'t> Fn(&[Var<'t>]) -> Var<'t>) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.var(m.clone())).collect();
    let loss = f(&vars);
    let grads = tape.backward(loss);
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let numeric = finite_diff_grad(
            |p| {
                let t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, m)| {
                        if j == k {
                            t.var(Matrix::from_vec(m.rows(), m.cols(), p.to_vec()).unwrap())
                        } else {
                            t.var(m.clone())
                        }
                    })
                    .collect();
                f(&vs).item()
            },
            input.as_slice(),
            1e-6,
        )
        .unwrap();
        let err = max_relative_error(analytic.as_slice(), &numeric, 1e-6);
        assert!(err < 1e-4, "input {k}: relative error {err}");
    }
}

fn rand(rows: usize, cols: usize, seed: u64) -> Matrix {
    normal_matrix(rows, cols, &mut rng_from_seed(seed))
}

#[test]
fn elementwise_ops() {
    let a = rand(3, 4, 1);
    let b = rand(3, 4, 2);
    check(&[a.clone(), b.clone()], |v| v[0].add(v[1]).mul(v[0]).sub(v[1].scale(0.3)).sum());
    check(&[a.clone()], |v| v[0].softplus().add(v[0].sigmoid()).add(v[0].tanh()).sum());
    check(&[a.clone()], |v| v[0].scale(0.5).exp().add_scalar(1.0).ln().square().mean());
    // Keep ReLU inputs away from the kink.
    let shifted = a.map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
    check(&[shifted], |v| v[0].relu().square().sum());
}

#[test]
fn products_and_broadcasts() {
    check(&[rand(3, 4, 3), rand(4, 2, 4)], |v| v[0].matmul(v[1]).square().sum());
    check(&[rand(3, 4, 5), rand(5, 4, 6)], |v| v[0].matmul_t(v[1]).tanh().sum());
    check(&[rand(3, 4, 7), rand(1, 4, 8)], |v| v[0].add_row(v[1]).mul_row(v[1]).square().sum());
    check(&[rand(3, 4, 9), rand(3, 1, 10)], |v| v[0].mul_col(v[1]).square().sum());
}

#[test]
fn shape_ops() {
    check(&[rand(3, 4, 11), rand(3, 2, 12)], |v| {
        hcat(&[v[0], v[1], v[0]]).t().reshape(5, 6).square().sum()
    });
    check(&[rand(5, 3, 13)], |v| v[0].select_rows(&[4, 0, 4, 2]).square().sum());
}

#[test]
fn softmaxes_and_distances() {
    let w = rand(4, 4, 14);
    let mask = Rc::new(vec![
        true, false, true, true, //
        false, true, false, false, //
        true, true, true, true, //
        false, false, false, false,
    ]);
    check(&[rand(4, 4, 15)], move |v| {
        let wv = v[0].tape().constant(w.clone());
        v[0].masked_softmax(Rc::clone(&mask)).mul(wv).sum()
    });
    let w2 = rand(3, 5, 16);
    check(&[rand(3, 5, 17)], move |v| v[0].log_softmax().mul(v[0].tape().constant(w2.clone())).sum());
    check(&[rand(4, 3, 18), rand(5, 3, 19)], |v| v[0].pair_sq_dist(v[1]).scale(-0.5).exp().sum());
}

fn model_check<P: Params + Clone>(model: &P, loss: impl for<'t> Fn(&P, &[Var<'t>]) -> Var<'t>) {
    let tape = Tape::new();
    let vars = bind(&tape, model);
    let grads = tape.backward(loss(model, &vars));
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|v| grads.wrt(*v).into_vec())
        .collect();
    let numeric = finite_diff_grad(
        |p| {
            let mut m = model.clone();
            m.unflatten(p);
            let t = Tape::new();
            let vs = bind(&t, &m);
            loss(&m, &vs).item()
        },
        &model.flatten(),
        1e-6,
    )
    .unwrap();
    let err = max_relative_error(&analytic, &numeric, 1e-6);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn mlp_heads() {
    let x = rand(5, 3, 20);
    for head in [Head::Identity, Head::Softplus, Head::Sigmoid] {
        let mlp = Mlp::new(&[3, 6, 2], head, &mut rng_from_seed(21));
        model_check(&mlp, |m, p| {
            let xv = p[0].tape().constant(x.clone());
            m.forward(p, xv).square().sum()
        });
    }
}

#[test]
fn gcn_stack() {
    let x = rand(6, 3, 22);
    let mut a = Matrix::zeros(6, 6);
    for (u, v) in [(0, 1), (1, 2), (2, 3), (4, 5), (0, 5)] {
        a[(u, v)] = 1.0;
        a[(v, u)] = 1.0;
    }
    let prop = Rc::new(nn::propagation(&a).unwrap());
    let gcn = Gcn::new(3, 4, 2, 0.0, &mut rng_from_seed(23));
    model_check(&gcn, |m, p| {
        let t = p[0].tape();
        let states = m.forward::<rand_chacha::ChaCha8Rng>(p, t.constant(x.clone()), &prop, None);
        states[1].square().sum().add(states[0].sum())
    });
}

#[test]
fn gmh_attention_params() {
    let h0 = rand(5, 3, 24);
    let h1 = rand(5, 2, 25);
    let mut a = Matrix::zeros(5, 5);
    for (u, v) in [(0, 1), (1, 2), (3, 4)] {
        a[(u, v)] = 1.0;
        a[(v, u)] = 1.0;
    }
    let masks = nn::power_masks(&a, 2).unwrap();
    let gmh = Gmh::new(&[3, 2], 2, 2, 2, &mut rng_from_seed(26));
    let w = rand(5, 5, 27);
    model_check(&gmh, |m, p| {
        let t = p[0].tape();
        let hs = [t.constant(h0.clone()), t.constant(h1.clone())];
        m.forward(p, &hs, &masks).mul(t.constant(w.clone())).sum()
    });
}

#[test]
fn linear_combination() {
    check(&[rand(3, 4, 28), rand(3, 4, 29), rand(2, 1, 30)], |v| {
        diffgda::autodiff::lin_comb(&[v[0], v[1]], v[2]).square().sum()
    });
}

#[test]
fn sparse_propagation() {
    let edges = [(0, 1), (1, 2), (0, 3)];
    let prop = Rc::new(nn::propagation_from_edges(4, &edges));
    let mut a = Matrix::zeros(4, 4);
    for (u, v) in edges {
        a[(u, v)] = 1.0;
        a[(v, u)] = 1.0;
    }
    let dense = nn::normalized_adjacency(&a).unwrap();
    for (x, y) in prop.to_dense().as_slice().iter().zip(dense.as_slice()) {
        assert!((x - y).abs() < 1e-15);
    }
    check(&[rand(4, 3, 31)], move |v| v[0].spmm(&prop).tanh().sum());
}
