use std::rc::Rc;

use diffgda::autodiff::Tape;
use diffgda::checkpoint::Checkpoint;
use diffgda::nn::{
    self, finite_diff_grad, gcn_layer, gmh_attention, mlp_apply, normalized_adjacency, power_masks, Gcn, Gmh, Head,
    Mlp, Params,
};
use diffgda::rng::{normal_matrix, rng_from_seed, DiffRng};
use diffgda::Matrix;
use proptest::prelude::*;
use rand::Rng;

fn rand_graph(n: usize, p: f64, seed: u64) -> Matrix {
    let mut rng = rng_from_seed(seed);
    let mut a = Matrix::zeros(n, n);
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                a[(u, v)] = 1.0;
                a[(v, u)] = 1.0;
            }
        }
    }
    a
}

#[test]
fn mlp_identity_and_bias_only() {
    let x = normal_matrix(4, 3, &mut rng_from_seed(1));
    let id = Mlp::from_layers(vec![Matrix::identity(3)], vec![Matrix::zeros(1, 3)], Head::Identity).unwrap();
    assert_eq!(mlp_apply(&id, &x).unwrap(), x);

    let b = Matrix::row_vector(&[0.5, -1.0, 2.0]);
    let zero = Mlp::from_layers(vec![Matrix::zeros(3, 3)], vec![b.clone()], Head::Identity).unwrap();
    let y = mlp_apply(&zero, &x).unwrap();
    for r in 0..4 {
        assert_eq!(y.row(r), b.row(0));
    }
}

#[test]
fn mlp_heads_are_bounded() {
    let x = normal_matrix(50, 2, &mut rng_from_seed(2)).scale(10.0);
    let sp = mlp_apply(&Mlp::new(&[2, 8, 1], Head::Softplus, &mut rng_from_seed(3)), &x).unwrap();
    assert!(sp.as_slice().iter().all(|&v| v > 0.0));
    let sg = mlp_apply(&Mlp::new(&[2, 8, 1], Head::Sigmoid, &mut rng_from_seed(4)), &x).unwrap();
    assert!(sg.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn mlp_rejects_wrong_width() {
    let mlp = Mlp::new(&[3, 4, 1], Head::Identity, &mut rng_from_seed(5));
    assert!(mlp_apply(&mlp, &Matrix::zeros(2, 4)).is_err());
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let x = normal_matrix(6, 3, &mut rng_from_seed(6));
    let mlp = Mlp::new(&[3, 5, 2], Head::Identity, &mut rng_from_seed(7));
    let loss = |m: &Mlp| mlp_apply(m, &x).unwrap().as_slice().iter().map(|v| v * v).sum::<f64>();
    let tape = Tape::new();
    let p = nn::bind(&tape, &mlp);
    let out = mlp.forward(&p, tape.constant(x.clone())).square().sum();
    let grads = tape.backward(out);
    let analytic: Vec<f64> = p.iter().flat_map(|v| grads.wrt(*v).into_vec()).collect();
    let numeric = finite_diff_grad(
        |flat| {
            let mut m = mlp.clone();
            m.unflatten(flat);
            loss(&m)
        },
        &mlp.flatten(),
        1e-5,
    )
    .unwrap();
    assert!(nn::max_relative_error(&analytic, &numeric, 1e-6) < 1e-4);
}

#[test]
fn gcn_single_node_and_isolated_nodes() {
    let h = Matrix::from_rows(&[[0.5, -2.0]]).unwrap();
    let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap();
    let out = gcn_layer(&h, &Matrix::zeros(1, 1), &w).unwrap();
    let expected = h.matmul(&w).unwrap().map(|v| v.max(0.0));
    assert_eq!(out, expected);

    let h = Matrix::from_rows(&[[1.0, 0.25], [3.0, 0.0]]).unwrap();
    assert_eq!(gcn_layer(&h, &Matrix::zeros(2, 2), &Matrix::identity(2)).unwrap(), h);
}

#[test]
fn gcn_path_graph_matches_explicit_normalization() {
    let mut a = Matrix::zeros(3, 3);
    for (u, v) in [(0, 1), (1, 2)] {
        a[(u, v)] = 1.0;
        a[(v, u)] = 1.0;
    }
    let h = Matrix::identity(3);
    let out = gcn_layer(&h, &a, &Matrix::identity(3)).unwrap();
    // Degrees with self-loops are (2, 3, 2).
    let d = [2.0f64, 3.0, 2.0];
    let at = [[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]];
    for i in 0..3 {
        for j in 0..3 {
            let want = at[i][j] / (d[i] * d[j]).sqrt();
            assert!((out[(i, j)] - want).abs() < 1e-15);
        }
    }
    let row1 = [1.0 / 6f64.sqrt(), 1.0 / 3.0, 1.0 / 6f64.sqrt()];
    for (j, w) in row1.iter().enumerate() {
        assert!((out[(1, j)] - w).abs() < 1e-15);
    }
}

#[test]
fn gcn_rejects_mismatched_shapes() {
    assert!(gcn_layer(&Matrix::zeros(3, 2), &Matrix::zeros(2, 2), &Matrix::zeros(2, 2)).is_err());
    assert!(gcn_layer(&Matrix::zeros(2, 3), &Matrix::zeros(2, 2), &Matrix::zeros(2, 2)).is_err());
}

#[test]
fn sparse_propagation_equals_dense_normalization() {
    let a = rand_graph(12, 0.3, 8);
    let dense = normalized_adjacency(&a).unwrap();
    let sparse = nn::propagation_from_edges(12, &nn::edge_list(&a)).to_dense();
    for (x, y) in dense.as_slice().iter().zip(sparse.as_slice()) {
        assert!((x - y).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gcn_is_permutation_equivariant(seed in 0u64..1_000, n in 2usize..12) {
        let a = rand_graph(n, 0.4, seed);
        let h = normal_matrix(n, 3, &mut rng_from_seed(seed + 1));
        let w = normal_matrix(3, 4, &mut rng_from_seed(seed + 2));
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng_from_seed(seed + 3));
        let out = gcn_layer(&h, &a, &w).unwrap();
        let out_p = gcn_layer(&h.permute_rows(&perm), &a.permute_square(&perm), &w).unwrap();
        let expected = out.permute_rows(&perm);
        for (x, y) in out_p.as_slice().iter().zip(expected.as_slice()) {
            // Row sums run in a permuted order, so equality holds to rounding.
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1_000, n in 1usize..8) {
        let gmh = Gmh::new(&[3], 1, 2, 2, &mut rng_from_seed(seed));
        let state = normal_matrix(n, 3, &mut rng_from_seed(seed + 1));
        let masks = power_masks(&rand_graph(n, 0.3, seed + 2), 1).unwrap();
        for map in gmh.attention_maps(0, &state, &masks[0]).unwrap() {
            for r in 0..n {
                let s: f64 = map.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gmh_single_node_attends_to_itself() {
    let gmh = Gmh::new(&[2], 1, 4, 2, &mut rng_from_seed(9));
    let maps = gmh.attention_maps(0, &Matrix::from_rows(&[[0.3, -0.7]]).unwrap(), &[true]).unwrap();
    assert_eq!(maps.len(), 4);
    for m in maps {
        assert_eq!(m[(0, 0)], 1.0);
    }
}

#[test]
fn gmh_diagonal_mask_is_self_attention() {
    let n = 4;
    let gmh = Gmh::new(&[3], 1, 2, 2, &mut rng_from_seed(10));
    let state = normal_matrix(n, 3, &mut rng_from_seed(11));
    let masks = power_masks(&Matrix::zeros(n, n), 1).unwrap();
    for m in gmh.attention_maps(0, &state, &masks[0]).unwrap() {
        assert_eq!(m, Matrix::identity(n));
    }
}

#[test]
fn gmh_matches_manual_attention() {
    let mut gmh = Gmh::new(&[2], 1, 1, 2, &mut rng_from_seed(12));
    gmh.blocks[0].wq = Matrix::from_rows(&[[0.5, -0.2], [0.1, 0.3]]).unwrap();
    gmh.blocks[0].wk = Matrix::from_rows(&[[0.4, 0.0], [-0.3, 0.2]]).unwrap();
    gmh.blocks[0].wv = Matrix::from_rows(&[[1.0, 0.5], [0.25, -1.0]]).unwrap();
    gmh.proj = Matrix::from_rows(&[[0.7], [-0.4]]).unwrap();
    gmh.proj_bias = Matrix::scalar(0.05);
    let h = Matrix::from_rows(&[[1.0, 2.0], [-1.0, 0.5], [0.0, -1.5]]).unwrap();
    let full = Matrix::filled(3, 3, 1.0);
    let out = gmh_attention(&gmh, &[h.clone()], &[full]).unwrap();

    let proj = |x: &[f64], w: &Matrix| [x[0] * w[(0, 0)] + x[1] * w[(1, 0)], x[0] * w[(0, 1)] + x[1] * w[(1, 1)]];
    let q: Vec<[f64; 2]> = (0..3).map(|i| proj(h.row(i), &gmh.blocks[0].wq)).collect();
    let k: Vec<[f64; 2]> = (0..3).map(|i| proj(h.row(i), &gmh.blocks[0].wk)).collect();
    let v: Vec<[f64; 2]> = (0..3).map(|i| proj(h.row(i), &gmh.blocks[0].wv)).collect();
    let mut attn = [[0.0; 3]; 3];
    for u in 0..3 {
        let logits: Vec<f64> = (0..3)
            .map(|j| (q[u][0] * k[j][0] + q[u][1] * k[j][1]) / 2f64.sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..3 {
            attn[u][j] = (logits[j] - m).exp() / z;
        }
    }
    let o: Vec<[f64; 2]> = (0..3)
        .map(|u| {
            let mut r = [0.0; 2];
            for j in 0..3 {
                r[0] += attn[u][j] * v[j][0];
                r[1] += attn[u][j] * v[j][1];
            }
            r
        })
        .collect();
    for u in 0..3 {
        for w in 0..3 {
            let sim = (o[u][0] * o[w][0] + o[u][1] * o[w][1]) / 2.0;
            let want = 0.7 * attn[u][w] - 0.4 * sim + 0.05;
            assert!((out[(u, w)] - want).abs() < 1e-12, "({u},{w}): {} vs {want}", out[(u, w)]);
        }
    }
}

#[test]
fn gmh_rejects_bad_inputs() {
    let gmh = Gmh::new(&[2], 1, 1, 2, &mut rng_from_seed(13));
    assert!(gmh_attention(&gmh, &[], &[Matrix::zeros(2, 2)]).is_err());
    assert!(gmh_attention(&gmh, &[Matrix::zeros(3, 2)], &[Matrix::zeros(2, 2)]).is_err());
}

#[test]
fn finite_differences_of_simple_losses() {
    let g = finite_diff_grad(|p| p.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
    assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
    let g = finite_diff_grad(|_| 3.5, &[0.1, -4.0, 9.0], 1e-5).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-12));
    assert!(finite_diff_grad(|_| f64::NAN, &[1.0], 1e-5).is_err());
    assert!(finite_diff_grad(|p| p[0], &[1.0], 0.0).is_err());
}

#[test]
fn zero_dropout_training_equals_eval() {
    let n = 10;
    let a = rand_graph(n, 0.3, 14);
    let prop = Rc::new(nn::propagation(&a).unwrap());
    let gcn = Gcn::new(3, 5, 2, 0.0, &mut rng_from_seed(15));
    let x = normal_matrix(n, 3, &mut rng_from_seed(16));
    let tape = Tape::new();
    let p = nn::bind(&tape, &gcn);
    let mut rng = rng_from_seed(17);
    let train = gcn.forward(&p, tape.constant(x.clone()), &prop, Some(&mut rng));
    let eval = gcn.forward::<DiffRng>(&p, tape.constant(x), &prop, None);
    for (a, b) in train.iter().zip(&eval) {
        assert_eq!(*a.value(), *b.value());
    }
}

#[test]
fn checkpoint_layout() {
    let mut ck = Checkpoint::new();
    ck.insert("w", Matrix::from_rows(&[[1.5, -2.0]]).unwrap());
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], b"DGDA");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    assert_eq!(&bytes[16..16 + name_len], b"w");
    let tail = &bytes[bytes.len() - 16..];
    assert_eq!(f64::from_le_bytes(tail[..8].try_into().unwrap()), 1.5);
    assert_eq!(f64::from_le_bytes(tail[8..].try_into().unwrap()), -2.0);
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
}
