use super::*;
use crate::parse_tree::{build_ssg, parse_sexpr, StructureGraph, TagVocab};
use crate::tensor::grad_check_params;
use crate::wsg::build_wsg;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_dims() -> ModelDims {
    ModelDims {
        d1: 6,
        d2: 4,
        hidden: 5,
        d_s: 6,
        head_hidden: 7,
        gru_layers: 2,
        graph_layers: 2,
        leaky_slope: 0.2,
    }
}

struct Fixture {
    params: ModelParams,
    token_ids: Vec<usize>,
    word_tag_ids: Vec<usize>,
    ssg: StructureGraph,
    a_hat: std::sync::Arc<Vec<f64>>,
}

impl Fixture {
    fn inputs(&self) -> SentenceInputs<'_> {
        SentenceInputs {
            token_ids: &self.token_ids,
            word_tag_ids: &self.word_tag_ids,
            ssg_node_tags: &self.ssg.node_tags,
            ssg_neighbors: &self.ssg.neighbors,
            ssg_word_alignment: &self.ssg.word_alignment,
            a_hat: Some(&self.a_hat),
        }
    }
}

fn fixture(dims: &ModelDims, variant: Variant, seed: u64) -> Fixture {
    let tree = parse_sexpr("(S (NP (PRP I)) (VP (VBP love) (NP (NN basketball))))").unwrap();
    let tags = TagVocab::build([&tree]);
    let ssg = build_ssg(&tree, &tags);
    let n = ssg.word_alignment.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab_len = 9;
    let word_init: Vec<f64> = (0..vocab_len * dims.d1)
        .map(|_| rng.gen_range(-0.8..0.8))
        .collect();
    let params = ModelParams::init(dims, variant, word_init, tags.len(), &mut rng).unwrap();

    let token_ids: Vec<usize> = (0..n).map(|i| 1 + (i % (vocab_len - 1))).collect();
    let word_tag_ids: Vec<usize> = ssg
        .word_alignment
        .iter()
        .map(|&node| ssg.node_tags[node])
        .collect();

    let vec_data: Vec<f64> = (0..n * dims.d1).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let graph = build_wsg(&Tensor::new(&[n, dims.d1], vec_data).unwrap()).unwrap();

    Fixture {
        params,
        token_ids,
        word_tag_ids,
        ssg,
        a_hat: graph.a_hat,
    }
}

fn gru_direction(
    rng: &mut ChaCha8Rng,
    d_in: usize,
    hidden: usize,
    zeroed: bool,
) -> GruDirection {
    let mut mk = |shape: &[usize]| -> Tensor {
        let n: usize = shape.iter().product();
        let data = if zeroed {
            vec![0.0; n]
        } else {
            (0..n).map(|_| rng.gen_range(-0.7..0.7)).collect()
        };
        Tensor::param(shape, data).unwrap()
    };
    GruDirection {
        w_z: mk(&[d_in, hidden]),
        u_z: mk(&[hidden, hidden]),
        b_z: mk(&[hidden]),
        w_r: mk(&[d_in, hidden]),
        u_r: mk(&[hidden, hidden]),
        b_r: mk(&[hidden]),
        w_h: mk(&[d_in, hidden]),
        u_h: mk(&[hidden, hidden]),
        b_h: mk(&[hidden]),
    }
}

// ── GRU cell ────────────────────────────────────────────────────────

#[test]
fn gru_cell_zero_weights_halves_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = gru_direction(&mut rng, 3, 4, true);
    let tape = Tape::new();
    let x = Tensor::new(&[1, 3], vec![0.9, -0.4, 0.2]).unwrap();
    let h_prev = Tensor::new(&[1, 4], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
    let h = gru_cell(&tape, &x, &h_prev, &p).unwrap();
    for (got, want) in h.to_vec().iter().zip([0.5, -1.0, 0.25, 2.0]) {
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn gru_cell_zero_state_reduces_to_gated_candidate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = gru_direction(&mut rng, 3, 4, false);
    let tape = Tape::new();
    let x = Tensor::new(&[1, 3], vec![0.3, 1.1, -0.7]).unwrap();
    let h_prev = Tensor::zeros(&[1, 4]).unwrap();
    let h = gru_cell(&tape, &x, &h_prev, &p).unwrap();

    // Manual: z = sigmoid(x Wz + bz); h = z * tanh(x Wh + bh).
    let xv = x.to_vec();
    let matvec = |w: &Tensor, b: &Tensor| -> Vec<f64> {
        let wd = w.to_vec();
        let bd = b.to_vec();
        (0..4)
            .map(|j| bd[j] + (0..3).map(|k| xv[k] * wd[k * 4 + j]).sum::<f64>())
            .collect()
    };
    let z: Vec<f64> = matvec(&p.w_z, &p.b_z)
        .iter()
        .map(|v| 1.0 / (1.0 + (-v).exp()))
        .collect();
    let c: Vec<f64> = matvec(&p.w_h, &p.b_h).iter().map(|v| v.tanh()).collect();
    for i in 0..4 {
        assert!((h.to_vec()[i] - z[i] * c[i]).abs() < 1e-12);
    }
}

#[test]
fn gru_cell_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = gru_direction(&mut rng, 3, 4, false);
    let x = Tensor::param(
        &[1, 3],
        (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let h_prev = Tensor::param(
        &[1, 4],
        (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let mut all = vec![x.clone(), h_prev.clone()];
    for t in [
        &p.w_z, &p.u_z, &p.b_z, &p.w_r, &p.u_r, &p.b_r, &p.w_h, &p.u_h, &p.b_h,
    ] {
        all.push(t.clone());
    }
    let err = grad_check_params(
        |tape| {
            let h = gru_cell(tape, &x, &h_prev, &p)?;
            tape.sum(&h)
        },
        &all,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "gru cell grad error {err}");
}

// ── encoder ─────────────────────────────────────────────────────────

#[test]
fn encoder_single_word_is_finite_and_deterministic() {
    let dims = tiny_dims();
    let f = fixture(&dims, Variant::Full, 3);
    let run = || {
        let tape = Tape::no_grad();
        let words = tape
            .gather_rows(&f.params.word_embed, &f.token_ids[..1])
            .unwrap();
        let tags = tape
            .gather_rows(&f.params.tag_embed, &f.word_tag_ids[..1])
            .unwrap();
        encode_sequence(&tape, &words, &tags, &f.params.gru, &mut Mode::Eval)
            .unwrap()
            .to_vec()
    };
    let a = run();
    assert_eq!(a.len(), 2 * dims.hidden);
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(a, run());
}

#[test]
fn encoder_palindrome_symmetry_with_shared_directions() {
    // Share forward/backward parameters and make the second layer's input
    // weights invariant to swapping the state halves; a palindromic input
    // must then encode to a position-reversed, half-swapped copy of itself.
    let dims = tiny_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = dims.hidden;
    let d_in = dims.d1 + dims.d2;

    let layer1 = {
        let fwd = gru_direction(&mut rng, d_in, h, false);
        GruLayer {
            bwd: fwd.clone(),
            fwd,
        }
    };
    let layer2 = {
        let fwd = gru_direction(&mut rng, 2 * h, h, false);
        // Duplicate the top half of each input matrix into the bottom half.
        for w in [&fwd.w_z, &fwd.w_r, &fwd.w_h] {
            let mut data = w.to_vec();
            let (top, bottom) = data.split_at_mut(h * h);
            bottom.copy_from_slice(top);
            w.set_data(data).unwrap();
        }
        GruLayer {
            bwd: fwd.clone(),
            fwd,
        }
    };

    let n = 5;
    let mut words = vec![0.0; n * dims.d1];
    let mut tags = vec![0.0; n * dims.d2];
    for i in 0..n.div_ceil(2) {
        let wrow: Vec<f64> = (0..dims.d1).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let trow: Vec<f64> = (0..dims.d2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (dst, d) in [(i, dims.d1), (n - 1 - i, dims.d1)] {
            words[dst * d..(dst + 1) * d].copy_from_slice(&wrow);
        }
        for (dst, d) in [(i, dims.d2), (n - 1 - i, dims.d2)] {
            tags[dst * d..(dst + 1) * d].copy_from_slice(&trow);
        }
    }
    let tape = Tape::no_grad();
    let out = encode_sequence(
        &tape,
        &Tensor::new(&[n, dims.d1], words).unwrap(),
        &Tensor::new(&[n, dims.d2], tags).unwrap(),
        &[layer1, layer2],
        &mut Mode::Eval,
    )
    .unwrap()
    .to_vec();

    let width = 2 * h;
    for i in 0..n {
        let j = n - 1 - i;
        for k in 0..h {
            let fwd_i = out[i * width + k];
            let bwd_j = out[j * width + h + k];
            assert!(
                (fwd_i - bwd_j).abs() < 1e-10,
                "position {i} fwd[{k}]={fwd_i} vs mirrored bwd={bwd_j}"
            );
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let dims = tiny_dims();
    let f = fixture(&dims, Variant::NoBoth, 5);
    let n = 4.min(f.token_ids.len());
    let params: Vec<Tensor> = f
        .params
        .named_tensors()
        .into_iter()
        .filter(|(name, _)| name.starts_with("gru.") || name.ends_with("_embed"))
        .map(|(_, t)| t)
        .collect();
    let err = grad_check_params(
        |tape| {
            let words = tape.gather_rows(&f.params.word_embed, &f.token_ids[..n])?;
            let tags = tape.gather_rows(&f.params.tag_embed, &f.word_tag_ids[..n])?;
            let h = encode_sequence(tape, &words, &tags, &f.params.gru, &mut Mode::Eval)?;
            let sq = tape.mul(&h, &h)?;
            tape.sum(&sq)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "encoder grad error {err}");
}

// ── gated GCN ───────────────────────────────────────────────────────

#[test]
fn gcn_closed_gate_is_pure_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tape = Tape::new();
    let n = 4;
    let d = 3;
    let h = Tensor::new(&[n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w_l = Tensor::new(&[d, d], (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let a_hat = Tensor::new(&[n, n], vec![1.0 / n as f64; n * n]).unwrap();
    let gate = Tensor::zeros(&[n, d]).unwrap();
    let out = gcn_apply(&tape, &h, &a_hat, &w_l, &gate, 0.2).unwrap();

    let m = tape.matmul(&h, &w_l).unwrap();
    let expected = tape.leaky_relu(&m, 0.2).unwrap();
    assert_eq!(out.to_vec(), expected.to_vec());
}

#[test]
fn gcn_single_node_self_aggregation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tape = Tape::new();
    let d = 3;
    let h = Tensor::new(&[1, d], vec![0.4, -1.2, 0.9]).unwrap();
    let w_l = Tensor::new(&[d, d], (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w_g = Tensor::new(&[d, d], (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let a_hat = Tensor::new(&[1, 1], vec![1.0]).unwrap();
    let layer = GcnLayer {
        w_l: w_l.clone(),
        w_g: w_g.clone(),
    };
    let out = gcn_gated_layer(&tape, &h, &a_hat, &layer, 0.2).unwrap();

    // leaky(M + M*C) with A_hat = [[1]].
    let m = tape.matmul(&h, &w_l).unwrap();
    let c = tape.sigmoid(&tape.matmul(&h, &w_g).unwrap()).unwrap();
    let expected = tape
        .leaky_relu(&tape.add(&m, &tape.mul(&m, &c).unwrap()).unwrap(), 0.2)
        .unwrap();
    for (a, b) in out.to_vec().iter().zip(expected.to_vec()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn gcn_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 4;
    let d = 5;
    let h_data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wl_data: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wg_data: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let vecs: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let graph = build_wsg(&Tensor::new(&[n, 3], vecs).unwrap()).unwrap();

    let tape = Tape::new();
    let layer = GcnLayer {
        w_l: Tensor::new(&[d, d], wl_data.clone()).unwrap(),
        w_g: Tensor::new(&[d, d], wg_data.clone()).unwrap(),
    };
    let a_hat_t = Tensor::new(&[n, n], graph.a_hat.to_vec()).unwrap();
    let h = Tensor::new(&[n, d], h_data.clone()).unwrap();
    let out = gcn_gated_layer(&tape, &h, &a_hat_t, &layer, 0.2).unwrap();

    // Independent straight-line evaluation of the layer equations.
    let matmul = |a: &[f64], b: &[f64], r: usize, k: usize, c: usize| -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                for p in 0..k {
                    out[i * c + j] += a[i * k + p] * b[p * c + j];
                }
            }
        }
        out
    };
    let m = matmul(&h_data, &wl_data, n, d, d);
    let gate: Vec<f64> = matmul(&h_data, &wg_data, n, d, d)
        .iter()
        .map(|v| 1.0 / (1.0 + (-v).exp()))
        .collect();
    let agg = matmul(&graph.a_hat, &m, n, n, d);
    let expected: Vec<f64> = (0..n * d)
        .map(|i| {
            let v = m[i] + agg[i] * gate[i];
            if v >= 0.0 {
                v
            } else {
                0.2 * v
            }
        })
        .collect();
    for (a, b) in out.to_vec().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gcn_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 3;
    let d = 4;
    let h = Tensor::param(&[n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let layer = GcnLayer {
        w_l: Tensor::param(&[d, d], (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap(),
        w_g: Tensor::param(&[d, d], (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap(),
    };
    let vecs: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let graph = build_wsg(&Tensor::new(&[n, 3], vecs).unwrap()).unwrap();
    let a_hat = Tensor::new(&[n, n], graph.a_hat.to_vec()).unwrap();
    let params = vec![h.clone(), layer.w_l.clone(), layer.w_g.clone()];
    let err = grad_check_params(
        |tape| {
            let out = gcn_gated_layer(tape, &h, &a_hat, &layer, 0.2)?;
            let sq = tape.mul(&out, &out)?;
            tape.sum(&sq)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "gcn grad error {err}");
}

// ── graph attention ─────────────────────────────────────────────────

fn attn_layer(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> AttnLayer {
    let mut mk = || -> Tensor {
        Tensor::param(
            &[d_in, d_out],
            (0..d_in * d_out).map(|_| rng.gen_range(-0.8..0.8)).collect(),
        )
        .unwrap()
    };
    AttnLayer {
        w_k: mk(),
        w_q: mk(),
        w_v: mk(),
    }
}

#[test]
fn attention_self_loop_only_returns_value_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let layer = attn_layer(&mut rng, 3, 3);
    let tape = Tape::new();
    let v = Tensor::new(&[1, 3], vec![0.5, -0.2, 0.8]).unwrap();
    let out = graph_attention_layer(&tape, &v, &[vec![0]], &layer).unwrap();
    let expected = tape.matmul(&v, &layer.w_v).unwrap();
    assert_eq!(out.to_vec(), expected.to_vec());
}

#[test]
fn attention_identical_mutual_nodes_average_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let layer = attn_layer(&mut rng, 3, 3);
    let tape = Tape::new();
    let row = [0.4, 0.1, -0.9];
    let v = Tensor::new(&[2, 3], [row, row].concat()).unwrap();
    let neighbors = vec![vec![0, 1], vec![0, 1]];
    let out = graph_attention_layer(&tape, &v, &neighbors, &layer).unwrap();
    let vals = tape.matmul(&v, &layer.w_v).unwrap().to_vec();
    for i in 0..2 {
        for k in 0..3 {
            let avg = 0.5 * (vals[k] + vals[3 + k]);
            assert!((out.to_vec()[i * 3 + k] - avg).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_matches_per_node_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 6;
    let d = 4;
    let layer = attn_layer(&mut rng, d, d);
    // A random tree over six nodes plus self-loops.
    let edges = [(0usize, 1usize), (0, 2), (1, 3), (1, 4), (2, 5)];
    let mut neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for &(a, b) in &edges {
        neighbors[a].push(b);
        neighbors[b].push(a);
    }
    for set in neighbors.iter_mut() {
        set.sort_unstable();
    }
    let v_data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tape = Tape::new();
    let v = Tensor::new(&[n, d], v_data.clone()).unwrap();
    let out = graph_attention_layer(&tape, &v, &neighbors, &layer).unwrap();

    // Independent per-node loop.
    let wk = layer.w_k.to_vec();
    let wq = layer.w_q.to_vec();
    let wv = layer.w_v.to_vec();
    let project = |w: &[f64], i: usize| -> Vec<f64> {
        (0..d)
            .map(|j| (0..d).map(|k| v_data[i * d + k] * w[k * d + j]).sum())
            .collect()
    };
    for i in 0..n {
        let q = project(&wq, i);
        let mut weights = Vec::new();
        for &j in &neighbors[i] {
            let k = project(&wk, j);
            let logit: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
            weights.push(logit);
        }
        let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = weights.iter().map(|w| (w - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut expected = vec![0.0; d];
        let mut total_attention = 0.0;
        for (idx, &j) in neighbors[i].iter().enumerate() {
            let a = exps[idx] / z;
            total_attention += a;
            let val = project(&wv, j);
            for k in 0..d {
                expected[k] += a * val[k];
            }
        }
        assert!((total_attention - 1.0).abs() < 1e-12);
        for k in 0..d {
            assert!((out.to_vec()[i * d + k] - expected[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_never_leaks_outside_neighbors() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let d = 4;
    let layer = attn_layer(&mut rng, d, d);
    // Node 0 neighbors {0, 1}; node 3 is unreachable from 0.
    let neighbors = vec![vec![0, 1], vec![0, 1, 2], vec![1, 2, 3], vec![2, 3]];
    let mut v_data: Vec<f64> = (0..4 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tape = Tape::new();
    let before = graph_attention_layer(
        &tape,
        &Tensor::new(&[4, d], v_data.clone()).unwrap(),
        &neighbors,
        &layer,
    )
    .unwrap()
    .to_vec();
    for k in 0..d {
        v_data[3 * d + k] = 0.0;
    }
    let after = graph_attention_layer(
        &tape,
        &Tensor::new(&[4, d], v_data).unwrap(),
        &neighbors,
        &layer,
    )
    .unwrap()
    .to_vec();
    // Rows 0 and 1 cannot see node 3 at all.
    assert_eq!(before[..2 * d], after[..2 * d]);
    assert_ne!(before[2 * d..], after[2 * d..]);
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let n = 4;
    let d = 3;
    let layer = attn_layer(&mut rng, d, d);
    let v = Tensor::param(&[n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let neighbors = vec![vec![0, 1], vec![0, 1, 2], vec![1, 2, 3], vec![2, 3]];
    let params = vec![
        v.clone(),
        layer.w_k.clone(),
        layer.w_q.clone(),
        layer.w_v.clone(),
    ];
    let err = grad_check_params(
        |tape| {
            let out = graph_attention_layer(tape, &v, &neighbors, &layer)?;
            let sq = tape.mul(&out, &out)?;
            tape.sum(&sq)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "attention grad error {err}");
}

// ── head and loss ───────────────────────────────────────────────────

#[test]
fn classify_zero_head_is_uniform() {
    let tape = Tape::new();
    let head = HeadParams {
        w1: Tensor::zeros(&[5, 4]).unwrap(),
        b1: Tensor::zeros(&[4]).unwrap(),
        w2: Tensor::zeros(&[4, 3]).unwrap(),
        b2: Tensor::zeros(&[3]).unwrap(),
    };
    let features = Tensor::new(&[2, 5], (0..10).map(|i| i as f64).collect()).unwrap();
    let p = classify(&tape, &features, &head, 0.2, &mut Mode::Eval).unwrap();
    for v in p.to_vec() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn classify_logit_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let head = HeadParams {
        w1: Tensor::param(&[5, 4], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        b1: Tensor::param(&[4], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        w2: Tensor::param(&[4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        b2: Tensor::param(&[3], vec![0.1, -0.4, 0.9]).unwrap(),
    };
    let features =
        Tensor::new(&[3, 5], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let tape = Tape::no_grad();
    let p1 = classify(&tape, &features, &head, 0.2, &mut Mode::Eval)
        .unwrap()
        .to_vec();
    head.b2.update_data(|d| d.iter_mut().for_each(|v| *v += 3.7));
    let p2 = classify(&tape, &features, &head, 0.2, &mut Mode::Eval)
        .unwrap()
        .to_vec();
    for (a, b) in p1.iter().zip(&p2) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn nll_perfect_prediction_is_zero() {
    use crate::corpus::EmphasisLabel::{B, O};
    let tape = Tape::new();
    let p = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let (loss, clamped) = nll_loss(&tape, &p, &[B, O]).unwrap();
    assert_eq!(loss.item(), 0.0);
    assert_eq!(clamped, 0);
}

#[test]
fn nll_uniform_is_n_log_three() {
    use crate::corpus::EmphasisLabel::{B, I, O};
    let tape = Tape::new();
    let p = Tensor::new(&[3, 3], vec![1.0 / 3.0; 9]).unwrap();
    let (loss, _) = nll_loss(&tape, &p, &[B, I, O]).unwrap();
    assert!((loss.item() - 3.0 * 3.0f64.ln()).abs() < 1e-12);
}

#[test]
fn nll_matches_direct_oracle_and_counts_clamps() {
    use crate::corpus::EmphasisLabel::{B, I};
    let tape = Tape::new();
    let rows = vec![0.7, 0.2, 0.1, 0.0, 0.5, 0.5, 0.25, 0.25, 0.5];
    let p = Tensor::new(&[3, 3], rows.clone()).unwrap();
    let labels = [B, B, I];
    let (loss, clamped) = nll_loss(&tape, &p, &labels).unwrap();
    // The zero at the second gold label clamps to the floor.
    assert_eq!(clamped, 1);
    let expected = -(rows[0].ln() + PROB_FLOOR.ln() + rows[7].ln());
    assert!((loss.item() - expected).abs() < 1e-9);
}

#[test]
fn weighted_nll_equals_sum_of_samples() {
    use crate::corpus::EmphasisLabel::{B, I, O};
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let tape = Tape::new();
    let n = 4;
    let logits =
        Tensor::new(&[n, 3], (0..n * 3).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let p = tape.softmax_rows(&logits).unwrap();
    let samples = [
        [B, I, O, O],
        [B, O, O, B],
        [O, I, I, B],
    ];
    let mut total = 0.0;
    let mut counts = vec![0.0; n * 3];
    for labels in &samples {
        let (loss, _) = nll_loss(&tape, &p, labels).unwrap();
        total += loss.item();
        for (i, l) in labels.iter().enumerate() {
            counts[i * 3 + l.class_index()] += 1.0;
        }
    }
    let (weighted, _) = nll_loss_weighted(&tape, &p, &counts).unwrap();
    assert!((weighted.item() - total).abs() < 1e-12);
}

// ── forward ─────────────────────────────────────────────────────────

#[test]
fn forward_variant_shapes_and_simplex() {
    let dims = tiny_dims();
    for variant in Variant::reportable() {
        let f = fixture(&dims, variant, 21);
        let tape = Tape::no_grad();
        let out = forward(&tape, &f.inputs(), &f.params, &mut Mode::Eval).unwrap();
        let n = f.token_ids.len();
        assert_eq!(out.p.shape(), &[n, 3]);
        assert_eq!(out.h.is_some(), variant.uses_encoder());
        assert_eq!(out.w_l.is_some(), variant.uses_wsg());
        assert_eq!(out.v_l.is_some(), variant.uses_ssg());
        for row in out.p.to_vec().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        for e in out.emphasis_prob() {
            assert!((0.0..=1.0).contains(&e));
        }
    }
}

#[test]
fn forward_full_preset_shape_oracle() {
    // Four words through the 300-d preset: h 4x1024, w_L 4x300, v_L 4x300,
    // p 4x3.
    let dims = ModelDims::glove();
    let tree = crate::parse_tree::parse_sexpr(
        "(S (NP (PRP I)) (VP (VBP love) (S (VP (VBG playing) (NP (NN basketball))))))",
    )
    .unwrap();
    let tags = TagVocab::build([&tree]);
    let ssg = build_ssg(&tree, &tags);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let word_init: Vec<f64> = (0..6 * dims.d1).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let params =
        ModelParams::init(&dims, Variant::Full, word_init, tags.len(), &mut rng).unwrap();
    let token_ids = vec![1, 2, 3, 4];
    let word_tag_ids: Vec<usize> = ssg
        .word_alignment
        .iter()
        .map(|&node| ssg.node_tags[node])
        .collect();
    let vecs: Vec<f64> = (0..4 * dims.d1).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let graph = build_wsg(&Tensor::new(&[4, dims.d1], vecs).unwrap()).unwrap();
    let inputs = SentenceInputs {
        token_ids: &token_ids,
        word_tag_ids: &word_tag_ids,
        ssg_node_tags: &ssg.node_tags,
        ssg_neighbors: &ssg.neighbors,
        ssg_word_alignment: &ssg.word_alignment,
        a_hat: Some(&graph.a_hat),
    };
    let tape = Tape::no_grad();
    let out = forward(&tape, &inputs, &params, &mut Mode::Eval).unwrap();
    assert_eq!(out.h.as_ref().unwrap().shape(), &[4, 1024]);
    assert_eq!(out.w_l.as_ref().unwrap().shape(), &[4, 300]);
    assert_eq!(out.v_l.as_ref().unwrap().shape(), &[4, 300]);
    assert_eq!(out.p.shape(), &[4, 3]);
}

#[test]
fn forward_eval_mode_is_bitwise_deterministic() {
    let f = fixture(&tiny_dims(), Variant::Full, 23);
    let run = || {
        let tape = Tape::no_grad();
        forward(&tape, &f.inputs(), &f.params, &mut Mode::Eval)
            .unwrap()
            .p
            .to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn forward_train_mode_uses_dropout() {
    let f = fixture(&tiny_dims(), Variant::Full, 24);
    let tape = Tape::new();
    let mut rng_a = ChaCha8Rng::seed_from_u64(100);
    let mut rng_b = ChaCha8Rng::seed_from_u64(101);
    let p_eval = forward(&tape, &f.inputs(), &f.params, &mut Mode::Eval)
        .unwrap()
        .p
        .to_vec();
    let p_a = forward(
        &tape,
        &f.inputs(),
        &f.params,
        &mut Mode::Train {
            dropout: 0.5,
            rng: &mut rng_a,
        },
    )
    .unwrap()
    .p
    .to_vec();
    let p_b = forward(
        &tape,
        &f.inputs(),
        &f.params,
        &mut Mode::Train {
            dropout: 0.5,
            rng: &mut rng_b,
        },
    )
    .unwrap()
    .p
    .to_vec();
    assert_ne!(p_eval, p_a);
    assert_ne!(p_a, p_b);
}

#[test]
fn ablation_containment_unused_branches_are_inert() {
    use crate::corpus::EmphasisLabel::{B, O};
    let dims = tiny_dims();
    for variant in [Variant::NoWsg, Variant::NoSsg, Variant::NoBoth] {
        let f = fixture(&dims, variant, 25);
        let labels = vec![B, O, O];
        let run = || {
            let tape = Tape::new();
            let out = forward(&tape, &f.inputs(), &f.params, &mut Mode::Eval).unwrap();
            let (loss, _) = nll_loss(&tape, &out.p, &labels).unwrap();
            (out.p.to_vec(), loss.item())
        };
        let (p_before, loss_before) = run();
        let unused = f.params.unused_tensors();
        assert!(!unused.is_empty());
        for (_, t) in &unused {
            t.update_data(|d| d.iter_mut().for_each(|v| *v += 0.5));
        }
        let (p_after, loss_after) = run();
        assert_eq!(p_before, p_after, "variant {variant:?} output changed");
        assert_eq!(loss_before, loss_after);
    }
}

#[test]
fn full_model_loss_gradients_match_finite_differences() {
    use crate::corpus::EmphasisLabel::{B, I, O};
    let dims = tiny_dims();
    let f = fixture(&dims, Variant::Full, 26);
    let labels = vec![B, I, O];
    let params: Vec<Tensor> = f.params.named_tensors().into_iter().map(|(_, t)| t).collect();
    let err = grad_check_params(
        |tape| {
            let out = forward(tape, &f.inputs(), &f.params, &mut Mode::Eval)?;
            let (loss, _) = nll_loss(tape, &out.p, &labels)?;
            Ok(loss)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "full model grad error {err}");
}

#[test]
fn snapshot_attach_round_trip() {
    let f = fixture(&tiny_dims(), Variant::Full, 27);
    let snap = f.params.snapshot();
    let attached = ModelParams::attach(&snap, false).unwrap();
    let tape = Tape::no_grad();
    let a = forward(&tape, &f.inputs(), &f.params, &mut Mode::Eval)
        .unwrap()
        .p
        .to_vec();
    let b = forward(&tape, &f.inputs(), &attached, &mut Mode::Eval)
        .unwrap()
        .p
        .to_vec();
    assert_eq!(a, b);
    // Attached in eval mode records nothing.
    assert!(!attached.word_embed.requires_grad());
}

#[test]
fn variant_parse_round_trip() {
    for v in [
        Variant::Full,
        Variant::NoWsg,
        Variant::NoSsg,
        Variant::NoBoth,
        Variant::SsgOnly,
    ] {
        assert_eq!(Variant::parse(v.as_str()), Some(v));
    }
    assert_eq!(Variant::parse("bogus"), None);
}
