//! Non-local blocks against direct nested-loop evaluation.

use msod_core::nlgm::{
    channel_nonlocal, channel_nonlocal_parts, dsnlb, nlgm_forward, spatial_nonlocal,
    spatial_nonlocal_parts, DsnlbParams, NlgmParams, NonLocalConfig, SimilarityAxis,
};
use msod_core::params::{Graph, Init, ParamSet};
use msod_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod oracles;
use oracles::*;

#[test]
fn spatial_matches_loops_on_fifty_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..50 {
        let shape = random_shape(&mut rng);
        let (params, p) = random_block(shape[0], trial);
        let a_t = random(&shape, &mut rng);
        let mut g = Graph::new(&params, false);
        let a = g.tape.constant(a_t.clone());
        let (sn, s) = spatial_nonlocal_parts(&mut g, a, &p, SimilarityAxis::Key).unwrap();
        let (want, want_s) = spatial_oracle(&params, &p, &rows(&a_t));
        assert!(
            max_diff(g.tape.value(sn), &want) <= 1e-12,
            "trial {trial} {shape:?}"
        );
        assert!(max_diff(g.tape.value(s), &want_s) <= 1e-12, "trial {trial}");
        for row in want_s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let st = g.tape.value(s);
        let k = st.shape()[0];
        for i in 0..k {
            let sum: f64 = st.data()[i * k..(i + 1) * k].iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "row {i} sums to {sum}");
        }
    }
}

#[test]
fn channel_matches_loops_on_fifty_tensors() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..50 {
        let shape = random_shape(&mut rng);
        let a_t = random(&shape, &mut rng);
        let mut tape = Tape::new();
        let a = tape.constant(a_t.clone());
        let (cn, x) = channel_nonlocal_parts(&mut tape, a, SimilarityAxis::Key).unwrap();
        let (want, want_x) = channel_oracle(&rows(&a_t));
        assert!(
            max_diff(tape.value(cn), &want) <= 1e-12,
            "trial {trial} {shape:?}"
        );
        assert!(max_diff(tape.value(x), &want_x) <= 1e-12);
        let xt = tape.value(x);
        let c = xt.shape()[0];
        for i in 0..c {
            let sum: f64 = xt.data()[i * c..(i + 1) * c].iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn example_shapes_from_the_oracle_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (params, p) = random_block(2, 3);
    let a_t = random(&[2, 3, 3], &mut rng);
    let mut g = Graph::new(&params, false);
    let a = g.tape.constant(a_t.clone());
    let sn = spatial_nonlocal(&mut g, a, &p, SimilarityAxis::Key).unwrap();
    assert!(
        max_diff(
            g.tape.value(sn),
            &spatial_oracle(&params, &p, &rows(&a_t)).0
        ) <= 1e-12
    );

    let a_t = random(&[3, 2, 2], &mut rng);
    let mut tape = Tape::new();
    let a = tape.constant(a_t.clone());
    let cn = channel_nonlocal(&mut tape, a, SimilarityAxis::Key).unwrap();
    assert!(max_diff(tape.value(cn), &channel_oracle(&rows(&a_t)).0) <= 1e-12);
}

#[test]
fn trivial_identities_hold_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // zero value projection: SN = A
    let (mut params, p) = random_block(3, 4);
    params
        .replace(p.value.weight, Tensor::zeros(&[3, 3, 1, 1]))
        .unwrap();
    params
        .replace(p.value.bias.unwrap(), Tensor::zeros(&[3]))
        .unwrap();
    let a_t = random(&[3, 2, 3], &mut rng);
    let mut g = Graph::new(&params, false);
    let a = g.tape.constant(a_t.clone());
    let sn = spatial_nonlocal(&mut g, a, &p, SimilarityAxis::Key).unwrap();
    assert_eq!(g.tape.value(sn), &a_t);

    // one channel: CN = 2A
    let a_t = random(&[1, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let a = tape.constant(a_t.clone());
    let cn = channel_nonlocal(&mut tape, a, SimilarityAxis::Key).unwrap();
    assert_eq!(tape.value(cn), &a_t.map(|v| 2.0 * v));

    // zero input: CN = 0
    let z = tape.constant(Tensor::zeros(&[4, 2, 2]));
    let cn = channel_nonlocal(&mut tape, z, SimilarityAxis::Key).unwrap();
    assert!(tape.value(cn).data().iter().all(|&v| v == 0.0));
}

#[test]
fn residual_part_is_the_attended_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (params, p) = random_block(3, 8);
    let a_t = random(&[3, 2, 2], &mut rng);
    let mut g = Graph::new(&params, false);
    let a = g.tape.constant(a_t.clone());
    let (sn, s) = spatial_nonlocal_parts(&mut g, a, &p, SimilarityAxis::Key).unwrap();
    let d = p.value.forward(&mut g, a).unwrap();
    let d = g.tape.reshape(d, &[3, 4]).unwrap();
    let st = g.tape.transpose(s).unwrap();
    let ds = g.tape.matmul(d, st).unwrap();
    let ds = g.tape.reshape(ds, &[3, 2, 2]).unwrap();
    let sum = g.tape.add(ds, a).unwrap();
    assert_eq!(g.tape.value(sn), g.tape.value(sum));
}

#[test]
fn dsnlb_is_projection_of_both_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..20 {
        let shape = random_shape(&mut rng);
        let (params, p) = random_block(shape[0], 100 + trial);
        let a_t = random(&shape, &mut rng);
        let mut g = Graph::new(&params, false);
        let a = g.tape.constant(a_t.clone());
        let n = dsnlb(&mut g, a, &p, NonLocalConfig::default()).unwrap();
        let want = dsnlb_oracle(&params, &p, &rows(&a_t));
        assert!(max_diff(g.tape.value(n), &want) <= 1e-12, "trial {trial}");
    }
}

#[test]
fn five_block_stack_matches_sequential_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut params = ParamSet::new();
    let stack = NlgmParams::new(&mut params, &Init::new(21), 4, 5).unwrap();
    randomize_biases(&mut params, 21);
    let a_t = random(&[4, 6, 6], &mut rng);
    let mut g = Graph::new(&params, false);
    let a = g.tape.constant(a_t.clone());
    let ns = nlgm_forward(&mut g, a, &stack, NonLocalConfig::default()).unwrap();
    assert_eq!(ns.len(), 5);
    // block 5 reads the source, block i reads block i+1
    let mut current = rows(&a_t);
    for i in (0..5).rev() {
        current = dsnlb_oracle(&params, &stack.blocks[i], &current);
        let got = g.tape.value(ns[i]);
        let scale = current.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff(got, &current) <= 1e-10 * scale, "N{}", i + 1);
    }
}

fn permute_positions(t: &Tensor, perm: &[usize]) -> Tensor {
    let (c, h, w) = t.chw().unwrap();
    let k = h * w;
    Tensor::from_fn(&[c, h, w], |i| t.data()[(i / k) * k + perm[i % k]])
}

fn permute_channels(t: &Tensor, perm: &[usize]) -> Tensor {
    let (c, h, w) = t.chw().unwrap();
    let k = h * w;
    let _ = c;
    Tensor::from_fn(t.shape(), |i| t.data()[perm[i / k] * k + i % k])
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spatial_is_position_equivariant(seed in any::<u64>(), c in 1usize..4, h in 1usize..4, w in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, p) = random_block(c, seed);
        let a_t = random(&[c, h, w], &mut rng);
        let perm = shuffled(h * w, &mut rng);
        let run = |x: Tensor| {
            let mut g = Graph::new(&params, false);
            let a = g.tape.constant(x);
            let sn = spatial_nonlocal(&mut g, a, &p, SimilarityAxis::Key).unwrap();
            g.tape.value(sn).clone()
        };
        let lhs = run(permute_positions(&a_t, &perm));
        let rhs = permute_positions(&run(a_t), &perm);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn channel_is_channel_equivariant(seed in any::<u64>(), c in 1usize..5, h in 1usize..4, w in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_t = random(&[c, h, w], &mut rng);
        let perm = shuffled(c, &mut rng);
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let a = tape.constant(x);
            let cn = channel_nonlocal(&mut tape, a, SimilarityAxis::Key).unwrap();
            tape.value(cn).clone()
        };
        let lhs = run(permute_channels(&a_t, &perm));
        let rhs = permute_channels(&run(a_t), &perm);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }
}

#[test]
fn cancelled_side_has_no_bias() {
    let mut params = ParamSet::new();
    let init = Init::new(1);
    let k = DsnlbParams::configured(&mut params, &init, "k", 3, SimilarityAxis::Key, 1.0).unwrap();
    let q =
        DsnlbParams::configured(&mut params, &init, "q", 3, SimilarityAxis::Query, 1.0).unwrap();
    assert!(k.key.bias.is_none() && k.query.bias.is_some());
    assert!(q.query.bias.is_none() && q.key.bias.is_some());

    // a key bias would only shift each softmax row
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (params, p) = random_block(3, 2);
    let a_t = random(&[3, 2, 3], &mut rng);
    let a = rows(&a_t);
    let (_, s) = spatial_oracle(&params, &p, &a);
    let b = conv1x1(&params, &p.query, &a);
    let c = conv1x1(&params, &p.key, &a);
    let shift = [0.7, -1.3, 0.4];
    let k = a[0].len();
    let mut shifted = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            for ch in 0..3 {
                shifted[i][j] += b[ch][i] * (c[ch][j] + shift[ch]);
            }
        }
    }
    softmax_rows(&mut shifted);
    for (x, y) in s.iter().flatten().zip(shifted.iter().flatten()) {
        assert!((x - y).abs() <= 1e-14);
    }
}
