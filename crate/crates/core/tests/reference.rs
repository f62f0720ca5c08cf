mod common;

use common::*;
use isa_core::*;
use proptest::prelude::*;

fn qkv(seed: u64, s_q: usize, s_k: usize, d: usize, amp: f64) -> (Tensor4<f64>, Tensor4<f64>, Tensor4<f64>) {
    let mut r = rng(seed);
    (
        uniform(&mut r, Dims::new(1, 2, s_q, d), amp),
        uniform(&mut r, Dims::new(1, 2, s_k, d), amp),
        uniform(&mut r, Dims::new(1, 2, s_k, d), 1.0),
    )
}

fn bundle(g: &GradBundle<f64>) -> Vec<f64> {
    [g.dq.as_slice(), g.dk.as_slice(), g.dv.as_slice()].concat()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn full_matches_direct_loop(seed in any::<u64>(), sq in 1usize..12, sk in 1usize..20, d in 1usize..9) {
        let (q, k, v) = qkv(seed, sq, sk, d, 2.0);
        let s = default_scale(d);
        let o = full_attention(&q, &k, &v, s, None).unwrap();
        prop_assert!(rel_inf(o.as_slice(), &naive_attention(&q, &k, &v, s)) <= 1e-12);
    }

    #[test]
    fn online_matches_full_under_any_order(seed in any::<u64>(), sk in 1usize..40, b in 1usize..9, perm_seed in any::<u64>()) {
        let (q, k, v) = qkv(seed, 7, sk, 4, 2.0);
        let layout = BlockLayout::new(sk, b).unwrap();
        let mut order: Vec<usize> = (0..layout.num_blocks()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng(perm_seed));
        let s = default_scale(4);
        let full = full_attention(&q, &k, &v, s, None).unwrap();
        let online = online_softmax_attention_ordered(&q, &k, &v, s, &layout, &order, None).unwrap();
        prop_assert!(rel_inf(online.as_slice(), full.as_slice()) <= 1e-12);
    }

    #[test]
    fn weights_sum_to_one(seed in any::<u64>(), sk in 1usize..30, amp in 0.1f64..20.0) {
        let (q, k, _) = qkv(seed, 5, sk, 3, amp);
        let ones = Tensor4::from_fn(k.dims(), |_, _, _, _| 1.0).unwrap();
        let o = full_attention(&q, &k, &ones, 1.0, None).unwrap();
        prop_assert!(o.as_slice().iter().all(|x| (x - 1.0).abs() <= 1e-12));
        let of = full_attention(&q.cast::<f32>(), &k.cast::<f32>(), &ones.cast::<f32>(), 1.0, None).unwrap();
        prop_assert!(of.as_slice().iter().all(|x| (x - 1.0).abs() <= 1e-5));
    }

    #[test]
    fn shift_invariance(seed in any::<u64>(), sk in 1usize..20, t in -50.0f64..50.0) {
        // one query per head: moving every key along q shifts the whole score row by scale * t
        let (q, k, v) = qkv(seed, 1, sk, 4, 1.0);
        let s = default_scale(4);
        let shifted = Tensor4::from_fn(k.dims(), |b, h, r, c| {
            let qr = q.row(b, h, 0);
            let qq: f64 = qr.iter().map(|x| x * x).sum();
            k.get(b, h, r, c) + t * qr[c] / qq
        }).unwrap();
        let base = full_attention(&q, &k, &v, s, None).unwrap();
        let moved = full_attention(&q, &shifted, &v, s, None).unwrap();
        prop_assert!(rel_inf(moved.as_slice(), base.as_slice()) <= 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences(seed in any::<u64>(), sq in 1usize..9, sk in 1usize..17, d in 1usize..9) {
        let (q, k, v) = qkv(seed, sq, sk, d, 1.0);
        let d_out = uniform(&mut rng(seed ^ 7), q.dims(), 1.0);
        let s = default_scale(d);
        let g = full_attention_backward(&q, &k, &v, s, &d_out, None).unwrap();
        let f = |q: &Tensor4<f64>, k: &Tensor4<f64>, v: &Tensor4<f64>| full_attention(q, k, v, s, None).unwrap().as_slice().to_vec();
        let fd = [
            fd_grad(&q, d_out.as_slice(), 1e-5, |x| f(x, &k, &v)),
            fd_grad(&k, d_out.as_slice(), 1e-5, |x| f(&q, x, &v)),
            fd_grad(&v, d_out.as_slice(), 1e-5, |x| f(&q, &k, x)),
        ].concat();
        prop_assert!(rel_inf(&bundle(&g), &fd) <= 1e-6);
    }
}

#[test]
fn singleton_key_returns_its_value() {
    let (q, _, _) = qkv(1, 3, 1, 2, 5.0);
    let k = Tensor4::new(Dims::new(1, 1, 1, 2), vec![0.3, -0.7]).unwrap();
    let v = Tensor4::new(Dims::new(1, 1, 1, 2), vec![4.0, -2.0]).unwrap();
    let q = Tensor4::new(Dims::new(1, 1, 3, 2), q.head_flat(0).as_slice().to_vec()).unwrap();
    let o = full_attention(&q, &k, &v, default_scale(2), None).unwrap();
    for i in 0..3 {
        assert_eq!(o.row(0, 0, i), &[4.0, -2.0]);
    }
}

#[test]
fn equal_scores_average_values() {
    let q = Tensor4::new(Dims::new(1, 1, 1, 1), vec![0.8]).unwrap();
    let k = Tensor4::new(Dims::new(1, 1, 2, 1), vec![1.5, 1.5]).unwrap();
    let v = Tensor4::new(Dims::new(1, 1, 2, 1), vec![1.0, 3.0]).unwrap();
    let o = full_attention(&q, &k, &v, 1.0, None).unwrap();
    assert!((o.as_slice()[0] - 2.0f64).abs() <= 1e-15);
}

#[test]
fn small_seeded_instance() {
    let mut r = rng(3);
    let dims = Dims::new(1, 1, 3, 2);
    let (q, k, v) = (uniform(&mut r, dims, 1.0), uniform(&mut r, dims, 1.0), uniform(&mut r, dims, 1.0));
    let s = default_scale(2);
    let o = full_attention(&q, &k, &v, s, None).unwrap();
    assert!(rel_inf(o.as_slice(), &naive_attention(&q, &k, &v, s)) <= 1e-6);
}

#[test]
fn single_block_online_is_bit_identical() {
    let (q, k, v) = qkv(11, 6, 9, 5, 2.0);
    let s = default_scale(5);
    let layout = BlockLayout::new(9, 9).unwrap();
    assert_eq!(
        online_softmax_attention(&q, &k, &v, s, &layout, None).unwrap(),
        full_attention(&q, &k, &v, s, None).unwrap()
    );
}

#[test]
fn huge_scores_stay_finite() {
    // one score near 1e4, the rest far below
    let q = Tensor4::new(Dims::new(1, 1, 1, 2), vec![100.0, 0.0]).unwrap();
    let k = Tensor4::new(Dims::new(1, 1, 4, 2), vec![100.0, 0.0, 99.99, 1.0, -100.0, 0.0, 0.0, 5.0]).unwrap();
    let v = Tensor4::new(Dims::new(1, 1, 4, 2), vec![1.0, 0.0, 0.0, 1.0, 5.0, 5.0, 2.0, 2.0]).unwrap();
    let layout = BlockLayout::new(4, 1).unwrap();
    let full = full_attention(&q, &k, &v, 1.0, None).unwrap();
    let online = online_softmax_attention_ordered(&q, &k, &v, 1.0, &layout, &[3, 2, 1, 0], None).unwrap();
    assert!(full.as_slice().iter().all(|x| x.is_finite()));
    // scores 1e4 and 9999: weights 1/(1+e^-1) and e^-1/(1+e^-1)
    let w = 1.0 / (1.0 + (-1.0f64).exp());
    let expect = [w, 1.0 - w];
    assert!(rel_inf(full.as_slice(), &expect) <= 1e-14);
    assert!(rel_inf(online.as_slice(), &expect) <= 1e-14);
    let single = full_attention(&q.cast::<f32>(), &k.cast::<f32>(), &v.cast::<f32>(), 1.0, None).unwrap();
    assert!(single.as_slice().iter().all(|x| x.is_finite()));
}

#[test]
fn zero_output_gradient_gives_zero_gradients() {
    let (q, k, v) = qkv(2, 4, 6, 3, 1.0);
    let z = Tensor4::zeros(q.dims()).unwrap();
    let g = full_attention_backward(&q, &k, &v, 0.5, &z, None).unwrap();
    assert!(bundle(&g).iter().all(|x| *x == 0.0));
}

#[test]
fn singleton_backward_passes_gradient_to_value() {
    let one = |x: f64| Tensor4::new(Dims::new(1, 1, 1, 1), vec![x]).unwrap();
    let g = full_attention_backward(&one(0.4), &one(-1.3), &one(2.0), 1.0, &one(0.7), None).unwrap();
    assert_eq!(g.dv.as_slice(), &[0.7]);
    assert_eq!(g.dq.as_slice(), &[0.0]);
    assert_eq!(g.dk.as_slice(), &[0.0]);
}

#[test]
fn masked_keys_get_no_weight() {
    let (q, k, v) = qkv(8, 3, 5, 2, 1.0);
    let mask = AttnMask::keys(vec![true, false, true, false, false]);
    let o = full_attention(&q, &k, &v, 1.0, Some(&mask)).unwrap();
    let keep = |x: &Tensor4<f64>| {
        let rows: Vec<f64> = x.heads().flat_map(|h| [h.row(0).to_vec(), h.row(2).to_vec()].concat()).collect();
        Tensor4::new(Dims::new(1, 2, 2, 2), rows).unwrap()
    };
    let direct = naive_attention(&q, &keep(&k), &keep(&v), 1.0);
    assert!(rel_inf(o.as_slice(), &direct) <= 1e-14);
    let none = AttnMask::keys(vec![false; 5]);
    assert!(matches!(full_attention(&q, &k, &v, 1.0, Some(&none)), Err(IsaError::DegenerateRow { .. })));
}

#[test]
fn bad_inputs_are_rejected() {
    let (q, k, v) = qkv(1, 2, 3, 2, 1.0);
    assert!(matches!(full_attention(&q, &k, &v, 0.0, None), Err(IsaError::Config(_))));
    let (_, k4, _) = qkv(1, 2, 4, 2, 1.0);
    assert!(matches!(full_attention(&q, &k4, &v, 1.0, None), Err(IsaError::Layout(_))));
    let layout = BlockLayout::new(3, 1).unwrap();
    let bad = online_softmax_attention_ordered(&q, &k, &v, 1.0, &layout, &[0, 0, 1], None);
    assert!(matches!(bad, Err(IsaError::Contract(_))));
}

#[test]
fn online_state_statistics() {
    let mut st = OnlineState::new(1);
    assert_eq!(st.norm(), 0.0);
    st.absorb_block(&[1.0, 3.0], &[10.0f64, 20.0]);
    st.absorb_block(&[2.0], &[30.0f64]);
    assert_eq!(st.max(), 3.0);
    let z = (-2.0f64).exp() + 1.0 + (-1.0f64).exp();
    assert!((st.norm() - z).abs() <= 1e-15);
    let out = st.finalize().unwrap();
    let expect = (10.0 * (-2.0f64).exp() + 20.0 + 30.0 * (-1.0f64).exp()) / z;
    assert!((out[0] - expect).abs() <= 1e-13);
}
