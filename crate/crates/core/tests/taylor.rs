mod common;

use common::*;
use isa_core::*;
use proptest::prelude::*;
use rand::Rng;

struct Case {
    q: Tensor4<f64>,
    k: Tensor4<f64>,
    v: Tensor4<f64>,
    q_layout: BlockLayout,
    kv_layout: BlockLayout,
    mask: BlockMask,
}

impl Case {
    fn input(&self, scale: f64) -> TaylorKernelInput<'_, f64> {
        TaylorKernelInput::new(&self.q, self.q_layout.clone(), &self.k, &self.v, self.kv_layout.clone(), self.mask.clone(), scale)
            .unwrap()
    }
}

/// Random instance with ragged blocks and a random non-empty exact list per query block.
fn random_case(seed: u64, sq: usize, sk: usize, b: usize, d: usize, amp: f64) -> Case {
    let mut r = rng(seed);
    let heads = 2;
    let q = uniform(&mut r, Dims::new(1, heads, sq, d), amp);
    let k = uniform(&mut r, Dims::new(1, heads, sk, d), amp);
    let v = uniform(&mut r, Dims::new(1, heads, sk, d), 1.0);
    let q_layout = BlockLayout::new(sq, b).unwrap();
    let kv_layout = BlockLayout::new(sk, b).unwrap();
    let nk = kv_layout.num_blocks();
    let lists = (0..heads)
        .map(|_| {
            (0..q_layout.num_blocks())
                .map(|_| {
                    let mut l: Vec<usize> = (0..nk).filter(|_| r.random_bool(0.3)).collect();
                    if l.is_empty() {
                        l.push(r.random_range(0..nk));
                    }
                    l
                })
                .collect()
        })
        .collect();
    let mask = BlockMask { lists, k: 0, num_key_blocks: nk };
    Case { q, k, v, q_layout, kv_layout, mask }
}

fn bundle(g: &GradBundle<f64>) -> Vec<f64> {
    [g.dq.as_slice(), g.dk.as_slice(), g.dv.as_slice()].concat()
}

const ORDERS: [VisitOrder; 4] = [VisitOrder::ExactFirst, VisitOrder::TaylorFirst, VisitOrder::Ascending, VisitOrder::Descending];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_is_softmax_over_surrogate_row(seed in any::<u64>(), sq in 1usize..20, sk in 1usize..30, b in 1usize..7, d in 1usize..6) {
        let c = random_case(seed, sq, sk, b, d, 2.0);
        let s = default_scale(d);
        let out = taylor_sparse_forward(&c.input(s)).unwrap();
        let oracle = surrogate_attention(&c.q, &c.q_layout, &c.k, &c.v, &c.kv_layout, &c.mask.lists, s);
        prop_assert!(rel_inf(out.as_slice(), &oracle) <= 1e-12);
    }

    #[test]
    fn visit_order_does_not_matter(seed in any::<u64>(), sk in 1usize..40, b in 1usize..7) {
        let c = random_case(seed, 9, sk, b, 4, 3.0);
        let input = c.input(0.5);
        let (base, f0) = taylor_sparse_forward_counted(&input, VisitOrder::ExactFirst).unwrap();
        for order in ORDERS {
            let (o, f) = taylor_sparse_forward_counted(&input, order).unwrap();
            prop_assert!(rel_inf(o.as_slice(), base.as_slice()) <= 1e-12, "{:?}", order);
            prop_assert_eq!(f, f0);
        }
    }

    #[test]
    fn counted_work_matches_closed_form(seed in any::<u64>(), sq in 1usize..20, sk in 1usize..30, b in 1usize..7) {
        let c = random_case(seed, sq, sk, b, 3, 1.0);
        let input = c.input(1.0);
        let (_, measured) = taylor_sparse_forward_counted(&input, VisitOrder::Ascending).unwrap();
        prop_assert_eq!(measured, flop_count(&input));
    }

    #[test]
    fn backward_matches_finite_differences(seed in any::<u64>(), sq in 1usize..9, sk in 1usize..17, d in 1usize..5) {
        let c = random_case(seed, sq, sk, 4, d, 1.0);
        let s = default_scale(d);
        let d_out = uniform(&mut rng(seed ^ 3), c.q.dims(), 1.0);
        let g = taylor_sparse_backward(&c.input(s), &d_out).unwrap();
        let f = |q: &Tensor4<f64>, k: &Tensor4<f64>, v: &Tensor4<f64>| {
            let input = TaylorKernelInput::new(q, c.q_layout.clone(), k, v, c.kv_layout.clone(), c.mask.clone(), s).unwrap();
            taylor_sparse_forward(&input).unwrap().as_slice().to_vec()
        };
        let fd = [
            fd_grad(&c.q, d_out.as_slice(), 1e-5, |x| f(x, &c.k, &c.v)),
            fd_grad(&c.k, d_out.as_slice(), 1e-5, |x| f(&c.q, x, &c.v)),
            fd_grad(&c.v, d_out.as_slice(), 1e-5, |x| f(&c.q, &c.k, x)),
        ].concat();
        prop_assert!(rel_inf(&bundle(&g), &fd) <= 1e-6);
    }

    #[test]
    fn single_precision_stays_finite(seed in any::<u64>(), sk in 1usize..40) {
        // |score| <= 80 with scale 1 and D = 5: entries bounded by 4
        let c = random_case(seed, 8, sk, 4, 5, 4.0);
        let (q, k, v) = (c.q.cast::<f32>(), c.k.cast::<f32>(), c.v.cast::<f32>());
        let input = TaylorKernelInput::new(&q, c.q_layout.clone(), &k, &v, c.kv_layout.clone(), c.mask.clone(), 1.0).unwrap();
        let out = taylor_sparse_forward(&input).unwrap();
        prop_assert!(out.as_slice().iter().all(|x| x.is_finite()));
    }
}

#[test]
fn constant_blocks_make_the_kernel_exact() {
    let mut r = rng(12);
    let (b, d) = (4, 3);
    let kv_layout = BlockLayout::new(22, b).unwrap();
    // one random row per block, repeated across the block
    let block_rows = uniform(&mut r, Dims::new(1, 2, kv_layout.num_blocks(), d), 2.0);
    let val_rows = uniform(&mut r, Dims::new(1, 2, kv_layout.num_blocks(), d), 1.0);
    let spread = |x: &Tensor4<f64>| {
        Tensor4::from_fn(Dims::new(1, 2, 22, d), |bb, h, s, c| x.get(bb, h, kv_layout.block_of(s).unwrap(), c)).unwrap()
    };
    let (k, v) = (spread(&block_rows), spread(&val_rows));
    let q = uniform(&mut r, Dims::new(1, 2, 10, d), 2.0);
    let q_layout = BlockLayout::new(10, b).unwrap();
    let mask = BlockMask { lists: vec![vec![vec![0]; q_layout.num_blocks()]; 2], k: 1, num_key_blocks: kv_layout.num_blocks() };
    let input = TaylorKernelInput::new(&q, q_layout, &k, &v, kv_layout, mask, 0.7).unwrap();
    let out = taylor_sparse_forward(&input).unwrap();
    let full = full_attention(&q, &k, &v, 0.7, None).unwrap();
    assert!(rel_inf(out.as_slice(), full.as_slice()) <= 1e-12);
}

#[test]
fn all_exact_mask_is_online_attention() {
    let c = random_case(4, 13, 27, 4, 5, 2.0);
    let mask = BlockMask::dense(2, c.q_layout.num_blocks(), c.kv_layout.num_blocks());
    let input = TaylorKernelInput::new(&c.q, c.q_layout.clone(), &c.k, &c.v, c.kv_layout.clone(), mask, 0.4).unwrap();
    let online = online_softmax_attention(&c.q, &c.k, &c.v, 0.4, &c.kv_layout, None).unwrap();
    let out = taylor_sparse_forward(&input).unwrap();
    assert!(rel_inf(out.as_slice(), online.as_slice()) <= 1e-12);

    let d_out = uniform(&mut rng(5), c.q.dims(), 1.0);
    let g = taylor_sparse_backward(&input, &d_out).unwrap();
    let dense = full_attention_backward(&c.q, &c.k, &c.v, 0.4, &d_out, None).unwrap();
    assert!(rel_inf(&bundle(&g), &bundle(&dense)) <= 1e-10);
}

#[test]
fn zero_output_gradient_gives_zero_gradients() {
    let c = random_case(8, 9, 14, 4, 3, 1.0);
    let z = Tensor4::zeros(c.q.dims()).unwrap();
    let g = taylor_sparse_backward(&c.input(0.5), &z).unwrap();
    assert!(bundle(&g).iter().all(|x| *x == 0.0));
}

#[test]
fn empty_exact_list_is_rejected() {
    let mut c = random_case(1, 4, 8, 4, 2, 1.0);
    c.mask.lists[1][0].clear();
    let err = TaylorKernelInput::new(&c.q, c.q_layout.clone(), &c.k, &c.v, c.kv_layout.clone(), c.mask.clone(), 1.0);
    assert!(matches!(err, Err(IsaError::Contract(_))));
}

#[test]
fn pair_cost_examples() {
    let mut r = rng(2);
    let dims = Dims::new(1, 1, 4, 2);
    let (q, k, v) = (uniform(&mut r, dims, 1.0), uniform(&mut r, dims, 1.0), uniform(&mut r, dims, 1.0));
    let layout = BlockLayout::new(4, 4).unwrap();
    let input = TaylorKernelInput::new(&q, layout.clone(), &k, &v, layout.clone(), BlockMask::dense(1, 1, 1), 1.0).unwrap();
    let f = flop_count(&input);
    assert_eq!((f.exact_mas, f.taylor_mas), (128, 0));
    // a Taylor-only visit of the same pair
    assert_eq!(taylor_pair_mas(4, 2), 32);
    assert_eq!(taylor_pair_mas(4, 2) as f64 / exact_pair_mas(4, 4, 2) as f64, 0.25);
}

#[test]
fn sparse_accounting_approaches_closed_form() {
    let (alpha_ns, b, d) = (0.0625, 8, 2);
    let limit = alpha_ns + (1.0 - alpha_ns) / b as f64;
    let mut last_gap = f64::INFINITY;
    for n in [17usize, 40, 100, 400, 1600] {
        let seq = n * b;
        let z = Tensor4::<f64>::zeros(Dims::new(1, 1, seq, d)).unwrap();
        let layout = BlockLayout::new(seq, b).unwrap();
        let k = exact_block_count(alpha_ns, n);
        let mask = BlockMask { lists: vec![vec![(0..k).collect(); n]], k, num_key_blocks: n };
        let input = TaylorKernelInput::new(&z, layout.clone(), &z, &z, layout, mask, 1.0).unwrap();
        let f = flop_count(&input);
        let expect = (k as f64 / n as f64) + (1.0 - k as f64 / n as f64) / b as f64;
        assert!((f.kernel_ratio() - expect).abs() <= 1e-12, "n={n}");
        let taylor_pairs = 1.0 - k as f64 / n as f64;
        assert!(taylor_pairs >= 0.9, "n={n}: taylor pair share {taylor_pairs}");
        // k / n sits within 1 / n of alpha_ns, so the gap shrinks like 1 / n
        let gap = (f.kernel_ratio() - limit).abs();
        assert!(gap <= (1.0 - 1.0 / b as f64) / n as f64 + 1e-12, "n={n}: gap {gap}");
        last_gap = gap;
    }
    assert!(last_gap <= 0.01 * limit);
}
