mod common;

use common::*;
use isa_core::*;
use proptest::prelude::*;

fn seeded(seed: u64, dims: Dims) -> Tensor4<f64> {
    uniform(&mut rng(seed), dims, 3.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn container_round_trip_is_bit_exact(seed in any::<u64>(), b in 1usize..3, h in 1usize..3, s in 0usize..20, d in 1usize..9) {
        let x = seeded(seed, Dims::new(b, h, s, d));
        prop_assert_eq!(decode::<f64>(&encode(&x)).unwrap(), x.clone());
        let xf = x.cast::<f32>();
        prop_assert_eq!(decode::<f32>(&encode(&xf)).unwrap(), xf);
    }

    #[test]
    fn truncation_reports_the_cut_offset(seed in any::<u64>(), s in 1usize..10, cut_frac in 0.0f64..1.0) {
        let bytes = encode(&seeded(seed, Dims::new(1, 1, s, 3)));
        let cut = ((bytes.len() as f64) * cut_frac) as usize;
        match decode::<f64>(&bytes[..cut]) {
            Err(IsaError::Format { offset, .. }) => prop_assert_eq!(offset, cut as u64),
            other => prop_assert!(false, "expected format error, got {:?}", other),
        }
    }

    #[test]
    fn block_mean_is_linear(seed in any::<u64>(), s in 1usize..40, b in 1usize..9, a in -3.0f64..3.0, c in -3.0f64..3.0) {
        let dims = Dims::new(1, 2, s, 3);
        let (x, y) = (seeded(seed, dims), seeded(seed ^ 0xabc, dims));
        let layout = BlockLayout::new(s, b).unwrap();
        let xy = Tensor4::from_fn(dims, |i, j, k, l| a * x.get(i, j, k, l) + c * y.get(i, j, k, l)).unwrap();
        let lhs = block_mean(&xy, &layout).unwrap();
        let (mx, my) = (block_mean(&x, &layout).unwrap(), block_mean(&y, &layout).unwrap());
        // ulps are measured against the block's largest input, where cancellation happens
        let big = xy.as_slice().iter().map(|v| v.abs()).fold(0.0, f64::max)
            .max(a.abs() * 3.0 + c.abs() * 3.0);
        for (i, l) in lhs.as_slice().iter().enumerate() {
            let r = a * mx.as_slice()[i] + c * my.as_slice()[i];
            prop_assert!((l - r).abs() <= 4.0 * f64::EPSILON * big, "{} vs {}", l, r);
        }
    }

    #[test]
    fn padding_never_contributes(seed in any::<u64>(), s in 1usize..30, b in 2usize..8, junk in -1e6f64..1e6) {
        let dims = Dims::new(1, 1, s, 2);
        let x = seeded(seed, dims);
        let layout = BlockLayout::new(s, b).unwrap();
        let mut padded = pad(&x, &layout).unwrap();
        for r in s..layout.padded_len() {
            padded.set(0, 0, r, 0, junk).unwrap();
            padded.set(0, 0, r, 1, -junk).unwrap();
        }
        prop_assert_eq!(block_mean(&padded, &layout).unwrap(), block_mean(&x, &layout).unwrap());
        prop_assert_eq!(unpad(&padded, &layout).unwrap(), x);
    }

    #[test]
    fn gather_scatter_round_trips(seed in any::<u64>(), nb in 1usize..8, pick in any::<u16>()) {
        let b = 3;
        let dims = Dims::new(1, 1, nb * b, 2);
        let x = seeded(seed, dims);
        let layout = BlockLayout::new(nb * b, b).unwrap();
        let idx: Vec<usize> = (0..nb).filter(|i| pick >> i & 1 == 1).collect();
        let g = gather_blocks(&x, &layout, std::slice::from_ref(&idx)).unwrap();
        prop_assert_eq!(g.dims().seq, idx.len() * b);
        // scatter back into zeros, then gather again
        let z = Tensor4::<f64>::zeros(dims).unwrap();
        let back = scatter_blocks(&z, &layout, std::slice::from_ref(&idx), &g).unwrap();
        prop_assert_eq!(gather_blocks(&back, &layout, std::slice::from_ref(&idx)).unwrap(), g);
        for u in (0..nb).filter(|u| !idx.contains(u)) {
            for r in layout.range(u) {
                prop_assert!(back.row(0, 0, r).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn concat_then_split(seed in any::<u64>(), la in 0usize..10, lb in 0usize..10) {
        let a = seeded(seed, Dims::new(1, 2, la, 3));
        let b = seeded(seed + 1, Dims::new(1, 2, lb, 3));
        let c = concat_seq(&a, &b).unwrap();
        prop_assert_eq!(c.dims().seq, la + lb);
        let (a2, b2) = split_seq(&c, la).unwrap();
        prop_assert_eq!((a2, b2), (a, b));
    }
}

#[test]
fn bad_magic_is_reported_at_offset_zero() {
    let mut bytes = encode(&seeded(1, Dims::new(1, 1, 2, 2)));
    bytes[0] = b'X';
    assert!(matches!(decode::<f64>(&bytes), Err(IsaError::Format { offset: 0, .. })));
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut bytes = encode(&seeded(1, Dims::new(1, 1, 2, 2)));
    bytes.push(0);
    assert!(matches!(decode::<f64>(&bytes), Err(IsaError::Format { .. })));
}

#[test]
fn saved_tensor_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.isa");
    let x = seeded(4, Dims::new(2, 1, 5, 3)).cast::<f32>();
    save_tensor(&path, &x).unwrap();
    assert_eq!(load_tensor::<f32>(&path).unwrap(), x);
}

#[test]
fn concat_positions() {
    let a = seeded(1, Dims::new(1, 1, 4, 2));
    let b = seeded(2, Dims::new(1, 1, 2, 2));
    let c = concat_seq(&a, &b).unwrap();
    assert_eq!(c.row(0, 0, 4), b.row(0, 0, 0));
    let empty = Tensor4::<f64>::zeros(Dims::new(1, 1, 0, 2)).unwrap();
    assert_eq!(concat_seq(&a, &empty).unwrap(), a);
    let wrong = seeded(3, Dims::new(1, 1, 2, 3));
    assert!(matches!(concat_seq(&a, &wrong), Err(IsaError::Layout(_))));
}

#[test]
fn full_scatter_permutes_source() {
    let b = 2;
    let layout = BlockLayout::new(6, b).unwrap();
    let src = seeded(9, Dims::new(1, 1, 6, 1));
    let idx = vec![vec![0, 1, 2]];
    let z = Tensor4::<f64>::zeros(src.dims()).unwrap();
    assert_eq!(scatter_blocks(&z, &layout, &idx, &src).unwrap(), src);
}

#[test]
fn split_writes_cover_every_block_once() {
    let layout = BlockLayout::new(8, 2).unwrap();
    let dims = Dims::new(1, 1, 8, 1);
    let x = seeded(5, dims);
    let (sharp, flat) = (vec![vec![0, 3]], vec![vec![1, 2]]);
    let mut w = BlockWriter::new(dims, layout.clone()).unwrap();
    w.scatter(&sharp, &gather_blocks(&x, &layout, &sharp).unwrap()).unwrap();
    w.scatter(&flat, &gather_blocks(&x, &layout, &flat).unwrap()).unwrap();
    assert!(w.write_counts().iter().flatten().all(|&c| c == 1));
    assert_eq!(w.finish().unwrap(), x);

    let mut w = BlockWriter::new(dims, layout.clone()).unwrap();
    w.scatter(&sharp, &gather_blocks(&x, &layout, &sharp).unwrap()).unwrap();
    let again = vec![vec![3]];
    let err = w.scatter(&again, &gather_blocks(&x, &layout, &again).unwrap());
    assert!(matches!(err, Err(IsaError::Contract(_))));
}

#[test]
fn index_list_errors() {
    assert!(matches!(check_index_list(&[0, 5], 4), Err(IsaError::Index { index: 5, limit: 4 })));
    assert!(matches!(check_index_list(&[2, 1], 4), Err(IsaError::Contract(_))));
    assert!(matches!(check_index_list(&[1, 1], 4), Err(IsaError::Contract(_))));
}

#[test]
fn strict_layout_rejects_ragged_segments() {
    let icl = IclLayout::new(6, 4).unwrap();
    assert!(matches!(icl.block_layout(4, true), Err(IsaError::Config(_))));
    let l = icl.block_layout(4, false).unwrap();
    assert_eq!(l.valid_rows_all(), &[4, 2, 4]);
}
