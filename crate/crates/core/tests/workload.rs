use isa_core::analysis::{quadrant_stats, taylor_error};
use isa_core::workload::{dump, generate, load};
use isa_core::*;

fn small(kind: WorkloadKind, seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        batch: 1,
        heads: 2,
        dim: 8,
        src_len: 32,
        ctx_len: 32,
        block_size: 8,
        kind,
        context_attenuation: 1.0,
        seed,
    }
}

fn clustered(sigma: f64) -> WorkloadKind {
    WorkloadKind::Clustered { n_clusters: 4, sigma }
}

#[test]
fn same_seed_same_bits() {
    for kind in [WorkloadKind::IidGaussian, clustered(0.5), WorkloadKind::LowRank { rank: 2, sigma: 0.1 }] {
        let a = generate::<f64>(&small(kind.clone(), 3)).unwrap();
        let b = generate::<f64>(&small(kind.clone(), 3)).unwrap();
        let c = generate::<f64>(&small(kind, 4)).unwrap();
        assert_eq!((&a.q, &a.k, &a.v), (&b.q, &b.k, &b.v));
        assert_ne!(a.q, c.q);
    }
}

#[test]
fn noiseless_clusters_have_no_surrogate_error() {
    let w = generate::<f64>(&small(clustered(0.0), 9)).unwrap();
    let layout = BlockLayout::new(64, 8).unwrap();
    for u in 0..layout.num_blocks() {
        let r = layout.range(u);
        assert!(r.clone().all(|i| w.k.row(0, 1, i) == w.k.row(0, 1, r.start)));
    }
    let report = taylor_error(&w.q, &w.k, &layout, &vec![vec![Vec::new(); 8]; 2], default_scale(8), false).unwrap();
    assert!(report.blocks.iter().all(|e| e.eps == 0.0));
}

#[test]
fn attenuation_lowers_context_mass() {
    let mut lower = 0;
    for seed in 0..20 {
        let mass = |a: f64| {
            let spec = WorkloadSpec { context_attenuation: a, ..WorkloadSpec::clustered(256, 16, seed) };
            let w = generate::<f64>(&spec).unwrap();
            quadrant_stats(&w.q, &w.k, &w.icl, default_scale(spec.dim), "").unwrap().src_ctx.mass.mean
        };
        if mass(0.3) < mass(1.0) {
            lower += 1;
        }
    }
    assert!(lower >= 18, "{lower}/20");
}

#[test]
fn dump_then_load_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.isa");
    let w = generate::<f32>(&small(clustered(0.3), 1)).unwrap();
    dump(&path, &w).unwrap();
    let back = load::<f32>(&path).unwrap();
    assert_eq!((back.q, back.k, back.v, back.icl), (w.q.clone(), w.k.clone(), w.v.clone(), w.icl));
    let spec = small(WorkloadKind::Loaded(path.clone()), 0);
    assert_eq!(generate::<f32>(&spec).unwrap().k, w.k);
    assert!(matches!(load::<f64>(&path), Err(IsaError::Validation(_))));
}

#[test]
fn truncated_file_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.isa");
    dump(&path, &generate::<f64>(&small(WorkloadKind::IidGaussian, 2)).unwrap()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let cut = bytes.len() - 13;
    std::fs::write(&path, &bytes[..cut]).unwrap();
    match load::<f64>(&path) {
        Err(IsaError::Format { offset, .. }) => assert_eq!(offset, cut as u64),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn header_split_must_match_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.isa");
    dump(&path, &generate::<f64>(&small(WorkloadKind::IidGaussian, 2)).unwrap()).unwrap();
    std::fs::write(sidecar_path(&path), "32\n31\ndouble\n").unwrap();
    assert!(matches!(load::<f64>(&path), Err(IsaError::Validation(_))));
}

#[test]
fn invalid_specs_are_config_errors() {
    let bad = [
        WorkloadSpec { context_attenuation: 1.5, ..small(WorkloadKind::IidGaussian, 0) },
        WorkloadSpec { heads: 0, ..small(WorkloadKind::IidGaussian, 0) },
        small(clustered(-1.0), 0),
        small(WorkloadKind::Clustered { n_clusters: 0, sigma: 0.1 }, 0),
    ];
    for spec in bad {
        assert!(matches!(generate::<f64>(&spec), Err(IsaError::Config(_))), "{spec:?}");
    }
}

#[test]
fn default_desk_spec() {
    let s = WorkloadSpec::clustered(2048, 64, 1);
    assert_eq!((s.batch, s.heads, s.dim, s.src_len, s.ctx_len), (1, 4, 64, 1024, 1024));
    assert_eq!(s.kind, WorkloadKind::Clustered { n_clusters: 8, sigma: 0.5 });
}
