//! In-context sparse attention.
//!
//! Attention for inputs made of a source segment followed by a long context
//! segment. Context blocks are pre-selected with pooled block scores, query
//! blocks are split by how peaked their coarse attention row is, and the flat
//! ones run a kernel that replaces most key blocks with their means.
//!
//! Tensors are `(B, H, S, D)` and stored in `f32` or `f64`; every reduction
//! accumulates in `f64`.
//!
//! ```
//! use isa_core::{isa_forward, full_attention, Dims, IclLayout, IsaConfig, Tensor4};
//!
//! let dims = Dims::new(1, 1, 64, 8);
//! let x = Tensor4::<f64>::from_fn(dims, |_, _, s, d| ((s * 8 + d) as f64 * 0.37).sin())?;
//! let icl = IclLayout::new(32, 32)?;
//! let cfg = IsaConfig { block_size: 8, alpha_s: 1.0, alpha_ns: 1.0, ..IsaConfig::default() };
//! let (out, _) = isa_forward(&x, &x, &x, &icl, &cfg)?;
//! let dense = full_attention(&x, &x, &x, cfg.scale_for(8), None)?;
//! assert!(out.as_slice().iter().zip(dense.as_slice()).all(|(a, b)| (a - b).abs() < 1e-12));
//! # Ok::<(), isa_core::IsaError>(())
//! ```

pub mod analysis;
mod blocks;
mod coarse;
mod element;
mod error;
mod flops;
mod io;
mod layout;
mod pipeline;
mod reference;
mod rope;
mod taylor;
mod tensor;
mod util;
pub mod workload;

pub use blocks::{block_mean, check_index_list, concat_seq, gather_blocks, pad, scatter_blocks, split_seq, unpad, BlockWriter};
pub use coarse::{
    block_sharpness, build_block_mask, build_block_mask_k, build_coarse, context_keep_count, exact_block_count,
    rank_context, sharpness_split, softmax, top_k, variance, BlockMask, CoarseSet, SelectionIndex, SharpnessSplit,
};
pub use element::{dot, dot_mixed, Element, Precision};
pub use error::{IsaError, Result};
pub use flops::{dense_mas, exact_pair_mas, taylor_pair_mas, FlopCount};
pub use io::{decode, encode, load_tensor, read_tensor, save_tensor, sidecar_path, write_tensor, OffsetReader, Sidecar};
pub use layout::{BlockLayout, IclLayout};
pub use pipeline::{
    compute_routing, isa_backward, isa_backward_routed, isa_forward, isa_forward_routed, CoarseSummary, HeadRouting,
    IsaConfig, IsaTrace, Routing, StageTimings,
};
pub use reference::{
    default_scale, full_attention, full_attention_backward, online_softmax_attention,
    online_softmax_attention_ordered, AttnMask, GradBundle, OnlineState,
};
pub use taylor::{
    flop_count, taylor_sparse_backward, taylor_sparse_forward, taylor_sparse_forward_counted, TaylorKernelInput,
    VisitOrder,
};
pub use rope::{apply_decoupled_rope, rope_angle};
pub use tensor::{Dims, MatRef, Tensor4};
pub use workload::{Workload, WorkloadKind, WorkloadSpec};
