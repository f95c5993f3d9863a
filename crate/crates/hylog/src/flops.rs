//! Analytic attention-cost model and the timing harness.
//!
//! The counts cover only the query-key and attention-value contractions,
//! the quadratic-in-token terms that dominate plain attention:
//!
//! * standard: `2 (HW)^2 C`
//! * local:    `2 (HW)^2 C / g^2` for a g x g window grid
//! * global:   `2 (HW)^2 C / N_g^2` for a total token reduction of N_g
//! * hybrid / sequential: local + global
//!
//! Counts are exact integers and independent of the head count (heads
//! split the channel dimension, not the token dimension). A separate
//! "full" model adds the linear projection and MLP terms.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    global_path, local_path_parallel, BlockKind, HyLoGGeom, StageBlock, VitHyper,
};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::Tensor;

/// Geometry the cost model is evaluated at.
#[derive(Clone, Copy, Debug)]
pub struct FlopModel {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Local windows per side (g).
    pub grid_per_side: usize,
    /// Total token-count reduction of the global path (N_g = s^2 for a
    /// per-side pooling factor s).
    pub token_reduction: usize,
    pub heads: usize,
}

impl FlopModel {
    fn validate(&self, variant: BlockKind) -> Result<()> {
        let g = self.grid_per_side;
        if g == 0 || self.h % g != 0 || self.w % g != 0 {
            return Err(Error::geometry(
                "attention_macs",
                format!("{}x{} not divisible by grid {g}", self.h, self.w),
            ));
        }
        if self.token_reduction == 0 || (self.h * self.w) % self.token_reduction != 0 {
            return Err(Error::geometry(
                "attention_macs",
                format!(
                    "{} tokens not divisible by reduction {}",
                    self.h * self.w,
                    self.token_reduction
                ),
            ));
        }
        if variant == BlockKind::Cnn {
            return Err(Error::Config(
                "the cnn variant has no attention to count".into(),
            ));
        }
        Ok(())
    }

    fn tokens(&self) -> u128 {
        (self.h * self.w) as u128
    }
}

/// Exact MAC count of the self-attention contractions for one block of
/// the given variant. `vit` counts full-resolution (standard) attention.
pub fn attention_macs(variant: BlockKind, m: &FlopModel) -> Result<u128> {
    m.validate(variant)?;
    let c = m.c as u128;
    let standard = 2 * m.tokens() * m.tokens() * c;
    let g2 = (m.grid_per_side * m.grid_per_side) as u128;
    let ng = m.token_reduction as u128;
    Ok(match variant {
        BlockKind::Vit => standard,
        BlockKind::Local => standard / g2,
        BlockKind::Global => standard / (ng * ng),
        BlockKind::Hybrid | BlockKind::Sequential => standard / g2 + standard / (ng * ng),
        BlockKind::Cnn => unreachable!("validated"),
    })
}

/// Brute-force oracle for the local path: walk every window and add its
/// two contractions explicitly.
pub fn local_macs_by_window_enumeration(m: &FlopModel) -> Result<u128> {
    m.validate(BlockKind::Local)?;
    let g = m.grid_per_side;
    let (wh, ww) = (m.h / g, m.w / g);
    let tokens = (wh * ww) as u128;
    let mut total: u128 = 0;
    for _gy in 0..g {
        for _gx in 0..g {
            // one QK^T and one AV contraction per window
            total += tokens * tokens * m.c as u128;
            total += tokens * tokens * m.c as u128;
        }
    }
    Ok(total)
}

/// Cost model including the linear projections (q, k, v, output) and the
/// two MLP layers, per attention instance.
pub fn attention_macs_full(variant: BlockKind, m: &FlopModel, mlp_ratio: usize) -> Result<u128> {
    let quadratic = attention_macs(variant, m)?;
    let c = m.c as u128;
    let ratio = mlp_ratio as u128;
    // per token: 4 projections of C x C plus two MLP matmuls of C x rC
    let per_token = 4 * c * c + 2 * ratio * c * c;
    let tokens = m.tokens();
    let ng = m.token_reduction as u128;
    let linear = match variant {
        BlockKind::Vit | BlockKind::Local => tokens * per_token,
        BlockKind::Global => (tokens / ng) * per_token,
        BlockKind::Hybrid | BlockKind::Sequential => tokens * per_token + (tokens / ng) * per_token,
        BlockKind::Cnn => unreachable!("validated"),
    };
    Ok(quadratic + linear)
}

/// One timed configuration.
#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub variant: BlockKind,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub macs: u128,
    pub ns_median: u128,
    pub runs: usize,
}

pub const BENCH_CSV_HEADER: &str = "variant,H,W,C,macs,ns_median,runs";

fn block_forward(
    block: &mut StageBlock<f32>,
    x: &Tensor<f32>,
    parallel: bool,
) -> Result<Tensor<f32>> {
    if !parallel {
        return block.forward(x, Mode::Eval);
    }
    match block {
        StageBlock::Local { vit, window } => local_path_parallel(x, vit, *window),
        StageBlock::Sequential {
            local,
            global,
            window,
            downscale,
        } => {
            let y = local_path_parallel(x, local, *window)?;
            global_path(&y, global, *downscale)
        }
        StageBlock::Hybrid { params, geom } => {
            let local = local_path_parallel(x, &params.local_vit, geom.window)?;
            let global = global_path(x, &params.global_vit, geom.global_downscale)?;
            let cat = Tensor::concat(&[local, global], 2)?;
            cat.conv2d(&params.fuse_w, Some(&params.fuse_b), 1, 1)
        }
        other => other.forward(x, Mode::Eval),
    }
}

/// Time `runs` forward passes of one block per size (after one warmup)
/// and report the median alongside the analytic MAC count. Parameters
/// are detached, so no graph is retained between runs.
pub fn bench_attention(
    variant: BlockKind,
    sizes: &[(usize, usize, usize)],
    runs: usize,
    heads: usize,
    parallel: bool,
) -> Result<Vec<BenchRecord>> {
    if runs < 3 {
        return Err(Error::Config("benchmark needs at least 3 runs".into()));
    }
    let mut records = Vec::with_capacity(sizes.len());
    for &(h, w, c) in sizes {
        let model = FlopModel {
            h,
            w,
            c,
            grid_per_side: 8.min(h.min(w)),
            token_reduction: 4,
            heads,
        };
        let geom = HyLoGGeom {
            window: h / model.grid_per_side,
            grid_per_side: model.grid_per_side,
            global_downscale: 2,
            channels: c,
        };
        if h % geom.window != 0 || w % geom.window != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::geometry(
                "bench_attention",
                format!("size {h}x{w} does not fit the benchmark geometry"),
            ));
        }
        let macs = attention_macs(variant, &model)?;
        let hyper = VitHyper {
            depth: 1,
            heads,
            mlp_ratio: 4,
            pos_encoding: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut block = StageBlock::<f32>::init(&mut rng, variant, &geom, &hyper)?;
        block.for_each_param("bench", &mut |_, p| *p = p.detach());
        let x = Tensor::from_fn(&[h, w, c], |_| rng.random::<f32>());

        block_forward(&mut block, &x, parallel)?; // warmup
        let mut times: Vec<u128> = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            let out = block_forward(&mut block, &x, parallel)?;
            times.push(start.elapsed().as_nanos());
            drop(out);
        }
        times.sort_unstable();
        records.push(BenchRecord {
            variant,
            h,
            w,
            c,
            macs,
            ns_median: times[times.len() / 2],
            runs,
        });
    }
    Ok(records)
}

/// CSV rows for a set of records. All columns except `ns_median` are
/// deterministic for a fixed seed; the timing column is exempt from
/// byte-stability by nature.
pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(BENCH_CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variant.as_str(),
            r.h,
            r.w,
            r.c,
            r.macs,
            r.ns_median,
            r.runs
        ));
    }
    s
}

pub fn write_bench_csv(path: &Path, records: &[BenchRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bench_csv(records).as_bytes())?;
    Ok(())
}
