//! Hybrid local-global attention blocks.
//!
//! The hybrid block runs two paths over an H x W x C feature map: a local
//! path that applies a shared ViT block inside each window of a
//! non-overlapping M x M grid, and a global path that applies one ViT
//! block to a spatially downscaled copy. The two outputs are channel
//! concatenated and fused back to C channels by a bare 3x3 convolution.
//!
//! The ablation variants from the backbone study (plain CNN blocks, a
//! full-resolution ViT, either path alone, and the two paths stacked
//! sequentially) live here as well so the network can swap backbones by
//! configuration.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::fan_in_uniform;
use crate::layers::{Mode, ResidualConvBlock};
use crate::tensor::{Elem, Tensor};
use crate::vit::{detokenize, tokenize, ViTStack};

/// Geometry of one hybrid block at a fixed feature extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HyLoGGeom {
    /// Local window side length M.
    pub window: usize,
    /// Windows per side (extent / M for square extents).
    pub grid_per_side: usize,
    /// Per-side pooling factor s of the global path.
    pub global_downscale: usize,
    pub channels: usize,
}

impl HyLoGGeom {
    /// Resolve the geometry for a square extent, preferring the given
    /// grid and halving it until windows are at least 2 pixels wide.
    pub fn for_extent(
        res: usize,
        grid_pref: usize,
        global_downscale: usize,
        channels: usize,
    ) -> Result<Self> {
        if res == 0 {
            return Err(Error::Config("zero feature extent".into()));
        }
        let mut grid = grid_pref.max(1);
        while grid > 1 && (res % grid != 0 || res / grid < 2) {
            grid /= 2;
        }
        if res % grid != 0 {
            grid = 1;
        }
        if res % global_downscale != 0 {
            return Err(Error::Config(format!(
                "extent {res} not divisible by global downscale {global_downscale}"
            )));
        }
        Ok(HyLoGGeom {
            window: res / grid,
            grid_per_side: grid,
            global_downscale,
            channels,
        })
    }

    /// Total token-count reduction of the global path (s per side).
    pub fn global_token_reduction(&self) -> usize {
        self.global_downscale * self.global_downscale
    }
}

/// Parameters of one hybrid block: a ViT stack shared across all local
/// windows, a ViT stack for the downscaled global path, and the 2C -> C
/// fusion convolution.
#[derive(Clone, Debug)]
pub struct HyLoGParams<T: Elem> {
    pub local_vit: ViTStack<T>,
    pub global_vit: ViTStack<T>,
    pub fuse_w: Tensor<T>,
    pub fuse_b: Tensor<T>,
}

/// ViT hyperparameters shared by every attention path.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct VitHyper {
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pos_encoding: bool,
}

impl Default for VitHyper {
    fn default() -> Self {
        VitHyper {
            depth: 1,
            heads: 4,
            mlp_ratio: 4,
            pos_encoding: false,
        }
    }
}

impl VitHyper {
    fn pos_len(&self, tokens: usize) -> Option<usize> {
        self.pos_encoding.then_some(tokens)
    }
}

impl<T: Elem> HyLoGParams<T> {
    pub fn init<R: Rng>(rng: &mut R, geom: &HyLoGGeom, hyper: &VitHyper) -> Result<Self> {
        let c = geom.channels;
        let res = geom.window * geom.grid_per_side;
        let global_side = res / geom.global_downscale;
        Ok(HyLoGParams {
            local_vit: ViTStack::init(
                rng,
                hyper.depth,
                c,
                hyper.heads,
                hyper.mlp_ratio,
                hyper.pos_len(geom.window * geom.window),
            )?,
            global_vit: ViTStack::init(
                rng,
                hyper.depth,
                c,
                hyper.heads,
                hyper.mlp_ratio,
                hyper.pos_len(global_side * global_side),
            )?,
            fuse_w: fan_in_uniform(rng, 9 * 2 * c, &[3, 3, 2 * c, c]),
            fuse_b: Tensor::zeros(&[c]).with_requires_grad(true),
        })
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.local_vit.for_each_param(&format!("{prefix}.local"), f);
        self.global_vit
            .for_each_param(&format!("{prefix}.global"), f);
        f(format!("{prefix}.fuse.weight"), &mut self.fuse_w);
        f(format!("{prefix}.fuse.bias"), &mut self.fuse_b);
    }
}

/// Split a map into non-overlapping M x M windows in row-major grid order.
pub fn window_partition<T: Elem>(x: &Tensor<T>, m: usize) -> Result<Vec<Tensor<T>>> {
    if x.rank() != 3 {
        return Err(Error::RankMismatch {
            op: "window_partition",
            expected: 3,
            shape: x.shape().to_vec(),
        });
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::geometry(
            "window_partition",
            format!("extent {h}x{w} not divisible by window {m}"),
        ));
    }
    let (gh, gw) = (h / m, w / m);
    let mut windows = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        let row_band = x.narrow(0, gy * m, m)?;
        for gx in 0..gw {
            windows.push(row_band.narrow(1, gx * m, m)?);
        }
    }
    Ok(windows)
}

/// Exact inverse of [`window_partition`] for a `grid = (rows, cols)` of
/// M x M windows.
pub fn window_merge<T: Elem>(windows: &[Tensor<T>], grid: (usize, usize)) -> Result<Tensor<T>> {
    let (gh, gw) = grid;
    if windows.len() != gh * gw {
        return Err(Error::geometry(
            "window_merge",
            format!("{} windows cannot fill a {gh}x{gw} grid", windows.len()),
        ));
    }
    let mut rows = Vec::with_capacity(gh);
    for gy in 0..gh {
        rows.push(Tensor::concat(&windows[gy * gw..(gy + 1) * gw], 1)?);
    }
    Tensor::concat(&rows, 0)
}

/// Local path: every window independently tokenized and passed through
/// the shared ViT stack, then merged back in grid order.
pub fn local_path<T: Elem>(x: &Tensor<T>, vit: &ViTStack<T>, window: usize) -> Result<Tensor<T>> {
    let (gh, gw) = (x.shape()[0] / window, x.shape()[1] / window);
    let windows = window_partition(x, window)?;
    let outs: Vec<Tensor<T>> = windows
        .iter()
        .map(|win| detokenize(&vit.forward(&tokenize(win)?)?))
        .collect::<Result<_>>()?;
    window_merge(&outs, (gh, gw))
}

/// Local path with windows evaluated on a thread pool. Window results
/// are merged in grid order, so the output matches [`local_path`].
pub fn local_path_parallel<T: Elem>(
    x: &Tensor<T>,
    vit: &ViTStack<T>,
    window: usize,
) -> Result<Tensor<T>> {
    let (gh, gw) = (x.shape()[0] / window, x.shape()[1] / window);
    let windows = window_partition(x, window)?;
    let outs: Vec<Tensor<T>> = windows
        .par_iter()
        .map(|win| detokenize(&vit.forward(&tokenize(win)?)?))
        .collect::<Result<_>>()?;
    window_merge(&outs, (gh, gw))
}

/// Global path: average pool by s per side, one ViT stack over the
/// coarse tokens, bilinear upsample back to the input extent.
pub fn global_path<T: Elem>(
    x: &Tensor<T>,
    vit: &ViTStack<T>,
    downscale: usize,
) -> Result<Tensor<T>> {
    let pooled = x.avgpool2d(downscale)?;
    let out = detokenize(&vit.forward(&tokenize(&pooled)?)?)?;
    out.upsample2d(downscale)
}

/// The hybrid block: channel-concat of the two paths fused back to C by
/// a bare 3x3 convolution (stride 1, zero padding 1).
pub fn hylog_block<T: Elem>(
    x: &Tensor<T>,
    p: &HyLoGParams<T>,
    geom: &HyLoGGeom,
) -> Result<Tensor<T>> {
    let local = local_path(x, &p.local_vit, geom.window)?;
    let global = global_path(x, &p.global_vit, geom.global_downscale)?;
    let cat = Tensor::concat(&[local, global], 2)?;
    cat.conv2d(&p.fuse_w, Some(&p.fuse_b), 1, 1)
}

/// Backbone selector for the ablation study variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Cnn,
    Vit,
    Local,
    Global,
    Sequential,
    Hybrid,
}

impl BlockKind {
    pub const ALL: [BlockKind; 6] = [
        BlockKind::Cnn,
        BlockKind::Vit,
        BlockKind::Local,
        BlockKind::Global,
        BlockKind::Sequential,
        BlockKind::Hybrid,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BlockKind::Cnn => "cnn",
            BlockKind::Vit => "vit",
            BlockKind::Local => "local",
            BlockKind::Global => "global",
            BlockKind::Sequential => "sequential",
            BlockKind::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" => Ok(BlockKind::Cnn),
            "vit" => Ok(BlockKind::Vit),
            "local" => Ok(BlockKind::Local),
            "global" => Ok(BlockKind::Global),
            "sequential" => Ok(BlockKind::Sequential),
            "hybrid" => Ok(BlockKind::Hybrid),
            other => Err(Error::Config(format!("unknown block kind `{other}`"))),
        }
    }
}

/// One backbone block instance at a fixed geometry.
#[derive(Clone, Debug)]
pub enum StageBlock<T: Elem> {
    Cnn {
        block1: ResidualConvBlock<T>,
        block2: ResidualConvBlock<T>,
    },
    Vit {
        vit: ViTStack<T>,
    },
    Local {
        vit: ViTStack<T>,
        window: usize,
    },
    Global {
        vit: ViTStack<T>,
        downscale: usize,
    },
    Sequential {
        local: ViTStack<T>,
        global: ViTStack<T>,
        window: usize,
        downscale: usize,
    },
    Hybrid {
        params: HyLoGParams<T>,
        geom: HyLoGGeom,
    },
}

impl<T: Elem> StageBlock<T> {
    pub fn init<R: Rng>(
        rng: &mut R,
        kind: BlockKind,
        geom: &HyLoGGeom,
        hyper: &VitHyper,
    ) -> Result<Self> {
        let c = geom.channels;
        let res = geom.window * geom.grid_per_side;
        Ok(match kind {
            BlockKind::Cnn => StageBlock::Cnn {
                block1: ResidualConvBlock::init(rng, c),
                block2: ResidualConvBlock::init(rng, c),
            },
            BlockKind::Vit => StageBlock::Vit {
                vit: ViTStack::init(
                    rng,
                    hyper.depth,
                    c,
                    hyper.heads,
                    hyper.mlp_ratio,
                    hyper.pos_len(res * res),
                )?,
            },
            BlockKind::Local => StageBlock::Local {
                vit: ViTStack::init(
                    rng,
                    hyper.depth,
                    c,
                    hyper.heads,
                    hyper.mlp_ratio,
                    hyper.pos_len(geom.window * geom.window),
                )?,
                window: geom.window,
            },
            BlockKind::Global => {
                let side = res / geom.global_downscale;
                StageBlock::Global {
                    vit: ViTStack::init(
                        rng,
                        hyper.depth,
                        c,
                        hyper.heads,
                        hyper.mlp_ratio,
                        hyper.pos_len(side * side),
                    )?,
                    downscale: geom.global_downscale,
                }
            }
            BlockKind::Sequential => {
                let side = res / geom.global_downscale;
                StageBlock::Sequential {
                    local: ViTStack::init(
                        rng,
                        hyper.depth,
                        c,
                        hyper.heads,
                        hyper.mlp_ratio,
                        hyper.pos_len(geom.window * geom.window),
                    )?,
                    global: ViTStack::init(
                        rng,
                        hyper.depth,
                        c,
                        hyper.heads,
                        hyper.mlp_ratio,
                        hyper.pos_len(side * side),
                    )?,
                    window: geom.window,
                    downscale: geom.global_downscale,
                }
            }
            BlockKind::Hybrid => StageBlock::Hybrid {
                params: HyLoGParams::init(rng, geom, hyper)?,
                geom: *geom,
            },
        })
    }

    /// Shape-preserving forward pass.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            StageBlock::Cnn { block1, block2 } => {
                let y = block1.forward(x, mode)?;
                block2.forward(&y, mode)
            }
            StageBlock::Vit { vit } => detokenize(&vit.forward(&tokenize(x)?)?),
            StageBlock::Local { vit, window } => local_path(x, vit, *window),
            StageBlock::Global { vit, downscale } => global_path(x, vit, *downscale),
            StageBlock::Sequential {
                local,
                global,
                window,
                downscale,
            } => {
                let y = local_path(x, local, *window)?;
                global_path(&y, global, *downscale)
            }
            StageBlock::Hybrid { params, geom } => hylog_block(x, params, geom),
        }
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            StageBlock::Cnn { block1, block2 } => {
                block1.for_each_param(&format!("{prefix}.res1"), f);
                block2.for_each_param(&format!("{prefix}.res2"), f);
            }
            StageBlock::Vit { vit } => vit.for_each_param(&format!("{prefix}.vit"), f),
            StageBlock::Local { vit, .. } => vit.for_each_param(&format!("{prefix}.local"), f),
            StageBlock::Global { vit, .. } => vit.for_each_param(&format!("{prefix}.global"), f),
            StageBlock::Sequential { local, global, .. } => {
                local.for_each_param(&format!("{prefix}.local"), f);
                global.for_each_param(&format!("{prefix}.global"), f);
            }
            StageBlock::Hybrid { params, .. } => params.for_each_param(prefix, f),
        }
    }
}

/// Cyclic 2-D shift of a feature map (values only; used by the
/// shift-commutation tests).
pub fn roll2d<T: Elem>(x: &Tensor<T>, dy: usize, dx: usize) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::RankMismatch {
            op: "roll2d",
            expected: 3,
            shape: x.shape().to_vec(),
        });
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let src = x.data();
    let mut data = vec![T::zero(); src.len()];
    for y in 0..h {
        for xx in 0..w {
            let sy = (y + h - dy % h) % h;
            let sx = (xx + w - dx % w) % w;
            let d = (y * w + xx) * c;
            let s = (sy * w + sx) * c;
            data[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Tensor::from_vec(data, x.shape())
}

pub(crate) fn gradchecks() -> Vec<crate::gradcheck::suite::Check> {
    use crate::gradcheck::gradcheck;
    use crate::vit::flatten_vit_params;
    vec![
        ("local_path", 1e-4, |rng, cfg| {
            let geom = HyLoGGeom::for_extent(4, 2, 2, 2)?;
            let hyper = VitHyper {
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                pos_encoding: false,
            };
            let p = HyLoGParams::<f64>::init(rng, &geom, &hyper)?;
            let x = Tensor::from_fn(&[4, 4, 2], |_| rng.random::<f64>() - 0.5);
            let (params, rebuild) = flatten_vit_params(&p.local_vit.blocks[0]);
            let mut all = vec![x];
            all.extend(params);
            gradcheck(
                "local_path",
                move |ins| {
                    let vit = ViTStack {
                        blocks: vec![rebuild(&ins[1..])],
                    };
                    let y = local_path(&ins[0], &vit, 2)?;
                    y.mul(&y)?.sum()
                },
                &all,
                cfg,
            )
        }),
        ("global_path", 1e-4, |rng, cfg| {
            let geom = HyLoGGeom::for_extent(4, 2, 2, 2)?;
            let hyper = VitHyper {
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                pos_encoding: false,
            };
            let p = HyLoGParams::<f64>::init(rng, &geom, &hyper)?;
            let x = Tensor::from_fn(&[4, 4, 2], |_| rng.random::<f64>() - 0.5);
            let (params, rebuild) = flatten_vit_params(&p.global_vit.blocks[0]);
            let mut all = vec![x];
            all.extend(params);
            gradcheck(
                "global_path",
                move |ins| {
                    let vit = ViTStack {
                        blocks: vec![rebuild(&ins[1..])],
                    };
                    let y = global_path(&ins[0], &vit, 2)?;
                    y.mul(&y)?.sum()
                },
                &all,
                cfg,
            )
        }),
        ("hylog_block", 1e-4, |rng, cfg| {
            let geom = HyLoGGeom::for_extent(4, 2, 2, 2)?;
            let hyper = VitHyper {
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                pos_encoding: false,
            };
            let p = HyLoGParams::<f64>::init(rng, &geom, &hyper)?;
            let x = Tensor::from_fn(&[4, 4, 2], |_| rng.random::<f64>() - 0.5);
            let (local, rebuild_local) = flatten_vit_params(&p.local_vit.blocks[0]);
            let (global, rebuild_global) = flatten_vit_params(&p.global_vit.blocks[0]);
            let n_local = local.len();
            let mut all = vec![x];
            all.extend(local);
            all.extend(global);
            all.push(p.fuse_w.clone());
            all.push(p.fuse_b.clone());
            gradcheck(
                "hylog_block",
                move |ins| {
                    let p = HyLoGParams {
                        local_vit: ViTStack {
                            blocks: vec![rebuild_local(&ins[1..1 + n_local])],
                        },
                        global_vit: ViTStack {
                            blocks: vec![rebuild_global(&ins[1 + n_local..1 + 2 * n_local])],
                        },
                        fuse_w: ins[1 + 2 * n_local].clone(),
                        fuse_b: ins[2 + 2 * n_local].clone(),
                    };
                    let y = hylog_block(&ins[0], &p, &geom)?;
                    y.mul(&y)?.sum()
                },
                &all,
                cfg,
            )
        }),
    ]
}
