//! The joint decomposition/dehazing network: one shared encoder, a
//! reflectance decoder, a shading decoder and a dehazing decoder that
//! absorbs the other two decoders' intermediate features through the
//! selection module.
//!
//! Stage layout for Z stages and base width C0 (square extents shown):
//!
//! * extraction: 5x5 conv (3 -> C0) + residual conv block, full resolution;
//! * encoder stage z: backbone block, then 4x4 stride-2 conv doubling the
//!   channels, so `e_z` lives at resolution /2^z with 2^z * C0 channels;
//! * decoder stage z mirrors it with a 4x4 stride-2 deconvolution halving
//!   the channels, the same-stage encoder skip (reflectance/shading) or
//!   the complementary-feature fusion (dehazing), and a backbone block;
//! * heads: deconv to full resolution, concat with `e_0`, 3x3 merge conv,
//!   then a bare 3x3 conv to 3 channels and a sigmoid.
//!
//! Disabled complementary streams are replaced by zero maps at every
//! fusion site; zeros pass through the recalibration untouched, so one
//! code path serves all four decoder ablation modes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, HyLoGGeom, StageBlock, VitHyper};
use crate::cfsm::{cfsm, fuse_sum, CfsmParams};
use crate::error::{Error, Result};
use crate::layers::{ActNorm, Conv2dLayer, ConvUnit, DeconvUnit, Mode, ResidualConvBlock};
use crate::tensor::{Elem, Tensor};

/// Which decoders are instantiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderMode {
    #[serde(rename = "full")]
    Full,
    /// No complementary features at all: only the dehazing decoder.
    #[serde(rename = "w/o-RS")]
    WithoutRs,
    /// Reflectance decoder only.
    #[serde(rename = "w-R")]
    WithR,
    /// Shading decoder only.
    #[serde(rename = "w-S")]
    WithS,
}

impl DecoderMode {
    pub const ALL: [DecoderMode; 4] = [
        DecoderMode::Full,
        DecoderMode::WithoutRs,
        DecoderMode::WithR,
        DecoderMode::WithS,
    ];

    pub fn reflectance_enabled(&self) -> bool {
        matches!(self, DecoderMode::Full | DecoderMode::WithR)
    }

    pub fn shading_enabled(&self) -> bool {
        matches!(self, DecoderMode::Full | DecoderMode::WithS)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DecoderMode::Full => "full",
            DecoderMode::WithoutRs => "w/o-RS",
            DecoderMode::WithR => "w-R",
            DecoderMode::WithS => "w-S",
        }
    }
}

impl std::str::FromStr for DecoderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(DecoderMode::Full),
            "w/o-rs" | "wo-rs" | "without-rs" => Ok(DecoderMode::WithoutRs),
            "w-r" => Ok(DecoderMode::WithR),
            "w-s" => Ok(DecoderMode::WithS),
            other => Err(Error::Config(format!("unknown decoder mode `{other}`"))),
        }
    }
}

/// How the dehazing decoder absorbs complementary features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Cfsm,
    Sum,
}

impl FusionMode {
    pub const ALL: [FusionMode; 2] = [FusionMode::Cfsm, FusionMode::Sum];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Cfsm => "cfsm",
            FusionMode::Sum => "sum",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cfsm" => Ok(FusionMode::Cfsm),
            "sum" => Ok(FusionMode::Sum),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// Full architectural description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of encoder/decoder stages Z.
    pub stages: usize,
    /// Channel width C0 after extraction; doubles per stage.
    pub base_channels: usize,
    pub input_channels: usize,
    /// Preferred local-attention grid per side; coarse levels fall back
    /// to smaller grids until windows are at least 2 pixels wide.
    pub grid_per_side: usize,
    /// Explicit window side; overrides the grid when set.
    pub window: Option<usize>,
    /// Per-side pooling factor of the global path.
    pub global_downscale: usize,
    pub backbone: BlockKind,
    pub decoders: DecoderMode,
    pub fusion: FusionMode,
    /// Channel reduction of the selection module bottleneck.
    pub cfsm_reduction: usize,
    pub vit: VitHyper,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 3,
            base_channels: 16,
            input_channels: 3,
            grid_per_side: 8,
            window: None,
            global_downscale: 2,
            backbone: BlockKind::Hybrid,
            decoders: DecoderMode::Full,
            fusion: FusionMode::Cfsm,
            cfsm_reduction: 4,
            vit: VitHyper::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("stages must be at least 1".into()));
        }
        if self.base_channels == 0 || self.base_channels % self.vit.heads != 0 {
            return Err(Error::Config(format!(
                "base_channels {} must be a positive multiple of heads {}",
                self.base_channels, self.vit.heads
            )));
        }
        if self.base_channels % self.cfsm_reduction != 0 {
            return Err(Error::Config(format!(
                "base_channels {} must be divisible by cfsm_reduction {}",
                self.base_channels, self.cfsm_reduction
            )));
        }
        if self.global_downscale == 0 {
            return Err(Error::Config("global_downscale must be at least 1".into()));
        }
        Ok(())
    }

    /// Channel width at a resolution level (0 = full resolution).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Resolve the block geometry for one resolution level.
    pub fn level_geom(&self, h: usize, w: usize, level: usize) -> Result<HyLoGGeom> {
        let (lh, lw) = (h >> level, w >> level);
        if lh == 0 || lw == 0 || lh << level != h || lw << level != w {
            return Err(Error::Config(format!(
                "input {h}x{w} does not survive {level} halvings"
            )));
        }
        let channels = self.channels_at(level);
        let mut geom = if let Some(m) = self.window {
            let side = lh.min(lw);
            if m == 0 || side % m != 0 {
                return Err(Error::Config(format!(
                    "window {m} does not divide level-{level} extent {lh}x{lw}"
                )));
            }
            HyLoGGeom {
                window: m,
                grid_per_side: side / m,
                global_downscale: self.global_downscale,
                channels,
            }
        } else {
            HyLoGGeom::for_extent(
                lh.min(lw),
                self.grid_per_side,
                self.global_downscale,
                channels,
            )?
        };
        geom.channels = channels;
        if lh % geom.window != 0 || lw % geom.window != 0 {
            return Err(Error::Config(format!(
                "window {} does not tile level-{level} extent {lh}x{lw}",
                geom.window
            )));
        }
        if lh % self.global_downscale != 0 || lw % self.global_downscale != 0 {
            return Err(Error::Config(format!(
                "global downscale {} does not divide level-{level} extent {lh}x{lw}",
                self.global_downscale
            )));
        }
        Ok(geom)
    }
}

/// The three task outputs; disabled decoders yield `None`.
#[derive(Clone, Debug)]
pub struct ForwardOutputs<T: Elem> {
    pub reflectance: Option<Tensor<T>>,
    pub shading: Option<Tensor<T>>,
    pub dehazed: Tensor<T>,
}

/// Reconstruction head: deconv to full resolution, merge with `e_0`,
/// bare 3x3 conv to 3 channels, sigmoid.
#[derive(Clone, Debug)]
struct Head<T: Elem> {
    up: DeconvUnit<T>,
    merge: ConvUnit<T>,
    out: Conv2dLayer<T>,
}

impl<T: Elem> Head<T> {
    fn init<R: Rng>(rng: &mut R, c0: usize, out_channels: usize) -> Self {
        Head {
            up: DeconvUnit::init(rng, 4, 2 * c0, c0, 2, 1),
            merge: ConvUnit::init(rng, 3, 2 * c0, c0, 1, 1),
            out: Conv2dLayer::init(rng, 3, c0, out_channels, 1, 1),
        }
    }

    fn forward(&mut self, d1: &Tensor<T>, e0: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let up = self.up.forward(d1, mode)?;
        let cat = Tensor::concat(&[up, e0.clone()], 2)?;
        let merged = self.merge.forward(&cat, mode)?;
        Ok(self.out.forward(&merged)?.sigmoid())
    }

    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.up.for_each_param(&format!("{prefix}.up"), f);
        self.merge.for_each_param(&format!("{prefix}.merge"), f);
        self.out.for_each_param(&format!("{prefix}.out"), f);
    }

    fn for_each_norm(&mut self, f: &mut dyn FnMut(&mut ActNorm<T>)) {
        f(&mut self.up.norm);
        f(&mut self.merge.norm);
    }
}

#[derive(Clone, Debug)]
struct UpStage<T: Elem> {
    up: DeconvUnit<T>,
    merge: ConvUnit<T>,
    block: StageBlock<T>,
}

/// U-shaped decoder with encoder skips (reflectance and shading tasks).
#[derive(Clone, Debug)]
struct UDecoder<T: Elem> {
    bottleneck: StageBlock<T>,
    stages: Vec<UpStage<T>>,
    head: Head<T>,
}

impl<T: Elem> UDecoder<T> {
    fn init<R: Rng>(rng: &mut R, cfg: &ModelConfig, levels: &[HyLoGGeom]) -> Result<Self> {
        let z = cfg.stages;
        let bottleneck = StageBlock::init(rng, cfg.backbone, &levels[z], &cfg.vit)?;
        let mut stages = Vec::new();
        for level in (1..z).rev() {
            let c = cfg.channels_at(level);
            stages.push(UpStage {
                up: DeconvUnit::init(rng, 4, 2 * c, c, 2, 1),
                merge: ConvUnit::init(rng, 3, 2 * c, c, 1, 1),
                block: StageBlock::init(rng, cfg.backbone, &levels[level], &cfg.vit)?,
            });
        }
        Ok(UDecoder {
            bottleneck,
            stages,
            head: Head::init(rng, cfg.base_channels, cfg.input_channels),
        })
    }

    /// Returns the per-level intermediate features (index z-1 holds the
    /// level-z feature) and the reconstructed image.
    fn forward(
        &mut self,
        e0: &Tensor<T>,
        es: &[Tensor<T>],
        mode: Mode,
    ) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let z_top = es.len();
        let mut feats: Vec<Option<Tensor<T>>> = vec![None; z_top];
        let mut d = self.bottleneck.forward(&es[z_top - 1], mode)?;
        feats[z_top - 1] = Some(d.clone());
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let level = z_top - 1 - i;
            let up = stage.up.forward(&d, mode)?;
            let cat = Tensor::concat(&[up, es[level - 1].clone()], 2)?;
            let merged = stage.merge.forward(&cat, mode)?;
            d = stage.block.forward(&merged, mode)?;
            feats[level - 1] = Some(d.clone());
        }
        let image = self.head.forward(&d, e0, mode)?;
        Ok((feats.into_iter().map(|f| f.expect("all levels filled")).collect(), image))
    }

    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.bottleneck
            .for_each_param(&format!("{prefix}.bottleneck"), f);
        let z_top = self.stages.len() + 1;
        for (i, s) in self.stages.iter_mut().enumerate() {
            let level = z_top - 1 - i;
            s.up.for_each_param(&format!("{prefix}.s{level}.up"), f);
            s.merge
                .for_each_param(&format!("{prefix}.s{level}.merge"), f);
            s.block
                .for_each_param(&format!("{prefix}.s{level}.block"), f);
        }
        self.head.for_each_param(&format!("{prefix}.head"), f);
    }

    fn for_each_norm(&mut self, f: &mut dyn FnMut(&mut ActNorm<T>)) {
        for_each_norm_in_block(&mut self.bottleneck, f);
        for s in &mut self.stages {
            f(&mut s.up.norm);
            f(&mut s.merge.norm);
            for_each_norm_in_block(&mut s.block, f);
        }
        self.head.for_each_norm(f);
    }
}

/// Complementary-feature fusion site: the selection module or, in the
/// ablation, plain summation.
#[derive(Clone, Debug)]
enum Fusion<T: Elem> {
    Cfsm(CfsmParams<T>),
    Sum,
}

impl<T: Elem> Fusion<T> {
    fn init<R: Rng>(rng: &mut R, cfg: &ModelConfig, channels: usize) -> Result<Self> {
        Ok(match cfg.fusion {
            FusionMode::Cfsm => Fusion::Cfsm(CfsmParams::init(rng, channels, cfg.cfsm_reduction)?),
            FusionMode::Sum => Fusion::Sum,
        })
    }

    fn apply(&self, d_prev: &Tensor<T>, d_r: &Tensor<T>, d_s: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Fusion::Cfsm(p) => cfsm(d_prev, d_r, d_s, p),
            Fusion::Sum => fuse_sum(d_prev, d_r, d_s),
        }
    }

    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        if let Fusion::Cfsm(p) = self {
            p.for_each_param(prefix, f);
        }
    }
}

#[derive(Clone, Debug)]
struct FusionUpStage<T: Elem> {
    up: DeconvUnit<T>,
    fuse: Fusion<T>,
    block: StageBlock<T>,
}

/// The dehazing decoder: no encoder skips except `e_0` at the head; the
/// same-level reflectance/shading features enter through fusion sites at
/// the bottleneck, every upsampling stage, and the head.
#[derive(Clone, Debug)]
struct FusionDecoder<T: Elem> {
    bottleneck_fuse: Fusion<T>,
    bottleneck: StageBlock<T>,
    stages: Vec<FusionUpStage<T>>,
    head_fuse: Fusion<T>,
    head: Head<T>,
}

impl<T: Elem> FusionDecoder<T> {
    fn init<R: Rng>(rng: &mut R, cfg: &ModelConfig, levels: &[HyLoGGeom]) -> Result<Self> {
        let z = cfg.stages;
        let bottleneck_fuse = Fusion::init(rng, cfg, cfg.channels_at(z))?;
        let bottleneck = StageBlock::init(rng, cfg.backbone, &levels[z], &cfg.vit)?;
        let mut stages = Vec::new();
        for level in (1..z).rev() {
            let c = cfg.channels_at(level);
            stages.push(FusionUpStage {
                up: DeconvUnit::init(rng, 4, 2 * c, c, 2, 1),
                fuse: Fusion::init(rng, cfg, c)?,
                block: StageBlock::init(rng, cfg.backbone, &levels[level], &cfg.vit)?,
            });
        }
        Ok(FusionDecoder {
            bottleneck_fuse,
            bottleneck,
            stages,
            head_fuse: Fusion::init(rng, cfg, cfg.channels_at(1))?,
            head: Head::init(rng, cfg.base_channels, cfg.input_channels),
        })
    }

    fn forward(
        &mut self,
        e0: &Tensor<T>,
        es: &[Tensor<T>],
        r_feats: Option<&[Tensor<T>]>,
        s_feats: Option<&[Tensor<T>]>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let comp = |feats: Option<&[Tensor<T>]>, level: usize| -> Tensor<T> {
            match feats {
                Some(f) => f[level - 1].clone(),
                None => Tensor::zeros(es[level - 1].shape()),
            }
        };
        let z_top = es.len();
        let fused = self.bottleneck_fuse.apply(
            &es[z_top - 1],
            &comp(r_feats, z_top),
            &comp(s_feats, z_top),
        )?;
        let mut d = self.bottleneck.forward(&fused, mode)?;
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let level = z_top - 1 - i;
            let up = stage.up.forward(&d, mode)?;
            let fused = stage
                .fuse
                .apply(&up, &comp(r_feats, level), &comp(s_feats, level))?;
            d = stage.block.forward(&fused, mode)?;
        }
        let fused = self
            .head_fuse
            .apply(&d, &comp(r_feats, 1), &comp(s_feats, 1))?;
        self.head.forward(&fused, e0, mode)
    }

    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.bottleneck_fuse
            .for_each_param(&format!("{prefix}.bottleneck_fuse"), f);
        self.bottleneck
            .for_each_param(&format!("{prefix}.bottleneck"), f);
        let z_top = self.stages.len() + 1;
        for (i, s) in self.stages.iter_mut().enumerate() {
            let level = z_top - 1 - i;
            s.up.for_each_param(&format!("{prefix}.s{level}.up"), f);
            s.fuse
                .for_each_param(&format!("{prefix}.s{level}.fuse"), f);
            s.block
                .for_each_param(&format!("{prefix}.s{level}.block"), f);
        }
        self.head_fuse
            .for_each_param(&format!("{prefix}.head_fuse"), f);
        self.head.for_each_param(&format!("{prefix}.head"), f);
    }

    fn for_each_norm(&mut self, f: &mut dyn FnMut(&mut ActNorm<T>)) {
        for_each_norm_in_block(&mut self.bottleneck, f);
        for s in &mut self.stages {
            f(&mut s.up.norm);
            for_each_norm_in_block(&mut s.block, f);
        }
        self.head.for_each_norm(f);
    }
}

fn for_each_norm_in_block<T: Elem>(b: &mut StageBlock<T>, f: &mut dyn FnMut(&mut ActNorm<T>)) {
    if let StageBlock::Cnn { block1, block2 } = b {
        f(&mut block1.norm);
        f(&mut block2.norm);
    }
}

/// One encoder stage: backbone block, then downscale conv.
#[derive(Clone, Debug)]
struct EncStage<T: Elem> {
    block: StageBlock<T>,
    down: ConvUnit<T>,
}

/// The full network.
#[derive(Clone, Debug)]
pub struct DehazeNet<T: Elem> {
    pub config: ModelConfig,
    pub input_size: (usize, usize),
    levels: Vec<HyLoGGeom>,
    extract: ConvUnit<T>,
    extract_res: ResidualConvBlock<T>,
    enc: Vec<EncStage<T>>,
    dec_r: Option<UDecoder<T>>,
    dec_s: Option<UDecoder<T>>,
    dec_d: FusionDecoder<T>,
}

impl<T: Elem> DehazeNet<T> {
    /// Build a freshly initialized network for the given input extent.
    /// Geometry (window grids, downscale factors, channel ladder) is
    /// resolved and checked here, not per forward pass.
    pub fn init<R: Rng>(cfg: &ModelConfig, input_hw: (usize, usize), rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = input_hw;
        let levels: Vec<HyLoGGeom> = (0..=cfg.stages)
            .map(|l| cfg.level_geom(h, w, l))
            .collect::<Result<_>>()?;

        let extract = ConvUnit::init(rng, 5, cfg.input_channels, cfg.base_channels, 1, 2);
        let extract_res = ResidualConvBlock::init(rng, cfg.base_channels);
        let mut enc = Vec::new();
        for z in 1..=cfg.stages {
            let c_in = cfg.channels_at(z - 1);
            enc.push(EncStage {
                block: StageBlock::init(rng, cfg.backbone, &levels[z - 1], &cfg.vit)?,
                down: ConvUnit::init(rng, 4, c_in, 2 * c_in, 2, 1),
            });
        }
        let dec_r = cfg
            .decoders
            .reflectance_enabled()
            .then(|| UDecoder::init(rng, cfg, &levels))
            .transpose()?;
        let dec_s = cfg
            .decoders
            .shading_enabled()
            .then(|| UDecoder::init(rng, cfg, &levels))
            .transpose()?;
        let dec_d = FusionDecoder::init(rng, cfg, &levels)?;
        Ok(DehazeNet {
            config: cfg.clone(),
            input_size: input_hw,
            levels,
            extract,
            extract_res,
            enc,
            dec_r,
            dec_s,
            dec_d,
        })
    }

    pub fn level_geometries(&self) -> &[HyLoGGeom] {
        &self.levels
    }

    /// Shared feature extraction: `e_0` at full resolution plus the
    /// per-stage deep features `e_1 .. e_Z`.
    pub fn encode(&mut self, image: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if image.rank() != 3 || image.shape()[2] != self.config.input_channels {
            return Err(Error::RankMismatch {
                op: "encode",
                expected: 3,
                shape: image.shape().to_vec(),
            });
        }
        if (image.shape()[0], image.shape()[1]) != self.input_size {
            return Err(Error::geometry(
                "encode",
                format!(
                    "network built for {:?}, got {}x{}",
                    self.input_size,
                    image.shape()[0],
                    image.shape()[1]
                ),
            ));
        }
        let mut x = self.extract.forward(image, mode)?;
        x = self.extract_res.forward(&x, mode)?;
        let e0 = x.clone();
        let mut es = Vec::with_capacity(self.enc.len());
        for stage in self.enc.iter_mut() {
            x = stage.block.forward(&x, mode)?;
            x = stage.down.forward(&x, mode)?;
            es.push(x.clone());
        }
        Ok((e0, es))
    }

    /// Full forward pass: encode once, run the enabled decoders, fuse
    /// complementary features into the dehazing stream.
    pub fn forward(&mut self, image: &Tensor<T>, mode: Mode) -> Result<ForwardOutputs<T>> {
        let (e0, es) = self.encode(image, mode)?;
        let (r_feats, reflectance) = match self.dec_r.as_mut() {
            Some(dec) => {
                let (f, img) = dec.forward(&e0, &es, mode)?;
                (Some(f), Some(img))
            }
            None => (None, None),
        };
        let (s_feats, shading) = match self.dec_s.as_mut() {
            Some(dec) => {
                let (f, img) = dec.forward(&e0, &es, mode)?;
                (Some(f), Some(img))
            }
            None => (None, None),
        };
        let dehazed = self.dec_d.forward(
            &e0,
            &es,
            r_feats.as_deref(),
            s_feats.as_deref(),
            mode,
        )?;
        Ok(ForwardOutputs {
            reflectance,
            shading,
            dehazed,
        })
    }

    /// Visit every learnable parameter in a stable order with stable
    /// hierarchical names.
    pub fn for_each_param(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.extract.for_each_param("extract", f);
        self.extract_res.for_each_param("extract_res", f);
        for (i, stage) in self.enc.iter_mut().enumerate() {
            let z = i + 1;
            stage.block.for_each_param(&format!("enc.s{z}.block"), f);
            stage.down.for_each_param(&format!("enc.s{z}.down"), f);
        }
        if let Some(dec) = self.dec_r.as_mut() {
            dec.for_each_param("dec_r", f);
        }
        if let Some(dec) = self.dec_s.as_mut() {
            dec.for_each_param("dec_s", f);
        }
        self.dec_d.for_each_param("dec_d", f);
    }

    /// Visit every activation normalization layer.
    pub fn for_each_norm(&mut self, f: &mut dyn FnMut(&mut ActNorm<T>)) {
        f(&mut self.extract.norm);
        f(&mut self.extract_res.norm);
        for stage in self.enc.iter_mut() {
            for_each_norm_in_block(&mut stage.block, f);
            f(&mut stage.down.norm);
        }
        if let Some(dec) = self.dec_r.as_mut() {
            dec.for_each_norm(f);
        }
        if let Some(dec) = self.dec_s.as_mut() {
            dec.for_each_norm(f);
        }
        self.dec_d.for_each_norm(f);
    }

    pub fn actnorms_initialized(&mut self) -> bool {
        let mut all = true;
        self.for_each_norm(&mut |n| all &= n.initialized);
        all
    }

    pub fn mark_actnorms_initialized(&mut self) {
        self.for_each_norm(&mut |n| n.initialized = true);
    }

    /// Named parameter handles (cheap clones sharing storage).
    pub fn named_params(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, p| out.push((name, p.clone())));
        out
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, p| n += p.numel());
        n
    }

    /// Drop gradient tracking on all parameters (timing runs).
    pub fn detach_params(&mut self) {
        self.for_each_param(&mut |_, p| *p = p.detach());
    }
}

pub(crate) fn gradchecks() -> Vec<crate::gradcheck::suite::Check> {
    use crate::gradcheck::gradcheck;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(stages: usize, c0: usize) -> ModelConfig {
        ModelConfig {
            stages,
            base_channels: c0,
            grid_per_side: 2,
            global_downscale: 2,
            cfsm_reduction: 2,
            vit: VitHyper {
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                pos_encoding: false,
            },
            ..ModelConfig::default()
        }
    }

    /// Initialize actnorms with one training forward, then treat the net
    /// as a pure function of (image, params) in eval mode.
    fn net_check(
        name: &'static str,
        cfg: ModelConfig,
        hw: usize,
        rng: &mut ChaCha8Rng,
        gc_cfg: &crate::gradcheck::GradCheckConfig,
        per_input: usize,
        loss_of: fn(&ForwardOutputs<f64>) -> Result<Tensor<f64>>,
    ) -> Result<crate::gradcheck::GradCheckReport> {
        use rand::Rng as _;
        let mut net = DehazeNet::<f64>::init(&cfg, (hw, hw), rng)?;
        let image = Tensor::from_fn(&[hw, hw, 3], |_| rng.random::<f64>());
        net.forward(&image, Mode::Train)?; // actnorm data-dependent init
        let params = net.named_params();
        let mut inputs = vec![image];
        inputs.extend(params.into_iter().map(|(_, p)| p));
        let gc_cfg = gc_cfg.clone().subsampled(per_input);
        gradcheck(
            name,
            move |ins| {
                let mut net = net.clone();
                let mut i = 1;
                net.for_each_param(&mut |_, p| {
                    *p = ins[i].clone();
                    i += 1;
                });
                loss_of(&net.forward(&ins[0], Mode::Eval)?)
            },
            &inputs,
            &gc_cfg,
        )
    }

    vec![
        ("encoder_1stage", 1e-4, |rng, cfg| {
            use rand::Rng as _;
            let mcfg = tiny_config(1, 2);
            let mut net = DehazeNet::<f64>::init(&mcfg, (8, 8), rng)?;
            let image = Tensor::from_fn(&[8, 8, 3], |_| rng.random::<f64>());
            net.forward(&image, Mode::Train)?;
            let params = net.named_params();
            let mut inputs = vec![image];
            inputs.extend(params.into_iter().map(|(_, p)| p));
            let gc_cfg = cfg.clone().subsampled(6);
            gradcheck(
                "encoder_1stage",
                move |ins| {
                    let mut net = net.clone();
                    let mut i = 1;
                    net.for_each_param(&mut |_, p| {
                        *p = ins[i].clone();
                        i += 1;
                    });
                    let (e0, es) = net.encode(&ins[0], Mode::Eval)?;
                    e0.mul(&e0)?.sum()?.add(&es[0].mul(&es[0])?.sum()?)
                },
                &inputs,
                &gc_cfg,
            )
        }),
        ("encoder_decoder_1stage", 1e-4, |rng, cfg| {
            net_check(
                "encoder_decoder_1stage",
                tiny_config(1, 2),
                8,
                rng,
                cfg,
                6,
                |out| {
                    let r = out.reflectance.as_ref().expect("full mode");
                    let sum_r = r.mul(r)?.sum()?;
                    let sum_d = out.dehazed.mul(&out.dehazed)?.sum()?;
                    sum_r.add(&sum_d)
                },
            )
        }),
        ("full_net_2stage", 1e-3, |rng, cfg| {
            net_check(
                "full_net_2stage",
                tiny_config(2, 4),
                16,
                rng,
                cfg,
                3,
                |out| {
                    let r = out.reflectance.as_ref().expect("full mode");
                    let s = out.shading.as_ref().expect("full mode");
                    let total = r.mul(r)?.sum()?;
                    let total = total.add(&s.mul(s)?.sum()?)?;
                    total.add(&out.dehazed.mul(&out.dehazed)?.sum()?)
                },
            )
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            stages: 2,
            base_channels: 4,
            grid_per_side: 4,
            cfsm_reduction: 2,
            vit: VitHyper {
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                pos_encoding: false,
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn encoder_ladder_doubles_channels_and_halves_extent() {
        let cfg = ModelConfig::default(); // Z=3, C0=16
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = DehazeNet::<f32>::init(&cfg, (64, 64), &mut rng).unwrap();
        let image = Tensor::from_fn(&[64, 64, 3], |_| 0.5f32);
        let (e0, es) = net.encode(&image, Mode::Train).unwrap();
        assert_eq!(e0.shape(), &[64, 64, 16]);
        assert_eq!(es[0].shape(), &[32, 32, 32]);
        assert_eq!(es[1].shape(), &[16, 16, 64]);
        assert_eq!(es[2].shape(), &[8, 8, 128]);
    }

    #[test]
    fn decoder_features_mirror_encoder_features() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = DehazeNet::<f32>::init(&cfg, (16, 16), &mut rng).unwrap();
        let image = Tensor::from_fn(&[16, 16, 3], |_| rng.random::<f32>());
        let (e0, es) = net.encode(&image, Mode::Train).unwrap();
        let dec = net.dec_r.as_mut().unwrap();
        let (feats, img) = dec.forward(&e0, &es, Mode::Train).unwrap();
        for (f, e) in feats.iter().zip(&es) {
            assert_eq!(f.shape(), e.shape());
        }
        assert_eq!(img.shape(), image.shape());
    }

    #[test]
    fn outputs_share_extent_and_live_inside_unit_interval() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = DehazeNet::<f32>::init(&cfg, (16, 16), &mut rng).unwrap();
        let image = Tensor::from_fn(&[16, 16, 3], |_| rng.random::<f32>());
        let out = net.forward(&image, Mode::Train).unwrap();
        for img in [
            out.reflectance.as_ref().unwrap(),
            out.shading.as_ref().unwrap(),
            &out.dehazed,
        ] {
            assert_eq!(img.shape(), image.shape());
            for &v in img.data() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn decoder_modes_control_which_outputs_exist() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (mode, has_r, has_s) in [
            (DecoderMode::Full, true, true),
            (DecoderMode::WithoutRs, false, false),
            (DecoderMode::WithR, true, false),
            (DecoderMode::WithS, false, true),
        ] {
            let cfg = ModelConfig {
                decoders: mode,
                ..small_cfg()
            };
            let mut net = DehazeNet::<f32>::init(&cfg, (16, 16), &mut rng).unwrap();
            let image = Tensor::from_fn(&[16, 16, 3], |_| rng.random::<f32>());
            let out = net.forward(&image, Mode::Train).unwrap();
            assert_eq!(out.reflectance.is_some(), has_r, "{mode:?}");
            assert_eq!(out.shading.is_some(), has_s, "{mode:?}");
        }
    }

    #[test]
    fn encoder_receives_gradient_from_every_task_loss() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = DehazeNet::<f32>::init(&cfg, (16, 16), &mut rng).unwrap();
        let image = Tensor::from_fn(&[16, 16, 3], |_| rng.random::<f32>());
        // initialize actnorms once so repeated forwards are comparable
        net.forward(&image, Mode::Train).unwrap();
        let encoder_params: Vec<(String, Tensor<f32>)> = {
            let mut all = Vec::new();
            net.for_each_param(&mut |name, p| {
                if name.starts_with("enc") || name.starts_with("extract") {
                    all.push((name, p.clone()));
                }
            });
            all
        };
        for pick in 0..3 {
            encoder_params.iter().for_each(|(_, p)| p.zero_grad());
            let out = net.forward(&image, Mode::Eval).unwrap();
            let target = match pick {
                0 => out.reflectance.unwrap(),
                1 => out.shading.unwrap(),
                _ => out.dehazed,
            };
            target.sum().unwrap().backward().unwrap();
            // the same parameter objects received gradients from this path
            let with_grad = encoder_params
                .iter()
                .filter(|(_, p)| p.grad().is_some())
                .count();
            assert_eq!(with_grad, encoder_params.len(), "loss path {pick}");
        }
    }

    #[test]
    fn missing_divisibility_is_a_build_error() {
        let cfg = small_cfg(); // Z=2 wants /4
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(DehazeNet::<f32>::init(&cfg, (18, 18), &mut rng).is_err());
    }

    #[test]
    fn param_names_are_unique_and_stable() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = DehazeNet::<f32>::init(&cfg, (16, 16), &mut rng).unwrap();
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::BTreeSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        let names2: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names2);
    }
}
