//! The standard ViT building block: multi-head self-attention and an MLP
//! with pre-norm residual wiring, operating on token sequences derived
//! from feature maps (one pixel per token).

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::{fan_in_uniform, ones_param, zeros_param};
use crate::tensor::{Elem, Tensor};

/// A flattened feature map: L x C tokens plus the spatial extent they
/// came from (L == h * w).
#[derive(Clone, Debug)]
pub struct TokenSeq<T: Elem> {
    pub tokens: Tensor<T>,
    pub origin: (usize, usize),
}

/// Parameters of one ViT block.
///
/// All fields are public so tests can splice in degenerate values (e.g.
/// zeroed output projections turn the block into the identity map).
#[derive(Clone, Debug)]
pub struct ViTParams<T: Elem> {
    pub dim: usize,
    pub heads: usize,
    pub q_w: Tensor<T>,
    pub q_b: Tensor<T>,
    pub k_w: Tensor<T>,
    pub k_b: Tensor<T>,
    pub v_w: Tensor<T>,
    pub v_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub mlp_in_w: Tensor<T>,
    pub mlp_in_b: Tensor<T>,
    pub mlp_out_w: Tensor<T>,
    pub mlp_out_b: Tensor<T>,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    /// Learnable position table (length x dim); present only when the
    /// positional-encoding ablation is enabled.
    pub pos_embed: Option<Tensor<T>>,
}

impl<T: Elem> ViTParams<T> {
    pub fn init<R: Rng>(
        rng: &mut R,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        pos_len: Option<usize>,
    ) -> Result<Self> {
        if dim == 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "token width {dim} must be divisible by head count {heads}"
            )));
        }
        let hidden = mlp_ratio * dim;
        Ok(ViTParams {
            dim,
            heads,
            q_w: fan_in_uniform(rng, dim, &[dim, dim]),
            q_b: zeros_param(&[1, dim]),
            k_w: fan_in_uniform(rng, dim, &[dim, dim]),
            k_b: zeros_param(&[1, dim]),
            v_w: fan_in_uniform(rng, dim, &[dim, dim]),
            v_b: zeros_param(&[1, dim]),
            proj_w: fan_in_uniform(rng, dim, &[dim, dim]),
            proj_b: zeros_param(&[1, dim]),
            mlp_in_w: fan_in_uniform(rng, dim, &[dim, hidden]),
            mlp_in_b: zeros_param(&[1, hidden]),
            mlp_out_w: fan_in_uniform(rng, hidden, &[hidden, dim]),
            mlp_out_b: zeros_param(&[1, dim]),
            ln1_gamma: ones_param(&[dim]),
            ln1_beta: zeros_param(&[dim]),
            ln2_gamma: ones_param(&[dim]),
            ln2_beta: zeros_param(&[dim]),
            pos_embed: pos_len.map(|l| fan_in_uniform(rng, dim, &[l, dim])),
        })
    }

    /// Zero the attention and MLP output projections, making
    /// [`vit_block`] the identity map (residual path only).
    pub fn zero_output_projections(&mut self) {
        self.proj_w = zeros_param(&[self.dim, self.dim]);
        self.proj_b = zeros_param(&[1, self.dim]);
        let hidden = self.mlp_in_w.shape()[1];
        self.mlp_out_w = zeros_param(&[hidden, self.dim]);
        self.mlp_out_b = zeros_param(&[1, self.dim]);
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.q.weight"), &mut self.q_w);
        f(format!("{prefix}.q.bias"), &mut self.q_b);
        f(format!("{prefix}.k.weight"), &mut self.k_w);
        f(format!("{prefix}.k.bias"), &mut self.k_b);
        f(format!("{prefix}.v.weight"), &mut self.v_w);
        f(format!("{prefix}.v.bias"), &mut self.v_b);
        f(format!("{prefix}.proj.weight"), &mut self.proj_w);
        f(format!("{prefix}.proj.bias"), &mut self.proj_b);
        f(format!("{prefix}.mlp_in.weight"), &mut self.mlp_in_w);
        f(format!("{prefix}.mlp_in.bias"), &mut self.mlp_in_b);
        f(format!("{prefix}.mlp_out.weight"), &mut self.mlp_out_w);
        f(format!("{prefix}.mlp_out.bias"), &mut self.mlp_out_b);
        f(format!("{prefix}.ln1.gamma"), &mut self.ln1_gamma);
        f(format!("{prefix}.ln1.beta"), &mut self.ln1_beta);
        f(format!("{prefix}.ln2.gamma"), &mut self.ln2_gamma);
        f(format!("{prefix}.ln2.beta"), &mut self.ln2_beta);
        if let Some(pe) = &mut self.pos_embed {
            f(format!("{prefix}.pos_embed"), pe);
        }
    }
}

/// Flatten an H x W x C map into row-major raster tokens.
pub fn tokenize<T: Elem>(x: &Tensor<T>) -> Result<TokenSeq<T>> {
    if x.rank() != 3 {
        return Err(Error::RankMismatch {
            op: "tokenize",
            expected: 3,
            shape: x.shape().to_vec(),
        });
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Ok(TokenSeq {
        tokens: x.reshape(&[h * w, c])?,
        origin: (h, w),
    })
}

/// Exact inverse of [`tokenize`].
pub fn detokenize<T: Elem>(t: &TokenSeq<T>) -> Result<Tensor<T>> {
    let (h, w) = t.origin;
    let l = t.tokens.shape()[0];
    if l != h * w {
        return Err(Error::geometry(
            "detokenize",
            format!("{l} tokens cannot fill a {h}x{w} map"),
        ));
    }
    let c = t.tokens.shape()[1];
    t.tokens.reshape(&[h, w, c])
}

fn linear<T: Elem>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    x.matmul(w)?.add(b)
}

/// Multi-head self-attention, returning the per-head attention maps as
/// well (rows of each map form a probability simplex).
pub fn mhsa_with_attn<T: Elem>(
    tokens: &Tensor<T>,
    p: &ViTParams<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    if tokens.rank() != 2 || tokens.shape()[1] != p.dim {
        return Err(Error::ShapeMismatch {
            op: "mhsa",
            lhs: tokens.shape().to_vec(),
            rhs: vec![p.dim, p.dim],
        });
    }
    let head_dim = p.dim / p.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q = linear(tokens, &p.q_w, &p.q_b)?;
    let k = linear(tokens, &p.k_w, &p.k_b)?;
    let v = linear(tokens, &p.v_w, &p.v_b)?;

    let mut head_outs = Vec::with_capacity(p.heads);
    let mut attns = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        // scale the narrow query matrix rather than the L x L score map
        let qh = q.narrow(1, h * head_dim, head_dim)?.mul_scalar(scale);
        let kh = k.narrow(1, h * head_dim, head_dim)?;
        let vh = v.narrow(1, h * head_dim, head_dim)?;
        let scores = qh.matmul(&kh.transpose2d()?)?;
        let attn = scores.softmax(1)?;
        head_outs.push(attn.matmul(&vh)?);
        attns.push(attn);
    }
    let merged = Tensor::concat(&head_outs, 1)?;
    Ok((linear(&merged, &p.proj_w, &p.proj_b)?, attns))
}

/// Multi-head self-attention; shape preserving.
pub fn mhsa<T: Elem>(tokens: &Tensor<T>, p: &ViTParams<T>) -> Result<Tensor<T>> {
    Ok(mhsa_with_attn(tokens, p)?.0)
}

fn mlp<T: Elem>(tokens: &Tensor<T>, p: &ViTParams<T>) -> Result<Tensor<T>> {
    let hidden = linear(tokens, &p.mlp_in_w, &p.mlp_in_b)?.gelu();
    linear(&hidden, &p.mlp_out_w, &p.mlp_out_b)
}

/// One pre-norm ViT block:
/// `t <- t + mhsa(ln1(t)); t <- t + mlp(ln2(t))`, with the learnable
/// position table added to the input first when enabled.
pub fn vit_block<T: Elem>(t: &TokenSeq<T>, p: &ViTParams<T>) -> Result<TokenSeq<T>> {
    let mut x = t.tokens.clone();
    if let Some(pe) = &p.pos_embed {
        if pe.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                op: "vit_block",
                lhs: x.shape().to_vec(),
                rhs: pe.shape().to_vec(),
            });
        }
        x = x.add(pe)?;
    }
    let normed = x.layernorm(&p.ln1_gamma, &p.ln1_beta, 1)?;
    x = x.add(&mhsa(&normed, p)?)?;
    let normed = x.layernorm(&p.ln2_gamma, &p.ln2_beta, 1)?;
    x = x.add(&mlp(&normed, p)?)?;
    Ok(TokenSeq {
        tokens: x,
        origin: t.origin,
    })
}

/// A stack of independently parameterized ViT blocks (the depth knob).
#[derive(Clone, Debug)]
pub struct ViTStack<T: Elem> {
    pub blocks: Vec<ViTParams<T>>,
}

impl<T: Elem> ViTStack<T> {
    pub fn init<R: Rng>(
        rng: &mut R,
        depth: usize,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        pos_len: Option<usize>,
    ) -> Result<Self> {
        let blocks = (0..depth.max(1))
            .map(|_| ViTParams::init(rng, dim, heads, mlp_ratio, pos_len))
            .collect::<Result<_>>()?;
        Ok(ViTStack { blocks })
    }

    pub fn forward(&self, t: &TokenSeq<T>) -> Result<TokenSeq<T>> {
        let mut cur = t.clone();
        for p in &self.blocks {
            cur = vit_block(&cur, p)?;
        }
        Ok(cur)
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_param(&format!("{prefix}.block{i}"), f);
        }
    }
}

/// Reorder token rows by `perm` (values only; used by the equivariance
/// tests, not part of any differentiation path).
pub fn permute_rows<T: Elem>(tokens: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    if tokens.rank() != 2 || perm.len() != tokens.shape()[0] {
        return Err(Error::geometry(
            "permute_rows",
            format!(
                "permutation of length {} on shape {:?}",
                perm.len(),
                tokens.shape()
            ),
        ));
    }
    let c = tokens.shape()[1];
    let src = tokens.data();
    let mut data = Vec::with_capacity(src.len());
    for &p in perm {
        data.extend_from_slice(&src[p * c..(p + 1) * c]);
    }
    Tensor::from_vec(data, tokens.shape())
}

pub(crate) fn gradchecks() -> Vec<crate::gradcheck::suite::Check> {
    use crate::gradcheck::gradcheck;
    vec![
        ("mhsa", 1e-4, |rng, cfg| {
            let p = ViTParams::<f64>::init(rng, 4, 2, 2, None)?;
            let tokens = Tensor::from_fn(&[5, 4], |_| rng.random::<f64>() - 0.5);
            let (inputs, rebuild) = flatten_vit_params(&p);
            let mut all = vec![tokens];
            all.extend(inputs);
            gradcheck(
                "mhsa",
                move |ins| {
                    let p = rebuild(&ins[1..]);
                    let y = mhsa(&ins[0], &p)?;
                    y.mul(&y)?.sum()
                },
                &all,
                cfg,
            )
        }),
        ("vit_block", 1e-4, |rng, cfg| {
            let p = ViTParams::<f64>::init(rng, 4, 2, 2, None)?;
            let tokens = Tensor::from_fn(&[6, 4], |_| rng.random::<f64>() - 0.5);
            let (inputs, rebuild) = flatten_vit_params(&p);
            let mut all = vec![tokens];
            all.extend(inputs);
            gradcheck(
                "vit_block",
                move |ins| {
                    let p = rebuild(&ins[1..]);
                    let t = TokenSeq {
                        tokens: ins[0].clone(),
                        origin: (2, 3),
                    };
                    let y = vit_block(&t, &p)?;
                    y.tokens.mul(&y.tokens)?.sum()
                },
                &all,
                cfg,
            )
        }),
    ]
}

/// Split a ViTParams into a leaf list plus a closure that reassembles it;
/// lets the finite-difference checker perturb every parameter.
#[allow(clippy::type_complexity)]
pub(crate) fn flatten_vit_params<T: Elem>(
    p: &ViTParams<T>,
) -> (Vec<Tensor<T>>, impl Fn(&[Tensor<T>]) -> ViTParams<T> + Clone) {
    let inputs = vec![
        p.q_w.clone(),
        p.q_b.clone(),
        p.k_w.clone(),
        p.k_b.clone(),
        p.v_w.clone(),
        p.v_b.clone(),
        p.proj_w.clone(),
        p.proj_b.clone(),
        p.mlp_in_w.clone(),
        p.mlp_in_b.clone(),
        p.mlp_out_w.clone(),
        p.mlp_out_b.clone(),
        p.ln1_gamma.clone(),
        p.ln1_beta.clone(),
        p.ln2_gamma.clone(),
        p.ln2_beta.clone(),
    ];
    let dim = p.dim;
    let heads = p.heads;
    let rebuild = move |ins: &[Tensor<T>]| ViTParams {
        dim,
        heads,
        q_w: ins[0].clone(),
        q_b: ins[1].clone(),
        k_w: ins[2].clone(),
        k_b: ins[3].clone(),
        v_w: ins[4].clone(),
        v_b: ins[5].clone(),
        proj_w: ins[6].clone(),
        proj_b: ins[7].clone(),
        mlp_in_w: ins[8].clone(),
        mlp_in_b: ins[9].clone(),
        mlp_out_w: ins[10].clone(),
        mlp_out_b: ins[11].clone(),
        ln1_gamma: ins[12].clone(),
        ln1_beta: ins[13].clone(),
        ln2_gamma: ins[14].clone(),
        ln2_beta: ins[15].clone(),
        pos_embed: None,
    };
    (inputs, rebuild)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenize_is_row_major_raster_order() {
        // 2x2xC map -> 4xC sequence in row-major order.
        let x = Tensor::from_vec((0..8).map(|i| i as f64).collect(), &[2, 2, 2]).unwrap();
        let t = tokenize(&x).unwrap();
        assert_eq!(t.tokens.shape(), &[4, 2]);
        assert_eq!(t.tokens.at(&[1, 0]), x.at(&[0, 1, 0]));
        assert_eq!(t.tokens.at(&[2, 1]), x.at(&[1, 0, 1]));
    }

    #[test]
    fn tokenize_roundtrip_is_bit_exact() {
        let x = Tensor::from_fn(&[3, 5, 4], |i| (i as f64).sin());
        let back = detokenize(&tokenize(&x).unwrap()).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn permute_and_inverse_permute_roundtrip() {
        let x = Tensor::from_fn(&[4, 4, 2], |i| i as f64);
        let t = tokenize(&x).unwrap();
        let perm: Vec<usize> = vec![7, 2, 0, 5, 1, 15, 3, 4, 6, 8, 9, 10, 12, 11, 14, 13];
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let permuted = permute_rows(&t.tokens, &perm).unwrap();
        let restored = permute_rows(&permuted, &inv).unwrap();
        let back = detokenize(&TokenSeq {
            tokens: restored,
            origin: t.origin,
        })
        .unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ViTParams::<f64>::init(&mut rng, 4, 2, 2, None).unwrap();
        let tokens = Tensor::from_fn(&[1, 4], |_| rng.random::<f64>());
        let (_, attns) = mhsa_with_attn(&tokens, &p).unwrap();
        for a in attns {
            assert_eq!(a.shape(), &[1, 1]);
            assert!((a.data()[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ViTParams::<f64>::init(&mut rng, 8, 4, 4, None).unwrap();
        let tokens = Tensor::from_fn(&[9, 8], |_| rng.random::<f64>() * 2.0 - 1.0);
        let (_, attns) = mhsa_with_attn(&tokens, &p).unwrap();
        for a in attns {
            for r in 0..9 {
                let s: f64 = (0..9).map(|c| a.at(&[r, c])).sum();
                assert!((s - 1.0).abs() < 1e-6);
                for c in 0..9 {
                    assert!(a.at(&[r, c]) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn zeroed_projections_make_the_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ViTParams::<f64>::init(&mut rng, 4, 2, 4, None).unwrap();
        p.zero_output_projections();
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i as f64) * 0.25 - 1.0);
        let out = detokenize(&vit_block(&tokenize(&x).unwrap(), &p).unwrap()).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn block_is_permutation_equivariant_without_pos_embed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ViTParams::<f64>::init(&mut rng, 4, 2, 4, None).unwrap();
        let tokens = Tensor::from_fn(&[6, 4], |_| rng.random::<f64>() * 2.0 - 1.0);
        let perm = vec![3, 0, 5, 1, 4, 2];
        let seq = |t: Tensor<f64>| TokenSeq {
            tokens: t,
            origin: (1, 6),
        };
        let out_then_perm = permute_rows(
            &vit_block(&seq(tokens.clone()), &p).unwrap().tokens,
            &perm,
        )
        .unwrap();
        let perm_then_out = vit_block(&seq(permute_rows(&tokens, &perm).unwrap()), &p)
            .unwrap()
            .tokens;
        let diff = out_then_perm.max_abs_diff(&perm_then_out).unwrap();
        assert!(diff < 1e-5, "diff {diff}");
    }

    #[test]
    fn pos_embed_length_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ViTParams::<f64>::init(&mut rng, 4, 2, 4, Some(9)).unwrap();
        let x = Tensor::from_fn(&[2, 2, 4], |i| i as f64);
        assert!(vit_block(&tokenize(&x).unwrap(), &p).is_err());
    }
}
