//! Frozen vision-transformer skeleton: patch embedding, positional
//! embedding, class token, multi-head self-attention, and the MLP sublayer.
//!
//! All weights here stay frozen during training; the trainable paths hook in
//! as additive deltas on the Q/K/V projections and as a side branch next to
//! the MLP. Token layout: row 0 is the class token, rows 1.. are the patch
//! tokens in row-major grid order.

use crate::bind::Binding;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Std of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Patch projection, positional embedding, and class token. All frozen.
#[derive(Debug, Clone)]
pub struct PatchEmbed<T: Scalar> {
    /// [3·P·P × D]
    pub proj: Tensor<T>,
    /// [N_t × D], added after the class token is prepended.
    pub pos: Tensor<T>,
    /// [1 × D]
    pub class_token: Tensor<T>,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn init(patch_size: usize, num_tokens: usize, embed_dim: usize, rng: &mut Stream) -> Self {
        let patch_dim = 3 * patch_size * patch_size;
        PatchEmbed {
            proj: trunc_normal_tensor(&[patch_dim, embed_dim], rng),
            pos: trunc_normal_tensor(&[num_tokens, embed_dim], rng),
            class_token: trunc_normal_tensor(&[1, embed_dim], rng),
        }
    }
}

/// One frozen transformer block: attention projections, MLP, and the two
/// layer norms.
#[derive(Debug, Clone)]
pub struct ViTBlockWeights<T: Scalar> {
    /// [D × dim] each.
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    /// [dim × D]
    pub w_o: Tensor<T>,
    /// [D × 4D]
    pub mlp_w1: Tensor<T>,
    /// [4D × D]
    pub mlp_w2: Tensor<T>,
    pub ln1_scale: Tensor<T>,
    pub ln1_shift: Tensor<T>,
    pub ln2_scale: Tensor<T>,
    pub ln2_shift: Tensor<T>,
}

impl<T: Scalar> ViTBlockWeights<T> {
    pub fn init(embed_dim: usize, hidden_dim: usize, rng: &mut Stream) -> Self {
        let d = embed_dim;
        ViTBlockWeights {
            w_q: trunc_normal_tensor(&[d, hidden_dim], rng),
            w_k: trunc_normal_tensor(&[d, hidden_dim], rng),
            w_v: trunc_normal_tensor(&[d, hidden_dim], rng),
            w_o: trunc_normal_tensor(&[hidden_dim, d], rng),
            mlp_w1: trunc_normal_tensor(&[d, 4 * d], rng),
            mlp_w2: trunc_normal_tensor(&[4 * d, d], rng),
            ln1_scale: Tensor::full(&[d], T::one()),
            ln1_shift: Tensor::zeros(&[d]),
            ln2_scale: Tensor::full(&[d], T::one()),
            ln2_shift: Tensor::zeros(&[d]),
        }
    }

    /// Insert the block weights into a graph as frozen constants.
    pub fn bind(&self, b: &Binding<'_, T>) -> BlockVars {
        BlockVars {
            w_q: b.frozen(&self.w_q),
            w_k: b.frozen(&self.w_k),
            w_v: b.frozen(&self.w_v),
            w_o: b.frozen(&self.w_o),
            mlp_w1: b.frozen(&self.mlp_w1),
            mlp_w2: b.frozen(&self.mlp_w2),
            ln1_scale: b.frozen(&self.ln1_scale),
            ln1_shift: b.frozen(&self.ln1_shift),
            ln2_scale: b.frozen(&self.ln2_scale),
            ln2_shift: b.frozen(&self.ln2_shift),
        }
    }
}

/// Graph handles for one block's frozen weights.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub mlp_w1: Var,
    pub mlp_w2: Var,
    pub ln1_scale: Var,
    pub ln1_shift: Var,
    pub ln2_scale: Var,
    pub ln2_shift: Var,
}

pub fn trunc_normal_tensor<T: Scalar>(shape: &[usize], rng: &mut Stream) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.trunc_normal(INIT_STD))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Cut a [3×H×W] image into non-overlapping P×P patches.
///
/// Output row `gi·(W/P) + gj` holds patch `(gi, gj)` with features ordered
/// channel-major, then row-major within the patch.
pub fn extract_patches<T: Scalar>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(Error::dim(format!(
            "expected a [3,H,W] image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let p = patch_size;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::dim(format!(
            "image {h}x{w} not divisible into {p}x{p} patches"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let patch_dim = 3 * p * p;
    let mut out = vec![T::zero(); gh * gw * patch_dim];
    let data = image.data();
    for gi in 0..gh {
        for gj in 0..gw {
            let row = gi * gw + gj;
            let mut f = 0;
            for c in 0..3 {
                for di in 0..p {
                    for dj in 0..p {
                        out[row * patch_dim + f] =
                            data[c * h * w + (gi * p + di) * w + (gj * p + dj)];
                        f += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, patch_dim], out)
}

/// Patch-project an image, prepend the class token, add positional embedding.
/// Pure value computation: no gradient ever reaches these weights.
pub fn patch_embed<T: Scalar>(
    image: &Tensor<T>,
    pe: &PatchEmbed<T>,
    patch_size: usize,
) -> Result<Tensor<T>> {
    let patches = extract_patches(image, patch_size)?;
    let projected = crate::tensor::matmul(&patches, &pe.proj)?;
    let d = pe.proj.cols();
    let nt = projected.rows() + 1;
    if pe.pos.rows() != nt {
        return Err(Error::dim(format!(
            "positional embedding has {} rows, need {nt}",
            pe.pos.rows()
        )));
    }
    let mut data = Vec::with_capacity(nt * d);
    data.extend_from_slice(pe.class_token.data());
    data.extend_from_slice(projected.data());
    let tokens = Tensor::new(vec![nt, d], data)?;
    tokens.add(&pe.pos)
}

/// Multi-head self-attention over already-normalized tokens.
///
/// `deltas` are additive corrections to the Q/K/V projections; `None` is the
/// plain frozen path.
pub fn attention<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    bv: &BlockVars,
    heads: usize,
    deltas: Option<[Var; 3]>,
) -> Result<Var> {
    let dim = g.value(bv.w_q).cols();
    if heads == 0 || dim % heads != 0 {
        return Err(Error::dim(format!("dim {dim} not divisible into {heads} heads")));
    }
    let head_dim = dim / heads;
    let mut q = g.matmul(x, bv.w_q)?;
    let mut k = g.matmul(x, bv.w_k)?;
    let mut v = g.matmul(x, bv.w_v)?;
    if let Some([dq, dk, dv]) = deltas {
        q = g.add(q, dq)?;
        k = g.add(k, dk)?;
        v = g.add(v, dv)?;
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let scores = g.scale_const(g.matmul(qh, g.transpose(kh)?)?, scale);
        let attn = g.softmax(scores, 1)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat_cols(&outs)?;
    g.matmul(merged, bv.w_o)
}

/// The frozen two-layer MLP with GELU, over already-normalized tokens.
pub fn mlp<T: Scalar>(g: &Graph<T>, x: Var, bv: &BlockVars) -> Result<Var> {
    let h = g.gelu(g.matmul(x, bv.mlp_w1)?);
    g.matmul(h, bv.mlp_w2)
}
