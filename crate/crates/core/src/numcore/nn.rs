//! Neural building blocks composed on a [`Graph`]: affine layers,
//! multi-head self-attention and pre-norm transformer blocks.
//!
//! Parameters live in a [`ParamStore`] under dotted names rooted at a
//! caller-chosen prefix, e.g. `block0.attn.wq`.

use super::graph::{Graph, NodeId};
use super::rng::SplitMix64;
use super::tensor::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Standard deviation of the normal initializer for weight matrices.
pub const INIT_STD: f64 = 0.02;

pub const LN_EPS: f64 = 1e-5;

/// Numerically stable softmax of a vector.
pub fn softmax<T: Real>(x: &[T]) -> Result<Vec<T>> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericInput(format!("softmax input {i} is {:?}", x[i])));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().copied().sum::<T>();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Layer normalization of one vector with population variance.
pub fn layer_norm<T: Real>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> Result<Vec<T>> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::Shape(format!(
            "layer norm of length {} with gamma {} and beta {}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::Argument("layer norm eps must be positive".into()));
    }
    let n = T::from_usize(x.len().max(1)).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + eps).sqrt();
    Ok(x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| g * (v - mean) * inv + b)
        .collect())
}

fn normal_tensor<T: Real>(rng: &mut SplitMix64, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.normal() * std)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Registers `{prefix}.w` (`fan_in x fan_out`, normal) and `{prefix}.b` (zeros).
pub fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut SplitMix64,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), normal_tensor(rng, &[fan_in, fan_out], INIT_STD))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

pub fn init_layer_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::filled(&[d], T::one()))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]))
}

/// Registers the parameters of one transformer block of width `d`.
pub fn init_transformer_block<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut SplitMix64,
    prefix: &str,
    d: usize,
) -> Result<()> {
    init_layer_norm(store, &format!("{prefix}.ln1"), d)?;
    init_linear(store, rng, &format!("{prefix}.attn.q"), d, d)?;
    // A key bias only shifts every score of a query by the same amount and
    // cancels in the softmax, so the key projection has none.
    store.insert(format!("{prefix}.attn.k.w"), normal_tensor(rng, &[d, d], INIT_STD))?;
    init_linear(store, rng, &format!("{prefix}.attn.v"), d, d)?;
    init_linear(store, rng, &format!("{prefix}.attn.o"), d, d)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), d)?;
    init_linear(store, rng, &format!("{prefix}.mlp.fc1"), d, 4 * d)?;
    init_linear(store, rng, &format!("{prefix}.mlp.fc2"), 4 * d, d)
}

/// `x W + b` using `{prefix}.w` and `{prefix}.b`.
pub fn linear<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

fn layer_norm_node<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, T::lit(LN_EPS))
}

/// Output of [`multi_head_attention`]: the projected output and the
/// attention-core node, whose weights can be inspected.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub output: NodeId,
    pub core: NodeId,
}

/// Masked multi-head self-attention over the rows of `x` (no positional
/// encoding, so the map is permutation-equivariant).
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: NodeId,
    mask: &[bool],
    heads: usize,
) -> Result<AttentionNodes> {
    let n = g.dims(x).0;
    multi_head_attention_segments(g, store, prefix, x, mask, heads, &[n])
}

/// [`multi_head_attention`] over stacked independent sequences whose row
/// counts are given by `segments`.
pub fn multi_head_attention_segments<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: NodeId,
    mask: &[bool],
    heads: usize,
    segments: &[usize],
) -> Result<AttentionNodes> {
    let d = g.dims(x).1;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    let q = linear(g, store, &format!("{prefix}.q"), x)?;
    let wk = g.param(store, &format!("{prefix}.k.w"))?;
    let k = g.matmul(x, wk)?;
    let v = linear(g, store, &format!("{prefix}.v"), x)?;
    let core = g.attention_segments(q, k, v, mask, heads, segments)?;
    let output = linear(g, store, &format!("{prefix}.o"), core)?;
    Ok(AttentionNodes { output, core })
}

/// Pre-norm residual block: `x + MHA(LN(x))`, then `x + MLP(LN(x))` with a
/// GELU MLP of hidden width `4d`.
pub fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: NodeId,
    mask: &[bool],
    heads: usize,
) -> Result<NodeId> {
    let n = g.dims(x).0;
    transformer_block_segments(g, store, prefix, x, mask, heads, &[n])
}

/// [`transformer_block`] over stacked independent sequences.
pub fn transformer_block_segments<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: NodeId,
    mask: &[bool],
    heads: usize,
    segments: &[usize],
) -> Result<NodeId> {
    let n1 = layer_norm_node(g, store, &format!("{prefix}.ln1"), x)?;
    let attn = multi_head_attention_segments(g, store, &format!("{prefix}.attn"), n1, mask, heads, segments)?;
    let x = g.add(x, attn.output)?;
    let n2 = layer_norm_node(g, store, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, store, &format!("{prefix}.mlp.fc1"), n2)?;
    let h = g.gelu(h);
    let h = linear(g, store, &format!("{prefix}.mlp.fc2"), h)?;
    g.add(x, h)
}
