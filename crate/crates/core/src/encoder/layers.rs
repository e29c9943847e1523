//! Differentiable building blocks of the hybrid encoder.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// `x·W + b` over the last axis.
pub fn linear(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    g.add_trailing(y, bias)
}

/// Two-layer perceptron with a relu hidden layer.
pub fn mlp(g: &mut Graph, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = linear(g, x, w1, b1)?;
    let h = g.relu(h);
    linear(g, h, w2, b2)
}

/// Shortens the borrow of an optional RNG handle.
pub fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    rng.as_mut().map(|r| &mut **r as &mut dyn RngCore)
}

/// Inverted dropout; identity when `rng` is `None` or `rate` is zero.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut dyn RngCore>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let mask: Vec<f64> = (0..g.value(x).numel())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = g.constant(Tensor::from_parts(g.shape(x).to_vec(), mask));
            g.mul(x, mask).expect("mask shape matches")
        }
        _ => x,
    }
}

/// Segment embedding: each length-`L_s` slice of the history is mapped
/// affinely to `d` dims and offset by its positional vector.
///
/// `x` is `[batch, L, C]`; the result is `[batch, P, d]`.
pub fn segment_embed(g: &mut Graph, x: Var, segment: usize, weight: Var, bias: Var, pos: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || segment == 0 || s[1] % segment != 0 {
        return Err(Error::Config(format!(
            "history {:?} cannot be cut into segments of length {}",
            s, segment
        )));
    }
    let segments = s[1] / segment;
    let seg = g.reshape(x, &[s[0], segments, segment * s[2]])?;
    let e = g.matmul(seg, weight)?;
    let e = g.add_trailing(e, bias)?;
    g.add_trailing(e, pos)
}

/// Weights of one post-norm transformer layer.
#[derive(Clone, Copy, Debug)]
pub struct TransformerWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

pub struct TransformerOutput {
    pub hidden: Var,
    /// `[batch·heads, queries, P]`
    pub attention: Var,
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, p, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, p, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, p, d / heads])
}

/// `U = LN(E + MSA(E))`, `H = LN(U + FFN(U))` over `[batch, P, d]`.
///
/// With `last_only` the queries, residuals and feed-forward are evaluated
/// for the final position alone; keys and values still span all positions,
/// so the returned `[batch, 1, d]` equals the last row of the full layer.
pub fn transformer_layer(
    g: &mut Graph,
    e: Var,
    w: &TransformerWeights,
    heads: usize,
    last_only: bool,
    dropout_rate: f64,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<TransformerOutput> {
    let s = g.shape(e).to_vec();
    let (batch, positions, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("d={} is not divisible by {} heads", d, heads)));
    }
    let dh = d / heads;
    let query_src = if last_only { g.slice(e, 1, positions - 1, 1)? } else { e };
    let queries = g.shape(query_src)[1];

    let q = linear(g, query_src, w.wq, w.bq)?;
    // A key bias shifts every score of a query equally and cancels in the softmax.
    let k = g.matmul(e, w.wk)?;
    let v = linear(g, e, w.wv, w.bv)?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attention = g.softmax(scores, 2)?;
    let ctx = g.bmm(attention, v, false)?;
    let ctx = g.reshape(ctx, &[batch, heads, queries, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch, queries, d])?;
    let msa = linear(g, ctx, w.wo, w.bo)?;
    let msa = dropout(g, msa, dropout_rate, reborrow(&mut rng));

    let u = g.add(query_src, msa)?;
    let u = g.layer_norm(u, w.ln1_gain, w.ln1_bias)?;
    let ffn = mlp(g, u, w.ffn_w1, w.ffn_b1, w.ffn_w2, w.ffn_b2)?;
    let ffn = dropout(g, ffn, dropout_rate, rng);
    let h = g.add(u, ffn)?;
    let hidden = g.layer_norm(h, w.ln2_gain, w.ln2_bias)?;
    Ok(TransformerOutput { hidden, attention })
}

/// Causal convolution along `axis` with taps `S[t − dilation·m]`, no padding.
///
/// `taps[m]` is the `[d_in, d_out]` matrix applied at lag `dilation·m`; the
/// output is shorter than the input by `dilation·(taps − 1)`.
pub fn dilated_causal_conv(g: &mut Graph, s: Var, axis: usize, taps: &[Var], dilation: usize) -> Result<Var> {
    let len = g.shape(s)[axis];
    let span = dilation * taps.len().saturating_sub(1);
    if taps.is_empty() || len <= span {
        return Err(Error::Config(format!(
            "dilated convolution needs at least {} steps, got {}",
            span + 1,
            len
        )));
    }
    let out_len = len - span;
    let mut acc: Option<Var> = None;
    for (m, &tap) in taps.iter().enumerate() {
        let shifted = g.slice(s, axis, span - dilation * m, out_len)?;
        let term = g.matmul(shifted, tap)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one tap"))
}

/// `Z = tanh(H·Θ1 + c) ⊙ σ(H·Θ2 + d)` with pointwise gate projections.
pub fn gated_tcn(g: &mut Graph, h: Var, theta1: Var, c: Var, theta2: Var, d: Var) -> Result<Var> {
    let f = linear(g, h, theta1, c)?;
    let f = g.tanh(f);
    let gate = linear(g, h, theta2, d)?;
    let gate = g.sigmoid(gate);
    g.mul(f, gate)
}

/// Node-mixing supports of the diffusion convolution.
pub struct GraphSupports {
    /// `[P_f^k]` and `[P_b^k]` for `k = 0..=order`, when a predefined graph exists.
    pub predefined: Option<(Vec<Tensor>, Vec<Tensor>)>,
    /// Self-adaptive adjacency, `[N, N]`.
    pub adaptive: Var,
    pub order: usize,
}

/// Per-power weights of one graph convolution.
pub struct GraphConvWeights {
    /// `W_k1` for `k = 0..=order`, used only with a predefined graph.
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
    pub adaptive: Vec<Var>,
}

/// `Σ_k P_f^k Z W_k1 + P_b^k Z W_k2 + Ã^k Z W_k3` with `Z` laid out
/// `[batch, N, time, d]`.
pub fn graph_conv(g: &mut Graph, z: Var, supports: &GraphSupports, w: &GraphConvWeights) -> Result<Var> {
    let s = g.shape(z).to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("graph conv input {:?} is not [B, N, T, d]", s)));
    }
    let (batch, n, time, d) = (s[0], s[1], s[2], s[3]);
    let adj_n = g.shape(supports.adaptive)[0];
    if adj_n != n {
        return Err(Error::Dimension(format!(
            "graph has {} nodes but input has {}",
            adj_n, n
        )));
    }
    // Nodes first so that every support multiplies a [N, rest] matrix.
    let zt = g.permute(z, &[1, 0, 2, 3])?;
    let zt = g.reshape(zt, &[n, batch * time * d])?;
    let mut terms: Vec<Var> = Vec::new();
    let mut push_term = |g: &mut Graph, mixed: Var, weight: Var| -> Result<()> {
        let m = g.reshape(mixed, &[n, batch, time, d])?;
        let t = g.matmul(m, weight)?;
        terms.push(t);
        Ok(())
    };
    if let Some((fwd, bwd)) = &supports.predefined {
        if fwd[0].shape()[0] != n {
            return Err(Error::Dimension(format!(
                "predefined graph has {} nodes but input has {}",
                fwd[0].shape()[0],
                n
            )));
        }
        for k in 0..=supports.order {
            for (powers, weights) in [(fwd, &w.forward), (bwd, &w.backward)] {
                let mixed = if k == 0 {
                    zt
                } else {
                    let p = g.constant(powers[k].clone());
                    g.matmul(p, zt)?
                };
                push_term(g, mixed, weights[k])?;
            }
        }
    }
    let mut mixed = zt;
    for k in 0..=supports.order {
        if k > 0 {
            mixed = g.matmul(supports.adaptive, mixed)?;
        }
        push_term(g, mixed, w.adaptive[k])?;
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.permute(total, &[1, 0, 2, 3])
}
