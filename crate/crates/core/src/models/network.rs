//! Residual token network shared by denoisers and generators.
//!
//! Per position: token embedding + position embedding, projected to the
//! hidden width and summed with a projection of sinusoidal time features
//! (and, for generators, a projection of the Gaussian noise input). Each
//! residual block first mixes hidden states across positions, then applies
//! a per-position two-layer channel MLP. A linear head maps to `K` logits.

use super::ModelConfig;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Tensor, TokenBatch};

pub(crate) const NOISE_BLOCK: &str = "noise_proj";

/// Std of the output head at init; small so fresh models predict nearly
/// uniform distributions while every block still receives gradient.
const HEAD_INIT_SCALE: f64 = 1e-2;

fn normal_vec(rng: &mut RngState, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal() * std).collect()
}

pub(crate) fn init_params(cfg: &ModelConfig, rng: &mut RngState) -> Result<ParamStore> {
    cfg.validate()?;
    let (e, h, d, t) = (cfg.embed_width, cfg.hidden_width, cfg.seq_len, cfg.time_width);
    let mut p = ParamStore::new();
    p.add_block(
        "tok_emb",
        vec![cfg.input_vocab, e],
        normal_vec(rng, cfg.input_vocab * e, 1.0),
    )?;
    p.add_block("pos_emb", vec![d, e], normal_vec(rng, d * e, 1.0))?;
    p.add_block("in_w", vec![e, h], normal_vec(rng, e * h, 1.0 / (e as f64).sqrt()))?;
    p.add_block("in_b", vec![h], vec![0.0; h])?;
    p.add_block("time_w", vec![t, h], normal_vec(rng, t * h, 1.0 / (t as f64).sqrt()))?;
    let hs = 1.0 / (h as f64).sqrt();
    for l in 0..cfg.depth {
        p.add_block(
            &format!("mix{l}"),
            vec![d, d],
            normal_vec(rng, d * d, 1.0 / (d as f64).sqrt()),
        )?;
        p.add_block(&format!("mix_w{l}"), vec![h, h], normal_vec(rng, h * h, hs))?;
        p.add_block(&format!("mix_b{l}"), vec![h], vec![0.0; h])?;
        p.add_block(&format!("ff1_w{l}"), vec![h, h], normal_vec(rng, h * h, hs))?;
        p.add_block(&format!("ff1_b{l}"), vec![h], vec![0.0; h])?;
        p.add_block(&format!("ff2_w{l}"), vec![h, h], normal_vec(rng, h * h, hs))?;
        p.add_block(&format!("ff2_b{l}"), vec![h], vec![0.0; h])?;
    }
    p.add_block(
        "out_w",
        vec![h, cfg.vocab],
        normal_vec(rng, h * cfg.vocab, HEAD_INIT_SCALE * hs),
    )?;
    p.add_block("out_b", vec![cfg.vocab], vec![0.0; cfg.vocab])?;
    if cfg.n_noise > 0 {
        add_noise_block(&mut p, cfg)?;
    }
    Ok(p)
}

/// Zero-initialized noise projection.
pub(crate) fn add_noise_block(p: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    p.add_block(
        NOISE_BLOCK,
        vec![cfg.n_noise, cfg.hidden_width],
        vec![0.0; cfg.n_noise * cfg.hidden_width],
    )
}

/// Sinusoidal features of `t` at frequencies `π · 2^j`.
pub fn time_features(t: f64, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(width);
    for j in 0..width / 2 {
        let w = std::f64::consts::PI * (1u64 << j.min(30)) as f64;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

/// Record the forward pass on `g`, returning logits of shape `[B*D, K]`.
pub(crate) fn forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ParamStore,
    z: &TokenBatch,
    t: &[f64],
    noise: Option<&Tensor>,
) -> Result<Var> {
    let (b, d) = (z.batch(), z.positions());
    if d != cfg.seq_len {
        return Err(Error::Shape(format!(
            "sequence length {d}, model expects {}",
            cfg.seq_len
        )));
    }
    if t.len() != b {
        return Err(Error::Shape(format!("{} times for batch of {b}", t.len())));
    }
    z.validate(cfg.input_vocab)?;
    let rows = b * d;

    let tok_ids: Vec<usize> = z.tokens().iter().map(|&x| x as usize).collect();
    let pos_ids: Vec<usize> = (0..rows).map(|r| r % d).collect();
    let tok_emb = g.param(params, "tok_emb")?;
    let pos_emb = g.param(params, "pos_emb")?;
    let te = g.gather(tok_emb, tok_ids)?;
    let pe = g.gather(pos_emb, pos_ids)?;
    let e = g.add(te, pe)?;

    let in_w = g.param(params, "in_w")?;
    let in_b = g.param(params, "in_b")?;
    let h = g.matmul(e, in_w)?;
    let mut h = g.add_bias(h, in_b)?;

    let mut tf = Vec::with_capacity(rows * cfg.time_width);
    for &tb in t {
        let f = time_features(tb, cfg.time_width);
        for _ in 0..d {
            tf.extend_from_slice(&f);
        }
    }
    let tf = g.constant(Tensor::new(vec![rows, cfg.time_width], tf)?);
    let time_w = g.param(params, "time_w")?;
    let tproj = g.matmul(tf, time_w)?;
    h = g.add(h, tproj)?;

    if cfg.n_noise > 0 {
        let noise = noise.ok_or_else(|| Error::Shape("generator needs a noise input".into()))?;
        if noise.shape() != [b, cfg.n_noise] {
            return Err(Error::Shape(format!(
                "noise shape {:?}, expected [{b}, {}]",
                noise.shape(),
                cfg.n_noise
            )));
        }
        let mut expanded = Vec::with_capacity(rows * cfg.n_noise);
        for bi in 0..b {
            for _ in 0..d {
                expanded.extend_from_slice(noise.row(bi));
            }
        }
        let nv = g.constant(Tensor::new(vec![rows, cfg.n_noise], expanded)?);
        let nw = g.param(params, NOISE_BLOCK)?;
        let nproj = g.matmul(nv, nw)?;
        h = g.add(h, nproj)?;
    } else if let Some(n) = noise {
        if !n.is_empty() {
            return Err(Error::Shape("noise given to a model without a noise input".into()));
        }
    }

    for l in 0..cfg.depth {
        let mix = g.param(params, &format!("mix{l}"))?;
        let m = g.mix_positions(h, mix, d)?;
        let w = g.param(params, &format!("mix_w{l}"))?;
        let bb = g.param(params, &format!("mix_b{l}"))?;
        let u = g.matmul(m, w)?;
        let u = g.add_bias(u, bb)?;
        let u = g.silu(u);
        h = g.add(h, u)?;

        let w1 = g.param(params, &format!("ff1_w{l}"))?;
        let b1 = g.param(params, &format!("ff1_b{l}"))?;
        let w2 = g.param(params, &format!("ff2_w{l}"))?;
        let b2 = g.param(params, &format!("ff2_b{l}"))?;
        let f = g.matmul(h, w1)?;
        let f = g.add_bias(f, b1)?;
        let f = g.silu(f);
        let f = g.matmul(f, w2)?;
        let f = g.add_bias(f, b2)?;
        h = g.add(h, f)?;
    }

    let out_w = g.param(params, "out_w")?;
    let out_b = g.param(params, "out_b")?;
    let logits = g.matmul(h, out_w)?;
    g.add_bias(logits, out_b)
}
