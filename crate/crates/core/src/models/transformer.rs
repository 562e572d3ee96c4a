//! Encoder-only Transformer forecaster.

use serde::{Deserialize, Serialize};

use super::Bound;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// How the encoder output is reduced to one vector per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Last,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub horizon: usize,
    pub input_len: usize,
    pub pooling: Pooling,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            num_layers: 4,
            num_heads: 8,
            d_model: 512,
            d_ff: 2048,
            dropout: 0.2,
            horizon: 24,
            input_len: 24,
            pooling: Pooling::Last,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.d_ff == 0 || self.horizon == 0 || self.input_len == 0 {
            return Err(Error::usage("transformer sizes must be ≥ 1"));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::usage(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::usage("sinusoidal encoding needs an even d_model"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::usage(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff) = (self.d_model, self.d_ff);
        let mut out = vec![("input_proj.w".to_string(), vec![1, d]), ("input_proj.b".into(), vec![d])];
        for l in 0..self.num_layers {
            let p = format!("enc.{l}");
            for m in ["q", "k", "v", "o"] {
                out.push((format!("{p}.attn.w_{m}"), vec![d, d]));
                out.push((format!("{p}.attn.b_{m}"), vec![d]));
            }
            out.push((format!("{p}.ln1.gain"), vec![d]));
            out.push((format!("{p}.ln1.bias"), vec![d]));
            out.push((format!("{p}.ffn.w1"), vec![d, ff]));
            out.push((format!("{p}.ffn.b1"), vec![ff]));
            out.push((format!("{p}.ffn.w2"), vec![ff, d]));
            out.push((format!("{p}.ffn.b2"), vec![d]));
            out.push((format!("{p}.ln2.gain"), vec![d]));
            out.push((format!("{p}.ln2.bias"), vec![d]));
        }
        out.push(("head.w".into(), vec![d, self.horizon]));
        out.push(("head.b".into(), vec![self.horizon]));
        out
    }

    /// `2d + layers·(4d² + 4d + 4d + 2·d·ff + ff + d) + d·H + H`.
    pub fn num_params(&self) -> usize {
        let (d, ff, h) = (self.d_model, self.d_ff, self.horizon);
        let layer = 4 * d * d + 4 * d + 4 * d + 2 * d * ff + ff + d;
        2 * d + self.num_layers * layer + d * h + h
    }
}

/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(…)`.
pub fn sinusoidal_pe(seq_len: usize, d_model: usize) -> Result<Tensor> {
    if !d_model.is_multiple_of(2) || d_model == 0 {
        return Err(Error::usage(format!("positional encoding needs an even d_model, got {d_model}")));
    }
    let mut data = vec![0.0; seq_len * d_model];
    for pos in 0..seq_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![seq_len, d_model], data)
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl AttentionWeights {
    fn bind(bound: &Bound<'_>, prefix: &str) -> Result<Self> {
        let v = |s: &str| bound.var(&format!("{prefix}.attn.{s}"));
        Ok(AttentionWeights {
            w_q: v("w_q")?,
            b_q: v("b_q")?,
            w_k: v("w_k")?,
            b_k: v("b_k")?,
            w_v: v("w_v")?,
            b_v: v("b_v")?,
            w_o: v("w_o")?,
            b_o: v("b_o")?,
        })
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}

/// Unmasked multi-head self-attention over `x: [B·L × d]`. Returns the
/// projected output `[B·L × d]` and the attention weights `[B·heads × L × L]`
/// (before dropout).
pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    w: &AttentionWeights,
    batch: usize,
    seq: usize,
    heads: usize,
    dropout: f64,
) -> Result<(Var, Var)> {
    let d = g.shape(x)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::dim("multi_head_attention", g.shape(x), &[heads]));
    }
    let hd = d / heads;
    let q = linear(g, x, w.w_q, w.b_q)?;
    let k = linear(g, x, w.w_k, w.b_k)?;
    let v = linear(g, x, w.w_v, w.b_v)?;
    let q = g.split_heads(q, batch, seq, heads)?;
    let k = g.split_heads(k, batch, seq, heads)?;
    let v = g.split_heads(v, batch, seq, heads)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
    let attn = g.softmax_lastdim(scores)?;
    let dropped = g.dropout(attn, dropout)?;
    let ctx = g.bmm(dropped, v, false)?;
    let ctx = g.merge_heads(ctx, batch, seq, heads)?;
    Ok((linear(g, ctx, w.w_o, w.b_o)?, attn))
}

/// Post-norm encoder layer: `LN(x + MHA(x))`, then `LN(h + FFN(h))`.
fn encoder_layer(
    cfg: &TransformerConfig,
    bound: &Bound<'_>,
    g: &mut Graph,
    x: Var,
    layer: usize,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let p = format!("enc.{layer}");
    let w = AttentionWeights::bind(bound, &p)?;
    let (a, _) = multi_head_attention(g, x, &w, batch, seq, cfg.num_heads, cfg.dropout)?;
    let r = g.add(x, a)?;
    let h = g.layer_norm(
        r,
        bound.var(&format!("{p}.ln1.gain"))?,
        bound.var(&format!("{p}.ln1.bias"))?,
        LN_EPS,
    )?;
    let f = linear(g, h, bound.var(&format!("{p}.ffn.w1"))?, bound.var(&format!("{p}.ffn.b1"))?)?;
    let f = g.gelu(f);
    let f = linear(g, f, bound.var(&format!("{p}.ffn.w2"))?, bound.var(&format!("{p}.ffn.b2"))?)?;
    let f = g.dropout(f, cfg.dropout)?;
    let r = g.add(h, f)?;
    g.layer_norm(
        r,
        bound.var(&format!("{p}.ln2.gain"))?,
        bound.var(&format!("{p}.ln2.bias"))?,
        LN_EPS,
    )
}

pub(crate) fn forward(cfg: &TransformerConfig, bound: &Bound<'_>, g: &mut Graph, x: Var) -> Result<Var> {
    let (batch, seq) = (g.shape(x)[0], g.shape(x)[1]);
    if seq != cfg.input_len {
        return Err(Error::dim("transformer input", g.shape(x), &[batch, cfg.input_len]));
    }
    let d = cfg.d_model;
    let col = g.reshape(x, &[batch * seq, 1])?;
    let emb = linear(g, col, bound.var("input_proj.w")?, bound.var("input_proj.b")?)?;
    let pe = sinusoidal_pe(seq, d)?;
    let tiled = pe.data().repeat(batch);
    let pe = g.constant(Tensor::new(vec![batch * seq, d], tiled)?);
    let mut h = g.add(emb, pe)?;
    for layer in 0..cfg.num_layers {
        h = encoder_layer(cfg, bound, g, h, layer, batch, seq)?;
    }
    let pooled = match cfg.pooling {
        Pooling::Last => {
            let rows: Vec<usize> = (0..batch).map(|b| b * seq + seq - 1).collect();
            g.gather_rows(h, &rows)?
        }
        Pooling::Mean => g.group_mean_rows(h, seq)?,
    };
    linear(g, pooled, bound.var("head.w")?, bound.var("head.b")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grads_match, random_tensor};
    use crate::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pe_values() {
        let pe = sinusoidal_pe(24, 16).unwrap();
        for i in 0..8 {
            assert_eq!(pe.data()[2 * i], 0.0);
            assert_eq!(pe.data()[2 * i + 1], 1.0);
        }
        assert!((pe.data()[16] - 1f64.sin()).abs() < 1e-12);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(sinusoidal_pe(4, 7), Err(Error::Usage(_))));
    }

    fn random_weights(g: &mut Graph, d: usize, rng: &mut ChaCha8Rng, scale: f64) -> AttentionWeights {
        let mut m = |shape: &[usize]| {
            let mut t = random_tensor(shape, rng);
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
            g.leaf(t)
        };
        AttentionWeights {
            w_q: m(&[d, d]),
            b_q: m(&[d]),
            w_k: m(&[d, d]),
            b_k: m(&[d]),
            w_v: m(&[d, d]),
            b_v: m(&[d]),
            w_o: m(&[d, d]),
            b_o: m(&[d]),
        }
    }

    #[test]
    fn zero_projections_give_uniform_attention() {
        let mut g = Graph::new(Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = random_weights(&mut g, 4, &mut rng, 0.0);
        let b_o = random_tensor(&[4], &mut rng);
        w.b_o = g.leaf(b_o.clone());
        let x = g.constant(random_tensor(&[6, 4], &mut rng));
        let (out, attn) = multi_head_attention(&mut g, x, &w, 1, 6, 2, 0.0).unwrap();
        assert!(g.value(attn).data().iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        for row in g.value(out).data().chunks(4) {
            assert_eq!(row, b_o.data());
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut g = Graph::new(Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_weights(&mut g, 8, &mut rng, 2.0);
        let x = g.constant(random_tensor(&[2 * 5, 8], &mut rng));
        let (_, attn) = multi_head_attention(&mut g, x, &w, 2, 5, 4, 0.0).unwrap();
        for row in g.value(attn).data().chunks(5) {
            assert!(row.iter().all(|v| *v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, seq) = (8, 6);
        let x = random_tensor(&[seq, d], &mut rng);
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&r| x.data()[r * d..(r + 1) * d].to_vec())
            .collect();
        let mut g = Graph::new(Mode::Eval);
        let w = random_weights(&mut g, d, &mut rng, 1.0);
        let a = g.constant(x);
        let b = g.constant(Tensor::new(vec![seq, d], permuted).unwrap());
        let (ya, _) = multi_head_attention(&mut g, a, &w, 1, seq, 2, 0.0).unwrap();
        let (yb, _) = multi_head_attention(&mut g, b, &w, 1, seq, 2, 0.0).unwrap();
        for (i, &r) in perm.iter().enumerate() {
            let ra = &g.value(ya).data()[r * d..(r + 1) * d];
            let rb = &g.value(yb).data()[i * d..(i + 1) * d];
            for (u, v) in ra.iter().zip(rb) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let mut inputs = vec![random_tensor(&[2 * 3, d], &mut rng)];
        for _ in 0..4 {
            inputs.push(random_tensor(&[d, d], &mut rng));
            inputs.push(random_tensor(&[d], &mut rng));
        }
        let target = random_tensor(&[2 * 3, d], &mut rng);
        assert_grads_match(&inputs, 1e-3, |g, v| {
            let w = AttentionWeights {
                w_q: v[1],
                b_q: v[2],
                w_k: v[3],
                b_k: v[4],
                w_v: v[5],
                b_v: v[6],
                w_o: v[7],
                b_o: v[8],
            };
            let (y, _) = multi_head_attention(g, v[0], &w, 2, 3, 2, 0.0).unwrap();
            let t = g.constant(target.clone());
            let p = g.mul(y, t).unwrap();
            g.sum(p)
        });
    }

    #[test]
    fn closed_form_count() {
        let c = TransformerConfig::default();
        let counted: usize = c.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(counted, c.num_params());
    }

    #[test]
    fn config_checks_heads() {
        let c = TransformerConfig {
            num_heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(TransformerConfig::default().validate().is_ok());
    }
}
