//! Stacked (optionally bidirectional) LSTM forecaster.

use serde::{Deserialize, Serialize};

use super::Bound;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub input_size: usize,
    /// Applied to every hidden state passed from one layer to the next.
    pub dropout: f64,
    pub bidirectional: bool,
    pub horizon: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            num_layers: 2,
            hidden_size: 128,
            input_size: 1,
            dropout: 0.2,
            bidirectional: false,
            horizon: 24,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_size == 0 || self.horizon == 0 {
            return Err(Error::usage("LSTM layers, hidden size and horizon must be ≥ 1"));
        }
        if self.input_size != 1 {
            return Err(Error::usage("the LSTM consumes the scalar load only (input_size = 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::usage(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    /// Parameter names and shapes in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden_size;
        let dirs: &[&str] = if self.bidirectional { &["fwd", "bwd"] } else { &["fwd"] };
        let mut out = Vec::new();
        for layer in 0..self.num_layers {
            let input = if layer == 0 {
                self.input_size
            } else {
                h * self.directions()
            };
            for dir in dirs {
                let p = format!("lstm.{layer}.{dir}");
                out.push((format!("{p}.w_ih"), vec![input, 4 * h]));
                out.push((format!("{p}.w_hh"), vec![h, 4 * h]));
                out.push((format!("{p}.bias"), vec![4 * h]));
            }
        }
        out.push(("head.w".into(), vec![h * self.directions(), self.horizon]));
        out.push(("head.b".into(), vec![self.horizon]));
        out
    }

    /// `4H(I + H + 1)` per layer and direction, plus the dense head.
    pub fn num_params(&self) -> usize {
        let (h, dirs) = (self.hidden_size, self.directions());
        let mut n = 0;
        for layer in 0..self.num_layers {
            let input = if layer == 0 { self.input_size } else { h * dirs };
            n += dirs * 4 * h * (input + h + 1);
        }
        n + h * dirs * self.horizon + self.horizon
    }
}

/// One direction of one layer. `bias` packs the i, f, g, o gate biases.
#[derive(Debug, Clone, Copy)]
pub struct LstmCellWeights {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// One step: gates `[i f g o] = x·W_ih + h·W_hh + b`,
/// `c = σ(f)⊙c_prev + σ(i)⊙tanh(g)`, `h = σ(o)⊙tanh(c)`.
pub fn lstm_cell(g: &mut Graph, x_t: Var, h_prev: Var, c_prev: Var, w: &LstmCellWeights) -> Result<(Var, Var)> {
    let hidden = g.shape(w.w_hh)[0];
    if g.shape(h_prev).last() != Some(&hidden) || g.shape(c_prev) != g.shape(h_prev) {
        return Err(Error::dim("lstm_cell", g.shape(h_prev), g.shape(c_prev)));
    }
    let xw = g.matmul(x_t, w.w_ih)?;
    let hw = g.matmul(h_prev, w.w_hh)?;
    let pre = g.add(xw, hw)?;
    let gates = g.add_row_bias(pre, w.bias)?;
    let i = g.slice_cols(gates, 0, hidden)?;
    let f = g.slice_cols(gates, hidden, hidden)?;
    let cand = g.slice_cols(gates, 2 * hidden, hidden)?;
    let o = g.slice_cols(gates, 3 * hidden, hidden)?;
    let (i, f, cand, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(cand), g.sigmoid(o));
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Runs one direction over `inputs` from zero state. The returned hidden
/// states are indexed by time; with `reverse`, entry `t` has seen `t..`.
pub fn lstm_layer(g: &mut Graph, inputs: &[Var], w: &LstmCellWeights, reverse: bool) -> Result<Vec<Var>> {
    let Some(&first) = inputs.first() else {
        return Err(Error::usage("LSTM over an empty sequence"));
    };
    let batch = g.shape(first)[0];
    let hidden = g.shape(w.w_hh)[0];
    let mut h = g.constant(Tensor::zeros(&[batch, hidden]));
    let mut c = h;
    let mut out = vec![h; inputs.len()];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..inputs.len()).rev())
    } else {
        Box::new(0..inputs.len())
    };
    for t in order {
        (h, c) = lstm_cell(g, inputs[t], h, c, w)?;
        out[t] = h;
    }
    Ok(out)
}

fn cell_weights(bound: &Bound<'_>, layer: usize, dir: &str) -> Result<LstmCellWeights> {
    let p = format!("lstm.{layer}.{dir}");
    Ok(LstmCellWeights {
        w_ih: bound.var(&format!("{p}.w_ih"))?,
        w_hh: bound.var(&format!("{p}.w_hh"))?,
        bias: bound.var(&format!("{p}.bias"))?,
    })
}

/// `[B×L]` scaled inputs to `[B×horizon]` forecasts.
pub(crate) fn forward(cfg: &LstmConfig, bound: &Bound<'_>, g: &mut Graph, x: Var) -> Result<Var> {
    let len = g.shape(x)[1];
    let mut seq = (0..len)
        .map(|t| g.slice_cols(x, t, 1))
        .collect::<Result<Vec<_>>>()?;
    let mut last = None;
    for layer in 0..cfg.num_layers {
        let fwd = lstm_layer(g, &seq, &cell_weights(bound, layer, "fwd")?, false)?;
        let mut out = if cfg.bidirectional {
            let bwd = lstm_layer(g, &seq, &cell_weights(bound, layer, "bwd")?, true)?;
            last = Some(g.concat_cols(&[fwd[len - 1], bwd[0]])?);
            fwd.iter()
                .zip(&bwd)
                .map(|(&a, &b)| g.concat_cols(&[a, b]))
                .collect::<Result<Vec<_>>>()?
        } else {
            last = Some(fwd[len - 1]);
            fwd
        };
        if layer + 1 < cfg.num_layers {
            for v in out.iter_mut() {
                *v = g.dropout(*v, cfg.dropout)?;
            }
        }
        seq = out;
    }
    let last = last.expect("at least one layer");
    let y = g.matmul(last, bound.var("head.w")?)?;
    g.add_row_bias(y, bound.var("head.b")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grads_match, random_tensor};
    use crate::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights(g: &mut Graph, input: usize, hidden: usize, fill: f64) -> LstmCellWeights {
        LstmCellWeights {
            w_ih: g.leaf(Tensor::full(&[input, 4 * hidden], fill)),
            w_hh: g.leaf(Tensor::full(&[hidden, 4 * hidden], fill)),
            bias: g.leaf(Tensor::full(&[4 * hidden], fill)),
        }
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let mut g = Graph::new(Mode::Eval);
        let w = weights(&mut g, 3, 4, 0.0);
        let x = g.constant(Tensor::full(&[2, 3], 0.7));
        let h0 = g.constant(Tensor::full(&[2, 4], 0.3));
        let c0 = g.constant(Tensor::zeros(&[2, 4]));
        let (h, c) = lstm_cell(&mut g, x, h0, c0, &w).unwrap();
        assert!(g.value(h).data().iter().all(|v| *v == 0.0));
        assert!(g.value(c).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_carries_cell() {
        let hidden = 3;
        let mut g = Graph::new(Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w_ih = random_tensor(&[2, 4 * hidden], &mut rng);
        let mut w_hh = random_tensor(&[hidden, 4 * hidden], &mut rng);
        let mut bias = Tensor::zeros(&[4 * hidden]);
        for j in 0..hidden {
            for row in 0..2 {
                w_ih.data_mut()[row * 4 * hidden + j] = 0.0;
                w_ih.data_mut()[row * 4 * hidden + hidden + j] = 0.0;
            }
            for row in 0..hidden {
                w_hh.data_mut()[row * 4 * hidden + j] = 0.0;
                w_hh.data_mut()[row * 4 * hidden + hidden + j] = 0.0;
            }
            bias.data_mut()[j] = -10.0;
            bias.data_mut()[hidden + j] = 10.0;
        }
        let w = LstmCellWeights {
            w_ih: g.leaf(w_ih),
            w_hh: g.leaf(w_hh),
            bias: g.leaf(bias),
        };
        let x = g.constant(random_tensor(&[1, 2], &mut rng));
        let h0 = g.constant(random_tensor(&[1, hidden], &mut rng));
        let c_prev = random_tensor(&[1, hidden], &mut rng);
        let c0 = g.constant(c_prev.clone());
        let (_, c) = lstm_cell(&mut g, x, h0, c0, &w).unwrap();
        for (a, b) in g.value(c).data().iter().zip(c_prev.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn cell_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, i, h) = (2, 3, 4);
        let inputs = [
            random_tensor(&[b, i], &mut rng),
            random_tensor(&[b, h], &mut rng),
            random_tensor(&[b, h], &mut rng),
            random_tensor(&[i, 4 * h], &mut rng),
            random_tensor(&[h, 4 * h], &mut rng),
            random_tensor(&[4 * h], &mut rng),
        ];
        assert_grads_match(&inputs, 1e-3, |g, v| {
            let w = LstmCellWeights {
                w_ih: v[3],
                w_hh: v[4],
                bias: v[5],
            };
            let (h, c) = lstm_cell(g, v[0], v[1], v[2], &w).unwrap();
            let sh = g.sum(h);
            let sc = g.sum(c);
            let half = g.scale(sc, 0.5);
            g.add(sh, half).unwrap()
        });
    }

    #[test]
    fn cell_rejects_mismatched_state() {
        let mut g = Graph::new(Mode::Eval);
        let w = weights(&mut g, 1, 4, 0.1);
        let x = g.constant(Tensor::zeros(&[2, 1]));
        let h0 = g.constant(Tensor::zeros(&[2, 3]));
        let c0 = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(lstm_cell(&mut g, x, h0, c0, &w), Err(Error::Dimension { .. })));
    }

    #[test]
    fn tied_directions_mirror_on_palindrome() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new(Mode::Eval);
        let w = LstmCellWeights {
            w_ih: g.leaf(random_tensor(&[1, 8], &mut rng)),
            w_hh: g.leaf(random_tensor(&[2, 8], &mut rng)),
            bias: g.leaf(random_tensor(&[8], &mut rng)),
        };
        let seq: Vec<Var> = [0.1, -0.4, 0.9, -0.4, 0.1]
            .iter()
            .map(|&v| g.constant(Tensor::full(&[1, 1], v)))
            .collect();
        let fwd = lstm_layer(&mut g, &seq, &w, false).unwrap();
        let bwd = lstm_layer(&mut g, &seq, &w, true).unwrap();
        for t in 0..5 {
            assert_eq!(g.value(fwd[t]).data(), g.value(bwd[4 - t]).data());
        }
    }

    #[test]
    fn closed_form_counts() {
        let uni = LstmConfig::default();
        let bi = LstmConfig {
            bidirectional: true,
            ..uni
        };
        let counted = |c: &LstmConfig| {
            c.param_shapes()
                .iter()
                .map(|(_, s)| s.iter().product::<usize>())
                .sum::<usize>()
        };
        assert_eq!(counted(&uni), uni.num_params());
        assert_eq!(counted(&bi), bi.num_params());
        // 4·128·(1+128+1) + 4·128·(128+128+1) + 128·24 + 24
        assert_eq!(uni.num_params(), 66_560 + 131_584 + 3_072 + 24);
    }
}
