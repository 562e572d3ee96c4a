//! Neural forecasters mapping a window of scaled load to a multi-step forecast.

pub mod lstm;
pub mod transformer;

pub use lstm::{lstm_cell, lstm_layer, LstmCellWeights, LstmConfig};
pub use transformer::{multi_head_attention, sinusoidal_pe, AttentionWeights, Pooling, TransformerConfig};

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{checkpoint, Graph, Mode, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "BiLSTM")]
    BiLstm,
    Transformer,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Lstm, ModelKind::BiLstm, ModelKind::Transformer];

    /// Lower-case identifier used on the command line and in file names.
    pub fn slug(self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::BiLstm => "bilstm",
            ModelKind::Transformer => "transformer",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Lstm => "LSTM",
            ModelKind::BiLstm => "BiLSTM",
            ModelKind::Transformer => "Transformer",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(ModelKind::Lstm),
            "bilstm" => Ok(ModelKind::BiLstm),
            "transformer" => Ok(ModelKind::Transformer),
            other => Err(Error::usage(format!("unknown model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelConfig {
    Lstm(LstmConfig),
    Transformer(TransformerConfig),
}

impl ModelConfig {
    pub fn horizon(&self) -> usize {
        match self {
            ModelConfig::Lstm(c) => c.horizon,
            ModelConfig::Transformer(c) => c.horizon,
        }
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            ModelConfig::Lstm(c) => c.param_shapes(),
            ModelConfig::Transformer(c) => c.param_shapes(),
        }
    }
}

/// Parameters bound into a graph, looked up by name.
pub struct Bound<'a> {
    params: &'a ParamStore,
    vars: &'a [Var],
}

impl<'a> Bound<'a> {
    pub fn new(params: &'a ParamStore, vars: &'a [Var]) -> Self {
        Bound { params, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::usage(format!("no parameter named '{name}'")))
    }
}

#[derive(Debug, Clone)]
pub struct ForecastModel {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: ModelKind,
    config: ModelConfig,
}

impl ForecastModel {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains and a
    /// forget-gate bias of 1.
    pub fn new(kind: ModelKind, config: ModelConfig, seed: u64) -> Result<Self> {
        let config = Self::reconcile(kind, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let t = if shape.len() == 2 {
                Tensor::xavier_uniform(shape[0], shape[1], &mut rng)
            } else if name.ends_with(".gain") {
                Tensor::full(&shape, 1.0)
            } else if name.starts_with("lstm.") {
                let h = shape[0] / 4;
                let mut b = Tensor::zeros(&shape);
                b.data_mut()[h..2 * h].fill(1.0);
                b
            } else {
                Tensor::zeros(&shape)
            };
            params.push(name, t);
        }
        Ok(ForecastModel { kind, config, params })
    }

    fn reconcile(kind: ModelKind, config: ModelConfig) -> Result<ModelConfig> {
        match (kind, config) {
            (ModelKind::Lstm | ModelKind::BiLstm, ModelConfig::Lstm(mut c)) => {
                c.bidirectional = kind == ModelKind::BiLstm;
                c.validate()?;
                Ok(ModelConfig::Lstm(c))
            }
            (ModelKind::Transformer, ModelConfig::Transformer(c)) => {
                c.validate()?;
                Ok(config)
            }
            _ => Err(Error::usage(format!("config family does not match model kind {kind}"))),
        }
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Checks that names and shapes match what the config prescribes.
    pub fn shape_audit(&self) -> Result<()> {
        let expected = self.config.param_shapes();
        if expected.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for ((name, shape), p) in expected.iter().zip(self.params.iter()) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' {:?} does not match expected '{}' {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    shape
                )));
            }
        }
        Ok(())
    }

    /// `x` is `[B×L]` or `[B×L×1]`; returns `[B×horizon]`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = match s.as_slice() {
            [_, l] if *l > 0 => x,
            [b, l, 1] if *l > 0 => g.reshape(x, &[*b, *l])?,
            _ => return Err(Error::dim("model input", &s, &[0, 0, 1])),
        };
        let bound = Bound::new(&self.params, vars);
        match &self.config {
            ModelConfig::Lstm(c) => lstm::forward(c, &bound, g, x),
            ModelConfig::Transformer(c) => transformer::forward(c, &bound, g, x),
        }
    }

    /// Eval-mode forecasts for `inputs` (row-major, `input_len` per row),
    /// in batches of `batch_size` spread over the rayon pool.
    pub fn predict(&self, inputs: &[f64], input_len: usize, batch_size: usize) -> Result<Vec<f64>> {
        if input_len == 0 || !inputs.len().is_multiple_of(input_len) || batch_size == 0 {
            return Err(Error::dim("predict", &[inputs.len()], &[input_len, batch_size]));
        }
        let chunks: Vec<Result<Vec<f64>>> = inputs
            .par_chunks(input_len * batch_size)
            .map(|chunk| {
                let mut g = Graph::new(Mode::Eval);
                let vars = self.params.bind_constants(&mut g);
                let x = g.constant(Tensor::new(vec![chunk.len() / input_len, input_len], chunk.to_vec())?);
                let y = self.forward(&mut g, &vars, x)?;
                Ok(g.value(y).data().to_vec())
            })
            .collect();
        let mut out = Vec::with_capacity(inputs.len() / input_len * self.horizon());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(CheckpointMeta {
            kind: self.kind,
            config: self.config,
        })?;
        checkpoint::write(BufWriter::new(File::create(path)?), &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::read(BufReader::new(File::open(path)?))?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let mut params = ParamStore::new();
        for (name, t) in tensors {
            params.push(name, t);
        }
        let model = ForecastModel {
            kind: meta.kind,
            config: Self::reconcile(meta.kind, meta.config)?,
            params,
        };
        model.shape_audit()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grads_match, random_tensor};

    fn small_lstm(kind: ModelKind) -> ForecastModel {
        let cfg = LstmConfig {
            num_layers: 2,
            hidden_size: 5,
            dropout: 0.2,
            ..Default::default()
        };
        ForecastModel::new(kind, ModelConfig::Lstm(cfg), 7).unwrap()
    }

    fn small_transformer() -> ForecastModel {
        let cfg = TransformerConfig {
            num_layers: 1,
            num_heads: 2,
            d_model: 8,
            d_ff: 16,
            dropout: 0.2,
            ..Default::default()
        };
        ForecastModel::new(ModelKind::Transformer, ModelConfig::Transformer(cfg), 7).unwrap()
    }

    fn zeroed(mut m: ForecastModel) -> (ForecastModel, Vec<f64>) {
        let bias: Vec<f64> = (0..m.horizon()).map(|i| i as f64 * 0.1 - 1.0).collect();
        for p in m.params.as_mut_slice() {
            p.value.data_mut().fill(0.0);
        }
        m.params.by_name_mut("head.b").unwrap().value.data_mut().copy_from_slice(&bias);
        (m, bias)
    }

    fn run(m: &ForecastModel, mode: Mode, seed: u64, x: Tensor) -> Tensor {
        let mut g = Graph::with_seed(mode, seed);
        let vars = m.params.bind(&mut g);
        let xv = g.constant(x);
        let y = m.forward(&mut g, &vars, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_networks_output_head_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for m in [small_lstm(ModelKind::Lstm), small_lstm(ModelKind::BiLstm), small_transformer()] {
            let (m, bias) = zeroed(m);
            let y = run(&m, Mode::Eval, 0, random_tensor(&[3, 24], &mut rng));
            for row in y.data().chunks(24) {
                assert_eq!(row, bias.as_slice(), "{}", m.kind);
            }
        }
    }

    #[test]
    fn output_shape_and_identical_rows() {
        let row: Vec<f64> = (0..24).map(|t| (t as f64 * 0.3).sin()).collect();
        for m in [small_lstm(ModelKind::Lstm), small_lstm(ModelKind::BiLstm), small_transformer()] {
            for b in [1, 4] {
                let x = Tensor::new(vec![b, 24, 1], row.repeat(b)).unwrap();
                let y = run(&m, Mode::Eval, 0, x);
                assert_eq!(y.shape(), &[b, 24]);
                for r in y.data().chunks(24) {
                    assert_eq!(r, &y.data()[..24]);
                }
            }
        }
    }

    #[test]
    fn eval_is_deterministic_and_train_follows_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&[4, 24], &mut rng);
        for m in [small_lstm(ModelKind::BiLstm), small_transformer()] {
            assert_eq!(run(&m, Mode::Eval, 1, x.clone()), run(&m, Mode::Eval, 2, x.clone()));
            assert_eq!(run(&m, Mode::Train, 5, x.clone()), run(&m, Mode::Train, 5, x.clone()));
            assert_ne!(run(&m, Mode::Train, 5, x.clone()), run(&m, Mode::Train, 6, x.clone()));
        }
    }

    #[test]
    fn rejects_bad_input_rank() {
        let m = small_lstm(ModelKind::Lstm);
        let mut g = Graph::new(Mode::Eval);
        let vars = m.params.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 24, 2]));
        assert!(matches!(m.forward(&mut g, &vars, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn transformer_input_projection_gradient() {
        let m = small_transformer();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&[2, 24], &mut rng);
        let target = random_tensor(&[2, 24], &mut rng);
        let idx = m.params.index_of("input_proj.w").unwrap();
        let w0 = m.params.get(idx).value.clone();
        assert_grads_match(&[w0], 1e-3, |g, v| {
            let mut vars = m.params.bind_constants(g);
            vars[idx] = v[0];
            let xv = g.constant(x.clone());
            let y = m.forward(g, &vars, xv).unwrap();
            let t = g.constant(target.clone());
            let d = g.sub(y, t).unwrap();
            let a = g.abs(d);
            g.mean(a)
        });
    }

    #[test]
    fn lstm_forward_gradient() {
        let m = small_lstm(ModelKind::BiLstm);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&[2, 6], &mut rng);
        let idx = m.params.index_of("lstm.1.bwd.w_hh").unwrap();
        let w0 = m.params.get(idx).value.clone();
        assert_grads_match(&[w0], 1e-3, |g, v| {
            let mut vars = m.params.bind_constants(g);
            vars[idx] = v[0];
            let xv = g.constant(x.clone());
            let y = m.forward(g, &vars, xv).unwrap();
            g.sum(y)
        });
    }

    #[test]
    fn positional_encoding_breaks_equivariance() {
        let (d, seq) = (8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&[seq, d], &mut rng);
        let pe = sinusoidal_pe(seq, d).unwrap();
        let perm = [1, 0, 2, 3, 4, 5];
        let permute = |t: &Tensor| -> Vec<f64> {
            perm.iter()
                .flat_map(|&r| t.data()[r * d..(r + 1) * d].to_vec())
                .collect()
        };
        let with_pe = |rows: Vec<f64>| -> Vec<f64> { rows.iter().zip(pe.data()).map(|(a, b)| a + b).collect() };
        let mut g = Graph::new(Mode::Eval);
        let w = AttentionWeights {
            w_q: g.leaf(random_tensor(&[d, d], &mut rng)),
            b_q: g.leaf(Tensor::zeros(&[d])),
            w_k: g.leaf(random_tensor(&[d, d], &mut rng)),
            b_k: g.leaf(Tensor::zeros(&[d])),
            w_v: g.leaf(random_tensor(&[d, d], &mut rng)),
            b_v: g.leaf(Tensor::zeros(&[d])),
            w_o: g.leaf(random_tensor(&[d, d], &mut rng)),
            b_o: g.leaf(Tensor::zeros(&[d])),
        };
        let a = g.constant(Tensor::new(vec![seq, d], with_pe(x.data().to_vec())).unwrap());
        let b = g.constant(Tensor::new(vec![seq, d], with_pe(permute(&x))).unwrap());
        let (ya, _) = multi_head_attention(&mut g, a, &w, 1, seq, 2, 0.0).unwrap();
        let (yb, _) = multi_head_attention(&mut g, b, &w, 1, seq, 2, 0.0).unwrap();
        let expected = permute(g.value(ya));
        let gap = expected
            .iter()
            .zip(g.value(yb).data())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        assert!(gap > 1e-6);
    }

    #[test]
    fn init_follows_conventions() {
        let m = small_lstm(ModelKind::Lstm);
        let b = &m.params.by_name("lstm.0.fwd.bias").unwrap().value;
        assert_eq!(&b.data()[..5], &[0.0; 5]);
        assert_eq!(&b.data()[5..10], &[1.0; 5]);
        let t = small_transformer();
        assert!(t.params.by_name("enc.0.ln1.gain").unwrap().value.data().iter().all(|v| *v == 1.0));
        let w = &t.params.by_name("enc.0.ffn.w1").unwrap().value;
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        t.shape_audit().unwrap();
    }

    #[test]
    fn checkpoint_round_trip_and_audit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = small_lstm(ModelKind::BiLstm);
        m.save(&path).unwrap();
        let back = ForecastModel::load(&path).unwrap();
        assert_eq!(back.kind, ModelKind::BiLstm);
        assert_eq!(back.config, m.config);
        for (a, b) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(a.value, b.value);
        }

        let mut broken = m.clone();
        broken.params.get_mut(0).value = Tensor::zeros(&[2, 20]);
        broken.save(&path).unwrap();
        assert!(matches!(ForecastModel::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn predict_matches_single_graph() {
        let m = small_transformer();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&[5, 24], &mut rng);
        let whole = run(&m, Mode::Eval, 0, x.clone());
        let batched = m.predict(x.data(), 24, 2).unwrap();
        for (a, b) in whole.data().iter().zip(&batched) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("BiLSTM".parse::<ModelKind>().unwrap(), ModelKind::BiLstm);
        assert!("gru".parse::<ModelKind>().is_err());
        assert!(ForecastModel::new(
            ModelKind::Transformer,
            ModelConfig::Lstm(LstmConfig::default()),
            0
        )
        .is_err());
    }
}
