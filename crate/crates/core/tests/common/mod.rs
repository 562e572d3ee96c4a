//! Oracles shared by the integration tests. Nothing here calls back into the
//! code under test beyond building graphs.

#![allow(dead_code)]

use loadcast_core::models::ForecastModel;
use loadcast_core::{Graph, Mode, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-3;
/// Denominator floor, so entries that are zero up to rounding compare in
/// absolute terms.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Worst relative error between reverse-mode gradients of `f` at `inputs`
/// and central differences.
pub fn max_grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new(Mode::Eval);
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new(Mode::Eval);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// `Σ wᵢ·yᵢ` for a fixed weight tensor, a smooth scalar probe of `y`.
pub fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Var {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv).unwrap();
    g.sum(p)
}

/// Same check over every parameter of a whole model, probing its output with
/// fixed random weights.
pub fn model_grad_error(model: &ForecastModel, x: &Tensor, seed: u64) -> f64 {
    let rows = x.shape()[0];
    let w = uniform(&[rows, model.horizon()], &mut rng(seed));
    let loss_of = |m: &ForecastModel| {
        let mut g = Graph::new(Mode::Eval);
        let vars = m.params.bind_constants(&mut g);
        let xv = g.constant(x.clone());
        let y = m.forward(&mut g, &vars, xv).unwrap();
        let l = weighted_sum(&mut g, y, &w);
        g.value(l).data()[0]
    };
    let mut g = Graph::new(Mode::Eval);
    let vars = model.params.bind(&mut g);
    let xv = g.constant(x.clone());
    let y = model.forward(&mut g, &vars, xv).unwrap();
    let l = weighted_sum(&mut g, y, &w);
    g.backward(l).unwrap();

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let n = model.params.get(i).value.numel();
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            plus.params.get_mut(i).value.data_mut()[j] += FD_STEP;
            let mut minus = model.clone();
            minus.params.get_mut(i).value.data_mut()[j] -= FD_STEP;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// Straight-line metric definitions, written independently of the library.
pub struct BruteMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

pub fn brute_metrics(pred: &[f64], actual: &[f64]) -> BruteMetrics {
    let n = pred.len() as f64;
    let mut abs = Vec::new();
    let mut sq = Vec::new();
    let mut pct = Vec::new();
    for i in 0..pred.len() {
        let e = actual[i] - pred[i];
        abs.push(if e < 0.0 { -e } else { e });
        sq.push(e * e);
        if actual[i].abs() > 1e-8 {
            pct.push((e / actual[i]).abs() * 100.0);
        }
    }
    let total = |v: &[f64]| v.iter().rev().fold(0.0, |s, x| s + x);
    BruteMetrics {
        mae: total(&abs) / n,
        rmse: (total(&sq) / n).sqrt(),
        mape: total(&pct) / pct.len() as f64,
    }
}
