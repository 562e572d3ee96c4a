//! Test-only oracles: central finite differences and seeded random tensors.

use rand::Rng;

use crate::tensor::{Graph, Mode, Tensor, Var};

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `f` over fresh leaves holding `inputs`, back-propagates, and compares
/// every input gradient entry to a central difference with `h = 1e-4`.
pub fn assert_grads_match<F>(inputs: &[Tensor], rel_tol: f64, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    assert_grads_match_in(Mode::Eval, 0, inputs, rel_tol, f)
}

pub fn assert_grads_match_in<F>(mode: Mode, seed: u64, inputs: &[Tensor], rel_tol: f64, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::with_seed(mode, seed);
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::with_seed(mode, seed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();

    let h = 1e-4;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[j];
            let scale = a.abs().max(numeric.abs());
            assert!(
                (a - numeric).abs() <= rel_tol * scale + 1e-7,
                "input {i} entry {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}
