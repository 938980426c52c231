use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Layer, LayerSpec};
use super::{Graph, ParamGroup, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Where the largest error occurred.
    pub worst: String,
    pub checked: usize,
    /// Input entries redrawn because they sat on a ReLU kink.
    pub resampled: usize,
    pub passed: bool,
}

/// Elements probed per tensor; larger tensors are subsampled.
const MAX_PROBES: usize = 48;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Compares analytic gradients of `Σ r·layer(x)` (random fixed `r`) against
/// central differences, for parameters and (except for embeddings) inputs.
/// Layers run in training mode.
pub fn grad_check(spec: &LayerSpec, input: &Tensor, eps: f64, tol: f64, seed: u64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Param(format!("finite-difference step {eps} outside (0, 1e-2]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = Layer::build(spec, &mut store, "layer", &mut rng)?;
    let mut x = input.clone();
    let mut resampled = 0;
    if matches!(spec, LayerSpec::Relu) {
        for v in x.data_mut() {
            while v.abs() < 10.0 * eps {
                *v = rng.gen_range(-1.0..1.0);
                resampled += 1;
            }
        }
    }
    let wrt_input = !matches!(spec, LayerSpec::Embedding { .. });

    let out_shape = {
        let mut g = Graph::new(&store, true, seed);
        let xv = g.constant(x.clone());
        let y = layer.forward(&mut g, xv)?;
        g.shape(y).to_vec()
    };
    let n_out: usize = out_shape.iter().product();
    let r = Tensor::new(out_shape, (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let loss_at = |store: &ParamStore, x: &Tensor| -> Result<f64> {
        let mut g = Graph::new(store, true, seed);
        let xv = g.constant(x.clone());
        let y = layer.forward(&mut g, xv)?;
        let l = g.dot_const(y, &r)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::new(&store, true, seed);
    let xv = if wrt_input { g.input(x.clone()) } else { g.constant(x.clone()) };
    let y = layer.forward(&mut g, xv)?;
    let loss = g.dot_const(y, &r)?;
    let grads = g.backward_all(loss);
    let analytic_x = grads.get(xv);
    let ids: Vec<_> = store.ids().filter(|&id| store.group(id) != ParamGroup::Buffer).collect();
    let analytic_p: Vec<Vec<f64>> = ids.iter().map(|&id| grads.get(g.param(id))).collect();
    drop(g);

    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut note = |err: f64, what: String| {
        checked += 1;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, what);
        }
    };
    for (k, &id) in ids.iter().enumerate() {
        let n = store.get(id).len();
        let probes: Vec<usize> = if n <= MAX_PROBES { (0..n).collect() } else { sample(&mut rng, n, MAX_PROBES).into_vec() };
        for i in probes {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let lp = loss_at(&store, &x)?;
            store.get_mut(id).data_mut()[i] = orig - eps;
            let lm = loss_at(&store, &x)?;
            store.get_mut(id).data_mut()[i] = orig;
            let num = (lp - lm) / (2.0 * eps);
            note(rel_error(analytic_p[k][i], num), format!("{}[{i}]", store.name(id)));
        }
    }
    if wrt_input {
        let n = x.len();
        let probes: Vec<usize> = if n <= MAX_PROBES { (0..n).collect() } else { sample(&mut rng, n, MAX_PROBES).into_vec() };
        for i in probes {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + eps;
            let lp = loss_at(&store, &x)?;
            x.data_mut()[i] = orig - eps;
            let lm = loss_at(&store, &x)?;
            x.data_mut()[i] = orig;
            let num = (lp - lm) / (2.0 * eps);
            note(rel_error(analytic_x[i], num), format!("input[{i}]"));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst: worst.1,
        checked,
        resampled,
        passed: worst.0 < tol,
    })
}
