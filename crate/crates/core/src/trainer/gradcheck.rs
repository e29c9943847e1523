use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::masked_mae_loss;
use crate::data::SliceBatch;
use crate::encoder::{Encoder, ParamStore};
use crate::error::Result;
use crate::graph::DependencyGraph;
use crate::tensor::{Graph, Tensor};

/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per parameter tensor, in store order.
    pub groups: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn worst_group(&self) -> Option<&(String, f64)> {
        self.groups.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compares reverse-mode gradients with central differences on up to
/// `coords` sampled coordinates of every parameter tensor.
///
/// `analytic` returns the gradient of the loss for each tensor in store order;
/// `loss` evaluates the loss alone.
pub fn grad_check_fn(
    params: &ParamStore,
    analytic: impl Fn(&ParamStore) -> Result<Vec<Tensor>>,
    loss: impl Fn(&ParamStore) -> Result<f64>,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let grads = analytic(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut groups = Vec::with_capacity(params.len());
    let mut checked = 0;
    for (i, name) in params.names().iter().enumerate() {
        let numel = params.tensors()[i].numel();
        let picks: Vec<usize> = if numel <= coords {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(&mut rng, numel, coords).into_vec()
        };
        let mut worst: f64 = 0.0;
        for j in picks {
            let orig = params.tensors()[i].data()[j];
            probe.tensors_mut()[i].data_mut()[j] = orig + h;
            let up = loss(&probe)?;
            probe.tensors_mut()[i].data_mut()[j] = orig - h;
            let down = loss(&probe)?;
            probe.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
        groups.push((name.clone(), worst));
    }
    let max_rel_err = groups.iter().map(|g| g.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_rel_err,
        coords_checked: checked,
    })
}

/// Gradient check of the encoder's masked-MAE training loss on one batch.
pub fn grad_check(
    encoder: &Encoder,
    batch: &SliceBatch,
    graph: Option<&DependencyGraph>,
    null_value: f64,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let run = |params: &ParamStore, trainable: bool| -> Result<(f64, Vec<Tensor>)> {
        let enc = Encoder {
            config: encoder.config.clone(),
            params: params.clone(),
        };
        let mut g = Graph::new();
        let bound = enc.params.bind(&mut g, trainable);
        let x = g.constant(batch.inputs.clone());
        let out = enc.forward(&mut g, &bound, x, graph, None)?;
        let loss = masked_mae_loss(&mut g, out.prediction, &batch.targets, &batch.raw_targets, null_value)?;
        let value = g.value(loss).item();
        if !trainable {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        Ok((value, bound.grads(&g)))
    };
    grad_check_fn(
        &encoder.params,
        |p| run(p, true).map(|r| r.1),
        |p| run(p, false).map(|r| r.0),
        coords,
        h,
        seed,
    )
}
