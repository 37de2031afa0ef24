//! Central-difference verification of reverse-mode gradients.

use serde::Serialize;

use super::graph::{Graph, SgMode, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub per_input_errors: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Replay stop-gradient outputs from the unperturbed pass, so the
    /// numeric oracle treats `sg[...]` terms as constants.
    pub freeze_stop_gradients: bool,
    /// Probe at most this many (evenly strided) elements per input.
    pub max_probes_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            freeze_stop_gradients: false,
            max_probes_per_input: None,
        }
    }
}

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<L>(store: &ParamStore<f64>, loss: &L, sg: SgMode<f64>) -> Result<(f64, Vec<Tensor<f64>>)>
where
    L: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    g.set_sg_mode(sg);
    let l = loss(&mut g)?;
    if g.value(l).len() != 1 {
        return Err(Error::GradCheck("loss is not a scalar".into()));
    }
    let v = g.scalar(l);
    Ok((v, g.take_sg_record()))
}

/// Compares reverse-mode gradients of every trainable parameter in `store`
/// with central differences of `loss`. Frozen parameters are skipped; their
/// analytic gradient must be absent, which callers can check separately.
pub fn grad_check<L>(
    op_name: &str,
    store: &ParamStore<f64>,
    loss: L,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let record = if opts.freeze_stop_gradients {
        SgMode::Record(Vec::new())
    } else {
        SgMode::Off
    };
    let (base, saved) = evaluate(store, &loss, record)?;
    let replay = |saved: &Vec<Tensor<f64>>| {
        if opts.freeze_stop_gradients {
            SgMode::Replay(saved.clone(), 0)
        } else {
            SgMode::Off
        }
    };
    let (again, _) = evaluate(store, &loss, replay(&saved))?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::GradCheck(format!(
            "{op_name} is non-deterministic: {base} vs {again}"
        )));
    }

    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut g = Graph::with_params(store);
        let l = loss(&mut g)?;
        let grads = g.backward(l)?;
        store
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, p)| {
                let gv = grads
                    .param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.tensor.len()]);
                (id, gv)
            })
            .collect()
    };

    let mut probe = store.clone();
    let mut per_input = Vec::new();
    let mut worst: f64 = 0.0;
    for (id, grad) in analytic {
        let n = grad.len();
        let stride = opts.max_probes_per_input.map_or(1, |m| n.div_ceil(m.max(1)));
        let mut err: f64 = 0.0;
        for k in (0..n).step_by(stride) {
            let orig = probe.tensor(id).data()[k];
            probe.tensor_mut(id).data_mut()[k] = orig + opts.eps;
            let (up, _) = evaluate(&probe, &loss, replay(&saved))?;
            probe.tensor_mut(id).data_mut()[k] = orig - opts.eps;
            let (down, _) = evaluate(&probe, &loss, replay(&saved))?;
            probe.tensor_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            err = err.max(relative_error(grad[k], numeric));
        }
        worst = worst.max(err);
        per_input.push((store.get(id).name.clone(), err));
    }
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_relative_error: worst,
        per_input_errors: per_input,
    })
}

/// Convenience form for free-standing ops: `inputs` become trainable leaves
/// passed to `op` in order.
pub fn grad_check_inputs<L>(
    op_name: &str,
    inputs: &[(&str, Tensor<f64>)],
    op: L,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs.iter().map(|(name, t)| store.add(*name, t.clone())).collect();
    grad_check(
        op_name,
        &store,
        |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            op(g, &vars)
        },
        opts,
    )
}
