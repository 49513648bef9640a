use std::collections::BTreeMap;

use super::{DiffError, Graph, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_err: f64,
    pub per_parameter: BTreeMap<String, f64>,
    pub scalars_checked: usize,
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares reverse-mode gradients of a scalar `forward` with central
/// differences for every scalar of every named parameter.
///
/// `forward` receives a fresh graph and one leaf per parameter (same order
/// as `params`) and must return a scalar node. Runs in 64-bit.
pub fn gradcheck<Fw>(
    op_name: &str,
    params: &[(String, Tensor<f64>)],
    eps: f64,
    forward: Fw,
) -> Result<GradReport, DiffError>
where
    Fw: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, DiffError>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(DiffError::Invalid(format!("gradcheck eps {eps} outside [1e-6, 1e-3]")));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = values.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = forward(&mut g, &leaves)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = params.iter().map(|(_, t)| g.input(t.clone(), true)).collect();
    let out = forward(&mut g, &leaves)?;
    let base = scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let again = eval(&values)?;
    if again.to_bits() != base.to_bits() {
        return Err(DiffError::NonDeterministic { first: base, second: again });
    }

    let mut per_parameter = BTreeMap::new();
    let mut max_rel_err = 0f64;
    let mut scalars_checked = 0;
    for (pi, (name, _)) in params.iter().enumerate() {
        let analytic = grads.get(leaves[pi]).unwrap_or_else(|| Tensor::zeros(values[pi].dims().to_vec()));
        let mut worst = 0f64;
        for j in 0..values[pi].numel() {
            let orig = values[pi].data()[j];
            values[pi].data_mut()[j] = orig + eps;
            let up = eval(&values)?;
            values[pi].data_mut()[j] = orig - eps;
            let down = eval(&values)?;
            values[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
            scalars_checked += 1;
        }
        max_rel_err = max_rel_err.max(worst);
        per_parameter.insert(name.clone(), worst);
    }
    Ok(GradReport { op_name: op_name.to_string(), max_rel_err, per_parameter, scalars_checked })
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64, DiffError> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(DiffError::NotScalar { dims: t.dims().to_vec() });
    }
    Ok(t.data()[0])
}

/// Reduces any node to a scalar by a fixed projection `sum(x ⊙ w)`, which
/// exercises every output coordinate with a distinct weight.
pub fn project_to_scalar(g: &mut Graph<f64>, x: Var, weights: &Tensor<f64>) -> Result<Var, DiffError> {
    let w = g.constant(weights.clone().reshape(g.dims(x).to_vec())?);
    let p = g.mul(x, w)?;
    g.sum(p)
}
