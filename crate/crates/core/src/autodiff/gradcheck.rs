use super::{GradError, Graph, ParamStore, Var};

/// Denominator floor for [`relative_error`], so that gradients that are
/// numerically zero compare by absolute difference.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Where `max_rel_err` occurred, as `name[index]`.
    pub worst: String,
    /// Analytic and numeric derivative at `worst`.
    pub worst_pair: (f64, f64),
    /// Number of parameter elements compared.
    pub checked: usize,
    /// Elements whose `±ε` perturbation switched a relu, max-pool or clamp
    /// branch; central differences do not measure the derivative there.
    pub skipped: usize,
    /// Parameters with at least one element above tolerance.
    pub failing: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

/// Compares reverse-mode gradients of a scalar loss against central
/// differences `(f(θ+ε) - f(θ-ε)) / 2ε`.
///
/// `loss` rebuilds the scalar loss on a fresh graph from the current store
/// contents; it must be deterministic (batch norm in eval mode). At most
/// `samples_per_param` evenly strided elements of each parameter are
/// perturbed. An element is skipped, and counted in
/// [`GradCheckReport::skipped`], when either perturbed evaluation takes a
/// different piecewise branch than the unperturbed one. Tolerance
/// violations are reported, not returned as errors.
pub fn finite_difference_check<F, E>(
    store: &mut ParamStore,
    mut loss: F,
    eps: f64,
    tol: f64,
    samples_per_param: usize,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, E>,
    E: From<GradError>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out)?;
    let base = g.branch_fingerprint();

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.len();
        let analytic = g
            .param_var(id)
            .and_then(|v| grads.get(v))
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = if n <= samples_per_param {
            (0..n).collect()
        } else {
            (0..samples_per_param)
                .map(|i| i * n / samples_per_param)
                .collect()
        };
        let mut failed = false;
        for idx in picks {
            let orig = store.get(id).value.data()[idx];
            store.get_mut(id).value.data_mut()[idx] = orig + eps;
            let (plus, fp_plus) = eval(&mut loss, store)?;
            store.get_mut(id).value.data_mut()[idx] = orig - eps;
            let (minus, fp_minus) = eval(&mut loss, store)?;
            store.get_mut(id).value.data_mut()[idx] = orig;
            if fp_plus != base || fp_minus != base {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{}[{idx}]", store.get(id).name);
                report.worst_pair = (analytic[idx], numeric);
            }
            failed |= err > tol;
        }
        if failed {
            report.failing.push(store.get(id).name.clone());
        }
    }
    Ok(report)
}

fn eval<F, E>(loss: &mut F, store: &ParamStore) -> Result<(f64, u64), E>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let v = loss(&mut g, store)?;
    Ok((g.value(v).data()[0], g.branch_fingerprint()))
}
