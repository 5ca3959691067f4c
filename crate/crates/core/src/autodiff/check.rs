use super::{Graph, Tensor, Var};
use crate::error::{IqtError, Result};

/// `|fd - ad| / max(|fd|, |ad|, 1e-8)`.
pub fn relative_error(fd: f64, ad: f64) -> f64 {
    (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8)
}

const MIN_STEP_RATIO: f64 = 1e-3;

fn eval<F>(training: bool, params: &[Tensor<f64>], f: &mut F) -> Result<(Graph<f64>, Var, Vec<Var>)>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(training);
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(IqtError::arg("gradient check needs a scalar loss"));
    }
    Ok((g, loss, vars))
}

/// Fourth-order central finite-difference check of every entry of the
/// selected parameters, probing at `±epsilon` and `±2 epsilon`.
///
/// `loss` rebuilds the graph from parameter handles registered in order.
/// Returns, per selected parameter, the maximum relative error.
///
/// A step that flips a ReLU or changes a max-pool winner straddles a kink.
/// It is shrunk tenfold, down to `epsilon / 1000`, until all four probes keep
/// the unperturbed switch pattern.
pub fn gradient_check_params<F>(
    training: bool,
    params: &[Tensor<f64>],
    which: &[usize],
    epsilon: f64,
    mut loss: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, l, vars) = eval(training, params, &mut loss)?;
    let pattern = g.switch_pattern();
    g.backward(l)?;
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(which.len());
    for &w in which {
        let ad = g
            .grad(vars[w])
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; params[w].len()]);
        let mut worst: f64 = 0.0;
        for (i, &adv) in ad.iter().enumerate() {
            let orig = params[w].data()[i];
            let mut step = epsilon;
            let fd = loop {
                let mut f = [0.0; 4];
                let mut smooth = true;
                for (slot, k) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                    work[w].data_mut()[i] = orig + k * step;
                    let (gk, lk, _) = eval(training, &work, &mut loss)?;
                    *slot = gk.value(lk).data()[0];
                    smooth &= gk.switch_pattern() == pattern;
                }
                if smooth || step <= epsilon * MIN_STEP_RATIO {
                    break (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * step);
                }
                step /= 10.0;
            };
            work[w].data_mut()[i] = orig;
            worst = worst.max(relative_error(fd, adv));
        }
        out.push(worst);
    }
    Ok(out)
}

/// Maximum relative error between reverse-mode and central finite-difference
/// gradients for every entry of `params[which]`, in training mode.
pub fn gradient_check<F>(params: &[Tensor<f64>], which: usize, epsilon: f64, loss: F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(gradient_check_params(true, params, &[which], epsilon, loss)?[0])
}
