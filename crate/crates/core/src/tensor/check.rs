use super::{Result, Scalar, Tape, Tensor, Var};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Central-difference gradient check of a scalar-valued tape function.
///
/// `f` receives a fresh tape and the input leaf and must return a scalar.
/// The relative error of coordinate `i` is
/// `|a_i - n_i| / max(|a_i|, |n_i|, 1e-2 · max_j |a_j|, 1e-12)`, so
/// coordinates whose gradient is negligible next to the largest one are
/// compared at the scale of the gradient as a whole.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x)?;
    let numeric = numeric_grad(&f, x, eps)?;
    Ok(compare_grads(&analytic, &numeric))
}

/// Analytic gradients of `f` in f32 against central differences of the same
/// function evaluated in f64 (`reference`), which keeps rounding noise of the
/// difference quotient out of the comparison.
pub fn finite_diff_check_f32<F, G>(f: F, reference: G, x: &Tensor<f32>, eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape<f32>, Var) -> Result<Var>,
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x)?;
    let numeric = numeric_grad(&reference, &x.cast::<f64>(), eps)?;
    Ok(compare_grads(&analytic, &numeric))
}

fn analytic_grad<T, F>(f: &F, x: &Tensor<T>) -> Result<Vec<f64>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::new(x.shape.clone(), x.data.clone())?.with_grad());
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    Ok(match tape.grad(leaf) {
        Some(g) => g.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.numel()],
    })
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad<T, F>(f: &F, x: &Tensor<T>, eps: f64) -> Result<Vec<f64>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let eval = |data: Vec<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::new(x.shape.clone(), data)?);
        let out = f(&mut tape, leaf)?;
        Ok(tape.data(out)[0].as_f64())
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.data.clone();
        let mut minus = x.data.clone();
        plus[i] = T::of(plus[i].as_f64() + eps);
        minus[i] = T::of(minus[i].as_f64() - eps);
        // Use the actually representable step so f32 rounding does not bias
        // the quotient.
        let h = plus[i].as_f64() - minus[i].as_f64();
        numeric.push((eval(plus)? - eval(minus)?) / h);
    }
    Ok(numeric)
}

/// Worst relative error between two gradients, as in [`finite_diff_check`].
pub fn compare_grads(analytic: &[f64], numeric: &[f64]) -> FdReport {
    let scale = analytic.iter().fold(0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(1e-12);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
        checked: analytic.len(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact_in_f64() {
        let x = Tensor::new(vec![4], vec![0.3f64, -2.0, 5.5, 1.0]).unwrap();
        let r = finite_diff_check(|t, v| t.sum(v), &x, 1e-3).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn reports_a_wrong_gradient() {
        // custom op with a deliberately wrong backward
        let x = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let r = finite_diff_check(
            |t, v| {
                let d: f64 = t.data(v).iter().map(|a| a * a).sum();
                t.custom(&[v], vec![1], vec![d], Box::new(|ins, _, g| vec![ins[0].iter().map(|a| a * g[0]).collect()]))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_err > 0.4);
    }
}
