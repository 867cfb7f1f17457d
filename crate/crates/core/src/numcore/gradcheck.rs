use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn scalar_of(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::domain(
            "finite_difference_check",
            format!("function output must be scalar, got shape {:?}", v.shape()),
        ));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `f` against central differences, over
/// every coordinate of every tensor in `xs`.
///
/// Returns `max |analytic - numeric| / max(|analytic| + |numeric|, 1e-12)`.
pub fn finite_difference_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_difference_check_floored(f, xs, h, 1e-12)
}

/// Like [`finite_difference_check_many`] with the denominator floored at
/// `floor` instead of `1e-12`: `|a - n| / max(|a| + |n|, floor)`.
///
/// Central differences carry absolute noise of roughly `eps * |f| / h`, so
/// coordinates whose true gradient is below that scale cannot be checked in
/// relative terms; the floor turns those into an absolute check.
pub fn finite_difference_check_floored<F>(f: F, xs: &[Tensor], h: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if floor.is_nan() || floor <= 0.0 {
        return Err(Error::invalid(format!(
            "denominator floor {floor} must be positive"
        )));
    }
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::invalid(format!("step {h} outside (0, 1e-2]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| g.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut probe: Vec<Tensor> = xs.to_vec();
    let mut worst = 0.0f64;
    for (ti, grad) in analytic.iter().enumerate() {
        for k in 0..xs[ti].len() {
            let orig = xs[ti].data()[k];
            probe[ti].data_mut()[k] = orig + h;
            let fp = eval(&probe)?;
            probe[ti].data_mut()[k] = orig - h;
            let fm = eval(&probe)?;
            probe[ti].data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.data()[k];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-tensor form of [`finite_difference_check_many`].
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_difference_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), h)
}
