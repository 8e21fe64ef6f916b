use super::{Graph, Tensor, Var};
use crate::error::{ensure, Result};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, tolerance: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), tolerance)
}

/// Multi-input variant of [`grad_check`]: every tensor in `points` is a
/// differentiable leaf.
pub fn grad_check_many<F>(f: F, points: &[Tensor], tolerance: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor], keep_graph: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.leaf(p.clone(), keep_graph)).collect();
        let out = f(&mut g, &vars)?;
        ensure!(
            g.value(out).len() == 1,
            Contract,
            "grad_check function must return a scalar, got shape {:?}",
            g.shape(out)
        );
        let value = g.value(out).item();
        if !keep_graph {
            return Ok((value, None));
        }
        g.backward(out)?;
        let grads = vars
            .iter()
            .map(|&v| g.grad(v).expect("leaf gradient populated"))
            .collect();
        Ok((value, Some(grads)))
    };

    let (_, analytic) = eval(points, true)?;
    let analytic = analytic.expect("gradients requested");
    let mut work = points.to_vec();
    let mut max_rel_error: f64 = 0.0;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..points[t].len() {
            let orig = points[t].data()[i];
            work[t].data_mut()[i] = orig + FD_STEP;
            let (plus, _) = eval(&work, false)?;
            work[t].data_mut()[i] = orig - FD_STEP;
            let (minus, _) = eval(&work, false)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            max_rel_error = max_rel_error.max(err);
        }
    }
    Ok(GradCheck {
        max_rel_error,
        tolerance,
    })
}
