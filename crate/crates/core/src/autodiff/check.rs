//! Central finite-difference oracle for reverse-mode gradients.

use super::{Array, Graph, NodeId};
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over all parameters.
    pub rel_error: f64,
    /// Largest absolute entrywise discrepancy.
    pub max_abs_error: f64,
    /// Smallest winner/runner-up gap over every max op at the base point.
    pub tie_margin: f64,
    pub analytic: Vec<Array>,
    pub numeric: Vec<Array>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol
    }
}

/// Builds the loss with `build` over fresh parameter leaves holding `params`,
/// then compares `backward` against `(f(x+h) − f(x−h)) / 2h` for every entry.
pub fn check_gradients<F>(params: &[Array], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Array]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|a| g.param(a.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok((g, ids, loss))
    };

    let (graph, ids, loss) = eval(params)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Array> = ids
        .iter()
        .map(|id| grads.get(*id).cloned().expect("parameter gradient"))
        .collect();

    let mut numeric = Vec::with_capacity(params.len());
    let mut work: Vec<Array> = params.to_vec();
    for p in 0..params.len() {
        let mut grad = Array::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let (g_plus, _, l_plus) = eval(&work)?;
            work[p].data_mut()[i] = orig - h;
            let (g_minus, _, l_minus) = eval(&work)?;
            work[p].data_mut()[i] = orig;
            grad.data_mut()[i] = (g_plus.scalar(l_plus) - g_minus.scalar(l_minus)) / (2.0 * h);
        }
        numeric.push(grad);
    }

    let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
    for (a, n) in analytic.iter().zip(&numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            diff2 += (x - y) * (x - y);
            a2 += x * x;
            n2 += y * y;
            max_abs = max_abs.max((x - y).abs());
        }
    }
    let denom = f64::max(a2.sqrt(), n2.sqrt());
    let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };

    Ok(GradCheckReport {
        loss: graph.scalar(loss),
        rel_error,
        max_abs_error: max_abs,
        tie_margin: graph.min_max_margin(),
        analytic,
        numeric,
    })
}
