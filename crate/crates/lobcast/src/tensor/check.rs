//! Finite-difference gradient verification.
//!
//! Both checkers rebuild the computation from scratch for every probe, so
//! the function under test must be a pure map from inputs to a scalar loss.
//! Analytic gradients come from one backward pass; numeric gradients from
//! centered differences `(f(x+h) - f(x-h)) / 2h` applied element by element.

use super::array::Array;
use super::graph::{Graph, Tensor, TensorError};
use super::params::{Bound, ParamSet};

/// Outcome of a gradient check over every element of every input.
///
/// Two granularities are reported. The componentwise error compares each
/// scalar on its own and is the sharpest detector of localized bugs, but
/// for very small gradients it is limited by the probe itself: a centered
/// difference resolves a derivative only down to about
/// `ulp(loss) / (2h)`, noise that the implementation under test cannot
/// influence. The groupwise error applies the same formula to whole
/// gradient vectors (l2 norms), where that probe noise is negligible
/// against the vector's scale, so it stays meaningful at small step sizes.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of scalar elements probed.
    pub checked: usize,
    /// Largest componentwise relative error seen.
    pub max_rel_err: f64,
    /// Where it occurred, e.g. `enc.0.attn.q[12]` or `input0[3]`.
    pub worst_label: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Largest per-input/per-parameter relative error, each computed as
    /// `|a - n| / max(1e-8, |a| + |n|)` with `|.|` the l2 norm over the
    /// whole array's gradient.
    pub max_group_rel_err: f64,
    /// The input or parameter where the groupwise worst occurred.
    pub worst_group: String,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            checked: 0,
            max_rel_err: 0.0,
            worst_label: String::new(),
            worst_analytic: 0.0,
            worst_numeric: 0.0,
            max_group_rel_err: 0.0,
            worst_group: String::new(),
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        // Relative error with a floor so that near-zero pairs compare cleanly.
        let rel = (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs());
        self.checked += 1;
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst_label = label();
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }

    fn record_group(&mut self, label: impl FnOnce() -> String, acc: &GroupAccumulator) {
        let (a, n, d) = (acc.a2.sqrt(), acc.n2.sqrt(), acc.d2.sqrt());
        let rel = d / f64::max(1e-8, a + n);
        if rel > self.max_group_rel_err {
            self.max_group_rel_err = rel;
            self.worst_group = label();
        }
    }

    /// Componentwise verdict.
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }

    /// Per-array verdict.
    pub fn passes_groupwise(&self, tolerance: f64) -> bool {
        self.max_group_rel_err < tolerance
    }
}

#[derive(Default)]
struct GroupAccumulator {
    a2: f64,
    n2: f64,
    d2: f64,
}

impl GroupAccumulator {
    fn add(&mut self, analytic: f64, numeric: f64) {
        self.a2 += analytic * analytic;
        self.n2 += numeric * numeric;
        let d = analytic - numeric;
        self.d2 += d * d;
    }
}

/// Check `d(loss)/d(inputs)` for a scalar-valued tensor function.
pub fn grad_check<F>(f: F, inputs: &[Array], h: f64) -> Result<GradCheckReport, TensorError>
where
    F: for<'g> Fn(&'g Graph, &[Tensor<'g>]) -> Result<Tensor<'g>, TensorError>,
{
    let graph = Graph::new();
    let leaves: Vec<Tensor<'_>> = inputs.iter().map(|a| graph.leaf(a.clone())).collect();
    let loss = f(&graph, &leaves)?;
    let analytic: Vec<Vec<f64>> = {
        graph.backward(loss)?;
        leaves
            .iter()
            .map(|t| match t.grad() {
                Some(a) => a.into_data(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    };

    let eval = |arrays: &[Array]| -> Result<f64, TensorError> {
        let g = Graph::new();
        let leaves: Vec<Tensor<'_>> = arrays.iter().map(|a| g.constant(a.clone())).collect();
        Ok(f(&g, &leaves)?.item())
    };

    let mut work: Vec<Array> = inputs.to_vec();
    let mut report = GradCheckReport::new();
    for i in 0..work.len() {
        let mut group = GroupAccumulator::default();
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(|| format!("input{i}[{j}]"), analytic[i][j], numeric);
            group.add(analytic[i][j], numeric);
        }
        report.record_group(|| format!("input{i}"), &group);
    }
    Ok(report)
}

/// Check `d(loss)/d(parameters)` for a scalar loss built from a bound
/// parameter set. Probes every element of every registered parameter.
pub fn grad_check_params<F>(
    params: &ParamSet,
    f: F,
    h: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Tensor<'g>, TensorError>,
{
    let graph = Graph::new();
    let bound = params.bind(&graph);
    let loss = f(&graph, &bound)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = (0..bound.len())
        .map(|i| bound.grad_at(i).into_data())
        .collect();

    let eval = |p: &ParamSet| -> Result<f64, TensorError> {
        let g = Graph::new();
        let b = p.bind(&g);
        Ok(f(&g, &b)?.item())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport::new();
    for i in 0..work.len() {
        let mut group = GroupAccumulator::default();
        for j in 0..work.array_at(i).numel() {
            let orig = work.array_at(i).data()[j];
            work.array_at_mut(i).data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.array_at_mut(i).data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.array_at_mut(i).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let name = params.name_at(i);
            report.record(|| format!("{name}[{j}]"), analytic[i][j], numeric);
            group.add(analytic[i][j], numeric);
        }
        report.record_group(|| params.name_at(i).to_string(), &group);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::graph::concat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_matches() {
        // loss = sum(x*x): d/dx = 2x exactly; checker should agree tightly.
        let report = grad_check(
            |_, xs| Ok(xs[0].mul(xs[0])?.sum_all()),
            &[Array::from_vec(vec![0.5, -1.25, 3.0])],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.passes(1e-8), "rel err {}", report.max_rel_err);
    }

    #[test]
    fn composite_ops_gradient_matches() {
        // Exercise matmul, softmax, relu, div, sqrt, transpose, narrow,
        // concat and reductions in one scalar pipeline.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let w = Array::uniform(&[4, 4], -0.5, 0.5, &mut rng);
        let report = grad_check(
            |g, xs| {
                let h = xs[0].matmul(xs[1])?;
                let attn = h.matmul(h.t())?.scale(0.5).softmax(1);
                let mixed = attn.matmul(h)?;
                let left = mixed.narrow(1, 0, 2);
                let right = mixed.narrow(1, 2, 2).relu();
                let both = concat(&[left, right], 1)?;
                let denom = both.mul(both)?.sum_all().sqrt().add(g.scalar(1.0))?;
                both.sum_all().div(denom)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-6), "worst {}: rel err {}", report.worst_label, report.max_rel_err);
    }

    #[test]
    fn param_closure_gradient_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        params.register_uniform("w", &[2, 3], 2, &mut rng);
        params.register_uniform("b", &[3], 3, &mut rng);
        let data = Array::uniform(&[5, 2], -1.0, 1.0, &mut rng);
        let report = grad_check_params(
            &params,
            move |g, p| {
                let x = g.constant(data.clone());
                let y = x.matmul(p.get("w"))?.add(p.get("b"))?;
                Ok(y.mul(y)?.mean_all())
            },
            1e-5,
        )
        .unwrap();
        assert_eq!(report.checked, 9);
        assert!(report.passes(1e-7), "rel err {}", report.max_rel_err);
    }
}
