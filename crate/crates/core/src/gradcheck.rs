//! Central finite-difference checks of graph gradients.

use alloc::vec::Vec;

use crate::graph::{Graph, NodeId, OpKind};
use crate::rng::{self, SeedPath};
use crate::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub node: NodeId,
    pub numel: usize,
    pub max_rel_error: f64,
    /// Flat entries skipped because a relu input sits on its kink.
    pub excluded: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.params.is_empty() && self.params.iter().all(|p| p.max_rel_error <= self.tolerance)
    }
}

/// `|autodiff - finite_diff| / max(1, |finite_diff|)`.
pub fn relative_error(autodiff: f64, finite_diff: f64) -> f64 {
    (autodiff - finite_diff).abs() / finite_diff.abs().max(1.0)
}

fn relu_pattern(graph: &Graph) -> Vec<i8> {
    let mut out = Vec::new();
    for id in graph.node_ids() {
        if graph.kind(id) == Some(OpKind::Relu) {
            let input = graph.inputs_of(id)[0];
            out.extend(graph.value(input).data().iter().map(|&v| {
                if v > 0.0 {
                    1
                } else if v < 0.0 {
                    -1
                } else {
                    0
                }
            }));
        }
    }
    out
}

/// Compares the gradient of `loss` with central differences for every
/// trainable leaf entry. The graph is restored to its original values.
pub fn grad_check(graph: &mut Graph, loss: NodeId, tolerance: f64) -> Result<GradCheckReport> {
    let grads = graph.backward(loss)?;
    let base_pattern = relu_pattern(graph);
    let mut params = Vec::new();
    for leaf in graph.trainable_leaves() {
        let original = graph.value(leaf).clone();
        let analytic = grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(original.shape()));
        let mut check = ParamCheck { node: leaf, numel: original.numel(), max_rel_error: 0.0, excluded: Vec::new() };
        for i in 0..original.numel() {
            let probe = |delta: f64, graph: &mut Graph| -> Result<(f64, Vec<i8>)> {
                let mut t = original.clone();
                t.data_mut()[i] += delta;
                graph.set_leaf(leaf, t)?;
                graph.recompute()?;
                Ok((graph.value(loss).item(), relu_pattern(graph)))
            };
            let (up, up_pattern) = probe(FD_STEP, graph)?;
            let (down, down_pattern) = probe(-FD_STEP, graph)?;
            if up_pattern != base_pattern || down_pattern != base_pattern {
                check.excluded.push(i);
                continue;
            }
            let fd = (up - down) / (2.0 * FD_STEP);
            check.max_rel_error = check.max_rel_error.max(relative_error(analytic.data()[i], fd));
        }
        graph.set_leaf(leaf, original)?;
        params.push(check);
    }
    graph.recompute()?;
    Ok(GradCheckReport { tolerance, params })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub kind: OpKind,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn random_tensor(rng: &mut rng::Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng::normal(rng)).collect()).expect("shape matches")
}

fn extent(rng: &mut rng::Rng) -> usize {
    1 + rng::below(rng, 5)
}

/// Sum of `node` weighted by fixed random coefficients, so every output
/// entry receives a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, rng: &mut rng::Rng, node: NodeId) -> Result<NodeId> {
    let w = random_tensor(rng, g.value(node).shape());
    let w = g.input(w);
    let prod = g.mul(node, w)?;
    g.sum(prod)
}

/// Builds one random instance that exercises `kind`; returns the graph and its loss.
pub fn op_instance(kind: OpKind, rng: &mut rng::Rng) -> Result<(Graph, NodeId)> {
    let mut g = Graph::new();
    let loss = match kind {
        OpKind::Matmul => {
            let (m, k, n) = (extent(rng), extent(rng), extent(rng));
            let a = g.param(random_tensor(rng, &[m, k]));
            let b = g.param(random_tensor(rng, &[k, n]));
            let c = g.matmul(a, b)?;
            weighted_sum(&mut g, rng, c)?
        }
        OpKind::Add => {
            let (m, n) = (extent(rng), extent(rng));
            let a = g.param(random_tensor(rng, &[m, n]));
            let rhs_shape: &[usize] = if rng::below(rng, 2) == 0 { &[m, n] } else { &[n] };
            let b = g.param(random_tensor(rng, rhs_shape));
            let c = g.add(a, b)?;
            weighted_sum(&mut g, rng, c)?
        }
        OpKind::Mul => {
            let (m, n) = (extent(rng), extent(rng));
            let a = g.param(random_tensor(rng, &[m, n]));
            let rhs_shape: &[usize] = if rng::below(rng, 2) == 0 { &[m, n] } else { &[] };
            let b = g.param(random_tensor(rng, rhs_shape));
            let c = g.mul(a, b)?;
            // plain sum keeps the check independent of mul's own weighting
            g.sum(c)?
        }
        OpKind::Relu => {
            let (m, n) = (extent(rng), extent(rng));
            let mut x = random_tensor(rng, &[m, n]);
            for v in x.data_mut() {
                if v.abs() < 1e-3 {
                    *v = if *v < 0.0 { -2e-3 } else { 2e-3 };
                }
            }
            let x = g.param(x);
            let y = g.relu(x)?;
            weighted_sum(&mut g, rng, y)?
        }
        OpKind::Tanh => {
            let (m, n) = (extent(rng), extent(rng));
            let x = g.param(random_tensor(rng, &[m, n]));
            let y = g.tanh(x)?;
            weighted_sum(&mut g, rng, y)?
        }
        OpKind::Concat => {
            let m = extent(rng);
            let axis = rng::below(rng, 2);
            let parts = 2 + rng::below(rng, 2);
            let mut ids = Vec::new();
            for _ in 0..parts {
                let e = extent(rng);
                let shape = if axis == 0 { [e, m] } else { [m, e] };
                ids.push(g.param(random_tensor(rng, &shape)));
            }
            let y = g.concat(&ids, axis)?;
            weighted_sum(&mut g, rng, y)?
        }
        OpKind::Mean => {
            let shape = [extent(rng), extent(rng)];
            let x = g.param(random_tensor(rng, &shape));
            let t = g.tanh(x)?;
            g.mean(t)?
        }
        OpKind::Sum => {
            let shape = [extent(rng), extent(rng)];
            let x = g.param(random_tensor(rng, &shape));
            let t = g.tanh(x)?;
            g.sum(t)?
        }
        OpKind::EmbedLookup => {
            let (v, d, m) = (extent(rng), extent(rng), extent(rng));
            let table = g.param(random_tensor(rng, &[v, d]));
            let idx = (0..m).map(|_| rng::below(rng, v) as f64).collect();
            let idx = g.input(Tensor::vector(idx));
            let e = g.embed_lookup(table, idx)?;
            weighted_sum(&mut g, rng, e)?
        }
        OpKind::SoftmaxXent => {
            let (m, k) = (extent(rng), 1 + extent(rng));
            let logits = g.param(random_tensor(rng, &[m, k]));
            let cls = (0..m).map(|_| rng::below(rng, k) as f64).collect();
            let cls = g.input(Tensor::vector(cls));
            g.softmax_xent(logits, cls)?
        }
        OpKind::Mse => {
            let shape = [extent(rng), extent(rng)];
            let p = g.param(random_tensor(rng, &shape));
            let t = g.param(random_tensor(rng, &shape));
            g.mse(p, t)?
        }
    };
    Ok((g, loss))
}

/// Gradient check of every op kind over `instances` random shapes each.
///
/// `fault` sign-flips one op's backward rule, to exercise the failure path.
pub fn op_suite(seed: u64, instances: usize, tolerance: f64, fault: Option<OpKind>) -> Result<Vec<OpCheck>> {
    let root = SeedPath::root(seed).child("gradcheck");
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        let mut rng = root.child(kind.name()).rng();
        let mut worst: f64 = 0.0;
        let mut passed = true;
        for _ in 0..instances {
            let (mut g, loss) = op_instance(kind, &mut rng)?;
            g.inject_fault(fault);
            let report = grad_check(&mut g, loss, tolerance)?;
            worst = worst.max(report.max_rel_error());
            passed &= report.passed();
        }
        out.push(OpCheck { kind, instances, max_rel_error: worst, passed });
    }
    Ok(out)
}
