use std::collections::{HashMap, HashSet};

use super::tensor::{Op, Tensor};
use super::TensorError;
use crate::real::Real;

/// Nodes reachable from `root` in topological order (inputs first).
/// With `grad_only`, traversal stops at nodes that do not require gradient.
pub(crate) fn topo_order<R: Real>(root: &Tensor<R>, grad_only: bool) -> Vec<Tensor<R>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, inputs_pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = &node.0.op {
            for input in op.inputs().into_iter().rev() {
                if (!grad_only || input.requires_grad()) && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

/// Gradients of the scalar `loss` with respect to each tensor in `wrt`.
///
/// Tensors unreachable from `loss` (or not requiring gradient) get zeros.
/// With `create_graph`, the backward pass is itself recorded so the returned
/// gradients can be differentiated again.
pub fn grad<R: Real>(
    loss: &Tensor<R>,
    wrt: &[Tensor<R>],
    create_graph: bool,
) -> Result<Vec<Tensor<R>>, TensorError> {
    if loss.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let zeros = |t: &Tensor<R>| Tensor::zeros(t.shape());
    if !loss.requires_grad() {
        return Ok(wrt.iter().map(zeros).collect());
    }
    let keep: HashSet<u64> = wrt.iter().map(Tensor::id).collect();
    let mut grads: HashMap<u64, Tensor<R>> = HashMap::new();
    grads.insert(loss.id(), Tensor::ones(loss.shape()));
    let mut results: HashMap<u64, Tensor<R>> = HashMap::new();

    for node in topo_order(loss, true).into_iter().rev() {
        let g = match grads.remove(&node.id()) {
            Some(g) => g,
            None => continue,
        };
        if keep.contains(&node.id()) {
            results.insert(node.id(), g.clone());
        }
        let op = match &node.0.op {
            Some(op) => op,
            None => continue,
        };
        let inputs = op.inputs();
        let input_grads = vjp(op, &node, &g, create_graph);
        for (input, ig) in inputs.into_iter().zip(input_grads) {
            let ig = match ig {
                Some(ig) if input.requires_grad() => ig,
                _ => continue,
            };
            let acc = match grads.remove(&input.id()) {
                Some(prev) => prev.add(&ig)?,
                None => ig,
            };
            grads.insert(input.id(), acc);
        }
    }

    Ok(wrt
        .iter()
        .map(|t| match results.remove(&t.id()) {
            Some(g) if create_graph => g,
            Some(g) => g.detach(),
            None => zeros(t),
        })
        .collect())
}

/// Vector-Jacobian products for one op, aligned with `op.inputs()`.
/// Every rule is written with differentiable ops so it can be recorded.
fn vjp<R: Real>(
    op: &Op<R>,
    out: &Tensor<R>,
    g: &Tensor<R>,
    create_graph: bool,
) -> Vec<Option<Tensor<R>>> {
    let d = |t: &Tensor<R>| if create_graph { t.clone() } else { t.detach() };
    let g = d(g);
    let out = d(out);
    let need = |t: &Tensor<R>| t.requires_grad();
    const OK: &str = "backward rule preserves shapes";
    match op {
        Op::Add(a, b) => vec![need(a).then(|| g.clone()), need(b).then(|| g.clone())],
        Op::Sub(a, b) => vec![need(a).then(|| g.clone()), need(b).then(|| g.neg())],
        Op::Mul(a, b) => vec![
            need(a).then(|| g.mul(&d(b)).expect(OK)),
            need(b).then(|| g.mul(&d(a)).expect(OK)),
        ],
        Op::Neg(_) => vec![Some(g.neg())],
        Op::Scale(_, c) => vec![Some(g.scale(*c))],
        Op::AddScalar(_) => vec![Some(g)],
        Op::MatMul(a, b) => vec![
            need(a).then(|| g.matmul(&d(b).t().expect(OK)).expect(OK)),
            need(b).then(|| d(a).t().expect(OK).matmul(&g).expect(OK)),
        ],
        Op::Transpose(_) => vec![Some(g.t().expect(OK))],
        Op::Exp(_) => vec![Some(g.mul(&out).expect(OK))],
        Op::Ln(a) => vec![Some(g.mul(&d(a).recip()).expect(OK))],
        Op::Tanh(_) => {
            let gy2 = g.mul(&out).expect(OK).mul(&out).expect(OK);
            vec![Some(g.sub(&gy2).expect(OK))]
        }
        Op::Recip(_) => vec![Some(g.mul(&out).expect(OK).mul(&out).expect(OK).neg())],
        Op::Sqrt(_) => vec![Some(g.mul(&out.recip()).expect(OK).scale(R::of(0.5)))],
        Op::SumTo(a) => vec![Some(g.broadcast_to(a.shape()).expect(OK))],
        Op::BroadcastTo(a) => vec![Some(g.sum_to(a.shape()).expect(OK))],
        Op::Softmax(_) => {
            let dot = g.mul(&out).expect(OK).sum_last();
            vec![Some(out.mul(&g.sub_bcast(&dot).expect(OK)).expect(OK))]
        }
        Op::LogSoftmax(_) => {
            let total = g.sum_last();
            let probs = out.exp();
            vec![Some(g.sub(&probs.mul_bcast(&total).expect(OK)).expect(OK))]
        }
        Op::Concat(parts, axis) => {
            let mut offset = 0;
            parts
                .iter()
                .map(|p| {
                    let len = p.shape()[*axis];
                    let start = offset;
                    offset += len;
                    need(p).then(|| g.slice(*axis, start, len).expect(OK))
                })
                .collect()
        }
        Op::Slice(a, axis, start) => vec![Some(g.unslice(*axis, *start, a.shape()[*axis]))],
        Op::Unslice(a, axis, start) => {
            vec![Some(g.slice(*axis, *start, a.shape()[*axis]).expect(OK))]
        }
        Op::Gather(table, ids) => vec![Some(g.scatter_rows(ids, table.shape()[0]))],
        Op::Scatter(_, ids) => vec![Some(g.gather_rows(ids).expect(OK))],
        Op::Reshape(a) => vec![Some(g.reshape(a.shape()).expect(OK))],
    }
}
