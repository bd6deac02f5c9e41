//! Loss-agnostic inner/outer loop machinery. The model-specific entry
//! points in the parent module plug task losses into these.

use crate::autodiff::{grad, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Parameters after an inner loop, plus the support loss seen before each step.
pub struct Adapted<R: Real> {
    pub params: Vec<Tensor<R>>,
    pub losses: Vec<f64>,
}

/// `steps` plain gradient-descent steps `θ ← θ − lr ∇L(θ)`.
///
/// With `track`, every step is recorded so the result stays differentiable
/// with respect to the incoming tensors. Otherwise each step produces fresh
/// leaves.
pub fn adapt<R, F>(
    theta: &[Tensor<R>],
    loss_fn: &F,
    steps: usize,
    lr: f64,
    track: bool,
) -> Result<Adapted<R>>
where
    R: Real,
    F: Fn(&[Tensor<R>]) -> Result<Tensor<R>>,
{
    let mut current = theta.to_vec();
    let mut losses = Vec::with_capacity(steps);
    let lr_r = R::of(lr);
    for step in 0..steps {
        let loss = loss_fn(&current)?;
        let value = loss.item().f64();
        if !value.is_finite() {
            return Err(Error::Divergence { step, task: None });
        }
        losses.push(value);
        let grads = grad(&loss, &current, track)?;
        current = current
            .iter()
            .zip(&grads)
            .map(|(p, g)| {
                if track {
                    Ok(p.sub(&g.scale(lr_r))?)
                } else {
                    let data = p
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&a, &b)| a - b * lr_r)
                        .collect();
                    Ok(Tensor::param(data, p.shape())?)
                }
            })
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(Adapted {
        params: current,
        losses,
    })
}

/// Everything one task contributes to a meta-update.
#[derive(Debug, Clone)]
pub struct TaskOutcome<R> {
    /// Meta-gradient, one flat vector per parameter.
    pub grads: Vec<Vec<R>>,
    /// Adapted parameter values θ′.
    pub adapted: Vec<Vec<R>>,
    pub support_pre: f64,
    pub support_post: f64,
    pub query: f64,
}

/// Adapts on `support`, evaluates `query` at θ′, and differentiates it.
///
/// With `second_order` the gradient flows back through the whole inner loop
/// to θ; otherwise it is taken with respect to θ′ (first-order approximation).
pub fn task_meta_gradient<R, S, Q>(
    theta: &[(Vec<R>, Vec<usize>)],
    support: &S,
    query: &Q,
    steps: usize,
    lr: f64,
    second_order: bool,
) -> Result<TaskOutcome<R>>
where
    R: Real,
    S: Fn(&[Tensor<R>]) -> Result<Tensor<R>>,
    Q: Fn(&[Tensor<R>]) -> Result<Tensor<R>>,
{
    let leaves = theta
        .iter()
        .map(|(v, s)| Ok(Tensor::param(v.clone(), s)?))
        .collect::<Result<Vec<_>>>()?;
    let adapted = adapt(&leaves, support, steps, lr, second_order)?;
    let constants: Vec<Tensor<R>> = adapted.params.iter().map(Tensor::detach).collect();
    let support_post = support(&constants)?.item().f64();
    let support_pre = adapted.losses.first().copied().unwrap_or(support_post);
    let query_loss = query(&adapted.params)?;
    let wrt = if second_order {
        &leaves
    } else {
        &adapted.params
    };
    let grads = grad(&query_loss, wrt, false)?;
    Ok(TaskOutcome {
        grads: grads.iter().map(Tensor::to_vec).collect(),
        adapted: adapted.params.iter().map(Tensor::to_vec).collect(),
        support_pre,
        support_post,
        query: query_loss.item().f64(),
    })
}
