use std::collections::{HashMap, HashSet};

use super::{with_grad_mode, Result, Tensor, TensorError};

/// Gradients of a one-element `output` with respect to each of `inputs`.
///
/// Inputs may be leaves or intermediate tensors, but must be tracked (see
/// [`Tensor::requires_grad`]). An input the output does not depend on gets
/// a zero gradient. With `create_graph` the returned gradients are
/// themselves recorded, so they can be differentiated again.
pub fn grad(output: &Tensor, inputs: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(TensorError::NonScalarOutput(output.shape().to_vec()));
    }
    for (i, t) in inputs.iter().enumerate() {
        if !t.tracks_grad() {
            return Err(TensorError::NotOnGraph(i));
        }
    }
    let targets: HashSet<u64> = inputs.iter().map(Tensor::id).collect();
    if !output.tracks_grad() {
        return Ok(inputs.iter().map(|t| Tensor::zeros(t.shape())).collect());
    }

    let order = relevant_nodes(output, &targets);
    let relevant: HashSet<u64> = order.iter().map(Tensor::id).collect();

    with_grad_mode(create_graph, || {
        let mut grads: HashMap<u64, Tensor> = HashMap::new();
        grads.insert(output.id(), Tensor::ones(output.shape()));
        for node in &order {
            let Some(op) = node.op() else { continue };
            let g = if targets.contains(&node.id()) {
                grads.get(&node.id()).cloned()
            } else {
                grads.remove(&node.id())
            };
            let Some(g) = g else { continue };
            let needs = |t: &Tensor| relevant.contains(&t.id());
            for (input, gi) in op.backward(&g, &needs)? {
                match grads.remove(&input.id()) {
                    Some(acc) => grads.insert(input.id(), acc.add(&gi)?),
                    None => grads.insert(input.id(), gi),
                };
            }
        }
        Ok(inputs
            .iter()
            .map(|t| grads.get(&t.id()).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect())
    })
}

/// Tracked nodes on some path from `output` down to a target, sorted by
/// descending id (reverse creation order, hence reverse topological).
fn relevant_nodes(output: &Tensor, targets: &HashSet<u64>) -> Vec<Tensor> {
    // Iterative post-order DFS; a node is relevant if it is a target or any
    // of its tracked inputs is relevant.
    let mut relevant: HashMap<u64, bool> = HashMap::new();
    let mut kept: Vec<Tensor> = Vec::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(output.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if relevant.contains_key(&node.id()) {
            continue;
        }
        let children: Vec<Tensor> = node
            .op()
            .map(|op| op.inputs().into_iter().filter(|t| t.tracks_grad()).cloned().collect())
            .unwrap_or_default();
        if !expanded {
            stack.push((node.clone(), true));
            for c in children {
                if !relevant.contains_key(&c.id()) {
                    stack.push((c, false));
                }
            }
            continue;
        }
        let is_rel = targets.contains(&node.id()) || children.iter().any(|c| relevant.get(&c.id()) == Some(&true));
        relevant.insert(node.id(), is_rel);
        if is_rel {
            kept.push(node);
        }
    }
    kept.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));
    kept
}
