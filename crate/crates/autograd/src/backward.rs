use std::collections::{HashMap, HashSet};

use ndarray::ArrayD;

use crate::var::with_grad_mode;
use crate::Var;

/// Gradients of `output` with respect to each of `wrt`.
///
/// The upstream gradient is all ones, so a non-scalar output is treated as
/// its sum. Inputs not reachable from `output` get a zero gradient. With
/// `create_graph`, the returned gradients are recorded and can be
/// differentiated again.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    let targets: HashSet<usize> = wrt.iter().map(|v| v.id()).collect();
    let grads = backward_impl(output, &targets, create_graph);
    wrt.iter()
        .map(|v| match grads.get(&v.id()) {
            Some(g) => g.clone(),
            None => Var::zeros(v.shape()),
        })
        .collect()
}

/// Gradients with respect to every leaf that requires one, keyed by var id.
pub fn backward_all(output: &Var) -> HashMap<usize, Var> {
    let order = topo_order(output);
    let leaves: HashSet<usize> = order
        .iter()
        .filter(|v| v.requires_grad() && v.parents().is_empty())
        .map(|v| v.id())
        .collect();
    let mut grads = backward_impl(output, &leaves, false);
    grads.retain(|id, _| leaves.contains(id));
    grads
}

fn topo_order(output: &Var) -> Vec<Var> {
    // Iterative post-order DFS; parents visited in declaration order so the
    // accumulation order (and therefore rounding) is deterministic.
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Var, usize)> = vec![(output.clone(), 0)];
    visited.insert(output.id());
    while let Some((node, next)) = stack.pop() {
        if next < node.parents().len() {
            let parent = node.parents()[next].clone();
            stack.push((node, next + 1));
            if parent.requires_grad() && visited.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}

fn backward_impl(output: &Var, targets: &HashSet<usize>, create_graph: bool) -> HashMap<usize, Var> {
    let mut grads: HashMap<usize, Var> = HashMap::new();
    if !output.requires_grad() {
        return grads;
    }
    let order = topo_order(output);

    // A node is relevant when it is a target or one of its parents is.
    let mut relevant: HashSet<usize> = HashSet::new();
    for node in &order {
        if targets.contains(&node.id()) || node.parents().iter().any(|p| relevant.contains(&p.id())) {
            relevant.insert(node.id());
        }
    }

    with_grad_mode(create_graph, || {
        grads.insert(output.id(), Var::constant(ArrayD::ones(output.shape())));
        for node in order.iter().rev() {
            if !relevant.contains(&node.id()) {
                continue;
            }
            let Some(rule) = node.0.rule.as_ref() else { continue };
            let Some(g) = grads.get(&node.id()).cloned() else { continue };
            let parents = node.parents();
            let needs: Vec<bool> = parents.iter().map(|p| relevant.contains(&p.id())).collect();
            let parent_grads = rule.backward(parents, node, &g, &needs);
            debug_assert_eq!(parent_grads.len(), parents.len());
            for ((parent, pg), need) in parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else { continue };
                debug_assert_eq!(pg.shape(), parent.shape(), "gradient shape mismatch");
                let acc = match grads.remove(&parent.id()) {
                    Some(prev) => &prev + &pg,
                    None => pg,
                };
                grads.insert(parent.id(), acc);
            }
            if !targets.contains(&node.id()) {
                grads.remove(&node.id());
            }
        }
    });
    grads.retain(|id, _| targets.contains(id));
    grads
}
