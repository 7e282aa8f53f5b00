use std::collections::{HashMap, HashSet};

use super::element::Element;
use super::ops;
use super::tensor::{GradModeGuard, Tensor};
use super::AutodiffError;

/// Gradient of a scalar `output` with respect to each tensor in `wrt`.
///
/// With `create_graph` the returned gradients are recorded on the graph and
/// can be differentiated again. Tensors that `output` does not depend on get a
/// zero gradient and a logged warning.
pub fn grad<T: Element>(
    output: &Tensor<T>,
    wrt: &[&Tensor<T>],
    create_graph: bool,
) -> Result<Vec<Tensor<T>>, AutodiffError> {
    if output.numel() != 1 {
        return Err(AutodiffError::NotScalar {
            shape: output.shape().to_vec(),
        });
    }
    let seed = Tensor::full(output.shape(), T::one());
    vjp(&[output], &[&seed], wrt, create_graph)
}

/// Vector-Jacobian product: `sum_k cotangents[k] · ∂outputs[k]/∂wrt`.
///
/// Cotangents may themselves be graph-attached; with `create_graph` the result
/// then depends differentiably on them as well.
pub fn vjp<T: Element>(
    outputs: &[&Tensor<T>],
    cotangents: &[&Tensor<T>],
    wrt: &[&Tensor<T>],
    create_graph: bool,
) -> Result<Vec<Tensor<T>>, AutodiffError> {
    if outputs.len() != cotangents.len() {
        return Err(AutodiffError::Arity {
            op: "vjp",
            expected: outputs.len(),
            got: cotangents.len(),
        });
    }
    for (o, c) in outputs.iter().zip(cotangents) {
        if o.shape() != c.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "vjp",
                lhs: o.shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
    }

    let order = topological_order(outputs);
    let wrt_ids: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();

    // A node is relevant when some requested tensor is reachable through it.
    let mut relevant: HashSet<u64> = HashSet::new();
    for t in &order {
        let hit = wrt_ids.contains(&t.id())
            || t
                .node()
                .is_some_and(|n| n.parents.iter().any(|p| relevant.contains(&p.id())));
        if hit {
            relevant.insert(t.id());
        }
    }

    let _mode = GradModeGuard::set(create_graph);
    let mut cotangent: HashMap<u64, Tensor<T>> = HashMap::new();
    for (o, c) in outputs.iter().zip(cotangents) {
        if o.requires_grad() && relevant.contains(&o.id()) {
            accumulate(&mut cotangent, o.id(), (*c).clone())?;
        }
    }

    for t in order.iter().rev() {
        let Some(node) = t.node() else { continue };
        if !relevant.contains(&t.id()) {
            continue;
        }
        let g = if wrt_ids.contains(&t.id()) {
            cotangent.get(&t.id()).cloned()
        } else {
            cotangent.remove(&t.id())
        };
        let Some(g) = g else { continue };
        let needs: Vec<bool> = node
            .parents
            .iter()
            .map(|p| p.requires_grad() && relevant.contains(&p.id()))
            .collect();
        if !needs.iter().any(|&n| n) {
            continue;
        }
        let parent_grads = ops::vjp(&node.op, &node.parents, &g, &needs)?;
        for (p, pg) in node.parents.iter().zip(parent_grads) {
            if let Some(pg) = pg {
                accumulate(&mut cotangent, p.id(), pg)?;
            }
        }
    }

    wrt.iter()
        .map(|w| match cotangent.get(&w.id()) {
            Some(g) if create_graph => Ok(g.clone()),
            Some(g) => Ok(if g.requires_grad() { g.detach() } else { g.clone() }),
            None => {
                log::warn!(
                    "gradient requested for a tensor of shape {:?} that the output does not depend on; returning zeros",
                    w.shape()
                );
                Ok(Tensor::zeros(w.shape()))
            }
        })
        .collect()
}

fn accumulate<T: Element>(
    map: &mut HashMap<u64, Tensor<T>>,
    id: u64,
    g: Tensor<T>,
) -> Result<(), AutodiffError> {
    let next = match map.remove(&id) {
        Some(prev) => prev.add(&g)?,
        None => g,
    };
    map.insert(id, next);
    Ok(())
}

/// Graph tensors reachable from `outputs`, parents before children.
fn topological_order<T: Element>(outputs: &[&Tensor<T>]) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<T>, usize)> = Vec::new();
    for &o in outputs {
        if !o.requires_grad() || !visited.insert(o.id()) {
            continue;
        }
        stack.push((o.clone(), 0));
        while let Some((t, next)) = stack.pop() {
            let parents = t.node().map(|n| n.parents.as_slice()).unwrap_or(&[]);
            if next < parents.len() {
                let p = parents[next].clone();
                stack.push((t, next + 1));
                if p.requires_grad() && visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }
    }
    order
}
