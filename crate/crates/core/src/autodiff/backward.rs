use super::graph::{Graph, NodeId};
use super::{AutodiffError, Tensor};

/// A gradient request: `d output / d wrt[i]` for each entry of `wrt`.
#[derive(Clone, Debug)]
pub struct GradQuery<'a> {
    pub output: NodeId,
    pub wrt: &'a [NodeId],
    /// Keep the gradient computation on the tape so the results can be
    /// differentiated again.
    pub create_graph: bool,
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub values: Vec<Tensor>,
    /// Differentiable gradient nodes; empty unless `create_graph` was set.
    pub nodes: Vec<NodeId>,
}

impl Graph {
    pub fn backward(&mut self, q: &GradQuery<'_>) -> Result<Gradients, AutodiffError> {
        if q.create_graph {
            let nodes = self.grad_graph(q.output, q.wrt)?;
            let values = nodes.iter().map(|&n| self.value(n).clone()).collect();
            Ok(Gradients { values, nodes })
        } else {
            Ok(Gradients {
                values: self.grad(q.output, q.wrt)?,
                nodes: Vec::new(),
            })
        }
    }

    /// First-order gradients. The tape is restored to its previous length.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, AutodiffError> {
        let mark = self.len();
        let result = self
            .grad_graph(output, wrt)
            .map(|ids| ids.iter().map(|&id| self.value(id).clone()).collect());
        self.truncate(mark);
        result
    }

    /// Gradients recorded as graph nodes (double-backprop capable).
    pub fn grad_graph(
        &mut self,
        output: NodeId,
        wrt: &[NodeId],
    ) -> Result<Vec<NodeId>, AutodiffError> {
        let out_shape = self.shape(output).to_vec();
        if self.value(output).numel() != 1 {
            return Err(AutodiffError::NonScalarOutput { shape: out_shape });
        }
        let end = output.index() + 1;

        // A node needs an adjoint only if some wrt node is among its ancestors.
        let mut relevant = vec![false; end];
        for &w in wrt {
            if w.index() < end {
                relevant[w.index()] = true;
            }
        }
        for i in 0..end {
            if !relevant[i] {
                relevant[i] = self.nodes[i]
                    .op
                    .parents()
                    .iter()
                    .any(|p| relevant[p.index()]);
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; end];
        if relevant[output.index()] {
            adjoint[output.index()] = Some(self.constant(Tensor::full(&out_shape, 1.0)));
        }
        for i in (0..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            for (parent, contrib) in self.vjp(i, g, &relevant)? {
                let p = parent.index();
                adjoint[p] = Some(match adjoint[p] {
                    None => contrib,
                    Some(acc) => self.add(acc, contrib)?,
                });
            }
        }

        let mut result = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let id = match adjoint.get(w.index()).copied().flatten() {
                Some(id) => id,
                None => {
                    let zeros = Tensor::zeros(self.shape(w));
                    self.constant(zeros)
                }
            };
            result.push(id);
        }
        Ok(result)
    }
}
