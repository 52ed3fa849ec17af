//! Degree-normalized neighborhood aggregation layers with a hand-written
//! backward pass.
//!
//! Each layer computes `act(Wᵀ(e_t + Σ_h η_th e_h) + b)` for every node with
//! `η_th = 1/sqrt(deg(t)·deg(h))` over undirected adjacency. Rows of the
//! embedding matrices are nodes; a row-vector form of the layer is
//! `act(A W + b)` with `A = (I + N) E`.

use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::domain::{Activation, EntityId};
use crate::kgstore::{KnowledgeGraph, SubKnowledgeGraph};
use crate::scalar::{logistic, Scalar};

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Logistic => logistic(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y = act(x)`.
    pub fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Logistic => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    /// `d × d`
    pub weight: Array2<T>,
    /// `d`
    pub bias: Array1<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn identity(d: usize) -> Self {
        LayerParams {
            weight: Array2::eye(d),
            bias: Array1::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerParams {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Normalized adjacency over a local node index, stored as CSR.
#[derive(Debug, Clone)]
pub struct PropagationGraph<T> {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<T>,
}

impl<T: Scalar> PropagationGraph<T> {
    fn from_adjacency(adj: Vec<Vec<usize>>) -> Self {
        let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
        let mut offsets = Vec::with_capacity(adj.len() + 1);
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for (t, nbrs) in adj.iter().enumerate() {
            for &h in nbrs {
                targets.push(h);
                weights.push(eta(degree[t], degree[h]));
            }
            offsets.push(targets.len());
        }
        PropagationGraph {
            offsets,
            targets,
            weights,
        }
    }

    /// Node `i` is entity `i`.
    pub fn full(kg: &KnowledgeGraph) -> Self {
        let adj = (0..kg.n_entities())
            .map(|e| kg.neighbors(EntityId(e as u32)).iter().map(|n| n.index()).collect())
            .collect();
        Self::from_adjacency(adj)
    }

    /// Node `i` is `sub.entities[i]`; adjacency and degrees come from the
    /// sub-graph's own triples.
    pub fn local(sub: &SubKnowledgeGraph) -> Self {
        let pos = |e: EntityId| sub.entities.binary_search(&e).expect("endpoint listed");
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); sub.entities.len()];
        for t in &sub.triples {
            let (h, tl) = (pos(t.head), pos(t.tail));
            adj[h].push(tl);
            adj[tl].push(h);
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        Self::from_adjacency(adj)
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.offsets[node]..self.offsets[node + 1];
        self.targets[r.clone()]
            .iter()
            .copied()
            .zip(self.weights[r].iter().copied())
    }

    /// `(I + N) x`. `N` is symmetric, so this is also its own adjoint.
    pub fn aggregate(&self, x: &Array2<T>) -> Array2<T> {
        let mut out = x.clone();
        for (t, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            for (h, w) in self.neighbors(t) {
                row.scaled_add(w, &x.row(h));
            }
        }
        out
    }
}

/// `1/sqrt(deg_t · deg_h)`.
pub fn eta<T: Scalar>(deg_t: usize, deg_h: usize) -> T {
    T::one() / T::of((deg_t * deg_h) as f64).sqrt()
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// Aggregated layer inputs `A_l`, one per layer.
    aggregated: Vec<Array2<T>>,
    /// `outputs[0]` is the base table, `outputs[l]` the output of layer `l`.
    outputs: Vec<Array2<T>>,
}

impl<T: Scalar> Forward<T> {
    pub fn output(&self) -> &Array2<T> {
        self.outputs.last().expect("at least the base layer")
    }

    pub fn into_output(mut self) -> Array2<T> {
        self.outputs.pop().expect("at least the base layer")
    }
}

pub fn forward<T: Scalar>(
    graph: &PropagationGraph<T>,
    base: &Array2<T>,
    layers: &[LayerParams<T>],
    act: Activation,
) -> Forward<T> {
    debug_assert_eq!(graph.n_nodes(), base.nrows());
    let mut outputs = Vec::with_capacity(layers.len() + 1);
    let mut aggregated = Vec::with_capacity(layers.len());
    outputs.push(base.clone());
    for layer in layers {
        let a = graph.aggregate(outputs.last().unwrap());
        let mut pre = a.dot(&layer.weight);
        pre += &layer.bias;
        pre.mapv_inplace(|v| act.apply(v));
        aggregated.push(a);
        outputs.push(pre);
    }
    Forward {
        aggregated,
        outputs,
    }
}

/// Gradients of a scalar loss w.r.t. the base table and each layer, given
/// the gradient w.r.t. the final output.
pub fn backward<T: Scalar>(
    graph: &PropagationGraph<T>,
    fwd: &Forward<T>,
    layers: &[LayerParams<T>],
    act: Activation,
    d_output: Array2<T>,
) -> (Array2<T>, Vec<LayerParams<T>>) {
    let mut grad = d_output;
    let mut layer_grads = Vec::with_capacity(layers.len());
    for l in (0..layers.len()).rev() {
        let y = &fwd.outputs[l + 1];
        Zip::from(&mut grad)
            .and(y)
            .for_each(|g, &y| *g *= act.derivative_from_output(y));
        let d_weight = fwd.aggregated[l].t().dot(&grad);
        let d_bias = grad.sum_axis(Axis(0));
        let d_agg = grad.dot(&layers[l].weight.t());
        grad = graph.aggregate(&d_agg);
        layer_grads.push(LayerParams {
            weight: d_weight,
            bias: d_bias,
        });
    }
    layer_grads.reverse();
    (grad, layer_grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Triple;
    use ndarray::array;

    fn pair_graph() -> KnowledgeGraph {
        KnowledgeGraph::new(2, 1, vec![Triple::new(0, 0, 1)]).unwrap()
    }

    #[test]
    fn eta_of_four_and_nine_is_one_sixth() {
        assert_eq!(eta::<f64>(4, 9), 1.0 / 6.0);
        assert_eq!(eta::<f64>(1, 1), 1.0);
    }

    #[test]
    fn zero_layers_is_identity() {
        let g = PropagationGraph::<f64>::full(&pair_graph());
        let base = array![[0.1, -0.2], [0.3, 0.4]];
        let f = forward(&g, &base, &[], Activation::Logistic);
        assert_eq!(f.output(), &base);
    }

    #[test]
    fn isolated_node_with_identity_layer_is_fixed_point() {
        let kg = KnowledgeGraph::new(1, 1, vec![]).unwrap();
        let g = PropagationGraph::<f64>::full(&kg);
        let base = array![[0.7, -1.3]];
        let f = forward(&g, &base, &[LayerParams::identity(2)], Activation::Identity);
        assert_eq!(f.output(), &base);
    }

    #[test]
    fn two_node_layer_by_hand() {
        let g = PropagationGraph::<f64>::full(&pair_graph());
        let base = array![[1.0, 2.0], [3.0, -1.0]];
        let layer = LayerParams {
            weight: array![[0.5, -1.0], [2.0, 0.25]],
            bias: array![0.1, -0.2],
        };
        let f = forward(&g, &base, &[layer], Activation::Identity);
        // e_a + e_b = (4, 1); Wᵀ(4,1) = (0.5*4 + 2*1, -1*4 + 0.25*1) = (4, -3.75)
        let want_a = [4.0 + 0.1, -3.75 - 0.2];
        assert!((f.output()[[0, 0]] - want_a[0]).abs() < 1e-15);
        assert!((f.output()[[0, 1]] - want_a[1]).abs() < 1e-15);
        // symmetric graph, both nodes aggregate the same sum
        assert_eq!(f.output().row(0), f.output().row(1));
    }

    #[test]
    fn generic_over_f32() {
        let g = PropagationGraph::<f32>::full(&pair_graph());
        let base = array![[1.0f32, 0.0], [0.0, 1.0]];
        let f = forward(&g, &base, &[LayerParams::identity(2)], Activation::Logistic);
        let y = f.output()[[0, 0]];
        assert!((y - logistic(1.0f32)).abs() < 1e-6);
    }

    #[test]
    fn local_graph_uses_subgraph_degrees() {
        let sub = SubKnowledgeGraph::from_triples(
            crate::domain::UserId(0),
            vec![Triple::new(5, 0, 9), Triple::new(9, 0, 12), Triple::new(5, 1, 12)],
        );
        let g = PropagationGraph::<f64>::local(&sub);
        assert_eq!(g.n_nodes(), 3);
        let n0: Vec<_> = g.neighbors(0).collect();
        assert_eq!(n0, vec![(1, 0.5), (2, 0.5)]);
    }

    /// Finite-difference check of the layer backward pass on a small chain.
    #[test]
    fn backward_matches_finite_differences() {
        let kg = KnowledgeGraph::new(
            3,
            1,
            vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)],
        )
        .unwrap();
        let g = PropagationGraph::<f64>::full(&kg);
        let base = array![[0.2, -0.1], [0.4, 0.3], [-0.5, 0.05]];
        let layers = vec![
            LayerParams {
                weight: array![[0.9, 0.2], [-0.3, 1.1]],
                bias: array![0.05, -0.1],
            },
            LayerParams {
                weight: array![[1.2, -0.4], [0.1, 0.8]],
                bias: array![0.0, 0.2],
            },
        ];
        let probe = array![[1.0, -2.0], [0.5, 0.25], [-1.5, 3.0]];
        let loss = |b: &Array2<f64>, ls: &[LayerParams<f64>]| {
            let f = forward(&g, b, ls, Activation::Logistic);
            (f.output() * &probe).sum()
        };
        let fwd = forward(&g, &base, &layers, Activation::Logistic);
        let (d_base, d_layers) = backward(&g, &fwd, &layers, Activation::Logistic, probe.clone());
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut p = base.clone();
                p[[i, j]] += h;
                let mut m = base.clone();
                m[[i, j]] -= h;
                let fd = (loss(&p, &layers) - loss(&m, &layers)) / (2.0 * h);
                assert!((fd - d_base[[i, j]]).abs() < 1e-8, "base {i},{j}");
            }
        }
        for l in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut p = layers.clone();
                    p[l].weight[[i, j]] += h;
                    let mut m = layers.clone();
                    m[l].weight[[i, j]] -= h;
                    let fd = (loss(&base, &p) - loss(&base, &m)) / (2.0 * h);
                    assert!((fd - d_layers[l].weight[[i, j]]).abs() < 1e-8);
                }
                let mut p = layers.clone();
                p[l].bias[i] += h;
                let mut m = layers.clone();
                m[l].bias[i] -= h;
                let fd = (loss(&base, &p) - loss(&base, &m)) / (2.0 * h);
                assert!((fd - d_layers[l].bias[i]).abs() < 1e-8);
            }
        }
    }
}
