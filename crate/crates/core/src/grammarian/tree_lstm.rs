use std::ops::Range;

use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

use super::{GrammarianError, ParsedSentence};

pub const GATES: [&str; 4] = ["i", "f", "o", "u"];

/// A node of the tree fed to the Tree-LSTM: a token of the sentence, or a
/// phrase marker joining several span roots under one parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Token(usize),
    Phrase,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanTree {
    pub kind: NodeKind,
    pub children: Vec<SpanTree>,
}

impl SpanTree {
    pub fn leaf(token: usize) -> Self {
        Self {
            kind: NodeKind::Token(token),
            children: Vec::new(),
        }
    }

    pub fn node(kind: NodeKind, children: Vec<SpanTree>) -> Self {
        Self { kind, children }
    }

    /// The dependency tree restricted to `range`. Tokens whose head lies
    /// outside the span become roots; several roots hang under a phrase marker.
    pub fn from_span(sentence: &ParsedSentence, range: Range<usize>) -> Result<Self, GrammarianError> {
        if range.is_empty() || range.end > sentence.tokens.len() {
            return Err(GrammarianError::Usage(format!(
                "span {range:?} is empty or outside a {}-token sentence",
                sentence.tokens.len()
            )));
        }
        let children = sentence.children();
        fn build(tok: usize, children: &[Vec<usize>], range: &Range<usize>) -> SpanTree {
            SpanTree {
                kind: NodeKind::Token(tok),
                children: children[tok]
                    .iter()
                    .filter(|c| range.contains(c))
                    .map(|&c| build(c, children, range))
                    .collect(),
            }
        }
        let mut roots: Vec<SpanTree> = range
            .clone()
            .filter(|&i| sentence.head(i).is_none_or(|h| !range.contains(&h)))
            .map(|i| build(i, &children, &range))
            .collect();
        Ok(if roots.len() == 1 {
            roots.pop().expect("one root")
        } else {
            SpanTree::node(NodeKind::Phrase, roots)
        })
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(SpanTree::size).sum::<usize>()
    }
}

/// Tree-LSTM weights pulled into a graph.
pub struct TreeLstmVars {
    w: [Var; 4],
    u: [Var; 4],
    b: [Var; 4],
    dim: usize,
}

impl TreeLstmVars {
    pub fn load<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>) -> Result<Self, GrammarianError> {
        let mut pull = |kind: &str| -> Result<[Var; 4], GrammarianError> {
            let mut out = Vec::with_capacity(4);
            for gate in GATES {
                out.push(g.param(store, &format!("grammarian.tree.{kind}_{gate}"))?);
            }
            Ok(out.try_into().expect("four gates"))
        };
        let (w, u, b) = (pull("w")?, pull("u")?, pull("b")?);
        let dim = g.shape(w[0])[1];
        Ok(Self { w, u, b, dim })
    }
}

pub fn param_names() -> Vec<String> {
    let mut out = Vec::new();
    for kind in ["w", "u", "b"] {
        for gate in GATES {
            out.push(format!("grammarian.tree.{kind}_{gate}"));
        }
    }
    out
}

/// Pre-activation `x·W + h̃·U + b` of one gate; absent terms are skipped.
fn preact<S: Scalar>(
    g: &mut Graph<S>,
    w: &TreeLstmVars,
    gate: usize,
    x: Option<Var>,
    h: Option<Var>,
) -> Result<Var, GrammarianError> {
    let mut acc = w.b[gate];
    if let Some(x) = x {
        let xw = g.matmul(x, w.w[gate])?;
        acc = g.add_row(xw, acc)?;
    }
    if let Some(h) = h {
        let hu = g.matmul(h, w.u[gate])?;
        acc = g.add(acc, hu)?;
    }
    if x.is_none() && h.is_none() {
        let zero = g.constant(Tensor::zeros(1, w.dim))?;
        acc = g.add_row(zero, acc)?;
    }
    Ok(acc)
}

/// Child-Sum Tree-LSTM over `tree`. `inputs[t]` is the `1×d` input of token
/// `t`; phrase markers have no input. Returns `(h, c)` of the root.
pub fn encode_tree<S: Scalar>(
    g: &mut Graph<S>,
    w: &TreeLstmVars,
    tree: &SpanTree,
    inputs: &[Var],
) -> Result<(Var, Var), GrammarianError> {
    let mut states = Vec::with_capacity(tree.children.len());
    for child in &tree.children {
        states.push(encode_tree(g, w, child, inputs)?);
    }
    let x = match tree.kind {
        NodeKind::Token(t) => Some(
            *inputs
                .get(t)
                .ok_or_else(|| GrammarianError::Usage(format!("no input vector for token {t}")))?,
        ),
        NodeKind::Phrase => None,
    };
    let h_sum = match states.len() {
        0 => None,
        1 => Some(states[0].0),
        _ => {
            let hs: Vec<Var> = states.iter().map(|s| s.0).collect();
            let stacked = g.concat_rows(&hs)?;
            Some(g.sum_rows(stacked)?)
        }
    };
    let i_pre = preact(g, w, 0, x, h_sum)?;
    let i = g.sigmoid(i_pre)?;
    let o_pre = preact(g, w, 2, x, h_sum)?;
    let o = g.sigmoid(o_pre)?;
    let u_pre = preact(g, w, 3, x, h_sum)?;
    let u = g.tanh(u_pre)?;
    let mut c = g.mul(i, u)?;
    for &(h_k, c_k) in &states {
        let f_pre = preact(g, w, 1, x, Some(h_k))?;
        let f = g.sigmoid(f_pre)?;
        let fc = g.mul(f, c_k)?;
        c = g.add(c, fc)?;
    }
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Root hidden state of a span tree.
pub fn encode_span<S: Scalar>(
    g: &mut Graph<S>,
    w: &TreeLstmVars,
    tree: &SpanTree,
    inputs: &[Var],
) -> Result<Var, GrammarianError> {
    Ok(encode_tree(g, w, tree, inputs)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sigmoid_scalar;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(d: usize, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        for name in param_names() {
            let rows = if name.contains(".b_") { 1 } else { d };
            let data = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            store.insert(name, Tensor::matrix(rows, d, data).unwrap()).unwrap();
        }
        store
    }

    fn set(store: &mut ParamStore<f64>, name: &str, rows: usize, data: Vec<f64>) {
        let cols = data.len() / rows;
        *store.tensor_mut(&format!("grammarian.tree.{name}")).unwrap() = Tensor::matrix(rows, cols, data).unwrap();
    }

    fn inputs(g: &mut Graph<f64>, xs: &[Vec<f64>]) -> Vec<Var> {
        xs.iter().map(|x| g.constant(Tensor::row(x.clone())).unwrap()).collect()
    }

    fn vecmat(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
        (0..w.cols())
            .map(|j| (0..x.len()).map(|k| x[k] * w.at(k, j)).sum())
            .collect()
    }

    #[test]
    fn zero_leaf_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = random_store(3, &mut rng);
        for gate in GATES {
            set(&mut store, &format!("b_{gate}"), 1, vec![0.0; 3]);
        }
        let mut g = Graph::new();
        let w = TreeLstmVars::load(&mut g, &store).unwrap();
        let xs = inputs(&mut g, &[vec![0.0; 3]]);
        let (h, c) = encode_tree(&mut g, &w, &SpanTree::leaf(0), &xs).unwrap();
        assert_eq!(g.value(h).data(), &[0.0; 3]);
        assert_eq!(g.value(c).data(), &[0.0; 3]);
    }

    #[test]
    fn leaf_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = random_store(4, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gate = |name: &str| -> Vec<f64> {
            let wx = vecmat(&x, store.tensor(&format!("grammarian.tree.w_{name}")).unwrap());
            let b = store.tensor(&format!("grammarian.tree.b_{name}")).unwrap();
            wx.iter().zip(b.data()).map(|(a, b)| a + b).collect()
        };
        let (i, o, u) = (gate("i"), gate("o"), gate("u"));
        let expected: Vec<f64> = (0..4)
            .map(|k| sigmoid_scalar(o[k]) * (sigmoid_scalar(i[k]) * u[k].tanh()).tanh())
            .collect();
        let mut g = Graph::new();
        let w = TreeLstmVars::load(&mut g, &store).unwrap();
        let xs = inputs(&mut g, std::slice::from_ref(&x));
        let h = encode_span(&mut g, &w, &SpanTree::leaf(0), &xs).unwrap();
        for (a, b) in g.value(h).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn two_leaf_root_sums_forget_gated_child_cells() {
        // Hand-rolled 2-d instance: W = I, U = 0.5·I, all biases 0.1.
        let mut store = ParamStore::new();
        for name in param_names() {
            let t = if name.contains(".b_") {
                Tensor::row(vec![0.1, 0.1])
            } else if name.contains(".w_") {
                Tensor::identity(2)
            } else {
                Tensor::identity(2).scale(0.5)
            };
            store.insert(name, t).unwrap();
        }
        let xs = [vec![0.3, -0.2], vec![-0.5, 0.4], vec![0.1, 0.2]];
        let leaf = |x: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let c: Vec<f64> = x.iter().map(|&v| sigmoid_scalar(v + 0.1) * (v + 0.1).tanh()).collect();
            let h = x
                .iter()
                .zip(&c)
                .map(|(&v, &c)| sigmoid_scalar(v + 0.1) * c.tanh())
                .collect();
            (h, c)
        };
        let (h1, c1) = leaf(&xs[1]);
        let (h2, c2) = leaf(&xs[2]);
        let x0 = &xs[0];
        let mut c_exp = [0.0; 2];
        for k in 0..2 {
            let hs = h1[k] + h2[k];
            let i = sigmoid_scalar(x0[k] + 0.5 * hs + 0.1);
            let u = (x0[k] + 0.5 * hs + 0.1).tanh();
            let f1 = sigmoid_scalar(x0[k] + 0.5 * h1[k] + 0.1);
            let f2 = sigmoid_scalar(x0[k] + 0.5 * h2[k] + 0.1);
            c_exp[k] = i * u + f1 * c1[k] + f2 * c2[k];
        }
        let mut g = Graph::new();
        let w = TreeLstmVars::load(&mut g, &store).unwrap();
        let vars = inputs(&mut g, &xs);
        let tree = SpanTree::node(NodeKind::Token(0), vec![SpanTree::leaf(1), SpanTree::leaf(2)]);
        let (_, c) = encode_tree(&mut g, &w, &tree, &vars).unwrap();
        for (a, b) in g.value(c).data().iter().zip(&c_exp) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn saturated_chain_accumulates_candidates() {
        // Gates i and f pinned to 1 by huge biases: c_j = u_j + c_child.
        let mut store = ParamStore::new();
        for name in param_names() {
            let t = match name.rsplit('.').next().unwrap() {
                "b_i" | "b_f" => Tensor::row(vec![60.0, 60.0]),
                n if n.starts_with('b') => Tensor::row(vec![0.0, 0.0]),
                "w_u" => Tensor::identity(2),
                _ => Tensor::zeros(2, 2),
            };
            store.insert(name, t).unwrap();
        }
        let xs = [vec![0.2, -0.1], vec![0.4, 0.3], vec![-0.3, 0.5]];
        let tree = SpanTree::node(
            NodeKind::Token(0),
            vec![SpanTree::node(NodeKind::Token(1), vec![SpanTree::leaf(2)])],
        );
        let mut g = Graph::new();
        let w = TreeLstmVars::load(&mut g, &store).unwrap();
        let vars = inputs(&mut g, &xs);
        let (_, c) = encode_tree(&mut g, &w, &tree, &vars).unwrap();
        for k in 0..2 {
            let expected: f64 = xs.iter().map(|x| x[k].tanh()).sum();
            assert!((g.value(c).data()[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn child_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = random_store(5, &mut rng);
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let kids = vec![
            SpanTree::leaf(1),
            SpanTree::node(NodeKind::Token(2), vec![SpanTree::leaf(3)]),
        ];
        let run = |children: Vec<SpanTree>| {
            let mut g = Graph::new();
            let w = TreeLstmVars::load(&mut g, &store).unwrap();
            let vars = inputs(&mut g, &xs);
            let (h, c) = encode_tree(&mut g, &w, &SpanTree::node(NodeKind::Token(0), children), &vars).unwrap();
            (g.value(h).clone(), g.value(c).clone())
        };
        let (h1, c1) = run(kids.clone());
        let (h2, c2) = run(kids.into_iter().rev().collect());
        for (a, b) in h1.data().iter().zip(h2.data()).chain(c1.data().iter().zip(c2.data())) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
