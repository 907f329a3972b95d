//! Seeded random models and inputs for tests, benches and the CLI `synth`
//! command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph_ir::{ApplicationGraph, Node, TensorSpec};

/// Layer sizes of the MNIST classifier: 784 → 512 → 256 → 16 (10 classes,
/// zero-padded to 16 outputs).
pub const MNIST_DIMS: [usize; 4] = [784, 512, 256, 16];
pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpSpec<'a> {
    pub dims: &'a [usize],
    /// Real outputs of the last layer; rows beyond it are zero.
    pub live_outputs: Option<usize>,
    pub softmax: bool,
    pub bias: bool,
}

impl<'a> MlpSpec<'a> {
    pub fn new(dims: &'a [usize]) -> Self {
        Self { dims, live_outputs: None, softmax: false, bias: true }
    }
}

fn he_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f32> {
    let d = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("positive std");
    (0..rows * cols).map(|_| d.sample(rng) as f32).collect()
}

/// Float MLP with He-initialised weights, ReLU between Linear layers and an
/// optional trailing Softmax. Tensors are named `input`, `fc{i}.w`, `fc{i}.b`,
/// `fc{i}.out`, `relu{i}.out`, `softmax.out`.
pub fn random_mlp(spec: &MlpSpec, seed: u64) -> ApplicationGraph {
    assert!(spec.dims.len() >= 2, "an MLP needs at least one layer");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = ApplicationGraph::default();
    g.add_tensor(TensorSpec::f32("input", vec![spec.dims[0]]));
    g.graph_inputs.push("input".into());

    let layers = spec.dims.len() - 1;
    let mut x = "input".to_string();
    let mut id = 0;
    for i in 0..layers {
        let (cols, rows) = (spec.dims[i], spec.dims[i + 1]);
        let n = i + 1;
        let mut w = he_normal(&mut rng, rows, cols);
        let mut b: Vec<f32> = (0..rows).map(|_| rng.gen_range(-0.1..0.1)).collect();
        if i + 1 == layers {
            if let Some(live) = spec.live_outputs {
                w[live * cols..].fill(0.0);
                b[live..].fill(0.0);
            }
        }
        let (wn, bn, out) = (format!("fc{n}.w"), format!("fc{n}.b"), format!("fc{n}.out"));
        g.add_constant_f32(&wn, vec![rows, cols], &w);
        if spec.bias {
            g.add_constant_f32(&bn, vec![rows], &b);
        }
        g.add_tensor(TensorSpec::f32(&out, vec![rows]));
        g.nodes.push(Node::linear(id, &x, &out, &wn, spec.bias.then_some(bn.as_str())));
        id += 1;
        x = out;
        if i + 1 < layers {
            let r = format!("relu{n}.out");
            g.add_tensor(TensorSpec::f32(&r, vec![rows]));
            g.nodes.push(Node::relu(id, &x, &r));
            id += 1;
            x = r;
        }
    }
    if spec.softmax {
        let n = *spec.dims.last().unwrap();
        g.add_tensor(TensorSpec::f32("softmax.out", vec![n]));
        g.nodes.push(Node::softmax(id, &x, "softmax.out"));
        x = "softmax.out".into();
    }
    g.graph_outputs.push(x);
    g
}

/// The 784-512-256-16 classifier with a trailing Softmax.
pub fn mnist_mlp(seed: u64) -> ApplicationGraph {
    random_mlp(&MlpSpec { dims: &MNIST_DIMS, live_outputs: Some(MNIST_CLASSES), softmax: true, bias: true }, seed)
}

/// Two Linear+ReLU blocks whose outputs meet in an Add, then a Linear head:
/// `h1 = relu(fc1 x)`, `h2 = relu(fc2 h1)`, `y = fc3 (h1 + h2)`.
pub fn residual_mlp(width: usize, inputs: usize, outputs: usize, seed: u64) -> ApplicationGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = ApplicationGraph::default();
    g.add_tensor(TensorSpec::f32("input", vec![inputs]));
    g.graph_inputs.push("input".into());
    let mut layer = |g: &mut ApplicationGraph, id: u32, n: usize, x: &str, rows: usize, cols: usize| -> String {
        let (wn, bn, out) = (format!("fc{n}.w"), format!("fc{n}.b"), format!("fc{n}.out"));
        g.add_constant_f32(&wn, vec![rows, cols], &he_normal(&mut rng, rows, cols));
        let b: Vec<f32> = (0..rows).map(|_| rng.gen_range(-0.1..0.1)).collect();
        g.add_constant_f32(&bn, vec![rows], &b);
        g.add_tensor(TensorSpec::f32(&out, vec![rows]));
        g.nodes.push(Node::linear(id, x, &out, &wn, Some(&bn)));
        out
    };
    let a = layer(&mut g, 0, 1, "input", width, inputs);
    g.add_tensor(TensorSpec::f32("relu1.out", vec![width]));
    g.nodes.push(Node::relu(1, &a, "relu1.out"));
    let b = layer(&mut g, 2, 2, "relu1.out", width, width);
    g.add_tensor(TensorSpec::f32("relu2.out", vec![width]));
    g.nodes.push(Node::relu(3, &b, "relu2.out"));
    g.add_tensor(TensorSpec::f32("add.out", vec![width]));
    g.nodes.push(Node::add(4, "relu1.out", "relu2.out", "add.out"));
    let y = layer(&mut g, 5, 3, "add.out", outputs, width);
    g.graph_outputs.push(y);
    g
}

/// `n` float vectors uniform in `[0, 1)`, like normalised pixel intensities.
pub fn random_inputs(n: usize, len: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen::<f32>()).collect()).collect()
}

/// `n` int8 vectors covering the full range.
pub fn random_int8_inputs(n: usize, len: usize, seed: u64) -> Vec<Vec<i8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen::<i8>()).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_ir::validate;

    #[test]
    fn mnist_graph_is_valid_and_padded() {
        let g = mnist_mlp(1);
        assert!(validate(&g).is_empty());
        let w = g.constant_f32("fc3.w").unwrap();
        assert!(w[MNIST_CLASSES * 256..].iter().all(|&v| v == 0.0));
        assert_eq!(g.nodes.len(), 6);
    }

    #[test]
    fn residual_graph_is_valid() {
        assert!(validate(&residual_mlp(32, 20, 10, 3)).is_empty());
    }

    #[test]
    fn seeds_are_reproducible() {
        assert_eq!(random_mlp(&MlpSpec::new(&[8, 4]), 5), random_mlp(&MlpSpec::new(&[8, 4]), 5));
        assert_eq!(random_int8_inputs(2, 3, 9), random_int8_inputs(2, 3, 9));
    }
}
