#![allow(dead_code)]

use std::cell::RefCell;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weightalign::autograd::{finite_diff_check, Graph, NodeId};
use weightalign::layers::{LayerSpec, Network, NetworkSpec};
use weightalign::normalize::{Mode, NormState, NormalizerConfig, ReparamConfig, WaConfig};
use weightalign::tensor::Tensor;
use weightalign::Result;

pub const FD_STEP: f64 = 1e-5;

pub const GRAD_OPS: [&str; 11] = [
    "conv", "dense", "relu", "bn", "gn", "ln", "in", "wa", "wn", "residual", "cross_entropy",
];

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, so ReLU never straddles its kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn projected(g: &mut Graph, y: NodeId, c: &Tensor) -> Result<NodeId> {
    g.project(y, c.clone())
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(3..=6))
}

/// Worst relative error of one randomized gradient check of `op`.
pub fn gradient_case(op: &str, seed: u64) -> Result<f64> {
    gradient_case_with_step(op, seed, FD_STEP)
}

pub fn gradient_case_with_step(op: &str, seed: u64, step: f64) -> Result<f64> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h) = dims(rng);
    match op {
        "conv" => {
            let f = rng.random_range(1..=4);
            let k = [1, 3][rng.random_range(0..2)];
            let pad = rng.random_range(0..=k / 2);
            let stride = if (h + 2 * pad - k) % 2 == 0 { rng.random_range(1..=2) } else { 1 };
            let x = random(rng, &[n, c, h, h]);
            let w = random(rng, &[f, c, k, k]);
            let out_shape = {
                let mut g = Graph::new();
                let (a, b) = (g.constant(x.clone()), g.constant(w.clone()));
                let y = g.conv2d(a, b, stride, pad)?;
                g.value(y).shape().to_vec()
            };
            let proj = random(rng, &out_shape);
            let wc = w.clone();
            let ex = finite_diff_check(
                |g, xi| {
                    let wn = g.constant(wc.clone());
                    let y = g.conv2d(xi, wn, stride, pad)?;
                    projected(g, y, &proj)
                },
                &x,
                step,
            )?;
            let ew = finite_diff_check(
                |g, wi| {
                    let xn = g.constant(x.clone());
                    let y = g.conv2d(xn, wi, stride, pad)?;
                    projected(g, y, &proj)
                },
                &w,
                step,
            )?;
            Ok(ex.max(ew))
        }
        "dense" => {
            let (i, o) = (rng.random_range(1..=8), rng.random_range(1..=6));
            let x = random(rng, &[n, i]);
            let w = random(rng, &[o, i]);
            let proj = random(rng, &[n, o]);
            let wc = w.clone();
            let ex = finite_diff_check(
                |g, xi| {
                    let wn = g.constant(wc.clone());
                    let y = g.linear(xi, wn)?;
                    projected(g, y, &proj)
                },
                &x,
                step,
            )?;
            let ew = finite_diff_check(
                |g, wi| {
                    let xn = g.constant(x.clone());
                    let y = g.linear(xn, wi)?;
                    projected(g, y, &proj)
                },
                &w,
                step,
            )?;
            Ok(ex.max(ew))
        }
        "relu" => {
            let x = off_kink(rng, &[n, c, h, h]);
            let proj = random(rng, &[n, c, h, h]);
            finite_diff_check(
                |g, xi| {
                    let y = g.relu(xi);
                    projected(g, y, &proj)
                },
                &x,
                step,
            )
        }
        "bn" => {
            let n = n + 1;
            let x = random(rng, &[n, c, h, h]);
            let gamma = random(rng, &[c]);
            let beta = random(rng, &[c]);
            let proj = random(rng, &[n, c, h, h]);
            finite_diff_check(
                |g, xi| {
                    let mut state = NormState::new(c, 0.1, 1e-5);
                    let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                    let y = g.batch_norm_train(xi, ga, be, &mut state)?;
                    projected(g, y, &proj)
                },
                &x,
                step,
            )
        }
        "gn" | "ln" | "in" => {
            let c = 2 * c;
            let groups = match op {
                "gn" => 2,
                "ln" => 1,
                _ => c,
            };
            let x = random(rng, &[n, c, h, h]);
            let gamma = random(rng, &[c]);
            let beta = random(rng, &[c]);
            let proj = random(rng, &[n, c, h, h]);
            finite_diff_check(
                |g, xi| {
                    let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                    let y = g.group_norm(xi, ga, be, groups, 1e-5)?;
                    projected(g, y, &proj)
                },
                &x,
                step,
            )
        }
        "wa" | "wn" => {
            let f = rng.random_range(1..=4);
            let k = [1, 3][rng.random_range(0..2)];
            let w = random(rng, &[f, c, k, k]);
            let scale = random(rng, &[f]);
            let proj = random(rng, &[f, c, k, k]);
            let cfg = WaConfig {
                center: rng.random_bool(0.75),
                scale: rng.random_bool(0.75),
                ..WaConfig::default()
            };
            let wa = op == "wa";
            let apply = |g: &mut Graph, wi: NodeId, si: NodeId| -> Result<NodeId> {
                if wa {
                    g.weight_align(wi, si, cfg)
                } else {
                    g.weight_norm(wi, si, 1e-5)
                }
            };
            let ew = finite_diff_check(
                |g, wi| {
                    let s = g.constant(scale.clone());
                    let y = apply(g, wi, s)?;
                    projected(g, y, &proj)
                },
                &w,
                step,
            )?;
            let es = finite_diff_check(
                |g, si| {
                    let wn = g.constant(w.clone());
                    let y = apply(g, wn, si)?;
                    projected(g, y, &proj)
                },
                &scale,
                step,
            )?;
            Ok(ew.max(es))
        }
        "residual" => {
            let f = c + rng.random_range(0..=1);
            let h = if rng.random_bool(0.5) { h | 1 } else { h };
            let stride = if h % 2 == 1 { rng.random_range(1..=2) } else { 1 };
            let norm = [NormalizerConfig::None, NormalizerConfig::gn(1), NormalizerConfig::bn()][rng.random_range(0..3)];
            let reparam = [ReparamConfig::None, ReparamConfig::weight_align()][rng.random_range(0..2)];
            let n = n + 1;
            let spec = NetworkSpec {
                layers: vec![
                    LayerSpec::residual(f, stride).with_normalizer(norm).with_reparam(reparam),
                    LayerSpec::avgpool(),
                    LayerSpec::classifier(),
                ],
                input_shape: [c, h, h],
                classes: 2,
                seed: rng.random(),
            };
            let net = RefCell::new(Network::build(spec)?);
            let out_shape = net.borrow().output_shape(0).unwrap().to_vec();
            let mut full = vec![n];
            full.extend(out_shape);
            let proj = random(rng, &full);
            let x = off_kink_input(&net, rng, &[n, c, h, h], step)?;
            finite_diff_check(
                |g, xi| {
                    let mut net = net.borrow_mut();
                    let bound = net.bind_frozen(g);
                    let y = net.layer_forward(0, g, &bound, xi, Mode::Train)?;
                    projected(g, y, &proj)
                },
                &x,
                step,
            )
        }
        "cross_entropy" => {
            let k = rng.random_range(2..=10);
            let logits = Tensor::from_fn(&[n, k], |_| rng.random_range(-3.0..3.0));
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            finite_diff_check(|g, li| g.cross_entropy(li, &labels), &logits, step)
        }
        other => panic!("unknown op {other}"),
    }
}

/// Signs of every ReLU output inside the first layer of `net` at `x`.
fn relu_pattern(net: &RefCell<Network>, x: &Tensor) -> Result<Vec<bool>> {
    let mut g = Graph::new();
    let mut net = net.borrow_mut();
    let bound = net.bind_frozen(&mut g);
    let input = g.constant(x.clone());
    net.layer_forward(0, &mut g, &bound, input, Mode::Train)?;
    Ok(g.node_ids()
        .filter(|&id| g.op_name(id) == "relu")
        .flat_map(|id| g.value(id).data().iter().map(|&v| v > 0.0))
        .collect())
}

/// Draws inputs until no central-difference probe moves an internal ReLU
/// across its kink.
fn off_kink_input(net: &RefCell<Network>, rng: &mut ChaCha8Rng, shape: &[usize], step: f64) -> Result<Tensor> {
    loop {
        let mut x = random(rng, shape);
        let base = relu_pattern(net, &x)?;
        let mut clean = true;
        'coords: for i in 0..x.len() {
            let orig = x.data()[i];
            for d in [step, -step] {
                x.data_mut()[i] = orig + d;
                if relu_pattern(net, &x)? != base {
                    clean = false;
                    break 'coords;
                }
            }
            x.data_mut()[i] = orig;
        }
        if clean {
            return Ok(x);
        }
    }
}

/// Checks `cases` randomized instances of `op`; returns the worst error.
pub fn gradient_suite(op: &str, cases: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        worst = worst.max(gradient_case(op, 1000 * i + op.len() as u64)?);
    }
    Ok(worst)
}

pub fn mnist_root() -> Option<PathBuf> {
    let root = std::env::var_os("DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    [root.join("mnist"), root]
        .into_iter()
        .find(|p| p.join(weightalign::data::MNIST_TRAIN_IMAGES).exists())
}
