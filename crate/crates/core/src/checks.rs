//! Finite-difference gradient suite over every differentiable graph op, the
//! attention pyramid on its own, and the whole adversarial model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_check, GradCheckReport, Graph, ParamId, ParamStore, Var};
use crate::data::{generate_one, Domain, SceneSpec};
use crate::error::Result;
use crate::sap::{PyramidConfig, SapNet};
use crate::tasknet::{AdvPath, ModelConfig, Network};
use crate::tensor::{BatchNormStats, NormMode, Tensor};

/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Tolerance for single ops.
pub const OP_TOL: f64 = 1e-6;
/// Tolerance for composed paths.
pub const PATH_TOL: f64 = 1e-5;
/// Elements sampled per parameter tensor.
pub const SAMPLES_PER_PARAM: usize = 24;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub tol: f64,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passed() && self.report.checked > 0
    }

    pub fn line(&self) -> String {
        format!(
            "{:<6} {:<32} max_rel_err={:.3e} tol={:.0e} checked={} skipped={} worst={} ({:.6e} vs {:.6e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.report.max_rel_err,
            self.tol,
            self.report.checked,
            self.report.skipped,
            self.report.worst,
            self.report.worst_pair.0,
            self.report.worst_pair.1
        )
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so relu and max comparisons stay off
/// their kinks under a `FD_EPS` perturbation.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values: a shuffled grid, so window maxima are unique with a gap
/// far above `FD_EPS`.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, v).expect("shape matches")
}

/// Contracts an op output with fixed random weights into a scalar, so
/// every output element carries a distinct upstream gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = rand_tensor(&mut rng, g.value(y).shape());
    let wv = g.input(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn op_case(name: &str, inputs: Vec<(&str, Tensor)>, seed: u64, f: OpFn) -> Result<CheckOutcome> {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs.into_iter().map(|(n, t)| store.add(n, t)).collect();
    let report = finite_difference_check(
        &mut store,
        |g: &mut Graph, s: &ParamStore| -> Result<Var> {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let y = f(g, &vars)?;
            project(g, y, seed)
        },
        FD_EPS,
        OP_TOL,
        SAMPLES_PER_PARAM,
    )?;
    Ok(CheckOutcome {
        name: name.to_string(),
        tol: OP_TOL,
        report,
    })
}

/// One check per differentiable op, on small random tensors.
pub fn op_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut push = |c: Result<CheckOutcome>| -> Result<()> {
        out.push(c?);
        Ok(())
    };

    push(op_case(
        "conv2d.pad1",
        vec![
            ("x", rand_tensor(r, &[2, 5, 6])),
            ("w", rand_tensor(r, &[3, 2, 3, 3])),
            ("b", rand_tensor(r, &[3])),
        ],
        1,
        Box::new(|g, v| Ok(g.conv2d(v[0], v[1], v[2], 1, 1)?)),
    ))?;
    push(op_case(
        "conv2d.stride2",
        vec![
            ("x", rand_tensor(r, &[2, 7, 7])),
            ("w", rand_tensor(r, &[2, 2, 3, 3])),
            ("b", rand_tensor(r, &[2])),
        ],
        2,
        Box::new(|g, v| Ok(g.conv2d(v[0], v[1], v[2], 2, 0)?)),
    ))?;
    push(op_case(
        "avg_pool2d",
        vec![("x", rand_tensor(r, &[2, 6, 5]))],
        3,
        Box::new(|g, v| Ok(g.avg_pool2d(v[0], 3)?)),
    ))?;
    push(op_case(
        "max_pool2d",
        vec![("x", distinct(r, &[2, 6, 5]))],
        4,
        Box::new(|g, v| Ok(g.max_pool2d(v[0], 3)?)),
    ))?;
    push(op_case(
        "resize_bilinear.up",
        vec![("x", rand_tensor(r, &[2, 3, 4]))],
        5,
        Box::new(|g, v| Ok(g.resize_bilinear(v[0], 7, 5)?)),
    ))?;
    push(op_case(
        "resize_bilinear.down",
        vec![("x", rand_tensor(r, &[1, 9, 8]))],
        6,
        Box::new(|g, v| Ok(g.resize_bilinear(v[0], 4, 3)?)),
    ))?;
    push(op_case(
        "relu",
        vec![("x", off_kink(r, &[3, 4]))],
        7,
        Box::new(|g, v| Ok(g.relu(v[0]))),
    ))?;
    push(op_case(
        "sigmoid",
        vec![("x", rand_tensor(r, &[6]).scale(4.0))],
        8,
        Box::new(|g, v| Ok(g.sigmoid(v[0]))),
    ))?;
    push(op_case(
        "add",
        vec![
            ("a", rand_tensor(r, &[2, 3])),
            ("b", rand_tensor(r, &[2, 3])),
        ],
        9,
        Box::new(|g, v| Ok(g.add(v[0], v[1])?)),
    ))?;
    push(op_case(
        "sub",
        vec![
            ("a", rand_tensor(r, &[2, 3])),
            ("b", rand_tensor(r, &[2, 3])),
        ],
        10,
        Box::new(|g, v| Ok(g.sub(v[0], v[1])?)),
    ))?;
    push(op_case(
        "mul",
        vec![
            ("a", rand_tensor(r, &[2, 3])),
            ("b", rand_tensor(r, &[2, 3])),
        ],
        11,
        Box::new(|g, v| Ok(g.mul(v[0], v[1])?)),
    ))?;
    push(op_case(
        "scale",
        vec![("x", rand_tensor(r, &[5]))],
        12,
        Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
    ))?;
    push(op_case(
        "grad_reverse",
        vec![("x", rand_tensor(r, &[5]))],
        13,
        // a single reversal is not the derivative of its forward map; two
        // with λ1·λ2 = 1 are
        Box::new(|g, v| {
            let a = g.grad_reverse(v[0], 0.5)?;
            Ok(g.grad_reverse(a, 2.0)?)
        }),
    ))?;
    push(op_case(
        "concat",
        vec![
            ("a", rand_tensor(r, &[2, 3, 3])),
            ("b", rand_tensor(r, &[1, 3, 3])),
        ],
        14,
        Box::new(|g, v| Ok(g.concat(&[v[0], v[1]])?)),
    ))?;
    push(op_case(
        "stack",
        vec![("a", rand_tensor(r, &[4])), ("b", rand_tensor(r, &[4]))],
        15,
        Box::new(|g, v| Ok(g.stack(&[v[0], v[1], v[0]])?)),
    ))?;
    push(op_case(
        "reshape+index0",
        vec![("x", rand_tensor(r, &[12]))],
        16,
        Box::new(|g, v| {
            let m = g.reshape(v[0], &[3, 4])?;
            Ok(g.index0(m, 1)?)
        }),
    ))?;
    push(op_case(
        "softmax_flat",
        vec![("x", rand_tensor(r, &[3, 3]))],
        17,
        Box::new(|g, v| Ok(g.softmax_flat(v[0]))),
    ))?;
    push(op_case(
        "softmax_axis0",
        vec![("x", rand_tensor(r, &[3, 2, 4]))],
        18,
        Box::new(|g, v| Ok(g.softmax_axis0(v[0])?)),
    ))?;
    push(op_case(
        "linear",
        vec![
            ("x", rand_tensor(r, &[3, 5])),
            ("w", rand_tensor(r, &[2, 5])),
            ("b", rand_tensor(r, &[2])),
        ],
        19,
        Box::new(|g, v| Ok(g.linear(v[0], v[1], Some(v[2]))?)),
    ))?;
    push(op_case(
        "batch_norm.train",
        vec![
            ("x", rand_tensor(r, &[4, 3])),
            ("gamma", rand_tensor(r, &[3])),
            ("beta", rand_tensor(r, &[3])),
        ],
        20,
        Box::new(|g, v| {
            let mut stats = BatchNormStats::new(3);
            Ok(g.batch_norm(v[0], v[1], v[2], &mut stats, NormMode::Train)?)
        }),
    ))?;
    let eval_stats = BatchNormStats {
        mean: rand_tensor(r, &[3]),
        var: rand_tensor(r, &[3]).map(|v| 0.5 + v.abs()),
    };
    push(op_case(
        "batch_norm.eval",
        vec![
            ("x", rand_tensor(r, &[2, 3])),
            ("gamma", rand_tensor(r, &[3])),
            ("beta", rand_tensor(r, &[3])),
        ],
        21,
        Box::new(move |g, v| {
            let mut stats = eval_stats.clone();
            Ok(g.batch_norm(v[0], v[1], v[2], &mut stats, NormMode::Eval)?)
        }),
    ))?;
    push(op_case(
        "attention_vector",
        vec![
            ("f", rand_tensor(r, &[3, 4, 5])),
            ("mask", rand_tensor(r, &[4, 5])),
        ],
        22,
        Box::new(|g, v| Ok(g.attention_vector(v[0], v[1])?)),
    ))?;
    push(op_case(
        "spatial_mean",
        vec![("x", rand_tensor(r, &[3, 4, 2]))],
        23,
        Box::new(|g, v| Ok(g.spatial_mean(v[0])?)),
    ))?;
    push(op_case(
        "sum+mean",
        vec![("x", rand_tensor(r, &[2, 3]))],
        24,
        Box::new(|g, v| {
            let s = g.sum(v[0]);
            let m = g.mean(v[0]);
            let s3 = g.scale(s, 0.3);
            Ok(g.add(s3, m)?)
        }),
    ))?;
    push(op_case(
        "sum_axis0",
        vec![("x", rand_tensor(r, &[3, 2, 2]))],
        25,
        Box::new(|g, v| Ok(g.sum_axis0(v[0])?)),
    ))?;
    let labels: Vec<usize> = (0..12).map(|_| r.gen_range(0..4)).collect();
    push(op_case(
        "cross_entropy",
        vec![("logits", rand_tensor(r, &[4, 3, 4]).scale(2.0))],
        26,
        Box::new(move |g, v| Ok(g.cross_entropy(v[0], &labels)?)),
    ))?;
    push(op_case(
        "bce",
        vec![("p", Tensor::from_fn(&[4], |i| 0.15 + 0.2 * i as f64))],
        27,
        Box::new(|g, v| Ok(g.bce(v[0], &[0.0, 1.0, 1.0, 0.0])?)),
    ))?;
    push(op_case(
        "conv-relu-fc net",
        vec![
            ("x", rand_tensor(r, &[2, 6, 6])),
            ("c1.w", rand_tensor(r, &[3, 2, 3, 3])),
            ("c1.b", rand_tensor(r, &[3])),
            ("c2.w", rand_tensor(r, &[3, 3, 3, 3])),
            ("c2.b", rand_tensor(r, &[3])),
            ("fc.w", rand_tensor(r, &[2, 3])),
            ("fc.b", rand_tensor(r, &[2])),
        ],
        28,
        Box::new(|g, v| {
            let h = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            let h = g.relu(h);
            let h = g.conv2d(h, v[3], v[4], 1, 0)?;
            let h = g.relu(h);
            let m = g.spatial_mean(h)?;
            Ok(g.linear(m, v[5], Some(v[6]))?)
        }),
    ))?;
    Ok(out)
}

/// Perturbs every parameter so that zero-initialized biases and identical
/// rows do not hide gradient errors.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, amount: f64) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

/// Target-domain probability of the attention pyramid alone, on a
/// `16×24×24` feature map with a 4-class guided map: `C = 16`, three
/// levels, eval-mode batch norm with non-trivial running statistics.
pub fn sap_path_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = PyramidConfig::with_sizes(vec![3, 9, 15], 16);
    cfg.detach_guidance = false;
    let mut store = ParamStore::new();
    let mut sap = SapNet::new(cfg, 16, 4, &mut store, &mut rng)?;
    jitter(&mut store, &mut rng, 0.05);
    sap.bn_stats = BatchNormStats {
        mean: rand_tensor(&mut rng, &[8]).scale(0.1),
        var: Tensor::from_fn(&[8], |_| rng.gen_range(0.5..1.5)),
    };
    let f_hat = rand_tensor(&mut rng, &[16, 24, 24]).map(|v| v.abs());
    let guide = crate::tensor::softmax_axis0(&rand_tensor(&mut rng, &[4, 24, 24]))?;
    let f_id = store.add("input.f_hat", f_hat);
    let p_id = store.add("input.guided_map", guide);
    let report = finite_difference_check(
        &mut store,
        |g: &mut Graph, s: &ParamStore| -> Result<Var> {
            let f = g.param(s, f_id);
            let p = g.param(s, p_id);
            let mut net = sap.clone();
            let out = net.forward(g, s, &[f], &[Some(p)], NormMode::Eval)?;
            Ok(g.sum(out.prob))
        },
        FD_EPS,
        PATH_TOL,
        SAMPLES_PER_PARAM,
    )?;
    Ok(CheckOutcome {
        name: "sap_forward (C=16, N=3, 24x24)".into(),
        tol: PATH_TOL,
        report,
    })
}

/// Configuration of the whole-model check: a 24×24 input kept at full
/// resolution by unit strides.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone_widths: [3, 6, 8, 8],
        backbone_strides: [1, 1, 1],
        seg_hidden: 6,
        num_classes: 4,
        image_size: 24,
        pyramid: PyramidConfig::with_sizes(vec![3, 9, 15], 8),
    }
}

/// End-to-end check of each discriminator output `x_i` against every
/// network parameter, on one source and one target image. The pyramid is
/// attached without reversal and the guided map is not detached, so the
/// backbone, both heads and the pyramid all sit on the checked path.
pub fn full_model_check(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = tiny_model_config();
    cfg.pyramid.detach_guidance = false;
    let mut net = Network::new(cfg, seed)?;
    jitter(&mut net.store, &mut rng, 0.05);
    let spec = SceneSpec {
        size: 24,
        min_radius: 3.0,
        max_radius: 8.0,
        ..SceneSpec::default()
    };
    let images = [
        generate_one(&spec, Domain::Source, seed, 0)
            .image
            .to_tensor(),
        generate_one(&spec, Domain::Target, seed, 1)
            .image
            .to_tensor(),
    ];
    let mut store = std::mem::take(&mut net.store);
    let mut out = Vec::new();
    for (i, domain) in [Domain::Source, Domain::Target].into_iter().enumerate() {
        let report = finite_difference_check(
            &mut store,
            |g: &mut Graph, s: &ParamStore| -> Result<Var> {
                let mut n = net.clone();
                n.store = s.clone();
                let fw = n.forward(
                    g,
                    &[&images[0], &images[1]],
                    AdvPath::Direct,
                    NormMode::Eval,
                )?;
                let prob = g.reshape(fw.sap.expect("pyramid").prob, &[2, 1])?;
                Ok(g.index0(prob, i)?)
            },
            FD_EPS,
            PATH_TOL,
            SAMPLES_PER_PARAM / 2,
        )?;
        out.push(CheckOutcome {
            name: format!("full model x_{i} ({domain:?})"),
            tol: PATH_TOL,
            report,
        });
    }
    Ok(out)
}
