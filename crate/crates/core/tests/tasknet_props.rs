use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapnet::autodiff::{Gradients, Graph, PROB_CLAMP};
use sapnet::checks::tiny_model_config;
use sapnet::data::{generate_one, Domain, Image, LabelMap, Sample, SceneSpec};
use sapnet::tasknet::{adv_loss, task_loss, total_objective, AdvPath, ModelConfig, Network};
use sapnet::tensor::{NormMode, Tensor};
use sapnet::Error;

fn labelled(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Sample {
    Sample {
        image: Image {
            width: w,
            height: h,
            rgb: vec![0; w * h * 3],
        },
        labels: Some(LabelMap {
            width: w,
            height: h,
            classes: (0..w * h).map(|_| rng.gen_range(0..c) as u8).collect(),
        }),
        domain: Domain::Source,
    }
}

fn ce_oracle(logits: &Tensor, labels: &[u8]) -> f64 {
    let (c, h, w) = logits.dims3().unwrap();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let z: f64 = (0..c).map(|k| logits.at3(k, y, x).exp()).sum();
            let l = labels[y * w + x] as usize;
            total += -(logits.at3(l, y, x).exp() / z).ln();
        }
    }
    total / (h * w) as f64
}

fn task_value(logits: &Tensor, sample: &Sample) -> f64 {
    let mut g = Graph::new();
    let l = g.input(logits.clone());
    let loss = task_loss(&mut g, l, sample).unwrap();
    g.value(loss).item().unwrap()
}

#[test]
fn task_loss_matches_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..120 {
        let (c, h, w) = (
            rng.gen_range(2..6),
            rng.gen_range(1..9),
            rng.gen_range(1..9),
        );
        let s = labelled(&mut rng, c, h, w);
        let logits = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-4.0..4.0));
        let got = task_value(&logits, &s);
        let want = ce_oracle(&logits, &s.labels.as_ref().unwrap().classes);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn task_loss_special_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let s = labelled(&mut rng, 4, 5, 6);
    let uniform = Tensor::zeros(&[4, 5, 6]);
    assert!((task_value(&uniform, &s) - 4f64.ln()).abs() < 1e-12);

    let labels = &s.labels.as_ref().unwrap().classes;
    let confident = Tensor::from_fn(&[4, 5, 6], |i| {
        if labels[i % 30] as usize == i / 30 {
            60.0
        } else {
            0.0
        }
    });
    assert!(task_value(&confident, &s) < 1e-20);

    // logits at half the label resolution are upsampled first
    let small = Tensor::zeros(&[4, 3, 3]);
    assert!((task_value(&small, &s) - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn task_loss_is_invariant_to_per_pixel_logit_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..50 {
        let (c, h, w) = (
            rng.gen_range(2..6),
            rng.gen_range(1..7),
            rng.gen_range(1..7),
        );
        let s = labelled(&mut rng, c, h, w);
        let logits = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-3.0..3.0));
        let shift: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let moved = Tensor::from_fn(&[c, h, w], |i| logits.data()[i] + shift[i % (h * w)]);
        assert!((task_value(&logits, &s) - task_value(&moved, &s)).abs() <= 1e-9);
    }
}

#[test]
fn task_loss_refuses_target_samples() {
    let spec = SceneSpec::default();
    let t = generate_one(&spec, Domain::Target, 0, 0);
    let mut g = Graph::new();
    let l = g.input(Tensor::zeros(&[4, 64, 64]));
    assert!(matches!(
        task_loss(&mut g, l, &t),
        Err(Error::TargetTaskLoss)
    ));
    let unlabelled = Sample {
        labels: None,
        domain: Domain::Source,
        ..generate_one(&spec, Domain::Source, 0, 0)
    };
    assert!(matches!(
        task_loss(&mut g, l, &unlabelled),
        Err(Error::TargetTaskLoss)
    ));
}

fn adv_value(p: &[f64], d: &[Domain]) -> f64 {
    let mut g = Graph::new();
    let pv = g.input(Tensor::from_vec(p.to_vec()));
    let loss = adv_loss(&mut g, pv, d).unwrap();
    g.value(loss).item().unwrap()
}

#[test]
fn adversarial_loss_matches_batch_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..120 {
        let n = rng.gen_range(1..9);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
        let d: Vec<Domain> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    Domain::Source
                } else {
                    Domain::Target
                }
            })
            .collect();
        let want: f64 = p
            .iter()
            .zip(&d)
            .map(|(&x, &dom)| match dom {
                Domain::Target => -x.ln(),
                Domain::Source => -(1.0 - x).ln(),
            })
            .sum::<f64>()
            / n as f64;
        assert!((adv_value(&p, &d) - want).abs() <= 1e-12);
    }
}

#[test]
fn adversarial_loss_special_values() {
    let ln2 = 2f64.ln();
    assert!((adv_value(&[0.5], &[Domain::Source]) - ln2).abs() < 1e-15);
    assert!((adv_value(&[0.5], &[Domain::Target]) - ln2).abs() < 1e-15);
    let perfect = adv_value(&[0.0, 1.0], &[Domain::Source, Domain::Target]);
    assert!((0.0..=1.01 * PROB_CLAMP).contains(&perfect));
    let worst = adv_value(&[1.0], &[Domain::Source]);
    assert!(worst.is_finite() && (worst + PROB_CLAMP.ln()).abs() < 1e-6);
}

fn toy_batch(seed: u64, size: usize) -> (Sample, Sample) {
    let spec = SceneSpec {
        size,
        min_radius: 3.0,
        max_radius: 7.0,
        ..SceneSpec::default()
    };
    (
        generate_one(&spec, Domain::Source, seed, 0),
        generate_one(&spec, Domain::Target, seed, 1),
    )
}

struct Pass {
    g: Graph,
    grads: Gradients,
}

impl Pass {
    fn grad(&self, net: &Network, name: &str) -> Tensor {
        let id = net.store.id(name).unwrap();
        match self.g.param_var(id) {
            Some(v) => self
                .grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(net.store.value(id).shape())),
            None => Tensor::zeros(net.store.value(id).shape()),
        }
    }
}

#[derive(Clone, Copy)]
enum Objective {
    Adv,
    Total,
}

fn pass(net: &mut Network, path: AdvPath, objective: Objective, seed: u64) -> Pass {
    let (src, tgt) = toy_batch(seed, net.cfg.image_size);
    let images = [src.image.to_tensor(), tgt.image.to_tensor()];
    let mut g = Graph::new();
    let fw = net
        .forward(&mut g, &[&images[0], &images[1]], path, NormMode::Train)
        .unwrap();
    let adv = adv_loss(
        &mut g,
        fw.sap.unwrap().prob,
        &[Domain::Source, Domain::Target],
    )
    .unwrap();
    let loss = match objective {
        Objective::Adv => adv,
        Objective::Total => {
            let task = task_loss(&mut g, fw.logits[0], &src).unwrap();
            total_objective(&mut g, task, adv).unwrap()
        }
    };
    let grads = g.backward(loss).unwrap();
    Pass { g, grads }
}

fn names(net: &Network, prefix: &str) -> Vec<String> {
    net.store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| p.name.clone())
        .collect()
}

#[test]
fn backbone_adversarial_gradient_is_reversed_and_scaled() {
    for seed in 0..3 {
        let mut net = Network::new(tiny_model_config(), seed).unwrap();
        let plain = pass(&mut net.clone(), AdvPath::Direct, Objective::Adv, seed);
        for &lambda in &[0.1, 1.0] {
            let rev = pass(&mut net, AdvPath::Reversed(lambda), Objective::Adv, seed);
            let mut nonzero = 0;
            for name in names(&net, "backbone.") {
                let (r, p) = (rev.grad(&net, &name), plain.grad(&net, &name));
                for (a, b) in r.data().iter().zip(p.data()) {
                    assert!(
                        (a + lambda * b).abs() <= 1e-12,
                        "{name}: {a} vs {}",
                        -lambda * b
                    );
                    nonzero += usize::from(*b != 0.0);
                }
            }
            assert!(nonzero > 0);
            // the pyramid itself sees the unreversed gradient
            for name in names(&net, "sap.") {
                assert_eq!(rev.grad(&net, &name), plain.grad(&net, &name), "{name}");
            }
        }
    }
}

#[test]
fn zero_lambda_kills_the_backbone_adversarial_gradient() {
    let mut net = Network::new(tiny_model_config(), 4).unwrap();
    let p = pass(&mut net, AdvPath::Reversed(0.0), Objective::Adv, 4);
    for name in names(&net, "backbone.")
        .into_iter()
        .chain(names(&net, "seg."))
    {
        assert!(
            p.grad(&net, &name).data().iter().all(|&v| v == 0.0),
            "{name}"
        );
    }
    assert!(p
        .grad(&net, "sap.disc.weight")
        .data()
        .iter()
        .any(|&v| v != 0.0));
}

#[test]
fn discriminator_gradient_ignores_the_task_loss() {
    for &lambda in &[0.0, 0.1, 1.0] {
        let mut net = Network::new(tiny_model_config(), 5).unwrap();
        let adv = pass(
            &mut net.clone(),
            AdvPath::Reversed(lambda),
            Objective::Adv,
            5,
        );
        let total = pass(&mut net, AdvPath::Reversed(lambda), Objective::Total, 5);
        for name in names(&net, "sap.") {
            assert_eq!(adv.grad(&net, &name), total.grad(&net, &name), "{name}");
        }
    }
}

#[test]
fn detached_guidance_keeps_adversarial_gradient_out_of_the_task_head() {
    let mut net = Network::new(tiny_model_config(), 6).unwrap();
    assert!(net.cfg.pyramid.detach_guidance);
    let p = pass(&mut net, AdvPath::Direct, Objective::Adv, 6);
    for name in names(&net, "seg.") {
        assert!(
            p.grad(&net, &name).data().iter().all(|&v| v == 0.0),
            "{name}"
        );
    }
    let mut cfg = tiny_model_config();
    cfg.pyramid.detach_guidance = false;
    let mut net = Network::new(cfg, 6).unwrap();
    let p = pass(&mut net, AdvPath::Direct, Objective::Adv, 6);
    assert!(p
        .grad(&net, "seg.out.weight")
        .data()
        .iter()
        .any(|&v| v != 0.0));
}

#[test]
fn default_model_shapes() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.feature_side(), 32);
    let wide = ModelConfig::wide();
    assert_eq!(wide.backbone_widths, [3, 32, 64, 64]);
    assert_eq!(wide.feature_side(), 32);

    let mut net = Network::new(wide, 0).unwrap();
    let (src, _) = toy_batch(1, 64);
    let img = src.image.to_tensor();
    let mut g = Graph::new();
    let fw = net
        .forward(&mut g, &[&img], AdvPath::Off, NormMode::Eval)
        .unwrap();
    assert!(fw.sap.is_none());
    assert_eq!(g.value(fw.f_hats[0]).shape(), [64, 32, 32]);
    let logits = g.value(fw.logits[0]);
    assert_eq!(logits.shape(), [4, 32, 32]);
    assert!(logits.all_finite());
    let guide = net.guided_map(&mut g, fw.logits[0]).unwrap();
    let probs = g.value(guide);
    assert!(probs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    for px in 0..32 * 32 {
        let s: f64 = (0..4).map(|k| probs.data()[k * 1024 + px]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert_eq!(net.predict(&img).unwrap().len(), 64 * 64);
    assert!(net.predict(&Tensor::zeros(&[3, 32, 32])).is_err());
}

#[test]
fn zero_image_and_zero_biases_give_zero_features() {
    let mut net = Network::new(tiny_model_config(), 7).unwrap();
    for (_, p) in net.store.iter_mut() {
        if p.name.starts_with("backbone.") && p.name.ends_with(".bias") {
            p.value.data_mut().fill(0.0);
        }
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[3, 24, 24]));
    let f = net.backbone_forward(&mut g, x).unwrap();
    assert!(g.value(f).data().iter().all(|&v| v == 0.0));
}
