use sapnet::autodiff::ParamStore;
use sapnet::checks::tiny_model_config;
use sapnet::config::RunConfig;
use sapnet::data::{generate, Domain, Sample, SceneSpec};
use sapnet::tensor::Tensor;
use sapnet::train::{evaluate, Adam, Checkpoint, Trainer, CSV_HEADER};
use sapnet::Error;

fn tiny_run(lambda: f64) -> RunConfig {
    let mut run = RunConfig {
        model: tiny_model_config(),
        scene: SceneSpec {
            size: 24,
            min_radius: 3.0,
            max_radius: 8.0,
            ..SceneSpec::default()
        },
        ..RunConfig::default()
    };
    let t = &mut run.train;
    t.lambda = lambda;
    t.iters = 24;
    t.pretrain_iters = 8;
    t.milestones = vec![16, 20];
    t.log_every = 5;
    t.seed = 3;
    run
}

fn pools(run: &RunConfig) -> (Vec<Sample>, Vec<Sample>) {
    (
        generate(&run.scene, Domain::Source, 12, 1),
        generate(&run.scene, Domain::Target, 12, 2),
    )
}

fn train(run: RunConfig) -> Trainer {
    let (s, t) = pools(&run);
    let mut tr = Trainer::new(run).unwrap();
    tr.train_until(&s, &t, usize::MAX, |_| {}).unwrap();
    tr
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let run = tiny_run(1.0);
        let (s, t) = pools(&run);
        let out = dir.path().join(name);
        Trainer::new(run)
            .unwrap()
            .run(&s, &t, &out, |_| {})
            .unwrap();
        outputs.push((
            std::fs::read(out.join("final.sapc")).unwrap(),
            std::fs::read(out.join("metrics.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);

    let mut other = tiny_run(1.0);
    other.train.seed = 4;
    assert_ne!(train(other).checkpoint().to_bytes(), outputs[0].0);
}

#[test]
fn metrics_rows_follow_the_log_period() {
    let tr = train(tiny_run(1.0));
    let csv = tr.metrics_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let iters: Vec<usize> = tr.rows.iter().map(|r| r.iter).collect();
    assert_eq!(iters, vec![5, 10, 15, 20, 24]);
    // the first window is pure pretraining
    assert!(tr.rows[0].adv_loss.is_nan() && tr.rows[0].disc_acc.is_nan());
    assert!(tr.rows[1].adv_loss.is_finite());
    assert_eq!(tr.rows[2].lr, 1e-3);
    assert_eq!(tr.rows[3].lr, 1e-4);
    assert_eq!(tr.rows[4].lr, 1e-5);
    assert_eq!(lines.count(), 5);
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let tr = train(tiny_run(1.0));
    let bytes = tr.checkpoint().to_bytes();
    let path = dir.path().join("x.sapc");
    tr.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), bytes);
    let back = Trainer::from_checkpoint(&loaded).unwrap();
    assert_eq!(back.checkpoint().to_bytes(), bytes);
    assert_eq!(back.run, tr.run);
    assert_eq!(back.metrics_csv(), tr.metrics_csv());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn resumed_training_matches_the_uninterrupted_run() {
    let whole = train(tiny_run(1.0));
    for cut in [3, 8, 13] {
        let run = tiny_run(1.0);
        let (s, t) = pools(&run);
        let mut first = Trainer::new(run).unwrap();
        first.train_until(&s, &t, cut, |_| {}).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let ckpt = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        let mut second = Trainer::from_checkpoint(&ckpt).unwrap();
        assert_eq!(second.iter, cut);
        second.train_until(&s, &t, usize::MAX, |_| {}).unwrap();
        assert_eq!(
            second.checkpoint().to_bytes(),
            whole.checkpoint().to_bytes(),
            "cut {cut}"
        );
        assert_eq!(second.metrics_csv(), whole.metrics_csv());
    }
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = tiny_run(1.0);
    run.train.checkpoint_every = 10;
    let (s, t) = pools(&run);
    Trainer::new(run)
        .unwrap()
        .run(&s, &t, dir.path(), |_| {})
        .unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "ckpt_000010.sapc",
            "ckpt_000020.sapc",
            "final.sapc",
            "metrics.csv"
        ]
    );
    let mid = Trainer::load(&dir.path().join("ckpt_000020.sapc")).unwrap();
    assert_eq!(mid.iter, 20);
}

#[test]
fn zero_lambda_matches_source_only_training() {
    let adapted = train(tiny_run(0.0));
    let mut run = tiny_run(0.0);
    run.train = run.train.source_only();
    let plain = train(run);

    let task_cols = |tr: &Trainer| -> Vec<(usize, u64, u64)> {
        tr.rows
            .iter()
            .map(|r| (r.iter, r.task_loss.to_bits(), r.lr.to_bits()))
            .collect()
    };
    assert_eq!(task_cols(&adapted), task_cols(&plain));
    for (_, p) in plain.net.store.iter() {
        if p.name.starts_with("backbone.") || p.name.starts_with("seg.") {
            let q = adapted
                .net
                .store
                .value(adapted.net.store.id(&p.name).unwrap());
            assert_eq!(&p.value, q, "{}", p.name);
        }
    }
    let test = generate(&tiny_run(0.0).scene, Domain::Target, 6, 9);
    let (mut a, mut b) = (adapted.net.clone(), plain.net.clone());
    let ra = evaluate(&mut a, &test, false).unwrap();
    let rb = evaluate(&mut b, &test, false).unwrap();
    assert_eq!(ra.miou.to_bits(), rb.miou.to_bits());
    assert_eq!(ra.per_class_iou, rb.per_class_iou);

    // with λ > 0 the backbone does move differently
    let moved = train(tiny_run(1.0));
    let id = moved.net.store.id("backbone.0.weight").unwrap();
    assert_ne!(moved.net.store.value(id), plain.net.store.value(id));
}

#[test]
fn pretraining_leaves_the_pyramid_untouched() {
    let run = tiny_run(1.0);
    let (s, t) = pools(&run);
    let mut tr = Trainer::new(run).unwrap();
    let initial = tr.net.store.clone();
    tr.train_until(&s, &t, 8, |_| {}).unwrap();
    let mut sap_params = 0;
    for (id, p) in tr.net.store.iter() {
        let before = initial.value(id);
        if p.name.starts_with("sap.") {
            sap_params += 1;
            assert_eq!(&p.value, before, "{}", p.name);
            assert_eq!(tr.adam.t[id.index()], 0, "{}", p.name);
        } else {
            assert_ne!(&p.value, before, "{}", p.name);
            assert_eq!(tr.adam.t[id.index()], 8);
        }
    }
    assert!(sap_params > 10);
    let stats = tr.net.sap.bn_stats.clone();
    tr.train_until(&s, &t, 9, |_| {}).unwrap();
    assert_ne!(tr.net.sap.bn_stats, stats);
    let disc = tr.net.store.id("sap.disc.weight").unwrap();
    assert_eq!(tr.adam.t[disc.index()], 1);
}

#[test]
fn non_finite_gradient_aborts_naming_the_parameter() {
    let mut store = ParamStore::new();
    let a = store.add("ok", Tensor::from_vec(vec![1.0]));
    let b = store.add("broken", Tensor::from_vec(vec![2.0]));
    store.get_mut(a).grad = Tensor::from_vec(vec![0.5]);
    store.get_mut(b).grad = Tensor::from_vec(vec![f64::NAN]);
    let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
    let before = store.clone();
    match adam.step(&mut store, &[a, b], 1e-3) {
        Err(Error::NonFinite(name)) => assert_eq!(name, "broken"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    assert_eq!(store.value(a), before.value(a));
    assert_eq!(adam.t, vec![0, 0]);
}

#[test]
fn invalid_schedules_are_rejected() {
    let mut run = tiny_run(1.0);
    run.train.milestones = vec![20, 16];
    assert!(matches!(Trainer::new(run), Err(Error::Config(_))));
    let mut run = tiny_run(1.0);
    run.train.milestones = vec![24];
    assert!(Trainer::new(run).is_err());
    let mut run = tiny_run(-1.0);
    run.train.milestones = vec![];
    assert!(Trainer::new(run).is_err());
    let mut run = tiny_run(1.0);
    run.scene.size = 32;
    assert!(Trainer::new(run).is_err());
}
