mod common;

use segcap_core::data::{gen_video, GenConfig};
use segcap_core::heads::{Vocabulary, BOS};
use segcap_core::model::{predict, sample_loss, Model, ModelConfig, Sample};
use segcap_core::numerics::{grad_check_params, ParamStore, Tensor};
use segcap_core::train::{epoch_order, loss_and_grads, train_step, Adam, Cursor, LossValues, Schedule, TrainConfig};

fn small_gen() -> GenConfig {
    GenConfig { frames: 2, ..GenConfig::default() }
}

fn setup(cfg: ModelConfig, videos: u64) -> (Model, Vec<Sample>) {
    let vocab = Vocabulary::standard();
    let samples = (0..videos)
        .map(|i| Sample::from_video(&gen_video(&small_gen(), i).unwrap(), &vocab, &cfg).unwrap())
        .collect();
    (Model::new(cfg, vocab).unwrap(), samples)
}

fn run(model: &mut Model, samples: &[Sample], steps: usize, tcfg: &TrainConfig) -> Vec<LossValues> {
    let mut adam = Adam::new(&model.store);
    let mut cur = Cursor::default();
    (0..steps).map(|_| train_step(model, &mut adam, samples, &mut cur, tcfg).unwrap()).collect()
}

#[test]
fn identical_runs_are_bit_identical() {
    let tcfg = TrainConfig { learning_rate: 1e-3, seed: 4, ..TrainConfig::default() };
    let (mut a, samples) = setup(ModelConfig::default(), 4);
    let (mut b, _) = setup(ModelConfig::default(), 4);
    let la = run(&mut a, &samples, 6, &tcfg);
    let lb = run(&mut b, &samples, 6, &tcfg);
    let bits = |l: &[LossValues]| l.iter().map(|x| x.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&la), bits(&lb));
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tcfg = TrainConfig { learning_rate: 1e-3, seed: 1, ..TrainConfig::default() };
    let (mut full, samples) = setup(ModelConfig::default(), 3);
    let whole = run(&mut full, &samples, 6, &tcfg);

    let (mut part, _) = setup(ModelConfig::default(), 3);
    let mut adam = Adam::new(&part.store);
    let mut cur = Cursor::default();
    let mut log = Vec::new();
    for _ in 0..3 {
        log.push(train_step(&mut part, &mut adam, &samples, &mut cur, &tcfg).unwrap());
    }
    // Round-trip every piece of state through JSON.
    let mut part: Model = serde_json::from_str(&serde_json::to_string(&part).unwrap()).unwrap();
    let mut adam: Adam = serde_json::from_str(&serde_json::to_string(&adam).unwrap()).unwrap();
    let mut cur: Cursor = serde_json::from_str(&serde_json::to_string(&cur).unwrap()).unwrap();
    for _ in 0..3 {
        log.push(train_step(&mut part, &mut adam, &samples, &mut cur, &tcfg).unwrap());
    }
    let bits = |l: &[LossValues]| l.iter().map(|x| x.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&whole), bits(&log));
}

#[test]
fn zero_lambda_removes_contrastive_gradient() {
    let cfg = ModelConfig { lambda: 0.0, detach_words: false, ..ModelConfig::default() };
    let (model, samples) = setup(cfg, 3);
    let (values, grads) = loss_and_grads(&model, &samples[0]).unwrap();
    let expected = values.caption + values.mask + values.fa;
    assert!((values.total - expected).abs() < 1e-12);
    for (id, g) in model.store.ids().zip(&grads) {
        let name = model.store.name(id);
        if name.starts_with("mc.") || name == "loss.log_tau" {
            assert!(g.as_ref().is_none_or(|g| g.data().iter().all(|&x| x == 0.0)), "{name}");
        }
    }
    let with = ModelConfig { lambda: 2.0, detach_words: false, ..ModelConfig::default() };
    let (model2, _) = setup(with, 0);
    let (v2, g2) = loss_and_grads(&model2, &samples[0]).unwrap();
    assert!((v2.total - (expected + 2.0 * v2.mc)).abs() < 1e-9);
    let tau_grad = model2.store.ids().zip(&g2).find(|(id, _)| model2.store.name(*id) == "loss.log_tau").unwrap().1;
    if v2.mc != 0.0 {
        assert!(tau_grad.as_ref().is_some_and(|g| g.data()[0] != 0.0));
    }
}

#[test]
fn sample_loss_passes_gradient_check() {
    let cfg = ModelConfig { dim: 32, include_positive_in_denominator: true, detach_words: false, ..ModelConfig::default() };
    let (model, samples) = setup(cfg, 2);
    // Probe a few coordinates of every parameter.
    let coords: Vec<_> = model
        .store
        .ids()
        .flat_map(|id| {
            let n = model.store.get(id).numel();
            [0, n / 2, n - 1].into_iter().map(move |i| (id, i))
        })
        .collect();
    let report = grad_check_params(
        &model.store,
        |tape, _store: &ParamStore| Ok(sample_loss(tape, &model, &samples[1])?.total),
        1e-5,
        Some(&coords),
    )
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn training_lowers_the_loss() {
    let tcfg = TrainConfig { learning_rate: 2e-3, seed: 0, ..TrainConfig::default() };
    let (mut model, samples) = setup(ModelConfig::default(), 2);
    let log = run(&mut model, &samples, 40, &tcfg);
    let first: f64 = log[..4].iter().map(|l| l.total).sum();
    let last: f64 = log[36..].iter().map(|l| l.total).sum();
    assert!(last < first, "{first} → {last}");
}

#[test]
fn prediction_shapes_follow_the_input() {
    let (model, samples) = setup(ModelConfig::default(), 1);
    let s = &samples[0];
    let p = predict(&model, &s.graphs, &s.prompt, &s.visuals).unwrap();
    assert_eq!(p.caption_ids[0], BOS);
    assert!(p.caption_ids.len() <= model.config.max_caption_len);
    assert_eq!(p.frames.len(), s.visuals.len());
    for (f, g) in p.frames.iter().zip(&s.graphs) {
        assert!(f.node_ids.len() <= model.config.slots);
        assert!(f.node_ids.iter().all(|id| g.node(*id).is_some()));
        for (probs, v) in f.probs.iter().zip(&f.v) {
            assert_eq!(probs.len(), 64 * 64);
            assert_eq!(v.len(), model.config.caption_positions);
            assert!(v.iter().all(|x| *x > 0.0 && *x < 1.0));
        }
    }
    let vp = p.to_video_prediction(&model.vocab).unwrap();
    assert!(vp.instances.iter().all(|i| i.masks.len() == s.visuals.len()));
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    assert!(ModelConfig { heads: 5, ..ModelConfig::default() }.validate().is_err());
    assert!(ModelConfig { lambda: -1.0, ..ModelConfig::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { schedule: Schedule::Cosine { floor: 2.0 }, ..TrainConfig::default() }.validate().is_err());
}

#[test]
fn adam_matches_scalar_update() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
    let cfg = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
    let mut adam = Adam::new(&store);
    let g = [0.5, -0.25];
    let (mut m, mut v, mut w) = ([0.0; 2], [0.0; 2], [1.0, -2.0]);
    for t in 1..=3 {
        adam.update(&mut store, &[Some(Tensor::new(vec![1, 2], g.to_vec()).unwrap())], &cfg).unwrap();
        for k in 0..2 {
            m[k] = 0.9 * m[k] + 0.1 * g[k];
            v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
            let mh = m[k] / (1.0 - 0.9f64.powi(t));
            let vh = v[k] / (1.0 - 0.999f64.powi(t));
            w[k] -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
    }
    for k in 0..2 {
        assert!((store.get(id).data()[k] - w[k]).abs() < 1e-12);
    }
}

#[test]
fn cosine_schedule_endpoints() {
    let cfg = TrainConfig { learning_rate: 1.0, steps: 100, schedule: Schedule::Cosine { floor: 0.1 }, ..TrainConfig::default() };
    assert_eq!(cfg.rate_at(1), 1.0);
    assert!((cfg.rate_at(51) - 0.55).abs() < 1e-12);
    assert!((cfg.rate_at(101) - 0.1).abs() < 1e-12);
    assert!((cfg.rate_at(500) - 0.1).abs() < 1e-12);
    assert_eq!(TrainConfig::default().rate_at(7), TrainConfig::default().learning_rate);
}

#[test]
fn epochs_visit_every_sample_once() {
    for epoch in 0..5 {
        let mut o = epoch_order(3, epoch, 17);
        o.sort();
        assert_eq!(o, (0..17).collect::<Vec<_>>());
    }
    assert_ne!(epoch_order(3, 0, 17), epoch_order(3, 1, 17));
    assert_eq!(epoch_order(3, 2, 17), epoch_order(3, 2, 17));
    let cfg = TrainConfig { batch_size: 2, seed: 3, ..TrainConfig::default() };
    let mut seen = Vec::new();
    for step in 0..5 {
        seen.extend(Cursor { step }.batch(&cfg, 10));
    }
    seen.sort();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
}
