use std::time::{Duration, Instant};

use diia::autodiff::Graph;
use diia::gradcheck::grad_check;
use diia::model::diia::conditional_gates;
use diia::model::{init_params, predictor_forward, Modality};
use diia::tensor::Tensor;
use diia::training::{conventional_pass, student_pass, StudentInput};
use diia::verify::{model_grad_checks, tiny_instance, SuiteConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn full_model_suite_passes_every_coordinate() {
    let start = Instant::now();
    let cfg = SuiteConfig::default();
    let reports = model_grad_checks(&cfg).unwrap();
    assert_eq!(reports.len(), 3);
    for (name, report) in &reports {
        assert!(report.passed(), "{name}\n{report}");
        assert!(report.tensors.iter().all(|t| t.coordinates > 0), "{name}");
    }
    let (_, mm) = &reports[0];
    for prefix in ["encoder.", "diia.block0.inter", "diia.block0.gate", "diia.block0.intra", "predictor."] {
        assert!(mm.tensors.iter().any(|t| t.path.starts_with(prefix)), "{prefix} not checked");
    }
    assert!(mm.tensors.iter().all(|t| !t.path.starts_with("mkd.")));
    assert!(start.elapsed() < Duration::from_secs(30));
}

#[test]
fn suite_passes_across_seeds_with_sampling() {
    for seed in 1..4 {
        let cfg = SuiteConfig {
            seed,
            samples: 6,
            ..SuiteConfig::default()
        };
        for (name, report) in model_grad_checks(&cfg).unwrap() {
            assert!(report.passed(), "seed {seed} {name}\n{report}");
        }
    }
}

#[test]
fn gate_path_is_tight() {
    let cfg = SuiteConfig::default();
    let model = cfg.model_config();
    let mut params = init_params(&model, 5).unwrap();
    params.freeze_all_except(&["diia.block0.gate."]);
    let (a, p) = (random(1, 3, 8), random(2, 4, 8));
    let (wa, wp) = (random(3, 1, 8), random(4, 1, 8));
    let report = grad_check(
        |g, params| {
            let (av, pv) = (g.constant(a.clone())?, g.constant(p.clone())?);
            let (ga, gp) = conditional_gates(g, params, 0, av, pv)?;
            let (ca, cp) = (g.constant(wa.clone())?, g.constant(wp.clone())?);
            let (sa, sp) = (g.mul(ga, ca)?, g.mul(gp, cp)?);
            let s = g.add(sa, sp)?;
            g.sum(s)
        },
        &mut params,
        usize::MAX,
        1e-6,
        0,
    )
    .unwrap();
    assert_eq!(report.tensors.len(), 2);
    assert!(report.passed(), "{report}");
}

#[test]
fn predictor_alone_passes() {
    let model = SuiteConfig::default().model_config();
    let mut params = init_params(&model, 6).unwrap();
    params.freeze_all_except(&["predictor."]);
    let fused = random(7, 5, 8);
    let question = random(8, 2, 8);
    let choices: Vec<Tensor> = (0..4).map(|i| random(9 + i, 1 + i as usize % 2, 8)).collect();
    let report = grad_check(
        |g, params| {
            let f = g.constant(fused.clone())?;
            let q = g.constant(question.clone())?;
            let mut c = Vec::new();
            for t in &choices {
                c.push(g.constant(t.clone())?);
            }
            let out = predictor_forward(g, params, f, q, &[c[0], c[1], c[2], c[3]])?;
            g.cross_entropy(out.logits, 2)
        },
        &mut params,
        usize::MAX,
        1e-4,
        0,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn unimodal_paths_pass() {
    let cfg = SuiteConfig::default();
    let model = cfg.model_config();
    let inst = tiny_instance(cfg.frames, cfg.tokens, cfg.vocab, 3);
    for modality in [Modality::Passage, Modality::Audio] {
        let mut params = init_params(&model, 7).unwrap();
        params.freeze_prefix("diia.");
        params.freeze_prefix("mkd.");
        let report = grad_check(
            |g, p| {
                let y = conventional_pass(g, p, &model, &inst, modality)?;
                g.cross_entropy(y, inst.label)
            },
            &mut params,
            usize::MAX,
            1e-4,
            0,
        )
        .unwrap();
        assert!(report.passed(), "{}\n{report}", modality.name());

        let mut params = init_params(&model, 8).unwrap();
        params.freeze_prefix("diia.");
        let report = grad_check(
            |g, p| {
                let s = student_pass(g, p, &model, &inst, modality, StudentInput::Intra)?;
                g.cross_entropy(s.logits, inst.label)
            },
            &mut params,
            usize::MAX,
            1e-4,
            0,
        )
        .unwrap();
        assert!(report.passed(), "{} student\n{report}", modality.name());
    }
}

#[test]
fn frozen_teacher_gets_no_gradient_from_distillation() {
    let cfg = SuiteConfig::default();
    let model = cfg.model_config();
    let inst = tiny_instance(cfg.frames, cfg.tokens, cfg.vocab, 4);
    let mut params = init_params(&model, 9).unwrap();
    params.freeze_all_except(&["mkd.audio."]);
    let mut tg = Graph::new();
    let teacher = diia::training::multimodal_pass(&mut tg, &params, &model, &inst)
        .unwrap()
        .diia
        .materialize(&tg);
    let mut g = Graph::new();
    let s = student_pass(&mut g, &params, &model, &inst, Modality::Audio, StudentInput::Intra).unwrap();
    let loss = diia::model::mkd_loss(&mut g, &teacher, &s.students).unwrap();
    let grads = g.param_grads(&g.backward(loss).unwrap());
    assert!(!grads.is_empty());
    assert!(grads.keys().all(|k| k.starts_with("mkd.audio.")), "{:?}", grads.keys().collect::<Vec<_>>());
}
