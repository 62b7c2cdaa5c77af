mod common;

use common::*;
use diia::autodiff::Graph;
use diia::data::{bayes_accuracy, generate_dataset, GenConfig, Instance, Observed};
use diia::model::diia::{conditional_gates, inter_modality, intra_modality, mha_forward};
use diia::model::{
    diia_forward, encode_audio, encode_text, init_params, mkd_block_forward, mkd_loss, predictor_forward, DiiaOutputs,
    Modality, ModelConfig,
};
use diia::params::ParamTree;
use diia::tensor::Tensor;
use diia::training::{
    conventional_pass, ensemble_answer, multimodal_pass, student_pass, Checkpoint, SeedState, StudentInput,
    TrainConfig, TrainMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
}

fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

fn small_config(d: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        dropout: 0.0,
        d_ff: 3 * d,
        ..ModelConfig::new(d, heads, 20)
    }
}

#[test]
fn mha_single_head_two_by_two_matches_hand_values() {
    let mut p = ParamTree::new();
    p.insert("u.head0.query", t(&[&[1.0, 0.5], &[-0.5, 1.0]])).unwrap();
    p.insert("u.head0.key", t(&[&[0.2, 0.0], &[0.0, 0.3]])).unwrap();
    p.insert("u.head0.value", t(&[&[1.0, 1.0], &[0.0, 2.0]])).unwrap();
    let cfg = ModelConfig::new(2, 1, 16);
    let xq = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let xk = t(&[&[1.0, 2.0], &[3.0, -1.0]]);
    let xv = t(&[&[0.5, -1.0], &[2.0, 0.0]]);

    let mut g = Graph::new();
    let (q, k, v) = (g.constant(xq.clone()).unwrap(), g.constant(xk.clone()).unwrap(), g.constant(xv.clone()).unwrap());
    let (out, maps) = mha_forward(&mut g, &p, "u", &cfg, q, k, v).unwrap();

    let weights = [[0.5088379141679517, 0.49116208583204846], [0.6852095359316166, 0.3147904640683834]];
    let expected = [[1.2367431287480728, 0.21906730041216949], [0.9721856961025751, -0.398233375760658]];
    let frozen_w: Mat = weights.iter().map(|r| r.to_vec()).collect();
    let frozen_o: Mat = expected.iter().map(|r| r.to_vec()).collect();
    assert!(max_abs_diff(&frozen_w, g.value(maps[0])) < 1e-10);
    assert!(max_abs_diff(&frozen_o, g.value(out)) < 1e-10);

    let (oracle, oracle_maps) = mha(&p, "u", 1, &mat(&xq), &mat(&xk), &mat(&xv));
    assert!(max_abs_diff(&oracle, g.value(out)) < 1e-10);
    assert!(max_abs_diff(&oracle_maps[0], g.value(maps[0])) < 1e-10);
}

#[test]
fn mha_multi_head_matches_oracle() {
    let cfg = small_config(6, 3);
    let p = init_params(&cfg, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (q, kv) = (random(&mut rng, 4, 6), random(&mut rng, 5, 6));
    let mut g = Graph::new();
    let (qv, kvv) = (g.constant(tensor(&q)).unwrap(), g.constant(tensor(&kv)).unwrap());
    let prefix = "diia.block0.inter.audio.mha";
    let (out, maps) = mha_forward(&mut g, &p, prefix, &cfg, qv, kvv, kvv).unwrap();
    let (oracle, oracle_maps) = mha(&p, prefix, 3, &q, &kv, &kv);
    assert!(max_abs_diff(&oracle, g.value(out)) < 1e-10);
    for (o, m) in oracle_maps.iter().zip(&maps) {
        assert!(max_abs_diff(o, g.value(*m)) < 1e-10);
    }
}

#[test]
fn inter_and_intra_stages_match_composition_oracle() {
    for (d, heads, m, n, seed) in [(4, 2, 3, 2, 1), (8, 2, 5, 7, 2), (6, 3, 1, 4, 3)] {
        let cfg = small_config(d, heads);
        let p = init_params(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let (a, pass) = (random(&mut rng, m, d), random(&mut rng, n, d));
        let mut g = Graph::new();
        let (av, pv) = (g.constant(tensor(&a)).unwrap(), g.constant(tensor(&pass)).unwrap());
        let inter = inter_modality(&mut g, &p, &cfg, 0, av, pv).unwrap();
        let (ga, gp) = conditional_gates(&mut g, &p, 0, av, pv).unwrap();
        let intra = intra_modality(&mut g, &p, &cfg, 0, inter.a_inter, inter.p_inter, ga, gp).unwrap();

        let o = fusion(&p, 0, heads, &a, &pass);
        assert!(max_abs_diff(&o.a_inter, g.value(inter.a_inter)) < 1e-9);
        assert!(max_abs_diff(&o.p_inter, g.value(inter.p_inter)) < 1e-9);
        assert!(max_abs_diff_vec(&o.gate_a, g.value(ga).data()) < 1e-12);
        assert!(max_abs_diff_vec(&o.gate_p, g.value(gp).data()) < 1e-12);
        assert!(max_abs_diff(&o.a_intra, g.value(intra.a_intra)) < 1e-9);
        assert!(max_abs_diff(&o.p_intra, g.value(intra.p_intra)) < 1e-9);
    }
}

#[test]
fn stacked_blocks_feed_intra_outputs_forward() {
    let cfg = ModelConfig {
        depth: 2,
        ..small_config(4, 2)
    };
    let p = init_params(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (a, pass) = (random(&mut rng, 3, 4), random(&mut rng, 5, 4));
    let mut g = Graph::new();
    let (av, pv) = (g.constant(tensor(&a)).unwrap(), g.constant(tensor(&pass)).unwrap());
    let out = diia_forward(&mut g, &p, &cfg, av, pv).unwrap();
    let first = fusion(&p, 0, 2, &a, &pass);
    let second = fusion(&p, 1, 2, &first.a_intra, &first.p_intra);
    assert!(max_abs_diff(&second.a_intra, g.value(out.a_intra())) < 1e-9);
    assert!(max_abs_diff(&second.p_intra, g.value(out.p_intra())) < 1e-9);
}

#[test]
fn predictor_matches_oracle() {
    let cfg = small_config(8, 2);
    let p = init_params(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let fused = random(&mut rng, 6, 8);
    let question = random(&mut rng, 2, 8);
    let choices: Vec<Mat> = (0..4).map(|i| random(&mut rng, 1 + i % 2, 8)).collect();
    let mut g = Graph::new();
    let f = g.constant(tensor(&fused)).unwrap();
    let q = g.constant(tensor(&question)).unwrap();
    let c: Vec<_> = choices.iter().map(|m| g.constant(tensor(m)).unwrap()).collect();
    let out = predictor_forward(&mut g, &p, f, q, &[c[0], c[1], c[2], c[3]]).unwrap();
    let oracle = predictor(&p, &fused, &question, &choices);
    assert!(max_abs_diff_vec(&oracle, g.value(out.logits).data()) < 1e-10);
    let w = g.value(out.pool_weights).data();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn distillation_block_and_loss_match_oracle() {
    let cfg = small_config(6, 2);
    let p = init_params(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let encoded = random(&mut rng, 5, 6);
    let (t_inter, t_intra) = (random(&mut rng, 5, 6), random(&mut rng, 5, 6));
    let mut g = Graph::new();
    let e = g.constant(tensor(&encoded)).unwrap();
    let s = mkd_block_forward(&mut g, &p, Modality::Passage, e).unwrap();
    let inter = mlp(&p, "mkd.passage.mlp1", &encoded);
    let intra = mlp(&p, "mkd.passage.mlp2", &inter);
    assert!(max_abs_diff(&inter, g.value(s.inter)) < 1e-12);
    assert!(max_abs_diff(&intra, g.value(s.intra)) < 1e-12);

    let zeros = Tensor::zeros(vec![1, 6]);
    let teacher = DiiaOutputs {
        a_inter: zeros.clone(),
        p_inter: tensor(&t_inter),
        a_intra: zeros.clone(),
        p_intra: tensor(&t_intra),
        gate_a: zeros.clone(),
        gate_p: zeros,
        inter_audio_maps: vec![],
        inter_passage_maps: vec![],
        intra_audio_maps: vec![],
        intra_passage_maps: vec![],
    };
    let loss = mkd_loss(&mut g, &teacher, &s).unwrap();
    let expected = mse(&t_inter, &inter) + mse(&t_intra, &intra);
    assert!((g.value(loss).item().unwrap() - expected).abs() < 1e-12);
}

#[test]
fn distillation_loss_of_ones_against_zero_teacher_is_two() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::filled(vec![3, 4], 1.0)).unwrap();
    let s = diia::model::MkdVars {
        inter: ones,
        intra: ones,
        modality: Modality::Audio,
    };
    let z = Tensor::zeros(vec![3, 4]);
    let teacher = DiiaOutputs {
        a_inter: z.clone(),
        p_inter: z.clone(),
        a_intra: z.clone(),
        p_intra: z.clone(),
        gate_a: z.clone(),
        gate_p: z,
        inter_audio_maps: vec![],
        inter_passage_maps: vec![],
        intra_audio_maps: vec![],
        intra_passage_maps: vec![],
    };
    let l = mkd_loss(&mut g, &teacher, &s).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 2.0);
}

fn instances(n: usize, seed: u64) -> Vec<Instance> {
    let cfg = GenConfig {
        seed,
        train: n,
        dev: 0,
        test: 0,
        vocab: 20,
        ..GenConfig::default()
    };
    generate_dataset(&cfg).unwrap().train
}

fn question_and_choices(p: &ParamTree, inst: &Instance) -> (Mat, Vec<Mat>) {
    (embed(p, &inst.question), inst.choices.iter().map(|c| embed(p, c)).collect())
}

#[test]
fn full_multimodal_pass_matches_oracle() {
    let cfg = small_config(8, 2);
    let p = init_params(&cfg, 21).unwrap();
    for inst in instances(5, 22) {
        let mut g = Graph::new();
        let pass = multimodal_pass(&mut g, &p, &cfg, &inst).unwrap();
        let a = project_audio(&p, &inst.audio);
        let text = embed(&p, &inst.passage);
        let f = fusion(&p, 0, 2, &a, &text);
        let (q, c) = question_and_choices(&p, &inst);
        assert!(max_abs_diff_vec(&predictor(&p, &f.a_intra, &q, &c), g.value(pass.y_a).data()) < 1e-9);
        assert!(max_abs_diff_vec(&predictor(&p, &f.p_intra, &q, &c), g.value(pass.y_p).data()) < 1e-9);
    }
}

#[test]
fn conventional_and_student_passes_match_oracle() {
    let cfg = small_config(8, 2);
    let p = init_params(&cfg, 31).unwrap();
    for inst in instances(4, 32) {
        let (q, c) = question_and_choices(&p, &inst);
        let text = embed(&p, &inst.passage);
        let audio = project_audio(&p, &inst.audio);

        let mut g = Graph::new();
        let y = conventional_pass(&mut g, &p, &cfg, &inst, Modality::Passage).unwrap();
        assert!(max_abs_diff_vec(&predictor(&p, &text, &q, &c), g.value(y).data()) < 1e-10);
        let y = conventional_pass(&mut g, &p, &cfg, &inst, Modality::Audio).unwrap();
        assert!(max_abs_diff_vec(&predictor(&p, &audio, &q, &c), g.value(y).data()) < 1e-10);

        let s = student_pass(&mut g, &p, &cfg, &inst, Modality::Passage, StudentInput::Intra).unwrap();
        let inter = mlp(&p, "mkd.passage.mlp1", &text);
        let intra = mlp(&p, "mkd.passage.mlp2", &inter);
        assert!(max_abs_diff_vec(&predictor(&p, &intra, &q, &c), g.value(s.logits).data()) < 1e-10);
        let s = student_pass(&mut g, &p, &cfg, &inst, Modality::Audio, StudentInput::Inter).unwrap();
        let inter = mlp(&p, "mkd.audio.mlp1", &audio);
        assert!(max_abs_diff_vec(&predictor(&p, &inter, &q, &c), g.value(s.logits).data()) < 1e-10);
    }
}

#[test]
fn encoders_match_oracle() {
    let cfg = small_config(4, 2);
    let p = init_params(&cfg, 41).unwrap();
    let inst = &instances(1, 42)[0];
    let mut g = Graph::new();
    let e = encode_text(&mut g, &p, &cfg, &inst.passage).unwrap();
    assert!(max_abs_diff(&embed(&p, &inst.passage), g.value(e)) == 0.0);
    let a = encode_audio(&mut g, &p, &cfg, &inst.audio_tensor().unwrap()).unwrap();
    assert!(max_abs_diff(&project_audio(&p, &inst.audio), g.value(a)) < 1e-12);
}

fn conventional_checkpoint(mode: TrainMode, seed: u64) -> Checkpoint {
    let train = TrainConfig {
        d: 8,
        heads: 2,
        d_ff: 16,
        mode,
        seed,
        ..TrainConfig::default()
    };
    let model = train.model_config(20);
    Checkpoint {
        params: init_params(&model, seed).unwrap(),
        train,
        model,
        epoch: 0,
        dev_accuracy: 0.0,
        seed_state: SeedState {
            seed,
            epochs_completed: 0,
            adam_steps: 0,
        },
        distilled_text: false,
        distilled_audio: false,
    }
}

#[test]
fn ensemble_matches_averaging_oracle() {
    let text = conventional_checkpoint(TrainMode::ConventionalText, 51);
    let audio = conventional_checkpoint(TrainMode::ConventionalAudio, 52);
    for inst in instances(40, 53) {
        let (qt, ct) = question_and_choices(&text.params, &inst);
        let (qa, ca) = question_and_choices(&audio.params, &inst);
        let pt = softmax(&predictor(&text.params, &embed(&text.params, &inst.passage), &qt, &ct));
        let pa = softmax(&predictor(&audio.params, &project_audio(&audio.params, &inst.audio), &qa, &ca));
        let mean: Vec<f64> = pt.iter().zip(&pa).map(|(a, b)| (a + b) / 2.0).collect();
        let mut best = 0;
        for i in 1..4 {
            if mean[i] > mean[best] {
                best = i;
            }
        }
        assert_eq!(ensemble_answer(&inst, &text, &audio).unwrap(), best);
    }
}

#[test]
fn ensemble_of_identical_models_follows_either() {
    let text = conventional_checkpoint(TrainMode::ConventionalText, 61);
    let mut audio = conventional_checkpoint(TrainMode::ConventionalAudio, 61);
    // Zero the bilinear map so the audio model is uniform everywhere.
    audio.params.get_mut("predictor.bilinear").unwrap().data_mut().fill(0.0);
    for inst in instances(20, 62) {
        let (answer, _) = diia::training::infer(&inst, &text, diia::training::InferMode::Text).unwrap();
        assert_eq!(ensemble_answer(&inst, &text, &audio).unwrap(), answer);
    }
}

#[test]
fn bayes_formulas_match_enumeration() {
    for rho in [0.0, 0.1, 0.25, 0.5, 0.8, 1.0] {
        let cfg = GenConfig {
            rho,
            ..GenConfig::default()
        };
        assert!((bayes_accuracy(&cfg, Observed::Text) - enumerated_bayes(rho, true, false)).abs() < 1e-12);
        assert!((bayes_accuracy(&cfg, Observed::Audio) - enumerated_bayes(rho, false, true)).abs() < 1e-12);
        assert!((bayes_accuracy(&cfg, Observed::Both) - enumerated_bayes(rho, true, true)).abs() < 1e-12);
    }
    assert!((enumerated_bayes(0.5, true, false) - 0.75).abs() < 1e-12);
    assert!((enumerated_bayes(0.5, false, true) - 0.375).abs() < 1e-12);
    assert!((enumerated_bayes(1.0, true, false) - 0.5).abs() < 1e-12);
    assert!((enumerated_bayes(1.0, false, true) - 0.5).abs() < 1e-12);
    assert!((enumerated_bayes(0.0, true, false) - 1.0).abs() < 1e-12);
}
