//! Straight-line reference implementations on nested `Vec`s. They share no
//! code with the library beyond reading parameter values.

#![allow(dead_code)]

use diia::params::ParamTree;
use diia::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub const LN_EPS: f64 = 1e-5;

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = (t.rows(), t.cols());
    (0..r).map(|i| (0..c).map(|j| t.get(i, j)).collect()).collect()
}

pub fn param(p: &ParamTree, path: &str) -> Mat {
    mat(p.get(path).unwrap())
}

pub fn vector(p: &ParamTree, path: &str) -> Vec<f64> {
    p.get(path).unwrap().data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter().map(|r| softmax(r)).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

pub fn scale(a: &Mat, s: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

pub fn layer_norm(a: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

pub fn mean_rows(a: &Mat) -> Vec<f64> {
    let n = a.len() as f64;
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `relu(x W_in + b_in) W_out + b_out`, row by row.
pub fn mlp(p: &ParamTree, prefix: &str, x: &Mat) -> Mat {
    let w_in = param(p, &format!("{prefix}.w_in"));
    let b_in = vector(p, &format!("{prefix}.b_in"));
    let w_out = param(p, &format!("{prefix}.w_out"));
    let b_out = vector(p, &format!("{prefix}.b_out"));
    let h: Mat = matmul(x, &w_in)
        .into_iter()
        .map(|r| r.iter().zip(&b_in).map(|(v, b)| (v + b).max(0.0)).collect())
        .collect();
    matmul(&h, &w_out)
        .into_iter()
        .map(|r| r.iter().zip(&b_out).map(|(v, b)| v + b).collect())
        .collect()
}

/// Concatenated heads of `softmax(q W_Q (k W_K)ᵀ / √d_k) · v W_V`, plus the weight matrices.
pub fn mha(p: &ParamTree, prefix: &str, heads: usize, q: &Mat, k: &Mat, v: &Mat) -> (Mat, Vec<Mat>) {
    let mut out: Mat = vec![Vec::new(); q.len()];
    let mut maps = Vec::new();
    for h in 0..heads {
        let wq = param(p, &format!("{prefix}.head{h}.query"));
        let wk = param(p, &format!("{prefix}.head{h}.key"));
        let wv = param(p, &format!("{prefix}.head{h}.value"));
        let dk = wq[0].len() as f64;
        let scores = scale(&matmul(&matmul(q, &wq), &transpose(&matmul(k, &wk))), 1.0 / dk.sqrt());
        let w = softmax_rows(&scores);
        let o = matmul(&w, &matmul(v, &wv));
        for (row, part) in out.iter_mut().zip(o) {
            row.extend(part);
        }
        maps.push(w);
    }
    (out, maps)
}

/// One attention unit: post-norm MHA sublayer on `residual`, then post-norm FFN.
pub fn unit(p: &ParamTree, prefix: &str, heads: usize, q: &Mat, k: &Mat, v: &Mat, residual: &Mat) -> Mat {
    let (att, _) = mha(p, &format!("{prefix}.mha"), heads, q, k, v);
    let norm = |name: &str, x: &Mat| {
        layer_norm(x, &vector(p, &format!("{prefix}.{name}.gain")), &vector(p, &format!("{prefix}.{name}.bias")))
    };
    let h = norm("mha_norm", &add(residual, &att));
    let f = mlp(p, &format!("{prefix}.ffn"), &h);
    norm("ffn_norm", &add(&h, &f))
}

pub fn gate(p: &ParamTree, path: &str, x: &Mat) -> Vec<f64> {
    let z = matmul(&vec![mean_rows(x)], &param(p, path));
    z[0].iter().map(|v| sigmoid(*v)).collect()
}

pub fn scale_rows(x: &Mat, s: &[f64]) -> Mat {
    x.iter().map(|r| r.iter().zip(s).map(|(v, g)| v * (1.0 + g)).collect()).collect()
}

pub struct FusionOracle {
    pub a_inter: Mat,
    pub p_inter: Mat,
    pub gate_a: Vec<f64>,
    pub gate_p: Vec<f64>,
    pub a_intra: Mat,
    pub p_intra: Mat,
}

/// One fusion block written out step by step.
pub fn fusion(p: &ParamTree, block: usize, heads: usize, a: &Mat, pass: &Mat) -> FusionOracle {
    let b = format!("diia.block{block}");
    let a_inter = unit(p, &format!("{b}.inter.audio"), heads, a, pass, pass, a);
    let p_inter = unit(p, &format!("{b}.inter.passage"), heads, pass, a, a, pass);
    let gate_a = gate(p, &format!("{b}.gate.audio"), a);
    let gate_p = gate(p, &format!("{b}.gate.passage"), pass);
    let a_hat = scale_rows(&a_inter, &gate_p);
    let p_hat = scale_rows(&p_inter, &gate_a);
    let a_intra = unit(p, &format!("{b}.intra.audio"), heads, &a_hat, &a_hat, &a_inter, &a_inter);
    let p_intra = unit(p, &format!("{b}.intra.passage"), heads, &p_hat, &p_hat, &p_inter, &p_inter);
    FusionOracle {
        a_inter,
        p_inter,
        gate_a,
        gate_p,
        a_intra,
        p_intra,
    }
}

pub fn embed(p: &ParamTree, tokens: &[usize]) -> Mat {
    let table = param(p, "encoder.text.embedding");
    tokens.iter().map(|&t| table[t].clone()).collect()
}

pub fn project_audio(p: &ParamTree, frames: &Mat) -> Mat {
    let w = param(p, "encoder.audio.weight");
    let b = vector(p, "encoder.audio.bias");
    matmul(frames, &w)
        .into_iter()
        .map(|r| r.iter().zip(&b).map(|(v, c)| v + c).collect())
        .collect()
}

/// `c = softmax(F qᵀ)ᵀ F` with `q = mean(Q) W_pool`; score_i = `c W_bil mean(C_i)ᵀ`.
pub fn predictor(p: &ParamTree, fused: &Mat, question: &Mat, choices: &[Mat]) -> Vec<f64> {
    let q = matmul(&vec![mean_rows(question)], &param(p, "predictor.pool"));
    let scores: Vec<f64> = fused.iter().map(|r| r.iter().zip(&q[0]).map(|(a, b)| a * b).sum()).collect();
    let w = softmax(&scores);
    let d = fused[0].len();
    let c: Vec<f64> = (0..d).map(|j| fused.iter().zip(&w).map(|(r, wi)| wi * r[j]).sum()).collect();
    let projected = matmul(&vec![c], &param(p, "predictor.bilinear"));
    choices
        .iter()
        .map(|ch| projected[0].iter().zip(mean_rows(ch)).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn mse(a: &Mat, b: &Mat) -> f64 {
    let n = (a.len() * a[0].len()) as f64;
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n
}

pub fn max_abs_diff(a: &Mat, t: &Tensor) -> f64 {
    assert_eq!((a.len(), a[0].len()), (t.rows(), t.cols()), "shape");
    a.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, v)| (i, j, *v)))
        .map(|(i, j, v)| (v - t.get(i, j)).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs_diff_vec(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Bayes accuracy by enumerating the generative rule: every (kind, key or
/// pair, tone) outcome with its probability, grouped by what the observer
/// sees, scored by the best label per observation.
pub fn enumerated_bayes(rho: f64, sees_text: bool, sees_audio: bool) -> f64 {
    use std::collections::HashMap;
    // (what the text shows, what the audio shows) -> probability per label
    type Observation = (Option<(u8, usize)>, Option<usize>);
    let mut table: HashMap<Observation, [f64; 4]> = HashMap::new();
    for tone in 0..2 {
        for key in 0..4 {
            let pr = (1.0 - rho) * 0.25 * 0.5;
            let obs = (sees_text.then_some((0u8, key)), sees_audio.then_some(tone));
            table.entry(obs).or_insert([0.0; 4])[key] += pr;
        }
        for pair in 0..2 {
            let pr = rho * 0.5 * 0.5;
            let obs = (sees_text.then_some((1u8, pair)), sees_audio.then_some(tone));
            table.entry(obs).or_insert([0.0; 4])[2 * pair + tone] += pr;
        }
    }
    table.values().map(|p| p.iter().cloned().fold(0.0, f64::max)).sum()
}
