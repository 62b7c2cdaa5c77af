//! Inter- and intra-modality attention.
//!
//! Stage one lets each modality attend over the other (`A` queries `P`, `P`
//! queries `A`). Stage two is self-attention inside each modality, with
//! queries and keys scaled by `(1 + G)` where `G` is a sigmoid gate computed
//! from the *other* modality's mean-pooled encoder features. Every
//! sub-layer is wrapped as `layernorm(residual + dropout(sublayer))`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

use super::{insert_mlp, insert_norm, Init, Modality, ModelConfig};

pub fn block_prefix(block: usize) -> String {
    format!("diia.block{block}")
}

pub(crate) fn insert_block_params(tree: &mut ParamTree, init: &mut Init, cfg: &ModelConfig, block: usize) -> Result<()> {
    let base = block_prefix(block);
    let (d, dk) = (cfg.d, cfg.head_dim());
    for unit in ["inter.audio", "inter.passage", "intra.audio", "intra.passage"] {
        let prefix = format!("{base}.{unit}");
        for h in 0..cfg.heads {
            for role in ["query", "key", "value"] {
                tree.insert(format!("{prefix}.mha.head{h}.{role}"), init.projection(d, dk))?;
            }
        }
        insert_norm(tree, &format!("{prefix}.mha_norm"), d)?;
        insert_mlp(tree, init, &format!("{prefix}.ffn"), d, cfg.d_ff)?;
        insert_norm(tree, &format!("{prefix}.ffn_norm"), d)?;
    }
    tree.insert(format!("{base}.gate.audio"), init.projection(d, d))?;
    tree.insert(format!("{base}.gate.passage"), init.projection(d, d))?;
    Ok(())
}

/// Multi-head scaled dot-product attention without an output projection:
/// head outputs are concatenated directly. Returns the `l×d` output and one
/// `l×k` weight matrix per head.
pub fn mha_forward(
    g: &mut Graph,
    params: &ParamTree,
    prefix: &str,
    cfg: &ModelConfig,
    query: Var,
    key: Var,
    value: Var,
) -> Result<(Var, Vec<Var>)> {
    cfg.validate()?;
    for v in [query, key, value] {
        if g.value(v).cols() != cfg.d {
            return Err(Error::Shape {
                op: "mha",
                lhs: g.value(v).shape().to_vec(),
                rhs: vec![cfg.d],
            });
        }
    }
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut outputs = Vec::with_capacity(cfg.heads);
    let mut maps = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let wq = g.param(params, &format!("{prefix}.head{h}.query"))?;
        let wk = g.param(params, &format!("{prefix}.head{h}.key"))?;
        let wv = g.param(params, &format!("{prefix}.head{h}.value"))?;
        let q = g.matmul(query, wq)?;
        let k = g.matmul(key, wk)?;
        let v = g.matmul(value, wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax_rows(scores)?;
        outputs.push(g.matmul(weights, v)?);
        maps.push(weights);
    }
    let out = g.concat_cols(&outputs)?;
    Ok((out, maps))
}

/// `layernorm(input + dropout(sublayer_output))`.
pub fn sublayer_apply(
    g: &mut Graph,
    params: &ParamTree,
    norm_prefix: &str,
    input: Var,
    sublayer_output: Var,
    dropout: f64,
) -> Result<Var> {
    let dropped = g.dropout(sublayer_output, dropout)?;
    let sum = g.add(input, dropped)?;
    let gain = g.param(params, &format!("{norm_prefix}.gain"))?;
    let bias = g.param(params, &format!("{norm_prefix}.bias"))?;
    g.layer_norm(sum, gain, bias)
}

/// Row-wise `relu(x W_in + b_in) W_out + b_out`.
pub fn ffn(g: &mut Graph, params: &ParamTree, prefix: &str, x: Var) -> Result<Var> {
    let w_in = g.param(params, &format!("{prefix}.w_in"))?;
    let b_in = g.param(params, &format!("{prefix}.b_in"))?;
    let w_out = g.param(params, &format!("{prefix}.w_out"))?;
    let b_out = g.param(params, &format!("{prefix}.b_out"))?;
    let h = g.matmul(x, w_in)?;
    let h = g.add_row(h, b_in)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, w_out)?;
    g.add_row(o, b_out)
}

/// MHA followed by FFN, each wrapped by [`sublayer_apply`]. The attention
/// residual is `residual`; the FFN residual is its own input.
#[allow(clippy::too_many_arguments)]
fn attention_unit(
    g: &mut Graph,
    params: &ParamTree,
    prefix: &str,
    cfg: &ModelConfig,
    query: Var,
    key: Var,
    value: Var,
    residual: Var,
) -> Result<(Var, Vec<Var>)> {
    let (att, maps) = mha_forward(g, params, &format!("{prefix}.mha"), cfg, query, key, value)?;
    let h = sublayer_apply(g, params, &format!("{prefix}.mha_norm"), residual, att, cfg.dropout)?;
    let f = ffn(g, params, &format!("{prefix}.ffn"), h)?;
    let out = sublayer_apply(g, params, &format!("{prefix}.ffn_norm"), h, f, cfg.dropout)?;
    Ok((out, maps))
}

#[derive(Debug, Clone)]
pub struct InterVars {
    pub a_inter: Var,
    pub p_inter: Var,
    /// Per head, `M×N`: audio frames attending over passage tokens.
    pub audio_maps: Vec<Var>,
    /// Per head, `N×M`: passage tokens attending over audio frames.
    pub passage_maps: Vec<Var>,
}

/// `A_inter = FFN(MHA(A, P, P))`, `P_inter = FFN(MHA(P, A, A))`.
pub fn inter_modality(g: &mut Graph, params: &ParamTree, cfg: &ModelConfig, block: usize, a: Var, p: Var) -> Result<InterVars> {
    let base = block_prefix(block);
    let (a_inter, audio_maps) = attention_unit(g, params, &format!("{base}.inter.audio"), cfg, a, p, p, a)?;
    let (p_inter, passage_maps) = attention_unit(g, params, &format!("{base}.inter.passage"), cfg, p, a, a, p)?;
    Ok(InterVars {
        a_inter,
        p_inter,
        audio_maps,
        passage_maps,
    })
}

/// `G_A = σ(mean(A) W_A)`, `G_P = σ(mean(P) W_P)`, each `1×d`.
pub fn conditional_gates(g: &mut Graph, params: &ParamTree, block: usize, a: Var, p: Var) -> Result<(Var, Var)> {
    let base = block_prefix(block);
    let mut gate = |x: Var, path: String| -> Result<Var> {
        let w = g.param(params, &path)?;
        let pooled = g.mean_rows(x)?;
        let z = g.matmul(pooled, w)?;
        g.sigmoid(z)
    };
    let gate_a = gate(a, format!("{base}.gate.audio"))?;
    let gate_p = gate(p, format!("{base}.gate.passage"))?;
    Ok((gate_a, gate_p))
}

#[derive(Debug, Clone)]
pub struct IntraVars {
    pub a_intra: Var,
    pub p_intra: Var,
    pub audio_maps: Vec<Var>,
    pub passage_maps: Vec<Var>,
}

/// Gated self-attention: `Â = (1+G_P)⊙A_inter`, `A_intra = FFN(MHA(Â, Â, A_inter))`
/// and symmetrically `P̂ = (1+G_A)⊙P_inter`.
#[allow(clippy::too_many_arguments)]
pub fn intra_modality(
    g: &mut Graph,
    params: &ParamTree,
    cfg: &ModelConfig,
    block: usize,
    a_inter: Var,
    p_inter: Var,
    gate_a: Var,
    gate_p: Var,
) -> Result<IntraVars> {
    let base = block_prefix(block);
    let scale_a = g.add_scalar(gate_p, 1.0)?;
    let a_hat = g.mul_row(a_inter, scale_a)?;
    let scale_p = g.add_scalar(gate_a, 1.0)?;
    let p_hat = g.mul_row(p_inter, scale_p)?;
    let (a_intra, audio_maps) =
        attention_unit(g, params, &format!("{base}.intra.audio"), cfg, a_hat, a_hat, a_inter, a_inter)?;
    let (p_intra, passage_maps) =
        attention_unit(g, params, &format!("{base}.intra.passage"), cfg, p_hat, p_hat, p_inter, p_inter)?;
    Ok(IntraVars {
        a_intra,
        p_intra,
        audio_maps,
        passage_maps,
    })
}

/// Graph handles for one fusion pass (the last block when stacked).
#[derive(Debug, Clone)]
pub struct DiiaVars {
    pub inter: InterVars,
    pub gate_a: Var,
    pub gate_p: Var,
    pub intra: IntraVars,
}

impl DiiaVars {
    pub fn a_intra(&self) -> Var {
        self.intra.a_intra
    }

    pub fn p_intra(&self) -> Var {
        self.intra.p_intra
    }

    pub fn materialize(&self, g: &Graph) -> DiiaOutputs {
        let vals = |vs: &[Var]| vs.iter().map(|&v| g.value(v).clone()).collect();
        DiiaOutputs {
            a_inter: g.value(self.inter.a_inter).clone(),
            p_inter: g.value(self.inter.p_inter).clone(),
            a_intra: g.value(self.intra.a_intra).clone(),
            p_intra: g.value(self.intra.p_intra).clone(),
            gate_a: g.value(self.gate_a).clone(),
            gate_p: g.value(self.gate_p).clone(),
            inter_audio_maps: vals(&self.inter.audio_maps),
            inter_passage_maps: vals(&self.inter.passage_maps),
            intra_audio_maps: vals(&self.intra.audio_maps),
            intra_passage_maps: vals(&self.intra.passage_maps),
        }
    }
}

/// Values of a completed fusion pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DiiaOutputs {
    pub a_inter: Tensor,
    pub p_inter: Tensor,
    pub a_intra: Tensor,
    pub p_intra: Tensor,
    pub gate_a: Tensor,
    pub gate_p: Tensor,
    pub inter_audio_maps: Vec<Tensor>,
    pub inter_passage_maps: Vec<Tensor>,
    pub intra_audio_maps: Vec<Tensor>,
    pub intra_passage_maps: Vec<Tensor>,
}

impl DiiaOutputs {
    /// The (inter, intra) pair a student of `modality` imitates.
    pub fn teacher(&self, modality: Modality) -> (&Tensor, &Tensor) {
        match modality {
            Modality::Audio => (&self.a_inter, &self.a_intra),
            Modality::Passage => (&self.p_inter, &self.p_intra),
        }
    }

    pub fn all_maps(&self) -> impl Iterator<Item = &Tensor> {
        self.inter_audio_maps
            .iter()
            .chain(&self.inter_passage_maps)
            .chain(&self.intra_audio_maps)
            .chain(&self.intra_passage_maps)
    }
}

/// Inter-modality attention, then gates from the block inputs, then gated
/// intra-modality attention. Stacked blocks feed each block's intra outputs
/// to the next.
pub fn diia_forward(g: &mut Graph, params: &ParamTree, cfg: &ModelConfig, a: Var, p: Var) -> Result<DiiaVars> {
    let (mut a_in, mut p_in) = (a, p);
    let mut last = None;
    for block in 0..cfg.depth {
        let inter = inter_modality(g, params, cfg, block, a_in, p_in)?;
        let (gate_a, gate_p) = conditional_gates(g, params, block, a_in, p_in)?;
        let intra = intra_modality(g, params, cfg, block, inter.a_inter, inter.p_inter, gate_a, gate_p)?;
        a_in = intra.a_intra;
        p_in = intra.p_intra;
        last = Some(DiiaVars {
            inter,
            gate_a,
            gate_p,
            intra,
        });
    }
    last.ok_or_else(|| Error::Config("depth must be at least 1".into()))
}
