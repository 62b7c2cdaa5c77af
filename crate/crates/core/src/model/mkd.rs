//! Distillation students: two row-wise MLPs per modality that imitate the
//! fusion block's inter- and intra-stage outputs from one modality alone.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamTree;

use super::diia::{ffn, DiiaOutputs};
use super::{mkd_prefix, Modality};

#[derive(Debug, Clone, Copy)]
pub struct MkdVars {
    pub inter: Var,
    pub intra: Var,
    pub modality: Modality,
}

/// `inter = MLP1(encoded)`, `intra = MLP2(inter)`.
pub fn mkd_block_forward(g: &mut Graph, params: &ParamTree, modality: Modality, encoded: Var) -> Result<MkdVars> {
    let prefix = mkd_prefix(modality);
    let expected = params.get(&format!("{prefix}.mlp1.w_in"))?.rows();
    if g.value(encoded).cols() != expected {
        return Err(Error::Shape {
            op: "mkd_block",
            lhs: g.value(encoded).shape().to_vec(),
            rhs: vec![expected],
        });
    }
    let inter = ffn(g, params, &format!("{prefix}.mlp1"), encoded)?;
    let intra = ffn(g, params, &format!("{prefix}.mlp2"), inter)?;
    Ok(MkdVars { inter, intra, modality })
}

/// `MSE(teacher_inter, inter) + MSE(teacher_intra, intra)` against the
/// teacher pair matching the students' modality. Teacher values enter the
/// graph as constants.
pub fn mkd_loss(g: &mut Graph, teacher: &DiiaOutputs, students: &MkdVars) -> Result<Var> {
    let (t_inter, t_intra) = teacher.teacher(students.modality);
    let t_inter = g.constant(t_inter.clone())?;
    let t_intra = g.constant(t_intra.clone())?;
    let l_inter = g.mse(students.inter, t_inter)?;
    let l_intra = g.mse(students.intra, t_intra)?;
    g.add(l_inter, l_intra)
}
