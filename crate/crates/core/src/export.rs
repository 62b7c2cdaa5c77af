//! Inter-modality attention maps and per-token importance, as CSV and
//! optional SVG heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Graph;
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::model::DiiaOutputs;
use crate::tensor::Tensor;
use crate::training::{multimodal_pass, Checkpoint};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub instance_id: u64,
    pub passage_tokens: Vec<usize>,
    /// Per head, `M×N`: audio frames attending over passage tokens.
    pub audio_to_passage: Vec<Tensor>,
    /// Per head, `N×M`: passage tokens attending over audio frames.
    pub passage_to_audio: Vec<Tensor>,
    /// Length `N`.
    pub passage_importance: Vec<f64>,
    /// Length `M`.
    pub audio_importance: Vec<f64>,
}

/// Sum over heads and over rows of each map: the total attention every
/// column position receives from the other modality.
pub fn column_importance(maps: &[Tensor]) -> Vec<f64> {
    let cols = maps.first().map_or(0, Tensor::cols);
    let mut out = vec![0.0; cols];
    for m in maps {
        for row in m.data().chunks(cols) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
    }
    out
}

pub fn export_attention(outputs: &DiiaOutputs, inst: &Instance) -> Result<AttentionExport> {
    let (m, n) = (inst.audio.len(), inst.passage.len());
    let ok = |maps: &[Tensor], rows, cols| maps.iter().all(|t| t.rows() == rows && t.cols() == cols);
    if outputs.inter_audio_maps.is_empty()
        || !ok(&outputs.inter_audio_maps, m, n)
        || !ok(&outputs.inter_passage_maps, n, m)
    {
        return Err(Error::Input(format!(
            "attention maps do not match instance {} ({m} frames, {n} tokens)",
            inst.id
        )));
    }
    Ok(AttentionExport {
        instance_id: inst.id,
        passage_tokens: inst.passage.clone(),
        audio_to_passage: outputs.inter_audio_maps.clone(),
        passage_to_audio: outputs.inter_passage_maps.clone(),
        passage_importance: column_importance(&outputs.inter_audio_maps),
        audio_importance: column_importance(&outputs.inter_passage_maps),
    })
}

/// Runs the fusion model on `inst` in evaluation mode and exports the last
/// block's inter-modality maps.
pub fn export_from_checkpoint(ck: &Checkpoint, inst: &Instance) -> Result<AttentionExport> {
    if !ck.has_fusion() {
        return Err(Error::Config(format!(
            "attention export needs a fusion-trained checkpoint, got `{}`",
            ck.train.mode.name()
        )));
    }
    let mut g = Graph::new();
    let pass = multimodal_pass(&mut g, &ck.params, &ck.model, inst)?;
    export_attention(&pass.diia.materialize(&g), inst)
}

fn matrix_csv(t: &Tensor) -> String {
    let mut s = String::new();
    for row in t.data().chunks(t.cols()) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Grayscale heatmap, one cell per weight, darker is heavier.
fn heatmap_svg(t: &Tensor, title: &str) -> String {
    const CELL: usize = 18;
    const TOP: usize = 24;
    let (rows, cols) = (t.rows(), t.cols());
    let (w, h) = (cols * CELL, TOP + rows * CELL);
    let max = t.data().iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    let _ = writeln!(s, "<text x=\"2\" y=\"16\" font-family=\"monospace\" font-size=\"12\">{title}</text>");
    for r in 0..rows {
        for c in 0..cols {
            let v = t.get(r, c) / max;
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({shade},{shade},{shade})\"><title>{}</title></rect>",
                c * CELL,
                TOP + r * CELL,
                t.get(r, c)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

impl AttentionExport {
    pub fn heads(&self) -> usize {
        self.audio_to_passage.len()
    }

    /// Writes `inter_{audio,passage}_head{h}.csv`, `passage_importance.csv`
    /// and `audio_importance.csv` into `dir`, plus an `.svg` per matrix when
    /// `svg` is set. Returns the files written.
    pub fn write(&self, dir: &Path, svg: bool) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        let mut put = |name: String, body: String| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            files.push(path);
            Ok(())
        };
        let directions = [("audio", &self.audio_to_passage), ("passage", &self.passage_to_audio)];
        for (direction, maps) in directions {
            for (h, t) in maps.iter().enumerate() {
                let stem = format!("inter_{direction}_head{h}");
                put(format!("{stem}.csv"), matrix_csv(t))?;
                if svg {
                    let title = format!("instance {} {direction} head {h}", self.instance_id);
                    put(format!("{stem}.svg"), heatmap_svg(t, &title))?;
                }
            }
        }
        let mut passage = String::from("token,score\n");
        for (tok, score) in self.passage_tokens.iter().zip(&self.passage_importance) {
            let _ = writeln!(passage, "{tok},{score}");
        }
        put("passage_importance.csv".into(), passage)?;
        let mut audio = String::from("token,score\n");
        for (i, score) in self.audio_importance.iter().enumerate() {
            let _ = writeln!(audio, "frame{i},{score}");
        }
        put("audio_importance.csv".into(), audio)?;
        Ok(files)
    }
}
