//! Teacher model and per-patch pseudo-labels: token confidences, top-k
//! sparsification and batch-level background filtration.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{Backbone, ViTConfig};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::data::{Image, LoadedSplit, Normalization};
use crate::error::{Error, Result};
use crate::meta_train::{self, EpochMetrics, Student, TrainConfig};
use crate::augment::AugmentConfig;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const TEACHER_KIND: &str = "teacher";
const G0: &str = "g0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherMeta {
    pub backbone: ViTConfig,
    pub n_classes: usize,
    pub classes: Vec<String>,
}

/// Frozen backbone `f0` plus a linear per-token classifier `g0`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub backbone: Backbone,
    /// `g0.weight [d, c]`, `g0.bias [c]`.
    pub head: ParamStore<f32>,
    pub classes: Vec<String>,
}

impl TeacherModel {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Reuse a trained student's backbone and global head as `f0`, `g0`.
    pub fn from_student(student: &Student) -> Self {
        let mut head = ParamStore::new();
        for (suffix, t) in [
            ("weight", student.heads.get("head.global.weight")),
            ("bias", student.heads.get("head.global.bias")),
        ] {
            head.insert(format!("{G0}.{suffix}"), t.expect("student has a global head").clone());
        }
        TeacherModel {
            backbone: student.backbone.clone(),
            head,
            classes: student.classes.clone(),
        }
    }

    pub fn meta(&self) -> TeacherMeta {
        TeacherMeta {
            backbone: self.backbone.config.clone(),
            n_classes: self.n_classes(),
            classes: self.classes.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut params = self.backbone.params.clone();
        params.extend(self.head.clone());
        Checkpoint::new(TEACHER_KIND, &self.meta(), params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(TEACHER_KIND)?;
        let meta: TeacherMeta = ck.config_as()?;
        meta.backbone.validate()?;
        let backbone = Backbone {
            config: meta.backbone,
            params: ck.params.with_prefix(crate::backbone::PREFIX),
        };
        let head = ck.params.with_prefix(G0);
        if head.len() != 2 || meta.classes.len() != meta.n_classes {
            return Err(Error::Checkpoint("teacher checkpoint lacks a valid g0 head".into()));
        }
        Ok(TeacherModel {
            backbone,
            head,
            classes: meta.classes,
        })
    }

    /// Per-token logits `[B, K, c]` for a normalized batch, eval mode.
    pub fn token_logits(&self, batch: Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.backbone.params.bind(&mut g, false);
        let h = self.head.bind(&mut g, false);
        let x = g.constant(batch);
        let out = self.backbone.config.forward_graph(&mut g, &p, x, None);
        let logits = g.matmul(out.patches, h.get("g0.weight"));
        let logits = g.add_broadcast(logits, h.get("g0.bias"));
        Ok(g.value(logits).clone())
    }
}

/// `K x c` per-patch class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGrid {
    pub n_tokens: usize,
    pub n_classes: usize,
    pub scores: Vec<f32>,
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| (v / z) as f32).collect()
}

impl ScoreGrid {
    /// Row-wise softmax of `K x c` logits.
    pub fn from_logits(n_tokens: usize, n_classes: usize, logits: &[f32]) -> Self {
        assert_eq!(logits.len(), n_tokens * n_classes, "logit count");
        let scores = logits.chunks(n_classes).flat_map(softmax).collect();
        ScoreGrid {
            n_tokens,
            n_classes,
            scores,
        }
    }

    pub fn row(&self, j: usize) -> &[f32] {
        &self.scores[j * self.n_classes..(j + 1) * self.n_classes]
    }

    pub fn max_score(&self, j: usize) -> f32 {
        self.row(j).iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Teacher confidences for raw `[0, 1]` teacher views.
pub fn per_token_scores(teacher: &TeacherModel, x_tilde: &[&Image], norm: &Normalization) -> Result<Vec<ScoreGrid>> {
    teacher.backbone.check_images(x_tilde)?;
    let logits = teacher.token_logits(norm.batch(x_tilde)?)?;
    Ok(scores_from_logits(&logits))
}

/// Split `[B, K, c]` logits into per-image score grids.
pub fn scores_from_logits(logits: &Tensor<f32>) -> Vec<ScoreGrid> {
    let (b, k, c) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    (0..b)
        .map(|i| ScoreGrid::from_logits(k, c, &logits.data()[i * k * c..(i + 1) * k * c]))
        .collect()
}

/// Keep the `k` largest entries (ties to the lower index) and renormalize.
pub fn topk_row(row: &[f32], k: usize) -> Vec<f32> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let keep = &order[..k.min(row.len())];
    let total: f64 = keep.iter().map(|&i| row[i] as f64).sum();
    let mut out = vec![0f32; row.len()];
    for &i in keep {
        out[i] = if total > 0.0 {
            (row[i] as f64 / total) as f32
        } else {
            (1.0 / keep.len() as f64) as f32
        };
    }
    out
}

pub fn topk_sparsify(grid: &ScoreGrid, k: usize) -> Result<ScoreGrid> {
    check_topk(k, grid.n_classes)?;
    Ok(ScoreGrid {
        n_tokens: grid.n_tokens,
        n_classes: grid.n_classes,
        scores: grid.scores.chunks(grid.n_classes).flat_map(|r| topk_row(r, k)).collect(),
    })
}

fn check_topk(k: usize, c: usize) -> Result<()> {
    if k == 0 || k > c {
        return Err(Error::Parameter(format!("top-k {k} outside 1..={c}")));
    }
    Ok(())
}

/// `K x (c + 1)` patch targets; column `c` is the background class.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap {
    pub n_tokens: usize,
    pub n_classes: usize,
    pub topk: usize,
    pub labels: Vec<f32>,
    pub background: Vec<bool>,
}

impl PseudoLabelMap {
    pub fn width(&self) -> usize {
        self.n_classes + 1
    }

    pub fn row(&self, j: usize) -> &[f32] {
        let w = self.width();
        &self.labels[j * w..(j + 1) * w]
    }

    /// Per-patch argmax (background is index `c`).
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.n_tokens)
            .map(|j| {
                let r = self.row(j);
                (0..r.len()).fold(0, |best, i| if r[i] > r[best] { i } else { best })
            })
            .collect()
    }
}

/// Number of background patches for a batch of `m` at `p` percent.
pub fn background_count(p: f64, m: usize) -> usize {
    (((p * m as f64) / 100.0 + 1e-9).floor() as usize).min(m)
}

/// Mark the `floor(p/100 * m)` least confident patches of the batch as
/// background; sparsify the rest to their top `k` classes.
pub fn background_filtrate(batch: &[ScoreGrid], p: f64, k: usize) -> Result<Vec<PseudoLabelMap>> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Parameter(format!("background percentage {p} outside [0, 100]")));
    }
    let Some(first) = batch.first() else {
        return Ok(Vec::new());
    };
    let c = first.n_classes;
    check_topk(k, c)?;
    if batch.iter().any(|g| g.n_classes != c) {
        return Err(Error::Input("score grids disagree on class count".into()));
    }
    let mut ranked: Vec<(f32, usize, usize)> = batch
        .iter()
        .enumerate()
        .flat_map(|(i, g)| (0..g.n_tokens).map(move |j| (g.max_score(j), i, j)))
        .collect();
    let n_bg = background_count(p, ranked.len());
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut masks: Vec<Vec<bool>> = batch.iter().map(|g| vec![false; g.n_tokens]).collect();
    for &(_, i, j) in &ranked[..n_bg] {
        masks[i][j] = true;
    }
    Ok(batch
        .iter()
        .zip(masks)
        .map(|(g, background)| {
            let mut labels = Vec::with_capacity(g.n_tokens * (c + 1));
            for (j, &bg) in background.iter().enumerate() {
                if bg {
                    labels.extend(std::iter::repeat_n(0.0, c));
                    labels.push(1.0);
                } else {
                    labels.extend(topk_row(g.row(j), k));
                    labels.push(0.0);
                }
            }
            PseudoLabelMap {
                n_tokens: g.n_tokens,
                n_classes: c,
                topk: k,
                labels,
                background,
            }
        })
        .collect())
}

/// One JSON object per line: `{id, tokens, classes, rows}` where each row
/// lists its nonzero `[index, value]` pairs.
pub fn write_label_maps(path: &Path, ids: &[String], maps: &[PseudoLabelMap]) -> Result<()> {
    let mut text = String::new();
    for (id, m) in ids.iter().zip(maps) {
        let rows: Vec<Vec<(usize, f32)>> = (0..m.n_tokens)
            .map(|j| m.row(j).iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, &v)| (i, v)).collect())
            .collect();
        let rec = serde_json::json!({
            "id": id,
            "tokens": m.n_tokens,
            "classes": m.width(),
            "rows": rows,
        });
        writeln!(text, "{rec}").expect("writing to a string");
    }
    write_atomic(path, text.as_bytes())
}

/// Patch-argmax map rendered as a `grid * scale` square image; background is black.
pub fn argmax_heatmap(map: &PseudoLabelMap, grid: usize, scale: usize) -> Image {
    let side = grid * scale;
    let mut img = Image::new(side, side);
    let arg = map.argmax();
    for (j, &a) in arg.iter().enumerate() {
        let color = if a == map.n_classes {
            [0.0; 3]
        } else {
            let h = a as f32 / map.n_classes as f32;
            hue(h)
        };
        let (gy, gx) = (j / grid, j % grid);
        for y in gy * scale..(gy + 1) * scale {
            for x in gx * scale..(gx + 1) * scale {
                img.set_pixel(x, y, color);
            }
        }
    }
    img
}

fn hue(h: f32) -> [f32; 3] {
    let f = |n: f32| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Train `f0` and `g0` with global supervision only.
pub fn pretrain_teacher(
    vit: &ViTConfig,
    data: &LoadedSplit,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
) -> Result<(TeacherModel, Vec<EpochMetrics>)> {
    if data.is_empty() {
        return Err(Error::Data("teacher pretraining needs a non-empty base split".into()));
    }
    if data.n_classes() < 2 {
        return Err(Error::Data(format!(
            "teacher pretraining needs at least 2 classes, split has {}",
            data.n_classes()
        )));
    }
    let cfg = TrainConfig {
        lambda: 0.0,
        ..cfg.clone()
    };
    let (student, metrics) = meta_train::train(vit, data, &cfg, &aug.pretraining(), None, &mut |_, _| Ok(()))?;
    Ok((TeacherModel::from_student(&student), metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&[f32]]) -> ScoreGrid {
        ScoreGrid {
            n_tokens: rows.len(),
            n_classes: rows[0].len(),
            scores: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    #[test]
    fn softmax_rows_match_scalar_formula() {
        let g = ScoreGrid::from_logits(2, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let e = std::f64::consts::E;
        let expect = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (a, b) in g.row(0).iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        let e2 = e * e;
        assert!((g.row(1)[1] as f64 - e2 / (e2 + 2.0)).abs() < 1e-6);
        let uniform = ScoreGrid::from_logits(1, 4, &[0.0; 4]);
        assert!(uniform.scores.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn topk_examples() {
        let out = topk_row(&[0.5, 0.3, 0.2], 2);
        assert!((out[0] - 0.625).abs() < 1e-7 && (out[1] - 0.375).abs() < 1e-7 && out[2] == 0.0);
        assert_eq!(topk_row(&[0.4, 0.4, 0.2], 1), vec![1.0, 0.0, 0.0]);
        let g = grid(&[&[0.2, 0.5, 0.3]]);
        assert_eq!(topk_sparsify(&g, 3).unwrap(), g);
        assert!(matches!(topk_sparsify(&g, 4), Err(Error::Parameter(_))));
        assert!(matches!(topk_sparsify(&g, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn filtration_picks_lowest_max_scores() {
        let batch = vec![
            grid(&[&[0.9, 0.1], &[0.2, 0.8]]),
            grid(&[&[0.7, 0.3], &[0.55, 0.45]]),
        ];
        // max scores: 0.9, 0.8, 0.7, 0.55
        let maps = background_filtrate(&batch, 50.0, 2).unwrap();
        assert_eq!(maps[0].background, vec![false, false]);
        assert_eq!(maps[1].background, vec![true, true]);
        assert_eq!(maps[1].row(0), &[0.0, 0.0, 1.0]);
        let r = maps[0].row(1);
        assert!((r[0] - 0.2).abs() < 1e-7 && (r[1] - 0.8).abs() < 1e-7 && r[2] == 0.0);
        let none = background_filtrate(&batch, 0.0, 1).unwrap();
        assert!(none.iter().all(|m| m.background.iter().all(|b| !b)));
        let all = background_filtrate(&batch, 100.0, 1).unwrap();
        assert!(all.iter().all(|m| m.background.iter().all(|&b| b)));
        assert!(matches!(background_filtrate(&batch, 101.0, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn ties_go_to_lower_image_then_patch() {
        let batch = vec![grid(&[&[0.5, 0.5], &[0.5, 0.5]]), grid(&[&[0.5, 0.5]])];
        let maps = background_filtrate(&batch, 34.0, 1).unwrap();
        assert_eq!(maps[0].background, vec![true, false]);
        assert_eq!(maps[1].background, vec![false]);
    }

    #[test]
    fn label_map_file_lists_sparse_rows() {
        let batch = vec![grid(&[&[0.9, 0.1], &[0.6, 0.4]])];
        let maps = background_filtrate(&batch, 50.0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        write_label_maps(&path, &["a.png".into()], &maps).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["classes"], 3);
        assert_eq!(v["rows"][0], serde_json::json!([[0, 1.0]]));
        assert_eq!(v["rows"][1], serde_json::json!([[2, 1.0]]));
    }
}
