//! One function per pipeline stage.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;
use sunfs::augment::sca_pair_from_seed;
use sunfs::backbone::Backbone;
use sunfs::checkpoint::{write_atomic, Checkpoint};
use sunfs::data::{generate_synthetic, nearest_centroid_accuracy, DatasetManifest, Image, LoadedSplit};
use sunfs::eval::{evaluate, split_features, write_per_task_csv, EvalConfig};
use sunfs::meta_train::{baseline_train, meta_train, write_metrics, EpochMetrics, Student, STUDENT_KIND};
use sunfs::meta_tune::{meta_tune, FewShotModel, HeadKind, TUNED_KIND};
use sunfs::seed::{self, label};
use sunfs::supervision::{
    argmax_heatmap, background_filtrate, per_token_scores, pretrain_teacher, write_label_maps, TeacherModel,
    TEACHER_KIND,
};

use crate::config::RunConfig;

const HEATMAP_SCALE: usize = 8;

/// Literal accepted wherever a checkpoint path is expected.
pub const RANDOM_MODEL: &str = "random";

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

/// Create the output directory and freeze the resolved config into it.
fn begin_stage(cfg: &RunConfig, stage: &str) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("cannot create {}", cfg.output_dir.display()))?;
    write_atomic(&out_path(cfg, &format!("{stage}.config.toml")), cfg.to_toml()?.as_bytes())?;
    Ok(())
}

fn load_split(cfg: &RunConfig, name: &str) -> Result<LoadedSplit> {
    let manifest = DatasetManifest::load(&cfg.data.manifest)?;
    let split = manifest.load_split(name)?.load()?;
    info!("loaded split `{name}`: {} images, {} classes", split.len(), split.n_classes());
    Ok(split)
}

fn log_epoch(stage: &'static str) -> impl FnMut(&EpochMetrics, &Student) -> sunfs::Result<()> {
    move |m, _| {
        info!(
            "{stage} epoch {} loss_global {:.4} loss_local {:.4} val {:?}",
            m.epoch, m.loss_global, m.loss_local, m.base_val_acc
        );
        Ok(())
    }
}

fn png_bytes(img: &Image) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.to_rgb8().write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// `n` indices spread evenly over `0..len`.
fn spread(len: usize, n: usize) -> Vec<usize> {
    let n = n.min(len);
    (0..n).map(|i| i * len / n).collect()
}

/// Any checkpoint kind, or a freshly initialized backbone.
pub fn load_model(cfg: &RunConfig, checkpoint: &str) -> Result<FewShotModel> {
    if checkpoint == RANDOM_MODEL {
        let bb = Backbone::build(cfg.backbone.clone(), cfg.seed)?;
        return Ok(FewShotModel::from_backbone(bb, cfg.tune.gamma_init));
    }
    let ck = Checkpoint::load(Path::new(checkpoint))?;
    let model = match ck.kind.as_str() {
        TUNED_KIND => FewShotModel::from_checkpoint(&ck)?,
        STUDENT_KIND => FewShotModel::from_backbone(Student::from_checkpoint(&ck)?.backbone, cfg.tune.gamma_init),
        TEACHER_KIND => {
            FewShotModel::from_backbone(TeacherModel::from_checkpoint(&ck)?.backbone, cfg.tune.gamma_init)
        }
        other => bail!("checkpoint {checkpoint} has unsupported kind `{other}`"),
    };
    Ok(model)
}

pub fn generate_data(cfg: &RunConfig) -> Result<()> {
    let manifest = &cfg.data.manifest;
    if manifest.file_name().and_then(|n| n.to_str()) != Some("manifest.toml") {
        bail!("data.manifest must name a `manifest.toml` file to generate into, got {}", manifest.display());
    }
    let dir = match manifest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .context("dataset directory needs a name")?
        .to_string();
    if dir.exists() && !dir.join("synthetic.json").is_file() {
        bail!("{} exists and is not a generated dataset; refusing to replace it", dir.display());
    }
    let staging = dir.with_file_name(format!(".{name}.staging"));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    generate_synthetic(&cfg.data.synthetic, &staging)?;
    write_atomic(&staging.join("generate-data.config.toml"), cfg.to_toml()?.as_bytes())?;
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::rename(&staging, &dir)?;
    let (base, _) = cfg.data.synthetic.render()?;
    info!(
        "dataset written to {}; nearest-centroid base accuracy {:.3}",
        dir.display(),
        nearest_centroid_accuracy(&base)
    );
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    begin_stage(cfg, "pretrain-teacher")?;
    let base = load_split(cfg, &cfg.data.base_split)?;
    let (teacher, metrics) = pretrain_teacher(&cfg.backbone, &base, &cfg.teacher, &cfg.augment)?;
    for m in &metrics {
        info!("teacher epoch {} loss {:.4} val {:?}", m.epoch, m.loss_global, m.base_val_acc);
    }
    write_metrics(&out_path(cfg, "teacher_metrics.jsonl"), &metrics)?;
    teacher.to_checkpoint()?.save(&out_path(cfg, "teacher.ckpt"))?;
    Ok(())
}

pub fn sun_train(cfg: &RunConfig, teacher: Option<&Path>) -> Result<()> {
    begin_stage(cfg, "meta-train")?;
    let teacher_path = teacher.map_or_else(|| out_path(cfg, "teacher.ckpt"), Path::to_path_buf);
    let teacher = TeacherModel::from_checkpoint(&Checkpoint::load(&teacher_path)?)?;
    let base = load_split(cfg, &cfg.data.base_split)?;
    let (student, metrics) =
        meta_train(&cfg.backbone, &teacher, &base, &cfg.sun, &cfg.augment, &mut log_epoch("sun"))?;
    write_metrics(&out_path(cfg, "sun_metrics.jsonl"), &metrics)?;
    student.to_checkpoint()?.save(&out_path(cfg, "student.ckpt"))?;
    Ok(())
}

pub fn baseline(cfg: &RunConfig) -> Result<()> {
    begin_stage(cfg, "baseline-train")?;
    let base = load_split(cfg, &cfg.data.base_split)?;
    let (student, metrics) = baseline_train(&cfg.backbone, &base, &cfg.sun, &cfg.augment, &mut log_epoch("baseline"))?;
    write_metrics(&out_path(cfg, "baseline_metrics.jsonl"), &metrics)?;
    student.to_checkpoint()?.save(&out_path(cfg, "baseline.ckpt"))?;
    Ok(())
}

pub fn tune(cfg: &RunConfig, head: Option<HeadKind>, checkpoint: Option<&str>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(h) = head {
        cfg.tune.head = h;
    }
    let head_name = match cfg.tune.head {
        HeadKind::Metabaseline => "metabaseline",
        HeadKind::Feat => "feat",
    };
    begin_stage(&cfg, &format!("meta-tune-{head_name}"))?;
    let source = checkpoint.map_or_else(|| out_path(&cfg, "student.ckpt").display().to_string(), str::to_string);
    let start = load_model(&cfg, &source)?;
    let base = load_split(&cfg, &cfg.data.base_split)?;
    let (model, metrics) = meta_tune(&start.backbone, &base, &cfg.tune)?;
    for m in &metrics {
        info!("tune epoch {} loss {:.4} query acc {:.3}", m.epoch, m.loss, m.query_acc);
    }
    write_jsonl(&out_path(&cfg, &format!("tune_{head_name}_metrics.jsonl")), &metrics)?;
    model.to_checkpoint()?.save(&out_path(&cfg, &format!("tuned_{head_name}.ckpt")))?;
    Ok(())
}

fn checkpoint_stem(checkpoint: &str) -> String {
    Path::new(checkpoint)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(RANDOM_MODEL)
        .to_string()
}

pub fn run_evaluate(
    cfg: &RunConfig,
    checkpoint: &str,
    way: Option<usize>,
    shot: Option<usize>,
    split: Option<&str>,
) -> Result<PathBuf> {
    let ecfg = EvalConfig {
        way: way.unwrap_or(cfg.eval.way),
        shot: shot.unwrap_or(cfg.eval.shot),
        ..cfg.eval.clone()
    };
    let stem = checkpoint_stem(checkpoint);
    let tag = format!("{stem}_{}w{}s", ecfg.way, ecfg.shot);
    begin_stage(cfg, &format!("evaluate-{tag}"))?;
    let model = load_model(cfg, checkpoint)?;
    let data = load_split(cfg, split.unwrap_or(&cfg.data.novel_split))?;
    let mut report = evaluate(&model, &data, &ecfg)?;
    report.checkpoint = Some(checkpoint.to_string());
    info!(
        "{}-way {}-shot over {} tasks: {:.2}% ± {:.2}%",
        report.way,
        report.shot,
        report.n_tasks,
        100.0 * report.mean_acc,
        100.0 * report.ci95
    );
    if let Some(per_task) = report.per_task.take() {
        write_per_task_csv(&out_path(cfg, &format!("eval_{tag}_tasks.csv")), &per_task)?;
    }
    let path = out_path(cfg, &format!("eval_{tag}.json"));
    write_atomic(&path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(path)
}

#[derive(Serialize)]
struct AugRecord<'a> {
    index: usize,
    id: &'a str,
    seed: u64,
    spatial: &'a sunfs::augment::SpatialParams,
    nonspatial: &'a sunfs::augment::NonSpatialRecord,
}

pub fn dump_aug(cfg: &RunConfig, n: usize) -> Result<()> {
    begin_stage(cfg, "dump-aug")?;
    let base = load_split(cfg, &cfg.data.base_split)?;
    let dir = out_path(cfg, "aug");
    fs::create_dir_all(&dir)?;
    let mut records = Vec::new();
    let mut pairs = Vec::new();
    for (k, i) in spread(base.len(), n).into_iter().enumerate() {
        let pair = sca_pair_from_seed(&base.images[i], &cfg.augment, seed::derive(cfg.seed, &[label::AUGMENT, k as u64]))?;
        for (suffix, img) in [("source", &base.images[i]), ("x_tilde", &pair.x_tilde), ("x_bar", &pair.x_bar)] {
            write_atomic(&dir.join(format!("{k:04}_{suffix}.png")), &png_bytes(img)?)?;
        }
        pairs.push((k, i, pair));
    }
    for (k, i, pair) in &pairs {
        records.push(AugRecord {
            index: *k,
            id: &base.ids[*i],
            seed: pair.seed,
            spatial: &pair.params,
            nonspatial: &pair.record,
        });
    }
    write_jsonl(&dir.join("records.jsonl"), &records)?;
    info!("wrote {} augmentation triplets to {}", pairs.len(), dir.display());
    Ok(())
}

pub fn dump_labels(cfg: &RunConfig, checkpoint: Option<&Path>, n: usize) -> Result<()> {
    begin_stage(cfg, "dump-labels")?;
    let path = checkpoint.map_or_else(|| out_path(cfg, "teacher.ckpt"), Path::to_path_buf);
    let teacher = TeacherModel::from_checkpoint(&Checkpoint::load(&path)?)?;
    let base = load_split(cfg, &cfg.data.base_split)?;
    let picks = spread(base.len(), n);
    let images: Vec<&Image> = picks.iter().map(|&i| &base.images[i]).collect();
    let grids = per_token_scores(&teacher, &images, &base.normalization)?;
    let maps = background_filtrate(&grids, cfg.sun.bg_percent, cfg.sun.topk)?;
    let dir = out_path(cfg, "labels");
    fs::create_dir_all(&dir)?;
    let ids: Vec<String> = picks.iter().map(|&i| base.ids[i].clone()).collect();
    write_label_maps(&dir.join("labels.jsonl"), &ids, &maps)?;
    let grid = teacher.backbone.config.patch_grid[0];
    for (k, map) in maps.iter().enumerate() {
        write_atomic(
            &dir.join(format!("{k:04}_heatmap.png")),
            &png_bytes(&argmax_heatmap(map, grid, HEATMAP_SCALE))?,
        )?;
    }
    info!("wrote {} label maps to {}", maps.len(), dir.display());
    Ok(())
}

pub fn export_embeddings(cfg: &RunConfig, checkpoint: &str, split: Option<&str>, n_per_class: usize) -> Result<PathBuf> {
    let split_name = split.unwrap_or(&cfg.data.novel_split).to_string();
    begin_stage(cfg, "export-embeddings")?;
    let model = load_model(cfg, checkpoint)?;
    let mut data = load_split(cfg, &split_name)?;
    let keep: Vec<usize> = data
        .spec
        .class_items
        .iter()
        .flat_map(|items| items.iter().take(n_per_class).copied())
        .collect();
    data.images = keep.iter().map(|&i| data.images[i].clone()).collect();
    let feats = split_features(&model, &data, cfg.eval.batch_size)?;
    let dim = feats.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "class".to_string()];
    header.extend((0..dim).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (f, &i) in feats.iter().zip(&keep) {
        let mut row = vec![data.ids[i].clone(), data.spec.classes[data.labels[i]].clone()];
        row.extend(f.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    let path = out_path(cfg, &format!("embeddings_{}_{split_name}.csv", checkpoint_stem(checkpoint)));
    write_atomic(&path, &w.into_inner()?)?;
    info!("wrote {} embeddings to {}", keep.len(), path.display());
    Ok(path)
}
