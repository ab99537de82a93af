use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Image, LoadedSplit, Normalization};
use crate::error::{Error, Result};
use crate::par;

const SHAPES: [&str; 6] = ["disc", "square", "triangle", "cross", "ring", "diamond"];

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.15, 0.30, 0.90],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.50, 0.10, 0.70],
];

const STRIPES: [u32; 3] = [0, 2, 4];

/// Parameters of the procedurally generated toy dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Classes `0..n_base` form the base split, the rest the novel split.
    pub n_base: usize,
    /// `false` renders label-independent noise (a chance-level control).
    pub signal: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 16,
            images_per_class: 200,
            image_size: 32,
            seed: 0,
            n_base: 10,
            signal: true,
        }
    }
}

/// Class-defining latent factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassLatent {
    pub shape: usize,
    pub color: usize,
    pub stripes: u32,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Parameter("synthetic dataset needs at least 2 classes".into()));
        }
        if self.n_base == 0 || self.n_base >= self.n_classes {
            return Err(Error::Parameter(format!(
                "n_base must be in 1..{} (got {})",
                self.n_classes, self.n_base
            )));
        }
        if self.images_per_class == 0 {
            return Err(Error::Parameter("images_per_class must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Parameter("image_size must be at least 8".into()));
        }
        let combos = SHAPES.len() * PALETTE.len() * STRIPES.len();
        if self.n_classes > combos {
            return Err(Error::Parameter(format!(
                "at most {combos} distinguishable classes (requested {})",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn n_novel(&self) -> usize {
        self.n_classes - self.n_base
    }

    /// Error when the novel split cannot host `way`-way episodes.
    pub fn check_way(&self, way: usize) -> Result<()> {
        if self.n_novel() < way {
            return Err(Error::Parameter(format!(
                "{way}-way episodes need {way} novel classes, spec has {}",
                self.n_novel()
            )));
        }
        Ok(())
    }

    /// Pairwise-distinct latent tuples, one per class.
    pub fn latents(&self) -> Vec<ClassLatent> {
        let mut all: Vec<ClassLatent> = (0..SHAPES.len())
            .flat_map(|shape| {
                (0..PALETTE.len()).flat_map(move |color| {
                    STRIPES.iter().map(move |&stripes| ClassLatent { shape, color, stripes })
                })
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_c1a5);
        all.shuffle(&mut rng);
        all.truncate(self.n_classes);
        all
    }

    pub fn class_name(c: usize) -> String {
        format!("c{c:02}")
    }

    /// Render both splits in memory, 8-bit quantized like their on-disk form.
    pub fn render(&self) -> Result<(LoadedSplit, LoadedSplit)> {
        self.validate()?;
        let latents = self.latents();
        let jobs: Vec<(usize, usize)> = (0..self.n_classes)
            .flat_map(|c| (0..self.images_per_class).map(move |i| (c, i)))
            .collect();
        let images = par::map_slice(&jobs, |&(c, i)| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(((c as u64) << 32) | i as u64);
            let img = if self.signal {
                render_object(self.image_size, latents[c], &mut rng)
            } else {
                render_noise(self.image_size, &mut rng)
            };
            quantize(img)
        });
        let split_at = self.n_base * self.images_per_class;
        let labels: Vec<usize> = jobs.iter().map(|&(c, _)| c).collect();
        let mean_std = channel_stats(&images[..split_at]);
        let names = |range: std::ops::Range<usize>| range.map(Self::class_name).collect::<Vec<_>>();
        let mut base = LoadedSplit::from_parts(
            "train",
            names(0..self.n_base),
            images[..split_at].to_vec(),
            labels[..split_at].to_vec(),
            mean_std,
        )?;
        let mut novel = LoadedSplit::from_parts(
            "test",
            names(self.n_base..self.n_classes),
            images[split_at..].to_vec(),
            labels[split_at..].iter().map(|l| l - self.n_base).collect(),
            mean_std,
        )?;
        base.ids = jobs[..split_at].iter().map(|&(c, i)| Self::file_name(c, i)).collect();
        novel.ids = jobs[split_at..].iter().map(|&(c, i)| Self::file_name(c, i)).collect();
        Ok((base, novel))
    }

    fn file_name(c: usize, i: usize) -> String {
        let name = Self::class_name(c);
        format!("images/{name}/{name}_{i:04}.png")
    }
}

fn quantize(mut img: Image) -> Image {
    for v in img.data_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    img
}

fn channel_stats(images: &[Image]) -> Normalization {
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    let mut n = 0f64;
    for img in images {
        for px in img.data().chunks(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
                sq[c] += (px[c] as f64).powi(2);
            }
            n += 1.0;
        }
    }
    let mut mean = [0f32; 3];
    let mut std = [0f32; 3];
    for c in 0..3 {
        let m = sum[c] / n;
        mean[c] = m as f32;
        std[c] = ((sq[c] / n - m * m).max(1e-6)).sqrt() as f32;
    }
    Normalization { mean, std }
}

fn render_noise(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let data = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
    Image::from_vec(size, size, data).expect("sized buffer")
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    match SHAPES[shape] {
        "disc" => d <= r,
        "square" => dx.abs().max(dy.abs()) <= 0.85 * r,
        "triangle" => dy <= 0.8 * r && dy >= -0.9 * r && dx.abs() <= (dy + 0.9 * r) * 0.6,
        "cross" => (dx.abs() <= r / 3.0 || dy.abs() <= r / 3.0) && dx.abs().max(dy.abs()) <= r,
        "ring" => d <= r && d >= 0.55 * r,
        _ => dx.abs() + dy.abs() <= r,
    }
}

fn render_object(size: usize, latent: ClassLatent, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f32;
    let mut img = Image::new(size, size);
    // smooth background with a random tint and gradient
    let base: [f32; 3] = [
        rng.random_range(0.4..0.6),
        rng.random_range(0.4..0.6),
        rng.random_range(0.4..0.6),
    ];
    let gx: f32 = rng.random_range(-0.2..0.2) / s;
    let gy: f32 = rng.random_range(-0.2..0.2) / s;
    for y in 0..size {
        for x in 0..size {
            let shift = gx * x as f32 + gy * y as f32;
            let px = [0, 1, 2].map(|c| base[c] + shift + rng.random_range(-0.05..0.05));
            img.set_pixel(x, y, px);
        }
    }
    // clutter
    let blobs = rng.random_range(1..4);
    for _ in 0..blobs {
        let w = rng.random_range(2..(size / 6).max(3));
        let h = rng.random_range(2..(size / 6).max(3));
        let x0 = rng.random_range(0..size - w);
        let y0 = rng.random_range(0..size - h);
        let col = [0, 1, 2].map(|_| rng.random_range(0.1..0.9f32));
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img.set_pixel(x, y, col);
            }
        }
    }
    // object
    let r = s * rng.random_range(0.22..0.34);
    let cx = s / 2.0 + rng.random_range(-s / 8.0..s / 8.0);
    let cy = s / 2.0 + rng.random_range(-s / 8.0..s / 8.0);
    let gain: f32 = rng.random_range(0.85..1.15);
    let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let (sin, cos) = theta.sin_cos();
    let color = PALETTE[latent.color];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            if !inside(latent.shape, dx, dy, r) {
                continue;
            }
            let mut shade = gain;
            if latent.stripes > 0 {
                let u = (dx * cos + dy * sin) / (2.0 * r);
                let wave = (std::f32::consts::TAU * latent.stripes as f32 * u).sin();
                shade *= if wave >= 0.0 { 1.0 } else { 0.55 };
            }
            let px = [0, 1, 2].map(|c| (color[c] * shade + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0));
            img.set_pixel(x, y, px);
        }
    }
    img
}

/// Write the dataset (PNG files, split CSVs, manifest) under `dir`.
///
/// Returns the manifest path.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    let (base, novel) = spec.render()?;
    for split in [&base, &novel] {
        par::map_range(split.len(), |i| {
            let path = dir.join(&split.ids[i]);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            split.images[i].save_png(&path)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut csv = String::from("filename,label\n");
        for (id, &label) in split.ids.iter().zip(&split.labels) {
            csv.push_str(&format!("{id},{}\n", split.spec.classes[label]));
        }
        let path = dir.join(format!("{}.csv", split.spec.name));
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), PathBuf::from("train.csv"));
    splits.insert("test".to_string(), PathBuf::from("test.csv"));
    let manifest = DatasetManifest::new(".", spec.image_size, base.normalization, splits);
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    let spec_path = dir.join("synthetic.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&spec_path, e))?;
    Ok(path)
}

/// Nearest-centroid classifier on raw pixels: fit on even-ranked items of
/// each class, score on odd-ranked ones.
pub fn nearest_centroid_accuracy(split: &LoadedSplit) -> f64 {
    let n_classes = split.n_classes();
    let dim = split.images.first().map_or(0, |i| i.data().len());
    let mut centroids = vec![vec![0f64; dim]; n_classes];
    let mut test = Vec::new();
    for (c, items) in split.spec.class_items.iter().enumerate() {
        let mut count = 0.0;
        for (rank, &i) in items.iter().enumerate() {
            if rank % 2 == 0 {
                for (a, &v) in centroids[c].iter_mut().zip(split.images[i].data()) {
                    *a += v as f64;
                }
                count += 1.0;
            } else {
                test.push(i);
            }
        }
        centroids[c].iter_mut().for_each(|a| *a /= f64::max(count, 1.0));
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let x = split.images[i].data();
            let best = (0..n_classes)
                .map(|c| {
                    let d: f64 = centroids[c].iter().zip(x).map(|(m, &v)| (m - v as f64).powi(2)).sum();
                    (d, c)
                })
                .fold((f64::INFINITY, 0), |acc, x| if x.0 < acc.0 { x } else { acc });
            best.1 == split.labels[i]
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            images_per_class: 20,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn latents_are_distinct() {
        let l = SyntheticSpec::default().latents();
        for i in 0..l.len() {
            for j in i + 1..l.len() {
                assert_ne!(l[i], l[j]);
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let (a, _) = small().render().unwrap();
        let (b, _) = small().render().unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.n_classes(), 10);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = SyntheticSpec {
            n_base: 16,
            ..SyntheticSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
        let four = SyntheticSpec {
            n_classes: 4,
            n_base: 2,
            ..SyntheticSpec::default()
        };
        assert!(four.validate().is_ok());
        assert!(matches!(four.check_way(5), Err(Error::Parameter(_))));
    }

    #[test]
    fn on_disk_dataset_is_byte_identical() {
        let spec = SyntheticSpec {
            images_per_class: 3,
            ..SyntheticSpec::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_synthetic(&spec, a.path()).unwrap();
        generate_synthetic(&spec, b.path()).unwrap();
        for rel in ["manifest.toml", "train.csv", "test.csv", "images/c03/c03_0002.png"] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
        let m = DatasetManifest::load(&ma).unwrap();
        let train = m.load_split("train").unwrap().load().unwrap();
        let (mem, _) = spec.render().unwrap();
        assert_eq!(train.images, mem.images);
    }
}
