use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Image, Normalization};
use crate::error::{Error, Result};
use crate::par;

/// Dataset description: image root, split files and channel statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Image root, relative to the manifest's directory unless absolute.
    pub root: PathBuf,
    #[serde(default = "default_format")]
    pub image_format: String,
    pub image_size: usize,
    #[serde(default)]
    pub normalization: Normalization,
    /// Split name -> CSV file (`filename,label`), relative to `root`.
    pub splits: BTreeMap<String, PathBuf>,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn default_format() -> String {
    "png".into()
}

impl DatasetManifest {
    pub fn new(
        root: impl Into<PathBuf>,
        image_size: usize,
        normalization: Normalization,
        splits: BTreeMap<String, PathBuf>,
    ) -> Self {
        DatasetManifest {
            root: root.into(),
            image_format: default_format(),
            image_size,
            normalization,
            splits,
            base_dir: PathBuf::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = toml::from_str(&text)
            .map_err(|e| Error::Data(format!("malformed manifest {}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("cannot serialize manifest: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn root_dir(&self) -> PathBuf {
        if self.root.is_absolute() {
            self.root.clone()
        } else {
            self.base_dir.join(&self.root)
        }
    }

    fn split_path(&self, name: &str) -> Result<PathBuf> {
        let rel = self
            .splits
            .get(name)
            .ok_or_else(|| Error::Data(format!("manifest has no split named `{name}`")))?;
        Ok(self.root_dir().join(rel))
    }

    /// Parse and validate one split, checking it against every other split
    /// for shared files or shared classes.
    pub fn load_split(&self, name: &str) -> Result<Split> {
        let root = self.root_dir();
        let rows = read_split_csv(&self.split_path(name)?)?;
        for (line, file, _) in &rows {
            if !root.join(file).is_file() {
                return Err(Error::Data(format!(
                    "split `{name}` line {line}: missing file {file}"
                )));
            }
        }
        let own_files: HashMap<&str, usize> = rows.iter().map(|(l, f, _)| (f.as_str(), *l)).collect();
        let own_classes: BTreeSet<&str> = rows.iter().map(|(_, _, c)| c.as_str()).collect();
        for other in self.splits.keys().filter(|k| k.as_str() != name) {
            for (_, file, class) in read_split_csv(&self.split_path(other)?)? {
                if let Some(line) = own_files.get(file.as_str()) {
                    return Err(Error::Data(format!(
                        "split `{name}` line {line}: file {file} also appears in split `{other}`"
                    )));
                }
                if own_classes.contains(class.as_str()) {
                    return Err(Error::Data(format!(
                        "class `{class}` appears in both split `{name}` and split `{other}`"
                    )));
                }
            }
        }
        let items = rows.into_iter().map(|(_, f, c)| (f, c)).collect();
        Split::from_items(name, root, self.normalization, items)
    }
}

/// Returns `(line, filename, label)` rows.
fn read_split_csv(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: unreadable header: {e}", path.display())))?
        .clone();
    if headers.len() != 2 || &headers[0] != "filename" || &headers[1] != "label" {
        return Err(Error::Data(format!(
            "{} line 1: expected header `filename,label`",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    let mut seen = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("{} line {line}: {e}", path.display())))?;
        if rec.len() != 2 || rec[0].is_empty() || rec[1].is_empty() {
            return Err(Error::Data(format!(
                "{} line {line}: expected `filename,label`",
                path.display()
            )));
        }
        if let Some(prev) = seen.insert(rec[0].to_string(), line) {
            return Err(Error::Data(format!(
                "{} line {line}: duplicate filename {} (first on line {prev})",
                path.display(),
                &rec[0]
            )));
        }
        rows.push((line, rec[0].to_string(), rec[1].to_string()));
    }
    Ok(rows)
}

/// Reference to one image within a split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemRef {
    pub filename: String,
    pub class: usize,
}

/// Class list and per-class item indices of one split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub name: String,
    pub classes: Vec<String>,
    /// `class_items[c]` lists item indices of class `c`, ascending.
    pub class_items: Vec<Vec<usize>>,
}

impl SplitSpec {
    /// Build from per-item class indices.
    pub fn from_labels(name: impl Into<String>, classes: Vec<String>, labels: &[usize]) -> Self {
        let mut class_items = vec![Vec::new(); classes.len()];
        for (i, &c) in labels.iter().enumerate() {
            class_items[c].push(i);
        }
        SplitSpec {
            name: name.into(),
            classes,
            class_items,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_items(&self) -> usize {
        self.class_items.iter().map(Vec::len).sum()
    }

    /// Error unless the class sets of all `specs` are pairwise disjoint.
    pub fn check_disjoint(specs: &[&SplitSpec]) -> Result<()> {
        for (i, a) in specs.iter().enumerate() {
            for b in &specs[i + 1..] {
                if let Some(shared) = a.classes.iter().find(|c| b.classes.contains(c)) {
                    return Err(Error::Data(format!(
                        "class `{shared}` appears in both split `{}` and split `{}`",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A split on disk: items sorted by filename, images loaded on demand.
#[derive(Clone, Debug)]
pub struct Split {
    pub spec: SplitSpec,
    pub items: Vec<ItemRef>,
    pub root: PathBuf,
    pub normalization: Normalization,
}

impl Split {
    fn from_items(
        name: &str,
        root: PathBuf,
        normalization: Normalization,
        mut items: Vec<(String, String)>,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data(format!("split `{name}` is empty")));
        }
        items.sort();
        let classes: Vec<String> = items
            .iter()
            .map(|(_, c)| c.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let items: Vec<ItemRef> = items
            .iter()
            .map(|(f, c)| ItemRef {
                filename: f.clone(),
                class: index[c.as_str()],
            })
            .collect();
        let labels: Vec<usize> = items.iter().map(|i| i.class).collect();
        Ok(Split {
            spec: SplitSpec::from_labels(name, classes, &labels),
            items,
            root,
            normalization,
        })
    }

    /// Lazily load images in item order.
    pub fn iter(&self) -> impl Iterator<Item = Result<(ItemRef, Image)>> + Clone + '_ {
        self.items.iter().map(move |item| {
            let img = Image::load(&self.root.join(&item.filename))?;
            Ok((item.clone(), img))
        })
    }

    /// Load every image into memory (parallel over files).
    pub fn load(&self) -> Result<LoadedSplit> {
        let images = par::map_slice(&self.items, |item| Image::load(&self.root.join(&item.filename)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(LoadedSplit {
            spec: self.spec.clone(),
            ids: self.items.iter().map(|i| i.filename.clone()).collect(),
            labels: self.items.iter().map(|i| i.class).collect(),
            images,
            normalization: self.normalization,
        })
    }
}

/// In-memory split: raw `[0, 1]` images plus labels.
#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub spec: SplitSpec,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub images: Vec<Image>,
    pub normalization: Normalization,
}

impl LoadedSplit {
    pub fn from_parts(
        name: &str,
        classes: Vec<String>,
        images: Vec<Image>,
        labels: Vec<usize>,
        normalization: Normalization,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data("image and label counts differ".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::Data(format!("label {bad} out of range for {} classes", classes.len())));
        }
        Ok(LoadedSplit {
            spec: SplitSpec::from_labels(name, classes, &labels),
            ids: (0..images.len()).map(|i| format!("{name}/{i:06}")).collect(),
            labels,
            images,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes()
    }

    /// Deterministic per-class hold-out: every `stride`-th item of each class
    /// goes to the second returned split.
    pub fn hold_out(&self, stride: usize) -> (LoadedSplit, LoadedSplit) {
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for items in &self.spec.class_items {
            for (rank, &i) in items.iter().enumerate() {
                if stride > 0 && rank % stride == stride - 1 {
                    held.push(i);
                } else {
                    keep.push(i);
                }
            }
        }
        keep.sort_unstable();
        held.sort_unstable();
        (self.subset(&keep, "train"), self.subset(&held, "val"))
    }

    fn subset(&self, idx: &[usize], suffix: &str) -> LoadedSplit {
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        LoadedSplit {
            spec: SplitSpec::from_labels(
                format!("{}-{suffix}", self.spec.name),
                self.spec.classes.clone(),
                &labels,
            ),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            labels,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            normalization: self.normalization,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(dir: &Path, name: &str) {
        let p = dir.join(name);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        Image::new(4, 4).save_png(&p).unwrap();
    }

    fn manifest(dir: &Path, splits: &[(&str, &str)]) -> DatasetManifest {
        let mut map = BTreeMap::new();
        for (name, body) in splits {
            let file = format!("{name}.csv");
            fs::write(dir.join(&file), body).unwrap();
            map.insert(name.to_string(), PathBuf::from(file));
        }
        let m = DatasetManifest::new(".", 4, Normalization::default(), map);
        m.save(&dir.join("manifest.toml")).unwrap();
        DatasetManifest::load(&dir.join("manifest.toml")).unwrap()
    }

    #[test]
    fn parses_two_row_split() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "b.png");
        write_png(dir.path(), "a.png");
        let m = manifest(dir.path(), &[("train", "filename,label\nb.png,dog\na.png,cat\n")]);
        let split = m.load_split("train").unwrap();
        assert_eq!(split.spec.classes, vec!["cat", "dog"]);
        assert_eq!(split.spec.n_items(), 2);
        assert_eq!(split.items[0].filename, "a.png");
        assert_eq!(split.load().unwrap().labels, vec![0, 1]);
        assert_eq!(split.iter().count(), 2);
    }

    #[test]
    fn missing_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        let m = manifest(dir.path(), &[("train", "filename,label\na.png,cat\nghost.png,cat\n")]);
        let err = m.load_split("train").unwrap_err().to_string();
        assert!(err.contains("ghost.png") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn duplicate_file_across_splits_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        write_png(dir.path(), "b.png");
        let m = manifest(
            dir.path(),
            &[
                ("train", "filename,label\na.png,cat\n"),
                ("test", "filename,label\na.png,dog\nb.png,dog\n"),
            ],
        );
        let err = m.load_split("train").unwrap_err().to_string();
        assert!(err.contains("a.png"), "{err}");
    }

    #[test]
    fn shared_class_across_splits_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        write_png(dir.path(), "b.png");
        let m = manifest(
            dir.path(),
            &[
                ("train", "filename,label\na.png,cat\n"),
                ("test", "filename,label\nb.png,cat\n"),
            ],
        );
        assert!(m.load_split("test").is_err());
    }

    #[test]
    fn malformed_row_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        let m = manifest(dir.path(), &[("train", "filename,label\na.png,\n")]);
        let err = m.load_split("train").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let m = manifest(dir.path(), &[("train", "file,class\na.png,cat\n")]);
        assert!(m.load_split("train").is_err());
    }

    #[test]
    fn hold_out_is_per_class() {
        let images = vec![Image::new(1, 1); 10];
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let s = LoadedSplit::from_parts("x", vec!["a".into(), "b".into()], images, labels, Normalization::default())
            .unwrap();
        let (train, val) = s.hold_out(5);
        assert_eq!(train.len(), 8);
        assert_eq!(val.len(), 2);
        assert_eq!(val.labels, vec![0, 1]);
    }
}
