use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SemcError};

/// Class names of the liver ultrasound plane taxonomy, in label order.
pub const LIVER_PLANES: [&str; 7] = ["FHP1", "FHP2", "LLP", "RLP", "LPV-S", "HRP", "NSP"];

/// Per-class image counts of the liver plane dataset, aligned with
/// [`LIVER_PLANES`].
pub const LIVER_PLANE_COUNTS: [usize; 7] = [979, 324, 1038, 490, 840, 1072, 4626];

pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub label: usize,
}

/// Labelled image list with a dense class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    root: PathBuf,
    classes: Vec<String>,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn indices(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = SemcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(SemcError::Config(format!(
                "split must be train, val or test, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, serde::Deserialize)]
struct Row {
    path: String,
    label: String,
}

impl DatasetManifest {
    /// Builds and validates a manifest without touching the filesystem.
    pub fn new(
        root: impl Into<PathBuf>,
        classes: Vec<String>,
        entries: Vec<ManifestEntry>,
    ) -> Result<Self> {
        let m = Self {
            root: root.into(),
            classes,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    /// Reads `path` (CSV with header `path,label`) and the `classes.txt` next
    /// to it. Image paths are resolved relative to the manifest's directory
    /// and must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let classes_path = root.join(CLASSES_FILE);
        let classes: Vec<String> = fs::read_to_string(&classes_path)
            .map_err(|e| SemcError::io(&classes_path, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let index: BTreeMap<&str, usize> = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let file = fs::File::open(path).map_err(|e| SemcError::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader
            .headers()
            .map_err(|e| SemcError::Data(format!("{}: {e}", path.display())))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label"] {
            return Err(SemcError::Data(format!(
                "{}: header must be `path,label`",
                path.display()
            )));
        }
        let mut entries = Vec::new();
        for (line, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| SemcError::Data(format!("{}: {e}", path.display())))?;
            let label = *index.get(row.label.trim()).ok_or_else(|| {
                SemcError::Data(format!(
                    "{}: row {} has unknown label `{}`",
                    path.display(),
                    line + 2,
                    row.label
                ))
            })?;
            entries.push(ManifestEntry {
                path: PathBuf::from(row.path.trim()),
                label,
            });
        }
        let manifest = Self::new(root, classes, entries)?;
        for e in &manifest.entries {
            let full = manifest.root.join(&e.path);
            if !full.is_file() {
                return Err(SemcError::io(
                    full,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "image listed in manifest not found",
                    ),
                ));
            }
        }
        Ok(manifest)
    }

    /// Writes `manifest.csv` and `classes.txt` into the root directory.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let classes_path = self.root.join(CLASSES_FILE);
        fs::write(&classes_path, self.classes.join("\n") + "\n")
            .map_err(|e| SemcError::io(&classes_path, e))?;
        let mut w = csv::Writer::from_path(manifest_path)
            .map_err(|e| SemcError::Data(format!("{}: {e}", manifest_path.display())))?;
        let csv_err = |e: csv::Error| SemcError::Data(format!("{}: {e}", manifest_path.display()));
        w.write_record(["path", "label"]).map_err(csv_err)?;
        for e in &self.entries {
            let p = e.path.to_string_lossy();
            w.write_record([p.as_ref(), self.classes[e.label].as_str()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| SemcError::io(manifest_path, e))
    }

    fn validate(&self) -> Result<()> {
        let c = self.classes.len();
        if c < 2 {
            return Err(SemcError::Data(format!(
                "need at least two classes for contrastive training, got {c}"
            )));
        }
        let mut names = HashSet::new();
        for name in &self.classes {
            if !names.insert(name) {
                return Err(SemcError::Data(format!("duplicate class name `{name}`")));
            }
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.label >= c {
                return Err(SemcError::Data(format!(
                    "label {} of {} outside [0,{c})",
                    e.label,
                    e.path.display()
                )));
            }
            if !seen.insert(&e.path) {
                return Err(SemcError::Data(format!(
                    "duplicate path {}",
                    e.path.display()
                )));
            }
        }
        let counts = self.class_counts();
        if let Some(empty) = counts.iter().position(|&n| n == 0) {
            return Err(SemcError::Data(format!(
                "class `{}` has no images",
                self.classes[empty]
            )));
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.entries[index].path)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in &self.entries {
            counts[e.label] += 1;
        }
        counts
    }

    /// Stratified split: within each class the indices are shuffled with
    /// `seed`, then `round(0.70·n)` go to train, `round(0.15·n)` to
    /// validation and the rest to test. Index lists are sorted.
    pub fn split(&self, seed: u64) -> Split {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut split = Split {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for class in 0..self.classes.len() {
            let mut idx: Vec<usize> = (0..self.entries.len())
                .filter(|&i| self.entries[i].label == class)
                .collect();
            idx.shuffle(&mut rng);
            let n = idx.len();
            let n_train = ((n as f64) * 0.70).round() as usize;
            let n_val = (((n as f64) * 0.15).round() as usize).min(n - n_train);
            split.train.extend_from_slice(&idx[..n_train]);
            split.val.extend_from_slice(&idx[n_train..n_train + n_val]);
            split.test.extend_from_slice(&idx[n_train + n_val..]);
        }
        split.train.sort_unstable();
        split.val.sort_unstable();
        split.test.sort_unstable();
        split
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(counts: &[usize]) -> DatasetManifest {
        let classes = (0..counts.len()).map(|c| format!("c{c}")).collect();
        let entries = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| {
                (0..n).map(move |i| ManifestEntry {
                    path: PathBuf::from(format!("{c}/{i}.png")),
                    label: c,
                })
            })
            .collect();
        DatasetManifest::new("/data", classes, entries).unwrap()
    }

    #[test]
    fn liver_plane_counts_total() {
        let m = synthetic(&LIVER_PLANE_COUNTS);
        assert_eq!(m.num_classes(), 7);
        assert_eq!(m.len(), 9369);
    }

    #[test]
    fn single_class_rejected() {
        let entries = vec![ManifestEntry {
            path: "a.png".into(),
            label: 0,
        }];
        let err = DatasetManifest::new("/", vec!["x".into()], entries).unwrap_err();
        assert!(matches!(err, SemcError::Data(_)));
    }

    #[test]
    fn duplicate_path_named() {
        let e = |l| ManifestEntry {
            path: "same.png".into(),
            label: l,
        };
        let err =
            DatasetManifest::new("/", vec!["a".into(), "b".into()], vec![e(0), e(1)]).unwrap_err();
        assert!(matches!(&err, SemcError::Data(m) if m.contains("same.png")));
    }

    #[test]
    fn empty_class_rejected() {
        let entries = vec![ManifestEntry {
            path: "a.png".into(),
            label: 0,
        }];
        let err = DatasetManifest::new("/", vec!["a".into(), "b".into()], entries).unwrap_err();
        assert!(matches!(&err, SemcError::Data(m) if m.contains("`b`")));
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let m = synthetic(&LIVER_PLANE_COUNTS);
        let s = m.split(7);
        assert_eq!(s, m.split(7));
        assert_ne!(s, m.split(8));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), m.len());
        for (c, &n) in LIVER_PLANE_COUNTS.iter().enumerate() {
            let count = |idx: &[usize]| idx.iter().filter(|&&i| m.entries()[i].label == c).count();
            for (part, frac) in [(&s.train, 0.70), (&s.val, 0.15), (&s.test, 0.15)] {
                assert!((count(part) as f64 - n as f64 * frac).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn small_classes_split_fourteen_three_three() {
        let s = synthetic(&[20, 20]).split(0);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (28, 6, 6));
    }

    #[test]
    fn load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::write(root.join("a.png"), b"x").unwrap();
        fs::write(root.join("b.png"), b"x").unwrap();
        let m = DatasetManifest::new(
            root,
            vec!["A".into(), "B".into()],
            vec![
                ManifestEntry {
                    path: "a.png".into(),
                    label: 0,
                },
                ManifestEntry {
                    path: "b.png".into(),
                    label: 1,
                },
            ],
        )
        .unwrap();
        let mpath = root.join("manifest.csv");
        m.save(&mpath).unwrap();
        assert_eq!(DatasetManifest::load(&mpath).unwrap(), m);

        fs::write(&mpath, "path,label\na.png,A\nb.png,Z\n").unwrap();
        assert!(
            matches!(DatasetManifest::load(&mpath), Err(SemcError::Data(m)) if m.contains("`Z`"))
        );

        fs::write(&mpath, "path,label\na.png,A\nc.png,B\n").unwrap();
        assert!(matches!(
            DatasetManifest::load(&mpath),
            Err(SemcError::Io { .. })
        ));

        assert!(matches!(
            DatasetManifest::load(&root.join("missing.csv")),
            Err(SemcError::Io { .. })
        ));
    }
}
