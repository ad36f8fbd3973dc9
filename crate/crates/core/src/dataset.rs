//! Corpus ingestion, manifests and the per-animal train/test split.
//!
//! A corpus is a directory with one sub-directory per animal. The directory
//! name is the class id and class indices follow lexicographic order of those
//! names, so a manifest fixes the output layout of every model trained on it.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pixels;

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png", "mzdc"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub class_id: String,
    pub width: u32,
    pub height: u32,
    pub byte_size: u64,
}

/// Train/test membership by path, as stored in a manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPaths {
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    records: Vec<ImageRecord>,
    classes: Vec<String>,
    counts_per_class: BTreeMap<String, usize>,
    split: Option<SplitPaths>,
    seed: Option<u64>,
    train_fraction: Option<f64>,
}

impl DatasetManifest {
    /// Builds a manifest from records, deriving the class list and counts.
    pub fn from_records(mut records: Vec<ImageRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::data("manifest has no records"));
        }
        records.sort_by(|a, b| (&a.class_id, &a.path).cmp(&(&b.class_id, &b.path)));
        let classes: Vec<String> = records
            .iter()
            .map(|r| r.class_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let manifest = Self::assemble(classes, records)?;
        Ok(manifest)
    }

    fn assemble(classes: Vec<String>, records: Vec<ImageRecord>) -> Result<Self> {
        let mut counts_per_class: BTreeMap<String, usize> =
            classes.iter().map(|c| (c.clone(), 0)).collect();
        let mut seen = HashSet::new();
        for r in &records {
            match counts_per_class.get_mut(&r.class_id) {
                Some(n) => *n += 1,
                None => {
                    return Err(Error::data(format!(
                        "record {} has class '{}' which is not in the class list",
                        r.path.display(),
                        r.class_id
                    )))
                }
            }
            if r.width == 0 || r.height == 0 {
                return Err(Error::data(format!("record {} has zero size", r.path.display())));
            }
            if !seen.insert(&r.path) {
                return Err(Error::data(format!("duplicate record {}", r.path.display())));
            }
        }
        if counts_per_class.len() != classes.len() {
            return Err(Error::data("class list contains duplicates"));
        }
        if let Some((class, n)) = counts_per_class.iter().find(|(_, n)| **n < 2) {
            return Err(Error::data(format!(
                "class '{class}' has {n} image(s); at least 2 are needed to appear in both train and test"
            )));
        }
        Ok(Self {
            records,
            classes,
            counts_per_class,
            split: None,
            seed: None,
            train_fraction: None,
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    /// Class ids in canonical index order.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts_per_class(&self) -> &BTreeMap<String, usize> {
        &self.counts_per_class
    }

    pub fn class_index(&self, class_id: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(class_id)).ok()
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.byte_size).sum()
    }

    pub fn split_paths(&self) -> Option<&SplitPaths> {
        self.split.as_ref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn train_fraction(&self) -> Option<f64> {
        self.train_fraction
    }

    /// Stores a split in the manifest so it is persisted by [`save_manifest`].
    pub fn attach_split(&mut self, split: &SplitAssignment, cfg: &SplitConfig) -> Result<()> {
        let paths = split.to_paths();
        self.check_split_paths(&paths)?;
        self.split = Some(paths);
        self.seed = Some(cfg.seed);
        self.train_fraction = Some(cfg.train_fraction);
        Ok(())
    }

    /// Rebuilds the stored split as record lists.
    pub fn stored_split(&self) -> Option<SplitAssignment> {
        let paths = self.split.as_ref()?;
        let by_path: BTreeMap<&Path, &ImageRecord> =
            self.records.iter().map(|r| (r.path.as_path(), r)).collect();
        let pick = |ps: &[PathBuf]| ps.iter().map(|p| by_path[p.as_path()].clone()).collect();
        Some(SplitAssignment {
            train: pick(&paths.train),
            test: pick(&paths.test),
        })
    }

    fn check_split_paths(&self, paths: &SplitPaths) -> Result<()> {
        let known: HashSet<&Path> = self.records.iter().map(|r| r.path.as_path()).collect();
        let mut seen = HashSet::new();
        for p in paths.train.iter().chain(&paths.test) {
            if !known.contains(p.as_path()) {
                return Err(Error::data(format!("split refers to unknown record {}", p.display())));
            }
            if !seen.insert(p) {
                return Err(Error::data(format!("split lists {} twice", p.display())));
            }
        }
        if seen.len() != self.records.len() {
            return Err(Error::data("split does not cover every record"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::arg(format!(
                "train_fraction must lie strictly between 0 and 1, got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Number of test images for a class of `n` images: the floor of the test
    /// share, but never fewer than one image on either side.
    pub fn test_count(&self, n: usize) -> usize {
        debug_assert!(n >= 2);
        // The epsilon absorbs representation error in (1 - fraction), e.g. 1 - 0.9.
        let raw = ((1.0 - self.train_fraction) * n as f64 + 1e-9).floor() as usize;
        raw.clamp(1, n - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

impl SplitAssignment {
    pub fn to_paths(&self) -> SplitPaths {
        SplitPaths {
            train: self.train.iter().map(|r| r.path.clone()).collect(),
            test: self.test.iter().map(|r| r.path.clone()).collect(),
        }
    }

    /// Sorted class ids present in the split.
    pub fn classes(&self) -> Vec<String> {
        self.train
            .iter()
            .chain(&self.test)
            .map(|r| r.class_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Paths that appear on both sides. Empty for any valid split.
    pub fn overlap(&self) -> Vec<PathBuf> {
        let train: HashSet<&Path> = self.train.iter().map(|r| r.path.as_path()).collect();
        self.test
            .iter()
            .filter(|r| train.contains(r.path.as_path()))
            .map(|r| r.path.clone())
            .collect()
    }

    pub fn train_fraction(&self) -> f64 {
        self.train.len() as f64 / (self.train.len() + self.test.len()) as f64
    }

    /// SHA-256 over the sorted train and test path lists.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (tag, side) in [("train", &self.train), ("test", &self.test)] {
            let mut paths: Vec<String> = side.iter().map(|r| r.path.to_string_lossy().into_owned()).collect();
            paths.sort();
            hasher.update(tag.as_bytes());
            for p in paths {
                hasher.update([0u8]);
                hasher.update(p.as_bytes());
            }
            hasher.update([0xffu8]);
        }
        hex::encode(hasher.finalize())
    }

    /// Rewrites every path through `f`, keeping membership.
    pub fn map_paths(&self, mut f: impl FnMut(&ImageRecord) -> ImageRecord) -> SplitAssignment {
        SplitAssignment {
            train: self.train.iter().map(&mut f).collect(),
            test: self.test.iter().map(&mut f).collect(),
        }
    }
}

#[derive(Debug)]
pub struct CorpusScan {
    pub manifest: DatasetManifest,
    /// Files that could not be decoded, with the decoder's reason.
    pub skipped: Vec<(PathBuf, String)>,
}

pub fn scan_corpus(root: &Path) -> Result<DatasetManifest> {
    let scan = scan_corpus_detailed(root)?;
    Ok(scan.manifest)
}

pub fn scan_corpus_detailed(root: &Path) -> Result<CorpusScan> {
    if !root.is_dir() {
        return Err(Error::data(format!("corpus root {} does not exist or is not a directory", root.display())));
    }
    let mut class_dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            class_dirs.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::data(format!("no class directories under {}", root.display())));
    }
    class_dirs.sort();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut classes = Vec::with_capacity(class_dirs.len());
    for (class_id, dir) in class_dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && has_image_extension(p))
            .collect();
        files.sort();
        for path in files {
            let byte_size = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
            match pixels::load_rgb8(&path) {
                Ok(img) => records.push(ImageRecord {
                    path,
                    class_id: class_id.clone(),
                    width: img.width(),
                    height: img.height(),
                    byte_size,
                }),
                Err(e) => {
                    log::warn!("skipping undecodable image: {e}");
                    skipped.push((path, e.to_string()));
                }
            }
        }
        classes.push(class_id);
    }
    let manifest = DatasetManifest::assemble(classes, records)?;
    Ok(CorpusScan { manifest, skipped })
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
        .unwrap_or(false)
}

/// Per-class seeded split; every class lands on both sides.
pub fn stratified_split(manifest: &DatasetManifest, cfg: &SplitConfig) -> Result<SplitAssignment> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in &manifest.classes {
        let mut members: Vec<&ImageRecord> =
            manifest.records.iter().filter(|r| &r.class_id == class).collect();
        members.sort_by(|a, b| a.path.cmp(&b.path));
        members.shuffle(&mut rng);
        let n_test = cfg.test_count(members.len());
        test.extend(members[..n_test].iter().map(|r| (*r).clone()));
        train.extend(members[n_test..].iter().map(|r| (*r).clone()));
    }
    Ok(SplitAssignment { train, test })
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    classes: Vec<String>,
    records: Vec<ImageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<SplitPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_fraction: Option<f64>,
}

const MANIFEST_KEYS: &[&str] = &["classes", "records", "split", "seed", "train_fraction"];

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let file = ManifestFile {
        classes: manifest.classes.clone(),
        records: manifest.records.clone(),
        split: manifest.split.clone(),
        seed: manifest.seed,
        train_fraction: manifest.train_fraction,
    };
    let text = serde_json::to_string_pretty(&file).expect("manifest is always serializable");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let parse_err = |e: serde_json::Error| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
    if let Some(obj) = value.as_object() {
        for key in obj.keys().filter(|k| !MANIFEST_KEYS.contains(&k.as_str())) {
            log::warn!("{}: ignoring unknown manifest field '{key}'", path.display());
        }
    }
    let file: ManifestFile = serde_json::from_value(value).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        column: 0,
        message: e.to_string(),
    })?;
    let mut manifest = DatasetManifest::assemble(file.classes, file.records)?;
    if let Some(split) = file.split {
        manifest.check_split_paths(&split)?;
        manifest.split = Some(split);
    }
    manifest.seed = file.seed;
    manifest.train_fraction = file.train_fraction;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(sizes: &[usize]) -> DatasetManifest {
        let records = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| {
                (0..n).map(move |i| ImageRecord {
                    path: PathBuf::from(format!("c{c:03}/img{i:03}.jpg")),
                    class_id: format!("c{c:03}"),
                    width: 300,
                    height: 300,
                    byte_size: 1000,
                })
            })
            .collect();
        DatasetManifest::from_records(records).unwrap()
    }

    #[test]
    fn test_count_rule() {
        let cfg = SplitConfig::default();
        assert_eq!(cfg.test_count(10), 3);
        assert_eq!(cfg.test_count(4), 1);
        assert_eq!(cfg.test_count(2), 1);
        assert_eq!(cfg.test_count(70), 21);
        let cfg = SplitConfig {
            train_fraction: 0.9,
            seed: 0,
        };
        assert_eq!(cfg.test_count(20), 2);
    }

    #[test]
    fn split_counts_per_class() {
        let m = manifest(&[10, 4]);
        let s = stratified_split(&m, &SplitConfig::default()).unwrap();
        let count = |side: &[ImageRecord], c: &str| side.iter().filter(|r| r.class_id == c).count();
        assert_eq!((count(&s.train, "c000"), count(&s.test, "c000")), (7, 3));
        assert_eq!((count(&s.train, "c001"), count(&s.test, "c001")), (3, 1));
        assert!(s.overlap().is_empty());
    }

    #[test]
    fn split_is_seeded() {
        let m = manifest(&[12, 9, 30]);
        let a = stratified_split(&m, &SplitConfig { seed: 5, ..Default::default() }).unwrap();
        let b = stratified_split(&m, &SplitConfig { seed: 5, ..Default::default() }).unwrap();
        let c = stratified_split(&m, &SplitConfig { seed: 6, ..Default::default() }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn rejects_bad_fraction() {
        let m = manifest(&[4, 4]);
        for f in [0.0, 1.0, -0.2, f64::NAN] {
            let cfg = SplitConfig {
                train_fraction: f,
                seed: 0,
            };
            assert!(matches!(stratified_split(&m, &cfg), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn singleton_class_is_rejected_by_name() {
        let mut records = manifest(&[3]).records().to_vec();
        records.push(ImageRecord {
            path: "lonely/a.jpg".into(),
            class_id: "lonely".into(),
            width: 1,
            height: 1,
            byte_size: 1,
        });
        let err = DatasetManifest::from_records(records).unwrap_err();
        assert!(err.to_string().contains("lonely"), "{err}");
    }

    #[test]
    fn manifest_text_round_trip_with_split() {
        let mut m = manifest(&[5, 6, 7]);
        let cfg = SplitConfig { seed: 11, ..Default::default() };
        let s = stratified_split(&m, &cfg).unwrap();
        m.attach_split(&s, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        save_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.stored_split().unwrap(), s);
    }

    #[test]
    fn truncated_manifest_reports_position() {
        let m = manifest(&[2, 2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_manifest(&m, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let err = parse_manifest(&text[..text.len() / 2], &path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert!(line > 1),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let text = r#"{"classes":["a"],"records":[
            {"path":"a/1.jpg","class_id":"a","width":3,"height":3,"byte_size":9,"camera":"x"},
            {"path":"a/2.jpg","class_id":"a","width":3,"height":3,"byte_size":9}],
            "owner":"farm 7"}"#;
        let m = parse_manifest(text, Path::new("inline")).unwrap();
        assert_eq!(m.records().len(), 2);
        assert_eq!(m.classes(), ["a"]);
    }

    #[test]
    fn split_must_cover_records() {
        let text = r#"{"classes":["a"],"records":[
            {"path":"a/1.jpg","class_id":"a","width":3,"height":3,"byte_size":9},
            {"path":"a/2.jpg","class_id":"a","width":3,"height":3,"byte_size":9}],
            "split":{"train":["a/1.jpg"],"test":[]}}"#;
        assert!(parse_manifest(text, Path::new("inline")).is_err());
    }
}
