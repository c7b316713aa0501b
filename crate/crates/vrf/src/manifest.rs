//! Dataset manifest: a JSON document naming the tensor files of each split.
//!
//! ```json
//! {"num_classes": 10,
//!  "splits": [{"name": "train", "role": "id-train",
//!              "features_zs": "train.features_zs.vrf", "features_ft": "...",
//!              "logits_zs": "...", "logits_ft": "...", "labels": "..."}]}
//! ```
//!
//! Paths are relative to the manifest's directory. Loading checks every
//! file header eagerly; tensor data is read per split on demand.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vrf_core::outputs::{ModelOutputs, ModelTag, SplitData, SplitRole};

use crate::error::{Error, Result};
use crate::tensor_io::{self, DType, Header};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub name: String,
    pub role: SplitRole,
    pub features_zs: String,
    pub features_ft: String,
    pub logits_zs: String,
    pub logits_ft: String,
    pub labels: String,
}

impl SplitEntry {
    /// File names `<name>.<field>.vrf` for the five tensors of a split.
    pub fn conventional(name: &str, role: SplitRole) -> Self {
        let f = |field: &str| format!("{name}.{field}.vrf");
        SplitEntry {
            name: name.into(),
            role,
            features_zs: f("features_zs"),
            features_ft: f("features_ft"),
            logits_zs: f("logits_zs"),
            logits_ft: f("logits_ft"),
            labels: f("labels"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDoc {
    pub num_classes: usize,
    pub splits: Vec<SplitEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitShape {
    pub rows: usize,
    pub dim_zs: usize,
    pub dim_ft: usize,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    root: PathBuf,
    doc: ManifestDoc,
    shapes: Vec<SplitShape>,
}

fn json_at(path: &Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
    move |source| Error::Json {
        path: path.to_path_buf(),
        source,
    }
}

fn mismatch(split: &str, what: String, expected: u64, found: u64) -> Error {
    Error::DimensionMismatch {
        split: split.into(),
        what,
        expected,
        found,
    }
}

impl ManifestDoc {
    /// Checks that do not touch the file system.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Manifest(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > u32::MAX as usize {
            return Err(Error::Manifest("num_classes does not fit in u32".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.splits {
            if s.name.is_empty() {
                return Err(Error::Manifest("empty split name".into()));
            }
            if !seen.insert(s.name.as_str()) {
                return Err(Error::DuplicateSplit(s.name.clone()));
            }
        }
        let count = |role| self.splits.iter().filter(|s| s.role == role).count();
        match count(SplitRole::IdTrain) {
            1 => {}
            n => {
                return Err(Error::Manifest(format!(
                    "exactly one split must have role id-train, found {n}"
                )))
            }
        }
        if count(SplitRole::IdVal) == 0 {
            return Err(Error::Manifest("at least one split must have role id-val".into()));
        }
        Ok(())
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let doc: ManifestDoc = serde_json::from_str(&text).map_err(json_at(path))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_doc(root, doc)
    }

    /// Validates `doc` against the files under `root`.
    pub fn from_doc(root: PathBuf, doc: ManifestDoc) -> Result<Self> {
        doc.validate()?;
        let mut shapes = Vec::with_capacity(doc.splits.len());
        for s in &doc.splits {
            shapes.push(Self::check_headers(&root, s, doc.num_classes)?);
        }
        Ok(Manifest { root, doc, shapes })
    }

    fn check_headers(root: &Path, s: &SplitEntry, num_classes: usize) -> Result<SplitShape> {
        let header = |file: &str| tensor_io::read_header(&root.join(file));
        let matrix = |field: &str, file: &str| -> Result<(u64, u64)> {
            let h: Header = header(file)?;
            match (h.dtype, &h.dims[..]) {
                (DType::F32, &[r, c]) => Ok((r, c)),
                _ => Err(Error::Manifest(format!(
                    "split `{}`: {field} must be an f32 matrix, got {:?} with dims {:?}",
                    s.name, h.dtype, h.dims
                ))),
            }
        };
        let (n, dim_zs) = matrix("features_zs", &s.features_zs)?;
        let (n_ft, dim_ft) = matrix("features_ft", &s.features_ft)?;
        let (n_lz, k_zs) = matrix("logits_zs", &s.logits_zs)?;
        let (n_lf, k_ft) = matrix("logits_ft", &s.logits_ft)?;
        let labels = header(&s.labels)?;
        let n_labels = match (labels.dtype, &labels.dims[..]) {
            (DType::U32, &[n]) => n,
            _ => {
                return Err(Error::Manifest(format!(
                    "split `{}`: labels must be a u32 vector, got {:?} with dims {:?}",
                    s.name, labels.dtype, labels.dims
                )))
            }
        };
        for (what, found) in [
            ("features_ft rows", n_ft),
            ("logits_zs rows", n_lz),
            ("logits_ft rows", n_lf),
            ("labels length", n_labels),
        ] {
            if found != n {
                return Err(mismatch(&s.name, what.into(), n, found));
            }
        }
        for (what, found) in [("logits_zs columns", k_zs), ("logits_ft columns", k_ft)] {
            if found != num_classes as u64 {
                return Err(mismatch(&s.name, what.into(), num_classes as u64, found));
            }
        }
        for (what, d) in [("features_zs columns", dim_zs), ("features_ft columns", dim_ft)] {
            if d == 0 {
                return Err(mismatch(&s.name, what.into(), 1, 0));
            }
        }
        Ok(SplitShape {
            rows: n as usize,
            dim_zs: dim_zs as usize,
            dim_ft: dim_ft as usize,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn doc(&self) -> &ManifestDoc {
        &self.doc
    }

    pub fn num_classes(&self) -> usize {
        self.doc.num_classes
    }

    pub fn splits(&self) -> &[SplitEntry] {
        &self.doc.splits
    }

    pub fn entry(&self, name: &str) -> Result<&SplitEntry> {
        self.doc
            .splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::MissingSplit(name.into()))
    }

    pub fn shape(&self, name: &str) -> Result<SplitShape> {
        let i = self
            .doc
            .splits
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::MissingSplit(name.into()))?;
        Ok(self.shapes[i])
    }

    pub fn names_with_role(&self, role: SplitRole) -> Vec<&str> {
        self.doc
            .splits
            .iter()
            .filter(|s| s.role == role)
            .map(|s| s.name.as_str())
            .collect()
    }

    pub fn train_name(&self) -> &str {
        self.names_with_role(SplitRole::IdTrain)[0]
    }

    /// First id-val split in manifest order.
    pub fn val_name(&self) -> &str {
        self.names_with_role(SplitRole::IdVal)[0]
    }

    /// Reads and validates one split's tensors.
    pub fn load_split(&self, name: &str) -> Result<SplitData> {
        let s = self.entry(name)?;
        let path = |f: &str| self.root.join(f);
        let read = |f: &str| tensor_io::read_matrix(&path(f));
        let labels = tensor_io::read_labels(&path(&s.labels))?;
        let k = self.doc.num_classes;
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= k) {
            return Err(Error::Manifest(format!(
                "split `{name}`: label {label} at row {row} is >= num_classes = {k}"
            )));
        }
        let zs = ModelOutputs::new(read(&s.features_zs)?, read(&s.logits_zs)?, ModelTag::Zs);
        let ft = ModelOutputs::new(read(&s.features_ft)?, read(&s.logits_ft)?, ModelTag::Ft);
        // Files may have changed since the headers were checked.
        let data = SplitData::new(zs?, ft?, labels).map_err(|e| Error::Manifest(format!("split `{name}`: {e}")))?;
        if data.num_classes() != k {
            return Err(mismatch(name, "logits columns".into(), k as u64, data.num_classes() as u64));
        }
        Ok(data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_doc(path, &self.doc)
    }
}

pub fn write_doc(path: &Path, doc: &ManifestDoc) -> Result<()> {
    let text = serde_json::to_string_pretty(doc).map_err(json_at(path))?;
    tensor_io::write_atomic(path, text.as_bytes())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path)
}
