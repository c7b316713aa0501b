//! Writes synthetic datasets as a manifest plus tensor files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vrf_core::synth::{SynthDataset, SynthSpec, RNG_ALGORITHM};

use crate::error::{Error, Result};
use crate::manifest::{write_doc, ManifestDoc, SplitEntry};
use crate::report::write_json;
use crate::tensor_io::{write_labels, write_matrix};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPEC_FILE: &str = "synth_spec.json";

/// Written next to the manifest so that the data can be regenerated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecRecord {
    pub rng: String,
    pub spec: SynthSpec,
}

/// Returns the manifest path.
pub fn write_dataset(dir: &Path, spec: &SynthSpec, data: &SynthDataset) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut splits = Vec::with_capacity(data.splits.len());
    for s in &data.splits {
        let entry = SplitEntry::conventional(&s.name, s.role);
        write_matrix(&dir.join(&entry.features_zs), &s.data.zs.features)?;
        write_matrix(&dir.join(&entry.features_ft), &s.data.ft.features)?;
        write_matrix(&dir.join(&entry.logits_zs), &s.data.zs.logits)?;
        write_matrix(&dir.join(&entry.logits_ft), &s.data.ft.logits)?;
        write_labels(&dir.join(&entry.labels), &s.data.labels)?;
        splits.push(entry);
    }
    let manifest = dir.join(MANIFEST_FILE);
    write_doc(
        &manifest,
        &ManifestDoc {
            num_classes: data.num_classes,
            splits,
        },
    )?;
    write_json(
        &dir.join(SPEC_FILE),
        &SpecRecord {
            rng: RNG_ALGORITHM.into(),
            spec: spec.clone(),
        },
    )?;
    Ok(manifest)
}

pub fn generate_to(dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    let data = vrf_core::synth::generate_dataset(spec)?;
    write_dataset(dir, spec, &data)
}
