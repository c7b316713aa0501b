//! ZSF index files: the member matrix as a tensor file at `path`, and
//! `{"k", "p_percent", "source_indices"}` in `path` + `.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vrf_core::zsf::ZsfIndex;

use crate::error::{Error, Result};
use crate::tensor_io::{self, write_atomic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexSidecar {
    pub k: usize,
    pub p_percent: f64,
    pub source_indices: Vec<u32>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_index(index: &ZsfIndex, path: &Path) -> Result<()> {
    tensor_io::write_matrix(path, &index.members())?;
    let sidecar = IndexSidecar {
        k: index.k(),
        p_percent: index.p_percent(),
        source_indices: index.source_indices().to_vec(),
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string(&sidecar).map_err(|source| Error::Json {
        path: side.clone(),
        source,
    })?;
    write_atomic(&side, text.as_bytes())
}

pub fn load_index(path: &Path) -> Result<ZsfIndex> {
    let members = tensor_io::read_matrix(path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|source| Error::Io {
        path: side.clone(),
        source,
    })?;
    let sidecar: IndexSidecar = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: side.clone(),
        source,
    })?;
    ZsfIndex::from_parts(&members, sidecar.source_indices, sidecar.k, sidecar.p_percent)
        .map_err(|e| Error::Format(e.to_string()).at(path))
}
