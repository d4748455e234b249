use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use forge_core::episode::{read_embeddings, EmbeddingStore, Modality};

use crate::error::{data, usage, Result};

/// Stdout unless `out` is given.
pub fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| {
            data(format!("cannot create {}: {e}", p.display()))
        })?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| data(format!("cannot open {}: {e}", path.display())))
}

/// `[visual=|text=]PATH`. The prefix is required for binary containers.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpec {
    pub modality: Option<Modality>,
    pub path: PathBuf,
}

impl FromStr for EmbeddingSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if let Some((head, tail)) = s.split_once('=') {
            if let Ok(m) = head.parse::<Modality>() {
                if tail.is_empty() {
                    return Err(format!("missing path after {head}="));
                }
                return Ok(Self {
                    modality: Some(m),
                    path: tail.into(),
                });
            }
        }
        Ok(Self {
            modality: None,
            path: s.into(),
        })
    }
}

pub fn load_store(specs: &[EmbeddingSpec]) -> Result<EmbeddingStore> {
    if specs.is_empty() {
        return Err(usage("at least one --embeddings file is required"));
    }
    let mut store = EmbeddingStore::new();
    for spec in specs {
        let file = open(&spec.path)?;
        read_embeddings(file, spec.modality, true, &mut store)
            .map_err(|e| data(format!("{}: {e}", spec.path.display())))?;
    }
    Ok(store)
}
