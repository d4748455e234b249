use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use forge_core::episode::{
    load_demonstrations, parse_episodes, parse_metadata, EpisodeLoadOptions, Modality,
    DEFAULT_MAX_SHOTS,
};
use serde::Serialize;

use crate::error::{usage, Failure, Result};
use crate::io::{load_store, open, EmbeddingSpec};

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub episodes: Vec<PathBuf>,
    /// Same syntax as `retrieve --embeddings`.
    #[arg(long)]
    pub embeddings: Vec<EmbeddingSpec>,
    #[arg(long)]
    pub metadata: Vec<PathBuf>,
    /// Demonstration pools.
    #[arg(long)]
    pub candidates: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_SHOTS)]
    pub max_shots: usize,
}

#[derive(Debug, Serialize)]
struct Report {
    kind: &'static str,
    path: String,
    records: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    visual_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text_dim: Option<usize>,
}

fn located(path: &Path) -> impl Fn(forge_core::episode::RecordError) -> Failure + '_ {
    move |e| Failure::from(e).context(path.display())
}

pub fn run(args: &ValidateArgs) -> Result<()> {
    if args.episodes.is_empty()
        && args.embeddings.is_empty()
        && args.metadata.is_empty()
        && args.candidates.is_empty()
    {
        return Err(usage("nothing to validate; pass --episodes, --embeddings, --metadata or --candidates"));
    }
    let mut reports = Vec::new();
    let opts = EpisodeLoadOptions {
        max_shots: args.max_shots,
    };
    for p in &args.episodes {
        let n = parse_episodes(BufReader::new(open(p)?), opts).map_err(located(p))?.len();
        reports.push(Report {
            kind: "episodes",
            path: p.display().to_string(),
            records: n,
            visual_dim: None,
            text_dim: None,
        });
    }
    for spec in &args.embeddings {
        let store = load_store(std::slice::from_ref(spec))?;
        reports.push(Report {
            kind: "embeddings",
            path: spec.path.display().to_string(),
            records: store.len(),
            visual_dim: store.dim(Modality::Visual),
            text_dim: store.dim(Modality::Text),
        });
    }
    for p in &args.metadata {
        let n = parse_metadata(BufReader::new(open(p)?)).map_err(located(p))?.len();
        reports.push(Report {
            kind: "metadata",
            path: p.display().to_string(),
            records: n,
            visual_dim: None,
            text_dim: None,
        });
    }
    for p in &args.candidates {
        let n = load_demonstrations(p).map_err(located(p))?.len();
        reports.push(Report {
            kind: "candidates",
            path: p.display().to_string(),
            records: n,
            visual_dim: None,
            text_dim: None,
        });
    }
    let mut out = std::io::stdout().lock();
    for r in &reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
