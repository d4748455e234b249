use std::io::{BufReader, Write};
use std::path::PathBuf;

use clap::Args;
use forge_core::episode::{parse_metadata, write_jsonl, MetadataRecord};

use crate::error::{usage, Failure, Result};
use crate::io::{open, sink};

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Scene metadata (JSONL).
    #[arg(long)]
    pub metadata: PathBuf,
    /// Key in each record's `scores` map.
    #[arg(long)]
    pub score_field: String,
    /// Inclusive lower bound.
    #[arg(long, allow_negative_numbers = true)]
    pub min: Option<f64>,
    /// Inclusive upper bound.
    #[arg(long, allow_negative_numbers = true)]
    pub max: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct FilterCounts {
    pub kept: usize,
    pub out_of_range: usize,
    pub missing: usize,
}

/// Keeps records whose score lies in the closed interval `[min, max]`.
pub fn filter_records(
    records: Vec<MetadataRecord>,
    field: &str,
    min: Option<f64>,
    max: Option<f64>,
) -> (Vec<MetadataRecord>, FilterCounts) {
    let mut counts = FilterCounts::default();
    let mut kept = Vec::new();
    for r in records {
        match r.scores.get(field) {
            None => counts.missing += 1,
            Some(&s) if min.is_none_or(|m| s >= m) && max.is_none_or(|m| s <= m) => {
                counts.kept += 1;
                kept.push(r);
            }
            Some(_) => counts.out_of_range += 1,
        }
    }
    (kept, counts)
}

pub fn run(args: &FilterArgs) -> Result<()> {
    for b in [args.min, args.max].into_iter().flatten() {
        if !b.is_finite() {
            return Err(usage("bounds must be finite"));
        }
    }
    if let (Some(lo), Some(hi)) = (args.min, args.max) {
        if lo > hi {
            return Err(usage(format!("--min {lo} exceeds --max {hi}")));
        }
    }
    let records = parse_metadata(BufReader::new(open(&args.metadata)?))
        .map_err(|e| Failure::from(e).context(args.metadata.display()))?;
    let (kept, counts) = filter_records(records, &args.score_field, args.min, args.max);
    if counts.missing > 0 {
        log::warn!(
            "dropped {} records without score {:?}",
            counts.missing,
            args.score_field
        );
    }
    let mut w = sink(args.out.as_deref())?;
    write_jsonl(&mut w, &kept)?;
    w.flush()?;
    eprintln!(
        "kept {}, dropped {} ({} out of range, {} missing {:?})",
        counts.kept,
        counts.out_of_range + counts.missing,
        counts.out_of_range,
        counts.missing,
        args.score_field
    );
    Ok(())
}
