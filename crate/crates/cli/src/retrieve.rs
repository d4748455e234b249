use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use forge_core::episode::{
    canonical_taxonomy, load_demonstrations, load_metadata, read_jsonl, write_jsonl, Demonstration,
    EmbeddingStore, Episode, MetadataRecord, Modality, Output, Taxonomy, DEFAULT_MAX_SHOTS,
};
use forge_core::fusion::{
    build_dpp_factor, greedy_dpp_select, rank_top_n, CandidatePool, FusionConfig,
};
use forge_core::intent::{parse_rule, retrieve_by_rule, validate_scope, Rule};
use forge_core::linalg::Mat;
use rayon::prelude::*;
use serde::Deserialize;

use crate::config::ForgeConfig;
use crate::error::{data, usage, Failure, Kind, Result};
use crate::io::{load_store, open, sink, EmbeddingSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Fusion,
    Intent,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long, value_enum, default_value = "fusion")]
    pub mode: Mode,
    /// Query records (JSONL).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Demonstration pool (JSONL, one demonstration per line).
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Embedding file, optionally prefixed with `visual=` or `text=`. Repeatable.
    #[arg(long)]
    pub embeddings: Vec<EmbeddingSpec>,
    /// Scene metadata (JSONL); needed by intent mode and by --s-field.
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    #[arg(long, conflicts_with = "rule_file")]
    pub rule: Option<String>,
    #[arg(long)]
    pub rule_file: Option<PathBuf>,
    /// Use `scores[FIELD]` from the metadata as DPP relevance instead of the fused score.
    #[arg(long)]
    pub s_field: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One line of the queries file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    #[serde(default)]
    pub episode_id: Option<String>,
    #[serde(default)]
    pub taxonomy: Option<Taxonomy>,
    pub subtask: String,
    pub query: Demonstration,
    #[serde(default)]
    pub gold: Option<Output>,
}

fn load_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    let recs: Vec<(usize, QueryRecord)> =
        read_jsonl(std::io::BufReader::new(open(path)?))
            .map_err(|e| Failure::from(e).context(path.display()))?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(recs.len());
    for (line, q) in recs {
        let id = q.episode_id.clone().unwrap_or_else(|| q.query.id.clone());
        if !seen.insert(id.clone()) {
            return Err(data(format!(
                "{}: line {line}: duplicate episode id {id:?}",
                path.display()
            )));
        }
        out.push(q);
    }
    Ok(out)
}

fn episode_shell(q: &QueryRecord, shots: Vec<Demonstration>) -> Result<Episode> {
    let taxonomy = match q.taxonomy.or_else(|| canonical_taxonomy(&q.subtask)) {
        Some(t) => t,
        None => {
            return Err(data(format!(
                "query {:?}: subtask {:?} is not canonical; give a taxonomy",
                q.query.id, q.subtask
            )))
        }
    };
    let ep = Episode {
        episode_id: q.episode_id.clone().unwrap_or_else(|| q.query.id.clone()),
        taxonomy,
        subtask: q.subtask.clone(),
        shots,
        query: q.query.clone(),
        gold: q.gold.clone(),
    };
    ep.validate(DEFAULT_MAX_SHOTS)
        .map_err(|e| data(format!("episode {:?}: {e}", ep.episode_id)))?;
    Ok(ep)
}

/// Relevance source for the DPP quality term.
enum Relevance<'a> {
    Fused,
    Field(&'a str, HashMap<&'a str, &'a MetadataRecord>),
}

struct FusionCtx<'a> {
    store: &'a EmbeddingStore,
    cand_ids: Vec<&'a str>,
    by_id: HashMap<&'a str, &'a Demonstration>,
    cfg: FusionConfig,
    beta: f64,
    k: usize,
    relevance: Relevance<'a>,
}

fn fusion_shots(ctx: &FusionCtx, q: &QueryRecord) -> Result<Vec<Demonstration>> {
    let ranked = rank_top_n(&q.query.id, ctx.cand_ids.iter().copied(), ctx.store, &ctx.cfg)?;
    if ranked.is_empty() {
        return Ok(Vec::new());
    }
    let rows: Vec<&[f64]> = ranked
        .iter()
        .map(|(id, _)| {
            ctx.store
                .get(Modality::Visual, id)
                .map(|r| r.values.as_slice())
                .ok_or_else(|| data(format!("missing visual embedding for {id:?}")))
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = match &ctx.relevance {
        Relevance::Fused => ranked.iter().map(|(_, s)| *s).collect(),
        Relevance::Field(field, meta) => ranked
            .iter()
            .map(|(id, _)| {
                meta.get(id.as_str())
                    .and_then(|m| m.scores.get(*field))
                    .copied()
                    .ok_or_else(|| data(format!("candidate {id:?} has no score {field:?}")))
            })
            .collect::<Result<_>>()?,
    };
    let ids: Vec<String> = ranked.into_iter().map(|(id, _)| id).collect();
    let pool = CandidatePool::new(ids, Mat::from_rows(&rows), scores, ctx.beta)?;
    let factor = build_dpp_factor(&pool)?;
    let sel = greedy_dpp_select(&factor, ctx.k.min(pool.len()))?;
    Ok(sel
        .indices
        .iter()
        .map(|&i| ctx.by_id[pool.ids[i].as_str()].clone())
        .collect())
}

fn intent_shots(
    matched: &[&Demonstration],
    k: usize,
    q: &QueryRecord,
) -> Vec<Demonstration> {
    matched
        .iter()
        .filter(|d| d.id != q.query.id)
        .take(k)
        .map(|d| (*d).clone())
        .collect()
}

fn read_rule(args: &RetrieveArgs) -> Result<Rule> {
    let (text, kind) = match (&args.rule, &args.rule_file) {
        (Some(r), None) => (r.clone(), Kind::Usage),
        (None, Some(p)) => (
            std::fs::read_to_string(p)
                .map_err(|e| data(format!("cannot read {}: {e}", p.display())))?,
            Kind::Data,
        ),
        _ => return Err(usage("intent mode needs --rule or --rule-file")),
    };
    let rule = parse_rule(text.trim()).map_err(|e| Failure::new(kind, e))?;
    validate_scope(&rule).map_err(|e| Failure::new(kind, e))?;
    Ok(rule)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str, mode: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| usage(format!("{mode} mode needs {flag}")))
}

pub fn run(args: &RetrieveArgs, cfg: &ForgeConfig) -> Result<()> {
    let mode = match args.mode {
        Mode::Fusion => "fusion",
        Mode::Intent => "intent",
    };
    let queries_path = required(&args.queries, "--queries", mode)?;
    let cand_path = required(&args.candidates, "--candidates", mode)?;
    if args.mode == Mode::Fusion && args.embeddings.is_empty() {
        return Err(usage("fusion mode needs --embeddings"));
    }
    if args.mode == Mode::Intent && args.rule.is_none() && args.rule_file.is_none() {
        return Err(usage("intent mode needs --rule or --rule-file"));
    }
    if args.mode == Mode::Intent && args.metadata.is_none() {
        return Err(usage("intent mode needs --metadata"));
    }
    if args.s_field.is_some() && (args.mode != Mode::Fusion || args.metadata.is_none()) {
        return Err(usage("--s-field applies to fusion mode and needs --metadata"));
    }
    let rule = match args.mode {
        Mode::Intent => Some(read_rule(args)?),
        Mode::Fusion => None,
    };

    let queries = load_queries(queries_path)?;
    let candidates = load_demonstrations(cand_path)
        .map_err(|e| Failure::from(e).context(cand_path.display()))?;
    if let Some(d) = candidates.iter().find(|d| d.output.is_none()) {
        return Err(data(format!("candidate {:?} has no output", d.id)));
    }
    let by_id: HashMap<&str, &Demonstration> =
        candidates.iter().map(|d| (d.id.as_str(), d)).collect();
    let metadata = match &args.metadata {
        Some(p) => load_metadata(p).map_err(|e| Failure::from(e).context(p.display()))?,
        None => Vec::new(),
    };
    log::info!(
        "{mode} retrieval: {} queries, {} candidates, k = {}",
        queries.len(),
        candidates.len(),
        cfg.k
    );

    let episodes: Vec<Episode> = match rule {
        None => {
            let store = load_store(&args.embeddings)?;
            let relevance = match &args.s_field {
                Some(f) => Relevance::Field(
                    f.as_str(),
                    metadata.iter().map(|m| (m.scene_id.as_str(), m)).collect(),
                ),
                None => Relevance::Fused,
            };
            let ctx = FusionCtx {
                store: &store,
                cand_ids: candidates.iter().map(|d| d.id.as_str()).collect(),
                by_id,
                cfg: FusionConfig::new(cfg.lambda, cfg.top_n)?,
                beta: cfg.beta,
                k: cfg.k,
                relevance,
            };
            queries
                .par_iter()
                .map(|q| episode_shell(q, fusion_shots(&ctx, q)?))
                .collect::<Result<_>>()?
        }
        Some(rule) => {
            let matched: Vec<&Demonstration> = retrieve_by_rule(&rule, &metadata)
                .iter()
                .map(|id| {
                    by_id.get(id.as_str()).copied().ok_or_else(|| {
                        data(format!("scene {id:?} matches the rule but has no candidate"))
                    })
                })
                .collect::<Result<_>>()?;
            log::info!("rule matched {} scenes", matched.len());
            queries
                .par_iter()
                .map(|q| episode_shell(q, intent_shots(&matched, cfg.k, q)))
                .collect::<Result<_>>()?
        }
    };

    let mut w = sink(args.out.as_deref())?;
    write_jsonl(&mut w, &episodes)?;
    w.flush()?;
    log::info!("wrote {} episodes", episodes.len());
    Ok(())
}
