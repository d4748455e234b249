use std::collections::BTreeMap;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use forge_core::episode::{read_jsonl, ShotCurve, Taxonomy};
use forge_core::metrics::{
    pearson, relative_change, spearman, stability_report, summarize, win_tie_lose, Outcome,
    Perturbation,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{data, Failure, Result};
use crate::io::{open, sink};
use crate::table::{fmt3, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Jsonl,
    Table,
}

#[derive(Debug, Args)]
pub struct Output {
    /// What goes to stdout (or --out).
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: Format,
    /// Also write the plain-text table here.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Zero-shot, peak and efficiency per shot curve.
    Curves {
        results: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Deviation of perturbed curves from their clean counterparts.
    Stability {
        results: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Pearson and Spearman correlation between two numeric fields.
    Align {
        records: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
        #[command(flatten)]
        output: Output,
    },
    /// Mean relative change of a variant over a base set of curves.
    Transfer {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        variant: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Win / tie / lose shares from pairwise judgments.
    Human {
        judgments: PathBuf,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskModality {
    Und,
    Gen,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawResult {
    model: String,
    task: String,
    taxonomy: Taxonomy,
    modality: TaskModality,
    shots: Vec<u32>,
    values: Vec<f64>,
    /// Absent for clean runs.
    #[serde(default)]
    perturbation: Option<Perturbation>,
}

#[derive(Debug, Clone)]
pub struct ResultRecord {
    pub model: String,
    pub task: String,
    pub taxonomy: Taxonomy,
    pub modality: TaskModality,
    pub curve: ShotCurve,
    pub perturbation: Option<Perturbation>,
}

type Key = (String, String, TaskModality);

impl ResultRecord {
    fn key(&self) -> Key {
        (self.model.clone(), self.task.clone(), self.modality)
    }
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    read_jsonl(BufReader::new(open(path)?)).map_err(|e| Failure::from(e).context(path.display()))
}

pub fn load_results(path: &Path) -> Result<Vec<ResultRecord>> {
    read_records::<RawResult>(path)?
        .into_iter()
        .map(|(line, r)| {
            let curve = ShotCurve::new(r.shots, r.values)
                .map_err(|e| data(format!("{}: line {line}: {e}", path.display())))?;
            Ok(ResultRecord {
                model: r.model,
                task: r.task,
                taxonomy: r.taxonomy,
                modality: r.modality,
                curve,
                perturbation: r.perturbation,
            })
        })
        .collect()
}

fn emit<T: Serialize>(rows: &[T], table: &Table, output: &Output) -> Result<()> {
    let rendered = table.render();
    if let Some(p) = &output.table {
        std::fs::write(p, &rendered)
            .map_err(|e| data(format!("cannot write {}: {e}", p.display())))?;
    }
    let mut w = sink(output.out.as_deref())?;
    match output.format {
        Format::Jsonl => {
            for r in rows {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
        }
        Format::Table => w.write_all(rendered.as_bytes())?,
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CurveRow<'a> {
    model: &'a str,
    task: &'a str,
    taxonomy: Taxonomy,
    modality: TaskModality,
    zero_shot: f64,
    peak: f64,
    efficiency: f64,
}

fn curves(path: &Path, output: &Output) -> Result<()> {
    let recs = load_results(path)?;
    let mut rows = Vec::new();
    let mut table = Table::new(["Model", "Task", "Mod", "P0", "Peak", "Eff"]);
    for r in recs.iter().filter(|r| r.perturbation.is_none()) {
        let s = summarize(&r.curve).map_err(|e| data(format!("{}/{}: {e}", r.model, r.task)))?;
        table.push([
            r.model.clone(),
            r.task.clone(),
            format!("{:?}", r.modality).to_lowercase(),
            fmt3(s.zero_shot),
            fmt3(s.peak),
            fmt3(s.efficiency),
        ]);
        rows.push(CurveRow {
            model: &r.model,
            task: &r.task,
            taxonomy: r.taxonomy,
            modality: r.modality,
            zero_shot: s.zero_shot,
            peak: s.peak,
            efficiency: s.efficiency,
        });
    }
    emit(&rows, &table, output)
}

#[derive(Debug, Serialize)]
struct StabilityRow<'a> {
    model: &'a str,
    task: &'a str,
    modality: TaskModality,
    perturbation: Perturbation,
    deviation_percent: f64,
}

fn stability(path: &Path, output: &Output) -> Result<()> {
    let recs = load_results(path)?;
    let mut clean: BTreeMap<Key, &ResultRecord> = BTreeMap::new();
    for r in recs.iter().filter(|r| r.perturbation.is_none()) {
        if clean.insert(r.key(), r).is_some() {
            return Err(data(format!("two clean curves for {}/{}", r.model, r.task)));
        }
    }
    let mut rows = Vec::new();
    let mut table = Table::new(["Model", "Task", "Mod", "Perturbation", "Dev%"]);
    for r in &recs {
        let Some(p) = r.perturbation else { continue };
        let c = clean
            .get(&r.key())
            .ok_or_else(|| data(format!("no clean curve for {}/{}", r.model, r.task)))?;
        let rep = stability_report(p, &c.curve, &r.curve)
            .map_err(|e| data(format!("{}/{}: {e}", r.model, r.task)))?;
        table.push([
            r.model.clone(),
            r.task.clone(),
            format!("{:?}", r.modality).to_lowercase(),
            serde_json::to_value(p)?.as_str().unwrap_or_default().to_string(),
            fmt3(rep.deviation_percent),
        ]);
        rows.push(StabilityRow {
            model: &r.model,
            task: &r.task,
            modality: r.modality,
            perturbation: p,
            deviation_percent: rep.deviation_percent,
        });
    }
    emit(&rows, &table, output)
}

#[derive(Debug, Serialize)]
struct AlignRow<'a> {
    x: &'a str,
    y: &'a str,
    n: usize,
    pearson: f64,
    spearman: f64,
}

fn number(v: &Value, field: &str, line: usize) -> Result<f64> {
    v.get(field)
        .and_then(Value::as_f64)
        .ok_or_else(|| data(format!("line {line}: missing numeric field {field:?}")))
}

fn align(path: &Path, x: &str, y: &str, output: &Output) -> Result<()> {
    let recs = read_records::<Value>(path)?;
    let mut xs = Vec::with_capacity(recs.len());
    let mut ys = Vec::with_capacity(recs.len());
    for (line, v) in &recs {
        xs.push(number(v, x, *line)?);
        ys.push(number(v, y, *line)?);
    }
    let row = AlignRow {
        x,
        y,
        n: xs.len(),
        pearson: pearson(&xs, &ys)?,
        spearman: spearman(&xs, &ys)?,
    };
    let mut table = Table::new(["X", "Y", "N", "Pearson", "Spearman"]);
    table.push([
        x.to_string(),
        y.to_string(),
        row.n.to_string(),
        fmt3(row.pearson),
        fmt3(row.spearman),
    ]);
    emit(&[row], &table, output)
}

#[derive(Debug, Serialize)]
struct TransferRow {
    group: String,
    pairs: usize,
    relative_change_percent: f64,
}

fn transfer(base: &Path, variant: &Path, output: &Output) -> Result<()> {
    let index = |recs: Vec<ResultRecord>, path: &Path| -> Result<BTreeMap<Key, ResultRecord>> {
        let mut m = BTreeMap::new();
        for r in recs.into_iter().filter(|r| r.perturbation.is_none()) {
            let k = r.key();
            if m.insert(k.clone(), r).is_some() {
                return Err(data(format!("{}: duplicate curve for {}/{}", path.display(), k.0, k.1)));
            }
        }
        Ok(m)
    };
    let b = index(load_results(base)?, base)?;
    let v = index(load_results(variant)?, variant)?;
    if b.keys().ne(v.keys()) {
        return Err(data("base and variant must cover the same (model, task, modality) set"));
    }
    let mut groups: BTreeMap<String, (Vec<ShotCurve>, Vec<ShotCurve>)> = BTreeMap::new();
    for (k, br) in &b {
        let vr = &v[k];
        for g in [format!("{:?}", k.2).to_lowercase(), "all".to_string()] {
            let e = groups.entry(g).or_default();
            e.0.push(br.curve.clone());
            e.1.push(vr.curve.clone());
        }
    }
    let mut rows = Vec::new();
    let mut table = Table::new(["Group", "Pairs", "Rel%"]);
    for (g, (bc, vc)) in &groups {
        let rc = relative_change(bc, vc)?;
        table.push([g.clone(), bc.len().to_string(), fmt3(rc)]);
        rows.push(TransferRow {
            group: g.clone(),
            pairs: bc.len(),
            relative_change_percent: rc,
        });
    }
    emit(&rows, &table, output)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Judgment {
    outcome: Outcome,
    #[serde(default)]
    comparison: Option<String>,
}

#[derive(Debug, Serialize)]
struct HumanRow {
    comparison: String,
    n: usize,
    win: f64,
    tie: f64,
    lose: f64,
}

fn human(path: &Path, output: &Output) -> Result<()> {
    let mut groups: BTreeMap<String, Vec<Outcome>> = BTreeMap::new();
    for (_, j) in read_records::<Judgment>(path)? {
        groups
            .entry(j.comparison.unwrap_or_else(|| "all".into()))
            .or_default()
            .push(j.outcome);
    }
    if groups.is_empty() {
        return Err(data(format!("{}: no judgments", path.display())));
    }
    let mut rows = Vec::new();
    let mut table = Table::new(["Comparison", "N", "Win%", "Tie%", "Lose%"]);
    for (c, outs) in &groups {
        let w = win_tie_lose(outs)?;
        table.push([c.clone(), outs.len().to_string(), fmt3(w.win), fmt3(w.tie), fmt3(w.lose)]);
        rows.push(HumanRow {
            comparison: c.clone(),
            n: outs.len(),
            win: w.win,
            tie: w.tie,
            lose: w.lose,
        });
    }
    emit(&rows, &table, output)
}

pub fn run(cmd: &EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Curves { results, output } => curves(results, output),
        EvalCommand::Stability { results, output } => stability(results, output),
        EvalCommand::Align { records, x, y, output } => align(records, x, y, output),
        EvalCommand::Transfer {
            base,
            variant,
            output,
        } => transfer(base, variant, output),
        EvalCommand::Human { judgments, output } => human(judgments, output),
    }
}
