#![allow(dead_code)]

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use forge_core::episode::{
    save_embeddings, save_metadata, write_embeddings_binary, EmbeddingRecord, Instance,
    MetadataRecord, Modality, CANONICAL_SUBTASKS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tempfile::TempDir;

pub const COLORS: [&str; 4] = ["red", "blue", "green", "white"];
pub const CATEGORIES: [&str; 3] = ["woman", "man", "dog"];

pub fn forge() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_forge"));
    c.env_remove("FORGE_SEED").env("RUST_LOG", "warn");
    c
}

pub fn run(args: &[&str]) -> Output {
    forge().args(args).output().expect("spawn forge")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).expect("utf-8 stdout")
}

pub fn write_lines(path: &Path, lines: impl IntoIterator<Item = serde_json::Value>) {
    let text: String = lines.into_iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(path, text).unwrap();
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A retrieval corpus on disk: clustered embeddings, demonstrations,
/// queries and scene metadata sharing ids.
pub struct Corpus {
    pub dir: TempDir,
    pub queries: PathBuf,
    pub candidates: PathBuf,
    pub visual: PathBuf,
    pub text: PathBuf,
    pub metadata: PathBuf,
    pub candidate_ids: Vec<String>,
}

fn clustered(rng: &mut ChaCha8Rng, centers: &[Vec<f64>]) -> Vec<f64> {
    let c = &centers[rng.random_range(0..centers.len())];
    c.iter().map(|v| v + 0.6 * (rng.random::<f64>() - 0.5)).collect()
}

pub fn synthetic(n_cand: usize, n_query: usize, seed: u64) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = |rng: &mut ChaCha8Rng, d: usize| -> Vec<Vec<f64>> {
        (0..12)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    };
    let vc = centers(&mut rng, 16);
    let tc = centers(&mut rng, 12);

    let candidate_ids: Vec<String> = (0..n_cand).map(|i| format!("c{i:04}")).collect();
    let query_ids: Vec<String> = (0..n_query).map(|i| format!("q{i:03}")).collect();

    let mut visual = Vec::new();
    let mut text = Vec::new();
    for id in candidate_ids.iter().chain(&query_ids) {
        visual.push((id.clone(), clustered(&mut rng, &vc)));
        text.push(EmbeddingRecord::new(id.clone(), Modality::Text, clustered(&mut rng, &tc)));
    }

    let candidates = dir.path().join("candidates.jsonl");
    write_lines(
        &candidates,
        candidate_ids.iter().map(|id| {
            json!({"id": id, "image_ref": format!("img/{id}.png"),
                   "instruction": format!("describe {id}"), "output": {"text": format!("answer {id}")}})
        }),
    );
    let queries = dir.path().join("queries.jsonl");
    write_lines(
        &queries,
        query_ids.iter().enumerate().map(|(i, id)| {
            let subtask = CANONICAL_SUBTASKS[i % CANONICAL_SUBTASKS.len()].0;
            json!({"subtask": subtask, "query": {"id": id, "image_ref": format!("img/{id}.png"),
                   "instruction": "what is shown?"}})
        }),
    );

    let visual_path = dir.path().join("visual.uieb");
    let refs: Vec<(&str, &[f64])> = visual.iter().map(|(i, v)| (i.as_str(), v.as_slice())).collect();
    write_embeddings_binary(BufWriter::new(File::create(&visual_path).unwrap()), 16, &refs).unwrap();
    let text_path = dir.path().join("text.jsonl");
    save_embeddings(&text_path, &text).unwrap();

    let metadata = dir.path().join("metadata.jsonl");
    let meta: Vec<MetadataRecord> = candidate_ids
        .iter()
        .map(|id| {
            let instances = (0..rng.random_range(0..4))
                .map(|_| {
                    let x0 = rng.random_range(0.0..0.8);
                    let y0 = rng.random_range(0.0..0.8);
                    Instance {
                        category: CATEGORIES[rng.random_range(0..3)].into(),
                        attributes: [("color".to_string(), COLORS[rng.random_range(0..4)].to_string())]
                            .into(),
                        bbox: [x0, y0, x0 + 0.2, y0 + 0.2],
                    }
                })
                .collect();
            MetadataRecord {
                scene_id: id.clone(),
                instances,
                scene_attributes: [("place".to_string(), ["beach", "street"][rng.random_range(0..2)].to_string())]
                    .into(),
                scores: [("hps".to_string(), rng.random_range(5.0..15.0))].into(),
            }
        })
        .collect();
    save_metadata(&metadata, &meta).unwrap();

    Corpus {
        queries,
        candidates,
        visual: visual_path,
        text: text_path,
        metadata,
        candidate_ids,
        dir,
    }
}

impl Corpus {
    pub fn fusion_args(&self) -> Vec<String> {
        vec![
            "retrieve".into(),
            "--mode".into(),
            "fusion".into(),
            "--queries".into(),
            p(&self.queries).into(),
            "--candidates".into(),
            p(&self.candidates).into(),
            "--embeddings".into(),
            format!("visual={}", p(&self.visual)),
            "--embeddings".into(),
            p(&self.text).into(),
        ]
    }
}
