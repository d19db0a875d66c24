//! The end-to-end pipeline with content-hash stage caching.
//!
//! Every stage records a key built from its name, parameters and the hashes
//! of the files it reads. A re-run skips a stage whose key is unchanged and
//! whose recorded outputs still exist.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use nmt_core::corpus::{encode_marked, filter_length, read_parallel};
use nmt_core::decode::translate_file;
use nmt_core::subword::{learn_bpe, to_marked_text, word_counts};
use nmt_core::textnorm::{Cleaner, EntityTable, LexiconSegmenter};
use nmt_core::train::{average_checkpoints, checkpoint, load_checkpoint, save_checkpoint};
use nmt_core::{bleu, holdout_split, CharMapping, Error, MergeTable, SplitSpec, Trainer, Translator, Vocabulary};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

/// Stage names in execution order.
pub const STAGES: [&str; 9] = [
    "clean",
    "split",
    "bpe-learn-src",
    "bpe-learn-tgt",
    "bpe-apply",
    "train",
    "average",
    "translate",
    "score",
];

/// The first five stages only depend on the data and BPE settings.
pub const DATA_STAGES: usize = 5;

pub const MANIFEST: &str = "manifest.json";
pub const EFFECTIVE_CONFIG: &str = "config.toml";
pub const AVERAGED: &str = "average.nmtc";
pub const HYPOTHESES: &str = "translate/valid.hyp";
pub const SCORES: &str = "score.tsv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn get(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }
}

/// Where artifacts live. Data-stage artifacts (`clean/`, `split/`, `bpe/`)
/// may sit in a directory shared by several model runs.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    pub data: PathBuf,
}

impl Layout {
    pub fn single(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Layout { data: root.clone(), root }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        let shared = ["clean/", "split/", "bpe/"].iter().any(|p| rel.starts_with(p));
        if shared {
            self.data.join(rel)
        } else {
            self.root.join(rel)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub manifest: Manifest,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    write(path, text)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Where a stage input comes from: a pipeline artifact or a user file.
enum Input {
    Artifact(String),
    External(&'static str, PathBuf),
}

struct Runner<'a> {
    layout: &'a Layout,
    previous: Manifest,
    report: RunReport,
}

impl Runner<'_> {
    fn stage(&mut self, name: &str, params: Value, inputs: Vec<Input>, exec: impl FnOnce() -> Result<Vec<String>>) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for input in inputs {
            let (label, path) = match input {
                Input::Artifact(rel) => (rel.clone(), self.layout.path(&rel)),
                Input::External(label, path) => (label.to_owned(), path),
            };
            let h = sha256_file(&path).with_context(|| format!("stage {name}: reading input {label}"))?;
            hashes.insert(label, h);
        }
        let key = hex::encode(Sha256::digest(serde_json::to_vec(&json!({ "stage": name, "params": params, "inputs": hashes }))?));
        if let Some(old) = self.previous.get(name) {
            if old.key == key && old.outputs.keys().all(|rel| self.layout.path(rel).exists()) {
                info!("{name}: up to date");
                self.report.skipped.push(name.to_owned());
                self.report.manifest.stages.push(old.clone());
                return self.save();
            }
        }
        info!("{name}: running");
        let produced = exec().with_context(|| format!("stage {name} failed"))?;
        let mut outputs = BTreeMap::new();
        for rel in produced {
            let h = sha256_file(&self.layout.path(&rel)).with_context(|| format!("stage {name}: output {rel}"))?;
            outputs.insert(rel, h);
        }
        self.report.executed.push(name.to_owned());
        self.report.manifest.stages.push(StageRecord {
            name: name.to_owned(),
            key,
            inputs: hashes,
            outputs,
        });
        self.save()
    }

    fn save(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.report.manifest)? + "\n";
        let path = self.layout.root.join(MANIFEST);
        let tmp = path.with_extension("json.tmp");
        write(&tmp, text)?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

const SIDES: [&str; 2] = ["src", "tgt"];
const SPLITS: [&str; 2] = ["train", "valid"];

fn stage_clean(cfg: &PipelineConfig, l: &Layout) -> Result<Vec<String>> {
    let raw = read_parallel(&cfg.data.src, &cfg.data.tgt)?;
    let mapping = match &cfg.data.char_mapping {
        Some(p) => CharMapping::load(p)?,
        None => CharMapping::sample(),
    };
    let mut entities = EntityTable::default();
    if let Some(p) = &cfg.data.entities {
        entities.extend_from_tsv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?;
    }
    let cleaner = Cleaner { mapping, entities };
    let (pairs, report) = cleaner.clean_all(raw);
    info!(
        "clean: kept {} of {} pairs ({} bad encoding, {} empty)",
        report.kept, report.input, report.dropped_encoding, report.dropped_empty
    );
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus.into());
    }
    let seg = |p: &Option<PathBuf>| p.as_deref().map(LexiconSegmenter::load).transpose();
    let (src_seg, tgt_seg) = (seg(&cfg.data.src_lexicon)?, seg(&cfg.data.tgt_lexicon)?);
    let apply = |s: &Option<LexiconSegmenter>, text: &str| match s {
        Some(s) => s.segment(text).join(" "),
        None => text.to_owned(),
    };
    let src: Vec<String> = pairs.iter().map(|p| apply(&src_seg, &p.src)).collect();
    let tgt: Vec<String> = pairs.iter().map(|p| apply(&tgt_seg, &p.tgt)).collect();
    write_lines(&l.path("clean/src.txt"), &src)?;
    write_lines(&l.path("clean/tgt.txt"), &tgt)?;
    write(&l.path("clean/report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(vec!["clean/src.txt".into(), "clean/tgt.txt".into(), "clean/report.json".into()])
}

fn stage_split(cfg: &PipelineConfig, l: &Layout) -> Result<Vec<String>> {
    let src = read_lines(&l.path("clean/src.txt"))?;
    let tgt = read_lines(&l.path("clean/tgt.txt"))?;
    let pairs: Vec<(String, String)> = src.into_iter().zip(tgt).collect();
    let (train, valid) = holdout_split(pairs, SplitSpec { holdout_n: cfg.data.holdout })?;
    let mut out = Vec::new();
    for (split, part) in [("train", &train), ("valid", &valid)] {
        for (i, side) in SIDES.iter().enumerate() {
            let rel = format!("split/{split}.{side}");
            let lines: Vec<&str> = part.iter().map(|p| if i == 0 { p.0.as_str() } else { p.1.as_str() }).collect();
            write_lines(&l.path(&rel), &lines)?;
            out.push(rel);
        }
    }
    Ok(out)
}

fn stage_bpe_learn(side: &str, merges: usize, l: &Layout) -> Result<Vec<String>> {
    let lines = read_lines(&l.path(&format!("split/train.{side}")))?;
    let words: Vec<(String, u64)> = word_counts(lines.iter().map(String::as_str)).into_iter().collect();
    let (table, vocab) = learn_bpe(&words, merges)?;
    info!("bpe-learn-{side}: {} merges, vocabulary {}", table.len(), vocab.len());
    let (m, v) = (format!("bpe/{side}.merges"), format!("bpe/{side}.vocab"));
    write(&l.path(&m), table.to_text())?;
    write(&l.path(&v), vocab.to_text())?;
    Ok(vec![m, v])
}

fn stage_bpe_apply(l: &Layout) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for side in SIDES {
        let table = MergeTable::load(&l.path(&format!("bpe/{side}.merges")))?;
        for split in SPLITS {
            let lines = read_lines(&l.path(&format!("split/{split}.{side}")))?;
            let marked: Vec<String> = lines.iter().map(|s| to_marked_text(s, &table)).collect();
            let rel = format!("bpe/{split}.{side}");
            write_lines(&l.path(&rel), &marked)?;
            out.push(rel);
        }
    }
    Ok(out)
}

/// Reads the BPE-marked training and validation data and vocabularies.
pub fn load_encoded(
    prefix_files: [&Path; 4],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<nmt_core::EncodedPair>, Vec<nmt_core::EncodedPair>)> {
    let [ts, tt, vs, vt] = prefix_files;
    let train = encode_marked(&read_lines(ts)?, &read_lines(tt)?, src_vocab, tgt_vocab)?;
    let valid = if vs.exists() && vt.exists() {
        encode_marked(&read_lines(vs)?, &read_lines(vt)?, src_vocab, tgt_vocab)?
    } else {
        Vec::new()
    };
    let (train, dropped) = filter_length(train, max_len);
    if dropped > 0 {
        log::warn!("dropped {dropped} training pairs that are empty or longer than {max_len} tokens");
    }
    let (valid, _) = filter_length(valid, max_len);
    Ok((train, valid))
}

fn list_files(dir: &Path, rel_prefix: &str) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| format!("{rel_prefix}{}", e.file_name().to_string_lossy()))
        .collect();
    names.sort();
    Ok(names)
}

fn stage_train(cfg: &PipelineConfig, l: &Layout) -> Result<Vec<String>> {
    let src_vocab = Vocabulary::load(&l.path("bpe/src.vocab"))?;
    let tgt_vocab = Vocabulary::load(&l.path("bpe/tgt.vocab"))?;
    let paths = ["bpe/train.src", "bpe/train.tgt", "bpe/valid.src", "bpe/valid.tgt"].map(|r| l.path(r));
    let (train, valid) = load_encoded(paths.each_ref().map(PathBuf::as_path), &src_vocab, &tgt_vocab, cfg.data.max_len)?;
    let dir = l.root.join("train");
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let model = cfg.model_for(src_vocab.len(), tgt_vocab.len());
    let mut trainer = Trainer::new(model, cfg.train.clone())?.with_out_dir(&dir);
    let summary = trainer.run(&train, &valid)?;
    info!("train: {} updates, {} checkpoints", summary.updates.len(), summary.checkpoints.len());
    let listing: Vec<String> = summary
        .checkpoints
        .iter()
        .map(|(step, p)| format!("{step}\t{}", p.file_name().expect("checkpoint file").to_string_lossy()))
        .collect();
    write_lines(&dir.join("checkpoints.txt"), &listing)?;
    list_files(&dir, "train/")
}

/// The `k` most recent checkpoints listed by the train stage.
fn last_checkpoints(l: &Layout, k: usize) -> Result<Vec<String>> {
    let mut listed: Vec<(u64, String)> = Vec::new();
    for line in read_lines(&l.path("train/checkpoints.txt"))? {
        let (step, name) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("bad checkpoint listing line {line:?}")))?;
        let step = step.parse().map_err(|_| Error::Data(format!("bad step in {line:?}")))?;
        listed.push((step, format!("train/{name}")));
    }
    listed.sort();
    let start = listed.len().saturating_sub(k);
    Ok(listed.into_iter().skip(start).map(|(_, n)| n).collect())
}

fn stage_average(selected: &[String], l: &Layout) -> Result<Vec<String>> {
    let paths: Vec<PathBuf> = selected.iter().map(|r| l.path(r)).collect();
    let avg = average_checkpoints(&paths)?;
    let out = l.path(AVERAGED);
    save_checkpoint(&avg, &out)?;
    let meta = checkpoint::meta_path(&out);
    let meta_rel = meta.file_name().expect("meta file").to_string_lossy().into_owned();
    Ok(vec![AVERAGED.into(), meta_rel])
}

fn stage_translate(cfg: &PipelineConfig, l: &Layout) -> Result<Vec<String>> {
    let ckpt = load_checkpoint(&l.path(AVERAGED))?;
    let t = Translator::new(
        ckpt.params,
        ckpt.model_config,
        MergeTable::load(&l.path("bpe/src.merges"))?,
        Vocabulary::load(&l.path("bpe/src.vocab"))?,
        Vocabulary::load(&l.path("bpe/tgt.vocab"))?,
    )?;
    let out = l.path(HYPOTHESES);
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let n = translate_file(&t, &l.path("split/valid.src"), &out, &beam_config(cfg), cfg.decode.threads)?;
    info!("translate: {n} lines");
    Ok(vec![HYPOTHESES.into()])
}

pub fn beam_config(cfg: &PipelineConfig) -> nmt_core::BeamConfig {
    nmt_core::BeamConfig {
        beam: cfg.decode.beam,
        alpha: cfg.decode.alpha,
        max_len: None,
    }
}

fn stage_score(cfg: &PipelineConfig, l: &Layout) -> Result<Vec<String>> {
    let hyps = read_lines(&l.path(HYPOTHESES))?;
    let refs = read_lines(&l.path("split/valid.tgt"))?;
    let mut lines = Vec::new();
    for &n in &cfg.eval.max_n {
        let r = bleu(&hyps, &refs, n)?;
        info!("score: {r}");
        lines.push(r.tsv_line());
    }
    write_lines(&l.path(SCORES), &lines)?;
    Ok(vec![SCORES.into()])
}

/// Runs stages `range` of [`STAGES`] and writes `manifest.json` under
/// `layout.root`.
pub fn run_stages(cfg: &PipelineConfig, layout: &Layout, range: std::ops::Range<usize>) -> Result<RunReport> {
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let manifest_path = layout.root.join(MANIFEST);
    let previous = if manifest_path.exists() {
        Manifest::load(&manifest_path)?
    } else {
        Manifest::default()
    };
    write(&layout.root.join(EFFECTIVE_CONFIG), cfg.to_toml()?)?;
    let mut r = Runner {
        layout,
        previous,
        report: RunReport::default(),
    };
    let art = |rel: &str| Input::Artifact(rel.to_owned());
    for i in range {
        match STAGES[i] {
            "clean" => {
                cfg.require_data()?;
                let mut inputs = vec![
                    Input::External("data.src", cfg.data.src.clone()),
                    Input::External("data.tgt", cfg.data.tgt.clone()),
                ];
                let optional = [
                    ("data.char_mapping", &cfg.data.char_mapping),
                    ("data.entities", &cfg.data.entities),
                    ("data.src_lexicon", &cfg.data.src_lexicon),
                    ("data.tgt_lexicon", &cfg.data.tgt_lexicon),
                ];
                for (label, p) in optional {
                    if let Some(p) = p {
                        inputs.push(Input::External(label, p.clone()));
                    }
                }
                r.stage("clean", json!({}), inputs, || stage_clean(cfg, layout))?
            }
            "split" => r.stage(
                "split",
                json!({ "holdout": cfg.data.holdout }),
                vec![art("clean/src.txt"), art("clean/tgt.txt")],
                || stage_split(cfg, layout),
            )?,
            "bpe-learn-src" => r.stage(
                "bpe-learn-src",
                json!({ "merges": cfg.bpe.src_merges }),
                vec![art("split/train.src")],
                || stage_bpe_learn("src", cfg.bpe.src_merges, layout),
            )?,
            "bpe-learn-tgt" => r.stage(
                "bpe-learn-tgt",
                json!({ "merges": cfg.bpe.tgt_merges }),
                vec![art("split/train.tgt")],
                || stage_bpe_learn("tgt", cfg.bpe.tgt_merges, layout),
            )?,
            "bpe-apply" => {
                let mut inputs = vec![art("bpe/src.merges"), art("bpe/tgt.merges")];
                for split in SPLITS {
                    for side in SIDES {
                        inputs.push(art(&format!("split/{split}.{side}")));
                    }
                }
                r.stage("bpe-apply", json!({}), inputs, || stage_bpe_apply(layout))?
            }
            "train" => {
                let mut inputs = vec![art("bpe/src.vocab"), art("bpe/tgt.vocab")];
                for split in SPLITS {
                    for side in SIDES {
                        inputs.push(art(&format!("bpe/{split}.{side}")));
                    }
                }
                let params = json!({ "model": cfg.model, "train": cfg.train, "max_len": cfg.data.max_len });
                r.stage("train", params, inputs, || stage_train(cfg, layout))?
            }
            "average" => {
                let selected = last_checkpoints(layout, cfg.average_last).context("stage average")?;
                let mut inputs = vec![art("train/checkpoints.txt")];
                inputs.extend(selected.iter().map(|s| art(s)));
                r.stage("average", json!({ "last": cfg.average_last }), inputs, || stage_average(&selected, layout))?
            }
            "translate" => r.stage(
                "translate",
                json!({ "beam": cfg.decode.beam, "alpha": cfg.decode.alpha }),
                vec![
                    art(AVERAGED),
                    art("bpe/src.merges"),
                    art("bpe/src.vocab"),
                    art("bpe/tgt.vocab"),
                    art("split/valid.src"),
                ],
                || stage_translate(cfg, layout),
            )?,
            "score" => r.stage(
                "score",
                json!({ "max_n": cfg.eval.max_n }),
                vec![art(HYPOTHESES), art("split/valid.tgt")],
                || stage_score(cfg, layout),
            )?,
            other => unreachable!("unknown stage {other}"),
        }
    }
    Ok(r.report)
}

/// All nine stages in one directory.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<RunReport> {
    run_stages(cfg, &Layout::single(out), 0..STAGES.len())
}

/// `(label, score)` for every line of a score file.
pub fn read_scores(path: &Path) -> Result<Vec<(String, f64)>> {
    read_lines(path)?
        .iter()
        .map(|line| {
            let mut f = line.split('\t');
            let label = f.next().unwrap_or_default().to_owned();
            let score = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("bad score line {line:?}")))?;
            Ok((label, score))
        })
        .collect()
}
