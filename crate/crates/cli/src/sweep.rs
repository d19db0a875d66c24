//! Grid runs over merge budgets and model settings, with tabular reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::Result;
use nmt_core::{Error, Vocabulary};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::pipeline::{read_scores, run_pipeline, run_stages, Layout, DATA_STAGES, SCORES, STAGES};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub merge_budgets: Vec<usize>,
    pub embedding_sizes: Vec<usize>,
    pub dropouts: Vec<f64>,
    pub base: PipelineConfig,
}

/// One column of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub label: String,
    pub merges: usize,
    pub d_model: usize,
    pub dropout: f64,
    pub dir: PathBuf,
    pub src_vocab: Option<usize>,
    pub tgt_vocab: Option<usize>,
    /// `(BLEU label, score)` per configured order.
    pub scores: Vec<(String, f64)>,
    pub error: Option<String>,
}

/// Merge budgets for a vocabulary-size comparison.
pub const PRESET_MERGE_BUDGETS: [usize; 5] = [4000, 6000, 8000, 16_000, 24_000];

/// Embedding size and dropout combinations, labelled A to E.
pub const PRESET_SETTINGS: [(&str, usize, f64); 5] = [
    ("A", 256, 0.1),
    ("B", 384, 0.1),
    ("C", 384, 0.3),
    ("D", 512, 0.1),
    ("E", 512, 0.3),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    /// Columns vary the BPE merge budget (both sides).
    Merges,
    /// Columns vary embedding size and dropout over one shared BPE.
    Model,
    /// Every combination of all three, each a full pipeline.
    Full,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub kind: SweepKind,
    pub cells: Vec<Cell>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.merge_budgets.is_empty() || self.embedding_sizes.is_empty() || self.dropouts.is_empty() {
            return Err(Error::Config("sweep lists must be non-empty".into()).into());
        }
        for &d in &self.embedding_sizes {
            let mut cfg = self.base.clone();
            cfg.model.d_model = d;
            cfg.validate()?;
        }
        for &p in &self.dropouts {
            let mut cfg = self.base.clone();
            cfg.model.dropout = p;
            cfg.validate()?;
        }
        Ok(())
    }

    /// Every combination, merges outermost.
    pub fn cells(&self) -> Vec<(String, PipelineConfig)> {
        let mut out = Vec::new();
        for &m in &self.merge_budgets {
            for &d in &self.embedding_sizes {
                for &p in &self.dropouts {
                    let mut cfg = self.base.clone();
                    cfg.bpe.src_merges = m;
                    cfg.bpe.tgt_merges = m;
                    cfg.model.d_model = d;
                    cfg.model.dropout = p;
                    out.push((format!("m{m}_d{d}_p{p}"), cfg));
                }
            }
        }
        out
    }
}

fn vocab_size(path: &Path) -> Option<usize> {
    Vocabulary::load(path).ok().map(|v| v.len())
}

fn finish(label: String, cfg: &PipelineConfig, dir: PathBuf, data: &Path, outcome: Result<()>) -> Cell {
    let scores = if outcome.is_ok() { read_scores(&dir.join(SCORES)).unwrap_or_default() } else { Vec::new() };
    Cell {
        label,
        merges: cfg.bpe.src_merges,
        d_model: cfg.model.d_model,
        dropout: cfg.model.dropout,
        src_vocab: vocab_size(&data.join("bpe/src.vocab")),
        tgt_vocab: vocab_size(&data.join("bpe/tgt.vocab")),
        scores,
        error: outcome.err().map(|e| format!("{e:#}")),
        dir,
    }
}

/// Runs `work` over `items` on up to `jobs` threads, keeping input order.
fn parallel<T: Sync, R: Send>(items: &[T], jobs: usize, work: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(items.len().max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= items.len() {
                    break;
                }
                let r = work(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every cell ran"))
        .collect()
}

/// One full pipeline per merge budget, each in `out/merges_<n>`.
pub fn run_merge_sweep(base: &PipelineConfig, budgets: &[usize], out: &Path, jobs: usize) -> Result<Report> {
    let grid = SweepGrid {
        merge_budgets: budgets.to_vec(),
        embedding_sizes: vec![base.model.d_model],
        dropouts: vec![base.model.dropout],
        base: base.clone(),
    };
    grid.validate()?;
    let cells: Vec<(String, PipelineConfig)> = grid
        .cells()
        .into_iter()
        .map(|(_, cfg)| (format!("{}", cfg.bpe.src_merges), cfg))
        .collect();
    let done = parallel(&cells, jobs, |(label, cfg)| {
        let dir = out.join(format!("merges_{label}"));
        let outcome = run_pipeline(cfg, &dir).map(|_| ());
        finish(label.clone(), cfg, dir.clone(), &dir, outcome)
    });
    let report = Report {
        kind: SweepKind::Merges,
        cells: done,
    };
    report.write(out)?;
    Ok(report)
}

/// Data and BPE stages run once in `out/data`; each `(label, d_model,
/// dropout)` setting then trains, decodes and scores in `out/setting_<label>`.
pub fn run_model_sweep(base: &PipelineConfig, settings: &[(String, usize, f64)], out: &Path, jobs: usize) -> Result<Report> {
    let grid = SweepGrid {
        merge_budgets: vec![base.bpe.src_merges],
        embedding_sizes: settings.iter().map(|s| s.1).collect(),
        dropouts: settings.iter().map(|s| s.2).collect(),
        base: base.clone(),
    };
    grid.validate()?;
    let data = out.join("data");
    let shared = run_stages(base, &Layout::single(&data), 0..DATA_STAGES);
    let done = parallel(settings, jobs, |(label, d, p)| {
        let mut cfg = base.clone();
        cfg.model.d_model = *d;
        cfg.model.dropout = *p;
        let dir = out.join(format!("setting_{label}"));
        let outcome = match &shared {
            Ok(_) => {
                let layout = Layout {
                    root: dir.clone(),
                    data: data.clone(),
                };
                run_stages(&cfg, &layout, DATA_STAGES..STAGES.len()).map(|_| ())
            }
            Err(e) => Err(anyhow::anyhow!("shared data stages failed: {e:#}")),
        };
        finish(label.clone(), &cfg, dir, &data, outcome)
    });
    let report = Report {
        kind: SweepKind::Model,
        cells: done,
    };
    report.write(out)?;
    Ok(report)
}

/// Picks the cheapest plan for the grid: a merge sweep when only budgets
/// vary, a shared-BPE model sweep when the budget is fixed, and independent
/// full pipelines otherwise.
pub fn run_sweep(grid: &SweepGrid, out: &Path, jobs: usize) -> Result<Report> {
    grid.validate()?;
    let model_fixed = grid.embedding_sizes.len() == 1 && grid.dropouts.len() == 1;
    if model_fixed {
        let mut base = grid.base.clone();
        base.model.d_model = grid.embedding_sizes[0];
        base.model.dropout = grid.dropouts[0];
        return run_merge_sweep(&base, &grid.merge_budgets, out, jobs);
    }
    if grid.merge_budgets.len() == 1 {
        let mut base = grid.base.clone();
        base.bpe.src_merges = grid.merge_budgets[0];
        base.bpe.tgt_merges = grid.merge_budgets[0];
        let settings: Vec<(String, usize, f64)> = grid
            .cells()
            .into_iter()
            .map(|(_, c)| (format!("d{}_p{}", c.model.d_model, c.model.dropout), c.model.d_model, c.model.dropout))
            .collect();
        return run_model_sweep(&base, &settings, out, jobs);
    }
    let cells = grid.cells();
    let done = parallel(&cells, jobs, |(label, cfg)| {
        let dir = out.join(label);
        let outcome = run_pipeline(cfg, &dir).map(|_| ());
        finish(label.clone(), cfg, dir.clone(), &dir, outcome)
    });
    let report = Report {
        kind: SweepKind::Full,
        cells: done,
    };
    report.write(out)?;
    Ok(report)
}

fn opt(v: Option<usize>) -> String {
    v.map_or("-".into(), |n| n.to_string())
}

impl Report {
    /// Row label and one value per cell.
    pub fn rows(&self) -> Vec<(String, Vec<String>)> {
        let mut rows = Vec::new();
        let each = |f: &dyn Fn(&Cell) -> String| self.cells.iter().map(f).collect::<Vec<_>>();
        match self.kind {
            SweepKind::Merges => {
                rows.push(("Merge operations".into(), each(&|c| c.merges.to_string())));
            }
            SweepKind::Full => {
                rows.push(("Cell".into(), each(&|c| c.label.clone())));
                rows.push(("Merge operations".into(), each(&|c| c.merges.to_string())));
                rows.push(("Embedding size".into(), each(&|c| c.d_model.to_string())));
                rows.push(("Dropout".into(), each(&|c| c.dropout.to_string())));
            }
            SweepKind::Model => {
                rows.push(("Settings".into(), each(&|c| c.label.clone())));
                rows.push(("Embedding size".into(), each(&|c| c.d_model.to_string())));
                rows.push(("Dropout".into(), each(&|c| c.dropout.to_string())));
            }
        }
        rows.push(("Source vocabulary size".into(), each(&|c| opt(c.src_vocab))));
        rows.push(("Target vocabulary size".into(), each(&|c| opt(c.tgt_vocab))));
        let mut labels: Vec<String> = Vec::new();
        for c in &self.cells {
            for (l, _) in &c.scores {
                if !labels.contains(l) {
                    labels.push(l.clone());
                }
            }
        }
        if labels.is_empty() {
            labels.push("BLEU".into());
        }
        for l in labels {
            let values = each(&|c| {
                if c.error.is_some() {
                    return "failed".into();
                }
                c.scores.iter().find(|s| s.0 == l).map_or("-".into(), |s| format!("{:.2}", s.1))
            });
            rows.push((l, values));
        }
        rows
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (label, values) in self.rows() {
            s.push_str(&label);
            for v in values {
                s.push('\t');
                s.push_str(&v);
            }
            s.push('\n');
        }
        for c in self.cells.iter().filter(|c| c.error.is_some()) {
            let _ = writeln!(s, "# {} failed: {}", c.label, c.error.as_deref().unwrap_or_default().replace('\n', " "));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let head = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0);
        let cols = self.cells.len();
        let width: Vec<usize> = (0..cols)
            .map(|i| rows.iter().map(|r| r.1[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for (k, (label, values)) in rows.iter().enumerate() {
            let _ = write!(s, "{label:<head$}");
            for (v, w) in values.iter().zip(&width) {
                let _ = write!(s, "  {v:>w$}");
            }
            s.push('\n');
            if k == 0 {
                s.push_str(&"-".repeat(head + width.iter().map(|w| w + 2).sum::<usize>()));
                s.push('\n');
            }
        }
        for c in self.cells.iter().filter(|c| c.error.is_some()) {
            let _ = writeln!(s, "{} failed: {}", c.label, c.error.as_deref().unwrap_or_default());
        }
        s
    }

    /// Writes `report.txt` and `report.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.txt", self.to_text()), ("report.tsv", self.to_tsv())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
