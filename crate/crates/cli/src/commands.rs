//! Subcommand definitions and their implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nmt_core::corpus::read_parallel;
use nmt_core::decode::translate_file;
use nmt_core::eval::{bleu_with, Smoothing};
use nmt_core::subword::{learn_bpe_with, to_marked_text, word_counts, MergeBudget, UNK};
use nmt_core::textnorm::{Cleaner, EntityTable, LexiconSegmenter};
use nmt_core::train::{average_checkpoints, load_checkpoint, save_checkpoint, Trainer};
use nmt_core::{holdout_split, BeamConfig, CharMapping, Error, MergeTable, SplitSpec, Translator, Vocabulary};

use crate::config::{PipelineConfig, Profiles};
use crate::pipeline::{load_encoded, run_pipeline};
use crate::sweep::{run_merge_sweep, run_model_sweep, run_sweep, SweepGrid, PRESET_MERGE_BUDGETS, PRESET_SETTINGS};
use crate::synth_text::{generate, join_lines, SynthTextSpec};

#[derive(Debug, Parser)]
#[command(name = "nmt", version, about = "Low-resource NMT workbench")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate and normalize a parallel corpus.
    Clean(CleanArgs),
    /// Hold out the last N pairs for validation.
    Split(SplitArgs),
    /// Learn BPE merges for one language.
    BpeLearn(BpeLearnArgs),
    /// Segment text with learned merges.
    BpeApply(BpeApplyArgs),
    /// Train a model on BPE-segmented data.
    Train(TrainArgs),
    /// Element-wise mean of checkpoints.
    AverageCheckpoints(AverageArgs),
    /// Beam-search translation of a text file.
    Translate(TranslateArgs),
    /// Character BLEU of a hypothesis file.
    Score(ScoreArgs),
    /// Run every stage from raw text to score.
    Pipeline(PipelineArgs),
    /// Run the pipeline over a grid of settings.
    Sweep(SweepArgs),
    /// Print the effective configuration.
    Config(ConfigArgs),
    /// Write the synthetic demo corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CleanArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Character mapping TSV (built-in sample when omitted).
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// Extra named references, "name<TAB>char" per line.
    #[arg(long)]
    pub entities: Option<PathBuf>,
    /// Writes `<prefix>.src` and `<prefix>.tgt`.
    #[arg(long)]
    pub out_prefix: String,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub src_lexicon: Option<PathBuf>,
    #[arg(long)]
    pub tgt_lexicon: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub holdout: usize,
    /// Writes `<prefix>.{train,valid}.{src,tgt}`.
    #[arg(long)]
    pub out_prefix: String,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("budget").required(true).args(["merges", "vocab_size"])))]
pub struct BpeLearnArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub merges: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Writes `<prefix>.merges` and `<prefix>.vocab`.
    #[arg(long)]
    pub out_prefix: String,
}

#[derive(Debug, Args)]
pub struct BpeApplyArgs {
    #[arg(long)]
    pub merges: PathBuf,
    /// Used to count tokens that would map to UNK.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Small model and short schedule.
    #[arg(long)]
    pub toy: bool,
    /// 24 encoder and 24 decoder layers.
    #[arg(long)]
    pub deep: bool,
}

impl ProfileArgs {
    fn profiles(&self) -> Profiles {
        Profiles {
            toy: self.toy,
            deep: self.deep,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub profile: ProfileArgs,
    /// Reads `<prefix>.{train,valid}.{src,tgt}` (BPE-marked) and
    /// `<prefix>.{src,tgt}.vocab`.
    #[arg(long)]
    pub data_prefix: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AverageArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(required = true)]
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub src_merges: PathBuf,
    #[arg(long)]
    pub src_vocab: PathBuf,
    #[arg(long)]
    pub tgt_vocab: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Generated-token limit (default: source length + 50).
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub max_n: usize,
    /// Replace zero n-gram matches with this count (sentence-level debugging only).
    #[arg(long)]
    pub floor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub profile: ProfileArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Merge budgets, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub merges: Vec<usize>,
    /// Use the budgets 4k, 6k, 8k, 16k and 24k.
    #[arg(long, conflicts_with = "merges")]
    pub preset_budgets: bool,
    /// Embedding sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub embed: Vec<usize>,
    /// Dropout probabilities, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub dropout: Vec<f64>,
    /// The five embedding/dropout settings A-E over one BPE.
    #[arg(long, conflicts_with_all = ["embed", "dropout"])]
    pub preset_settings: bool,
    /// Cells run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub profile: ProfileArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Writes `<prefix>.src`, `<prefix>.tgt` and `<prefix>.tgt.lex`.
    #[arg(long)]
    pub out_prefix: String,
    #[arg(long, default_value_t = 1500)]
    pub pairs: usize,
    #[arg(long, default_value_t = 2022)]
    pub seed: u64,
}

fn suffixed(prefix: &str, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{prefix}.{suffix}"))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn lines_text<S: AsRef<str>>(lines: &[S]) -> String {
    lines.iter().map(|l| format!("{}\n", l.as_ref())).collect()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Clean(a) => clean(a),
        Command::Split(a) => split(a),
        Command::BpeLearn(a) => bpe_learn(a),
        Command::BpeApply(a) => bpe_apply(a),
        Command::Train(a) => train(a),
        Command::AverageCheckpoints(a) => average(a),
        Command::Translate(a) => translate(a),
        Command::Score(a) => score(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Sweep(a) => sweep(a),
        Command::Config(a) => {
            let cfg = PipelineConfig::load(a.config.as_deref(), a.profile.profiles())?;
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::Synth(a) => synth(a),
    }
}

fn clean(a: CleanArgs) -> Result<()> {
    let raw = read_parallel(&a.src, &a.tgt)?;
    let mapping = match &a.mapping {
        Some(p) => CharMapping::load(p)?,
        None => CharMapping::sample(),
    };
    let mut entities = EntityTable::default();
    if let Some(p) = &a.entities {
        entities.extend_from_tsv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?;
    }
    let (pairs, report) = Cleaner { mapping, entities }.clean_all(raw);
    let seg = |p: &Option<PathBuf>| p.as_deref().map(LexiconSegmenter::load).transpose();
    let (ss, ts) = (seg(&a.src_lexicon)?, seg(&a.tgt_lexicon)?);
    let apply = |s: &Option<LexiconSegmenter>, t: &str| s.as_ref().map_or(t.to_owned(), |s| s.segment(t).join(" "));
    let src: Vec<String> = pairs.iter().map(|p| apply(&ss, &p.src)).collect();
    let tgt: Vec<String> = pairs.iter().map(|p| apply(&ts, &p.tgt)).collect();
    write(&suffixed(&a.out_prefix, "src"), lines_text(&src))?;
    write(&suffixed(&a.out_prefix, "tgt"), lines_text(&tgt))?;
    write(&a.report, serde_json::to_string_pretty(&report)? + "\n")?;
    eprintln!(
        "kept {} of {} pairs; dropped {} for encoding, {} empty",
        report.kept, report.input, report.dropped_encoding, report.dropped_empty
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let src = read_lines(&a.src)?;
    let tgt = read_lines(&a.tgt)?;
    if src.len() != tgt.len() {
        return Err(Error::Data(format!("{} source lines but {} target lines", src.len(), tgt.len())).into());
    }
    let (train, valid) = holdout_split(src.into_iter().zip(tgt).collect(), SplitSpec { holdout_n: a.holdout })?;
    for (name, part) in [("train", &train), ("valid", &valid)] {
        let s: Vec<&str> = part.iter().map(|p| p.0.as_str()).collect();
        let t: Vec<&str> = part.iter().map(|p| p.1.as_str()).collect();
        write(&suffixed(&a.out_prefix, &format!("{name}.src")), lines_text(&s))?;
        write(&suffixed(&a.out_prefix, &format!("{name}.tgt")), lines_text(&t))?;
    }
    eprintln!("{} training and {} validation pairs", train.len(), valid.len());
    Ok(())
}

fn bpe_learn(a: BpeLearnArgs) -> Result<()> {
    let lines = read_lines(&a.input)?;
    let words: Vec<(String, u64)> = word_counts(lines.iter().map(String::as_str)).into_iter().collect();
    let budget = match (a.merges, a.vocab_size) {
        (Some(m), _) => MergeBudget::Merges(m),
        (None, Some(v)) => MergeBudget::VocabSize(v),
        (None, None) => unreachable!("clap requires one budget"),
    };
    let (table, vocab) = learn_bpe_with(&words, budget)?;
    table.save(&suffixed(&a.out_prefix, "merges"))?;
    vocab.save(&suffixed(&a.out_prefix, "vocab"))?;
    let stats = vocab.stats();
    eprintln!("{} merges; vocabulary {} ({stats:?})", table.len(), vocab.len());
    Ok(())
}

fn bpe_apply(a: BpeApplyArgs) -> Result<()> {
    let table = MergeTable::load(&a.merges)?;
    let lines = read_lines(&a.input)?;
    let marked: Vec<String> = lines.iter().map(|l| to_marked_text(l, &table)).collect();
    if let Some(v) = &a.vocab {
        let vocab = Vocabulary::load(v)?;
        let unk: usize = lines
            .iter()
            .map(|l| vocab.encode_line(l, &table, false).iter().filter(|&&id| id == UNK).count())
            .sum();
        if unk > 0 {
            log::warn!("{unk} tokens are not in {}", v.display());
        }
    }
    write(&a.output, lines_text(&marked))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = PipelineConfig::load(a.config.as_deref(), a.profile.profiles())?;
    let p = &a.data_prefix;
    let src_vocab = Vocabulary::load(&suffixed(p, "src.vocab"))?;
    let tgt_vocab = Vocabulary::load(&suffixed(p, "tgt.vocab"))?;
    let files = ["train.src", "train.tgt", "valid.src", "valid.tgt"].map(|s| suffixed(p, s));
    let (train, valid) = load_encoded(files.each_ref().map(PathBuf::as_path), &src_vocab, &tgt_vocab, cfg.data.max_len)?;
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(ckpt, cfg.train.clone())?,
        None => Trainer::new(cfg.model_for(src_vocab.len(), tgt_vocab.len()), cfg.train.clone())?,
    }
    .with_out_dir(&a.out_dir);
    let summary = trainer.run(&train, &valid)?;
    eprintln!(
        "{} updates ({} skipped), {} checkpoints in {}",
        summary.updates.len(),
        summary.skipped_updates,
        summary.checkpoints.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn average(a: AverageArgs) -> Result<()> {
    let avg = average_checkpoints(&a.checkpoints)?;
    save_checkpoint(&avg, &a.out)?;
    eprintln!("averaged {} checkpoints into {}", a.checkpoints.len(), a.out.display());
    Ok(())
}

fn translate(a: TranslateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let t = Translator::new(
        ckpt.params,
        ckpt.model_config,
        MergeTable::load(&a.src_merges)?,
        Vocabulary::load(&a.src_vocab)?,
        Vocabulary::load(&a.tgt_vocab)?,
    )?;
    let bc = BeamConfig {
        beam: a.beam,
        alpha: a.alpha,
        max_len: a.max_len,
    };
    let n = translate_file(&t, &a.input, &a.output, &bc, a.threads)?;
    eprintln!("translated {n} lines");
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let hyps = read_lines(&a.hyp)?;
    let refs = read_lines(&a.reference)?;
    let smoothing = a.floor.map_or(Smoothing::None, Smoothing::Floor);
    let r = bleu_with(&hyps, &refs, a.max_n, smoothing)?;
    println!("{}", r.tsv_line());
    println!("{r}");
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let cfg = PipelineConfig::load(a.config.as_deref(), a.profile.profiles())?;
    let report = run_pipeline(&cfg, &a.out)?;
    eprintln!(
        "{} stages run, {} up to date: {}",
        report.executed.len(),
        report.skipped.len(),
        a.out.display()
    );
    Ok(())
}

fn sweep(mut a: SweepArgs) -> Result<()> {
    if a.preset_budgets {
        a.merges = PRESET_MERGE_BUDGETS.to_vec();
    }
    let base = PipelineConfig::load(a.config.as_deref(), a.profile.profiles())?;
    let report = if a.preset_settings {
        let settings: Vec<(String, usize, f64)> = PRESET_SETTINGS.iter().map(|&(l, d, p)| (l.to_owned(), d, p)).collect();
        let mut base = base;
        if let [m] = a.merges[..] {
            base.bpe.src_merges = m;
            base.bpe.tgt_merges = m;
        } else if !a.merges.is_empty() {
            return Err(Error::Config("--preset-settings takes at most one merge budget".into()).into());
        }
        run_model_sweep(&base, &settings, &a.out, a.jobs)?
    } else if a.embed.is_empty() && a.dropout.is_empty() {
        if a.merges.is_empty() {
            return Err(Error::Config("give --merges, --embed/--dropout or --preset-settings".into()).into());
        }
        run_merge_sweep(&base, &a.merges, &a.out, a.jobs)?
    } else {
        let or = |v: Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v };
        let grid = SweepGrid {
            merge_budgets: or(a.merges, base.bpe.src_merges),
            embedding_sizes: or(a.embed, base.model.d_model),
            dropouts: if a.dropout.is_empty() { vec![base.model.dropout] } else { a.dropout },
            base,
        };
        run_sweep(&grid, &a.out, a.jobs)?
    };
    print!("{}", report.to_text());
    let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", report.cells.len());
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthTextSpec {
        pairs: a.pairs,
        seed: a.seed,
        ..SynthTextSpec::default()
    };
    let text = generate(&spec);
    write(&suffixed(&a.out_prefix, "src"), join_lines(&text.src))?;
    write(&suffixed(&a.out_prefix, "tgt"), join_lines(&text.tgt))?;
    write(&suffixed(&a.out_prefix, "tgt.lex"), lines_text(&text.tgt_lexicon))
        .context("writing the target lexicon")?;
    Ok(())
}

/// Process exit status for an error: 1 usage, 2 data, 3 numeric.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.kind() {
                nmt_core::ErrorKind::Usage => 1,
                nmt_core::ErrorKind::Data => 2,
                nmt_core::ErrorKind::Numeric => 3,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 1;
        }
    }
    2
}
