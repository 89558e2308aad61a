//! The `styleforge` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical divergence.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::bpe::{train_bpe, MergeTable, TokenSeq};
use crate::checkpoint::{Classifier, ModelCheckpoint};
use crate::corpus::{load_parallel, load_unlabeled, ParallelExample, UnlabeledPool};
use crate::decoding::{decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::evaluation::{perplexity, style_accuracy, text_bleu, EvalReport};
use crate::model::Seq2Seq;
use crate::style::{Direction, StyleLabel};
use crate::synth::{synth_splits, SynthSizes};
use crate::trainer::{self, lambda_sweep, parse_grid, Mode, RunLog, TrainData, TrainingConfig, Variant};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const SEED_ENV: &str = "STYLEFORGE_SEED";

#[derive(Debug, Parser)]
#[command(name = "styleforge", version, about = "Semi-supervised text style transfer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Random seed; falls back to $STYLEFORGE_SEED, then the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a BPE merge table from text files.
    BpeTrain {
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        /// Vocabulary budget including special and base symbols.
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic formality corpus: train/valid/test .src/.tgt,
    /// unlabeled and held-out pools.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 300)]
        valid: usize,
        #[arg(long, default_value_t = 300)]
        test: usize,
        /// Unlabeled sentences per style.
        #[arg(long, default_value_t = 10_000)]
        unlabeled: usize,
        /// Held-out sentences per style.
        #[arg(long, default_value_t = 1000)]
        heldout: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain and freeze the style discriminator.
    PretrainDisc {
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint; defaults to `data.discriminator`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Main training; writes best.ckpt, last.ckpt and run.jsonl to `data.out_dir`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `data.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Transfer sentences with beam search.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "s2t")]
        direction: Direction,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 2.0)]
        lenpen: f64,
        /// Rerank the n-best list with this forward weight.
        #[arg(long)]
        mmi_lambda: Option<f64>,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score hypotheses and write an EvalReport.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Discriminator checkpoint for style accuracy.
        #[arg(long, requires_all = ["merges"])]
        classifier: Option<PathBuf>,
        /// Style the hypotheses should have: s or t.
        #[arg(long, default_value = "t")]
        target_style: StyleLabel,
        /// Merge table for encoding hypotheses and perplexity data.
        #[arg(long)]
        merges: Option<PathBuf>,
        /// Model checkpoint for validation perplexity.
        #[arg(long, requires_all = ["merges", "ppl_src", "ppl_tgt"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        ppl_src: Option<PathBuf>,
        #[arg(long)]
        ppl_tgt: Option<PathBuf>,
        #[arg(long, default_value = "s2t")]
        direction: Direction,
        /// Training config whose hash goes into the report.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model per forward weight and tabulate test BLEU.
    SweepLambda {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "0.1:1.0:0.1")]
        grid: String,
        /// Output directory; defaults to `data.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value_t = 2.0)]
        lenpen: f64,
        #[command(flatten)]
        common: Common,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGED,
        Error::Config(_) | Error::LambdaOutOfRange(_) | Error::WouldOverwrite(_) | Error::Negative(..) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn seed(common: &Common, fallback: u64) -> Result<u64> {
    if let Some(s) = common.seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer"))),
        Err(_) => Ok(fallback),
    }
}

fn check_out(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::WouldOverwrite(path.to_path_buf()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(str::to_string).collect())
}

fn need<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("config needs data.{key}")))
}

fn load_config(path: &Path, common: &Common) -> Result<TrainingConfig> {
    let mut cfg = TrainingConfig::load(path)?;
    cfg.seed = seed(common, cfg.seed)?;
    // relative data paths are taken from the config's directory
    let base = path.parent().unwrap_or(Path::new(""));
    let d = &mut cfg.data;
    for p in [
        &mut d.merges,
        &mut d.train_src,
        &mut d.train_tgt,
        &mut d.valid_src,
        &mut d.valid_tgt,
        &mut d.test_src,
        &mut d.test_tgt,
        &mut d.unlabeled_source,
        &mut d.unlabeled_target,
        &mut d.heldout_source,
        &mut d.heldout_target,
        &mut d.discriminator,
        &mut d.out_dir,
    ]
    .into_iter()
    .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

fn pools(cfg: &TrainingConfig, table: &MergeTable, heldout: bool) -> Result<Option<[UnlabeledPool; 2]>> {
    let d = &cfg.data;
    let (s, t) = if heldout {
        (&d.heldout_source, &d.heldout_target)
    } else {
        (&d.unlabeled_source, &d.unlabeled_target)
    };
    let (Some(s), Some(t)) = (s, t) else {
        return Ok(None);
    };
    let (ps, rs) = load_unlabeled(s, StyleLabel::Source, table, cfg.max_len)?;
    let (pt, rt) = load_unlabeled(t, StyleLabel::Target, table, cfg.max_len)?;
    if rs + rt > 0 {
        info!("skipped {} over-long unlabeled sentences", rs + rt);
    }
    Ok(Some([ps, pt]))
}

fn parallel(src: &Option<PathBuf>, tgt: &Option<PathBuf>, table: &MergeTable, max_len: usize) -> Result<Vec<ParallelExample>> {
    match (src, tgt) {
        (Some(s), Some(t)) => Ok(load_parallel(s, t, table, max_len)?.0),
        (None, None) => Ok(Vec::new()),
        _ => Err(Error::Config("parallel data needs both a .src and a .tgt file".into())),
    }
}

fn load_table(cfg: &TrainingConfig) -> Result<MergeTable> {
    MergeTable::load(need(&cfg.data.merges, "merges")?)
}

fn load_disc(cfg: &TrainingConfig, table: &MergeTable) -> Result<Option<Classifier<f32>>> {
    if cfg.weights().w_disc == 0.0 {
        return Ok(None);
    }
    let (c, hash) = Classifier::<f32>::load(need(&cfg.data.discriminator, "discriminator")?)?;
    if hash != table.hash() {
        return Err(Error::Config("discriminator was trained with a different merge table".into()));
    }
    match (&c, cfg.variant) {
        (Classifier::LmPair(_), Variant::LmDisc) | (Classifier::Cnn(_), Variant::CnnDisc) => Ok(Some(c)),
        _ => Err(Error::Config(format!("discriminator checkpoint does not match variant {:?}", cfg.variant))),
    }
}

fn out_dir(cfg: &TrainingConfig, out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.clone().or(cfg.data.out_dir.clone()).ok_or_else(|| Error::Config("no output directory (pass --out or set data.out_dir)".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::BpeTrain {
            input,
            vocab_size,
            out,
            common,
        } => {
            check_out(&out, common.force)?;
            let mut lines = Vec::new();
            for p in &input {
                lines.extend(read_lines(p)?);
            }
            let table = train_bpe(&lines, vocab_size)?;
            table.save(&out)?;
            println!("{} merges, vocabulary {} -> {}", table.merges().len(), table.vocab_size(), out.display());
        }
        Command::Synth {
            out,
            train,
            valid,
            test,
            unlabeled,
            heldout,
            common,
        } => {
            let marker = out.join("train.src");
            check_out(&marker, common.force)?;
            let c = synth_splits(
                seed(&common, 1)?,
                SynthSizes {
                    train,
                    valid,
                    test,
                    unlabeled_per_style: unlabeled,
                    heldout_per_style: heldout,
                },
            );
            for (name, pairs) in [("train", &c.train), ("valid", &c.valid), ("test", &c.test)] {
                if pairs.is_empty() {
                    continue;
                }
                let (s, t): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
                write_lines(&out.join(format!("{name}.src")), &s)?;
                write_lines(&out.join(format!("{name}.tgt")), &t)?;
            }
            for (name, lines) in [
                ("unlabeled.src", &c.pool_source),
                ("unlabeled.tgt", &c.pool_target),
                ("heldout.src", &c.heldout_source),
                ("heldout.tgt", &c.heldout_target),
            ] {
                if !lines.is_empty() {
                    write_lines(&out.join(name), lines)?;
                }
            }
            println!("synthetic corpus -> {}", out.display());
        }
        Command::PretrainDisc { config, out, common } => {
            let cfg = load_config(&config, &common)?;
            let path = out.or(cfg.data.discriminator.clone()).ok_or_else(|| Error::Config("no output path (pass --out or set data.discriminator)".into()))?;
            check_out(&path, common.force)?;
            let table = load_table(&cfg)?;
            let held = pools(&cfg, &table, true)?;
            let heldout = pools_ref(&held);
            let pools = pools(&cfg, &table, false)?.ok_or_else(|| Error::Config("config needs data.unlabeled_source and data.unlabeled_target".into()))?;
            let mut log = RunLog::new();
            let pr = [&pools[0], &pools[1]];
            let (c, report) = match cfg.variant {
                Variant::CnnDisc => {
                    let (c, r) = trainer::pretrain_cnn(&cfg, table.vocab_size(), pr, heldout, &mut log)?;
                    (Classifier::Cnn(c), r)
                }
                _ => {
                    let (d, r) = trainer::pretrain_discriminator(&cfg, table.vocab_size(), pr, heldout, &mut log)?;
                    (Classifier::LmPair(d), r)
                }
            };
            c.save(&table.hash(), &path)?;
            println!("discriminator -> {}", path.display());
            if let Some(a) = report.heldout_accuracy {
                println!("held-out accuracy {a:.2}%");
            }
        }
        Command::Train { config, out, common } => {
            let cfg = load_config(&config, &common)?;
            let dir = out_dir(&cfg, &out)?;
            check_out(&dir.join("best.ckpt"), common.force)?;
            let table = load_table(&cfg)?;
            let merge_hash = table.hash();
            let d = &cfg.data;
            let train = parallel(&d.train_src, &d.train_tgt, &table, cfg.max_len)?;
            let valid = parallel(&d.valid_src, &d.valid_tgt, &table, cfg.max_len)?;
            let unl = match cfg.mode {
                Mode::SupervisedOnly => None,
                _ => pools(&cfg, &table, false)?,
            };
            let held = pools(&cfg, &table, true)?;
            let empty = [UnlabeledPool::new(StyleLabel::Source, vec![])?, UnlabeledPool::new(StyleLabel::Target, vec![])?];
            let unl_ref = unl.as_ref().unwrap_or(&empty);
            let data = TrainData {
                train: &train,
                valid: &valid,
                pools: [&unl_ref[0], &unl_ref[1]],
                valid_pools: pools_ref(&held),
                merge_hash: &merge_hash,
            };
            let disc = load_disc(&cfg, &table)?;
            let model = Seq2Seq::<f32>::init(cfg.model.config(table.vocab_size()), cfg.seed)?;
            let mut log = RunLog::to_file(&dir.join("run.jsonl"))?;
            let outcome = trainer::train(&cfg, model, &data, disc.as_ref(), &mut log, Some(&dir))?;
            fs::write(dir.join("config.kv"), cfg.to_text()?)?;
            println!("best epoch {} (validation {:.4}) -> {}", outcome.best_epoch, outcome.best_metric, dir.join("best.ckpt").display());
        }
        Command::Generate {
            checkpoint,
            merges,
            input,
            direction,
            beam,
            lenpen,
            mmi_lambda,
            max_len,
            out,
            common,
        } => {
            check_out(&out, common.force)?;
            let table = MergeTable::load(&merges)?;
            let ck = ModelCheckpoint::<f32>::load(&checkpoint)?;
            if !ck.merge_hash.is_empty() && ck.merge_hash != table.hash() {
                return Err(Error::Config("checkpoint was trained with a different merge table".into()));
            }
            let cfg = DecodeConfig {
                beam_size: beam,
                length_penalty: lenpen,
                max_len,
                mmi_lambda,
                n_best: beam,
            };
            cfg.validate()?;
            let mut outputs = Vec::new();
            for line in read_lines(&input)? {
                let x = table.encode(&line);
                if x.len() > ck.model.max_len() {
                    return Err(Error::TooLong {
                        len: x.len(),
                        max: ck.model.max_len(),
                    });
                }
                let h = decode(&ck.model, &x, direction.to(), &cfg)?;
                outputs.push(table.decode(&h.tokens)?);
            }
            write_lines(&out, &outputs)?;
            println!("{} sentences -> {}", outputs.len(), out.display());
        }
        Command::Evaluate {
            hyp,
            reference,
            classifier,
            target_style,
            merges,
            checkpoint,
            ppl_src,
            ppl_tgt,
            direction,
            config,
            out,
            common,
        } => {
            check_out(&out, common.force)?;
            let hyps = read_lines(&hyp)?;
            let refs = read_lines(&reference)?;
            let bleu = text_bleu(&hyps, &refs)?;
            let table = merges.as_deref().map(MergeTable::load).transpose()?;
            let accuracy = match (&classifier, &table) {
                (Some(c), Some(t)) => {
                    let (c, _) = Classifier::<f32>::load(c)?;
                    let enc: Vec<TokenSeq> = hyps.iter().map(|h| t.encode(h)).collect();
                    Some(style_accuracy(&enc, target_style, &c)?)
                }
                _ => None,
            };
            let ppl = match (&checkpoint, &table) {
                (Some(ck), Some(t)) => {
                    let ck = ModelCheckpoint::<f32>::load(ck)?;
                    let data = parallel(&ppl_src, &ppl_tgt, t, ck.model.max_len())?;
                    Some(perplexity(&ck.model, &data, direction)?)
                }
                _ => None,
            };
            let config_hash = match &config {
                Some(p) => TrainingConfig::load(p)?.hash(),
                None => String::new(),
            };
            let report = EvalReport::new(bleu, accuracy, ppl, direction, hyps.len(), config_hash)?;
            report.save(&out)?;
            println!("{}", report.to_json()?);
        }
        Command::SweepLambda {
            config,
            grid,
            out,
            beam,
            lenpen,
            common,
        } => {
            let cfg = load_config(&config, &common)?;
            let lambdas = parse_grid(&grid)?;
            let dir = out_dir(&cfg, &out)?;
            check_out(&dir.join("sweep.csv"), common.force)?;
            let table = load_table(&cfg)?;
            let merge_hash = table.hash();
            let d = &cfg.data;
            let train = parallel(&d.train_src, &d.train_tgt, &table, cfg.max_len)?;
            let valid = parallel(&d.valid_src, &d.valid_tgt, &table, cfg.max_len)?;
            let test = parallel(&d.test_src, &d.test_tgt, &table, cfg.max_len)?;
            let unl = pools(&cfg, &table, false)?;
            let empty = [UnlabeledPool::new(StyleLabel::Source, vec![])?, UnlabeledPool::new(StyleLabel::Target, vec![])?];
            let unl_ref = unl.as_ref().unwrap_or(&empty);
            let data = TrainData {
                train: &train,
                valid: &valid,
                pools: [&unl_ref[0], &unl_ref[1]],
                valid_pools: None,
                merge_hash: &merge_hash,
            };
            let disc = load_disc(&cfg, &table)?;
            let dc = DecodeConfig {
                beam_size: beam,
                length_penalty: lenpen,
                n_best: beam,
                ..DecodeConfig::default()
            };
            let res = lambda_sweep(&cfg, &table, &data, &test, disc.as_ref(), &lambdas, &dc)?;
            fs::write(dir.join("sweep.csv"), res.to_csv())?;
            fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&res)?)?;
            res.plot_svg(&dir.join("sweep.svg"))?;
            print!("{}", res.to_csv());
            println!("lambda = 1 matches plain translation loss: {}", res.plain_matches_lambda_one);
        }
    }
    Ok(())
}

fn pools_ref(p: &Option<[UnlabeledPool; 2]>) -> Option<[&UnlabeledPool; 2]> {
    p.as_ref().map(|[a, b]| [a, b])
}
