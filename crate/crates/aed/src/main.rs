//! Command-line surface: synthetic data generation, ink rendering,
//! training, recognition, evaluation. Exit codes: 0 success, 1 data
//! error, 2 usage error, 3 model/checkpoint error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aed::checkpoint::Checkpoint;
use aed::config::RunConfig;
use aed::corpus::{generate_corpus, synthetic_vocabulary};
use aed::dataset::{image_to_tensor, Dataset, RenderSettings};
use aed::decoder::attention_overlay;
use aed::ink::{parse_ink, render, RasterImage};
use aed::model::Model;
use aed::pgm::{read_pgm, write_pgm};
use aed::train::{evaluate, train};
use aed::vocab::Vocabulary;
use aed::{Error, Result};

#[derive(Parser)]
#[command(name = "aed", about = "Attention encoder-decoder handwriting recognizer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RenderFlags {
    /// target image height in pixels (must be divisible by 8 for the model)
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 2)]
    stroke_width: usize,
    #[arg(long, default_value_t = 1024)]
    max_width: usize,
}

impl RenderFlags {
    fn settings(&self) -> RenderSettings {
        RenderSettings {
            height: self.height,
            stroke_width: self.stroke_width,
            max_width: self.max_width,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic ink corpus with vocab and manifest
    Gen {
        #[arg(long)]
        seed: u64,
        /// number of samples
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out_dir: PathBuf,
        /// word length range, e.g. 2-4
        #[arg(long, default_value = "2-4")]
        word_len: String,
        /// probability a glyph carries a diacritic-like mark
        #[arg(long, default_value_t = 0.25)]
        mark_prob: f64,
    },
    /// Render INKTEXT files to PGM images
    Render {
        /// an .ink file or a directory of them
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        render: RenderFlags,
    },
    /// Train (or fine-tune with --init-ckpt) on a generated corpus
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        val_dir: PathBuf,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// warm-start weights from an existing checkpoint
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
        /// override a config key, e.g. --set train.max_epochs=5
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Recognize text in ink or PGM inputs
    Recognize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// input files (.ink rendered on the fly, .pgm used as-is)
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        /// write per-step attention heat maps to this directory
        #[arg(long)]
        dump_attn: Option<PathBuf>,
        #[command(flatten)]
        render: RenderFlags,
    },
    /// Evaluate a checkpoint on a test corpus
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test_dir: PathBuf,
        /// TSV report output path
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        render: RenderFlags,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Gen {
            seed,
            n,
            out_dir,
            word_len,
            mark_prob,
        } => cmd_gen(seed, n, &out_dir, &word_len, mark_prob),
        Cmd::Render { input, out, render } => cmd_render(&input, &out, render.settings()),
        Cmd::Train {
            config,
            train_dir,
            val_dir,
            out_ckpt,
            init_ckpt,
            sets,
        } => cmd_train(config.as_deref(), &train_dir, &val_dir, &out_ckpt, init_ckpt.as_deref(), &sets),
        Cmd::Recognize {
            ckpt,
            vocab,
            inputs,
            dump_attn,
            render,
        } => cmd_recognize(&ckpt, &vocab, &inputs, dump_attn.as_deref(), render.settings()),
        Cmd::Eval {
            ckpt,
            test_dir,
            report,
            render,
        } => cmd_eval(&ckpt, &test_dir, &report, render.settings()),
    }
}

fn parse_word_len(s: &str) -> Result<(usize, usize)> {
    let parse = |t: &str| {
        t.parse::<usize>()
            .map_err(|_| Error::Usage(format!("bad word length {s:?}")))
    };
    let (lo, hi) = match s.split_once('-') {
        Some((a, b)) => (parse(a)?, parse(b)?),
        None => {
            let v = parse(s)?;
            (v, v)
        }
    };
    if lo == 0 || hi < lo {
        return Err(Error::Usage(format!("bad word length range {s:?}")));
    }
    Ok((lo, hi))
}

fn cmd_gen(seed: u64, n: usize, out_dir: &Path, word_len: &str, mark_prob: f64) -> Result<ExitCode> {
    if n == 0 {
        return Err(Error::Usage("need at least one sample (--n)".into()));
    }
    let range = parse_word_len(word_len)?;
    if !(0.0..=1.0).contains(&mark_prob) {
        return Err(Error::Usage(format!("mark probability {mark_prob} outside [0,1]")));
    }
    let vocab = synthetic_vocabulary();
    let samples = generate_corpus(seed, n, &vocab, range, mark_prob)?;
    fs::create_dir_all(out_dir)?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i}.ink");
        fs::write(out_dir.join(&name), aed::ink::serialize_ink(s))?;
        manifest.push_str(&format!("{name}\t{}\n", s.label));
    }
    fs::write(out_dir.join("vocab.txt"), vocab.to_file_text())?;
    fs::write(out_dir.join("manifest.tsv"), manifest)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_render(input: &Path, out: &Path, rs: RenderSettings) -> Result<ExitCode> {
    let files: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ink"))
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Usage(format!("no .ink files under {}", input.display())));
    }
    fs::create_dir_all(out)?;
    let mut failed = false;
    for f in &files {
        let result = fs::read_to_string(f)
            .map_err(Error::from)
            .and_then(|t| parse_ink(&t))
            .and_then(|s| render(&s, rs.height, rs.stroke_width, rs.max_width));
        match result {
            Ok(img) => {
                let name = f.file_stem().unwrap_or_default().to_string_lossy().to_string();
                let dst = out.join(format!("{name}.pgm"));
                fs::write(&dst, write_pgm(&img))?;
                println!("{} {}x{}", dst.display(), img.width, img.height);
            }
            Err(e) => {
                eprintln!("{}: {e}", f.display());
                failed = true;
            }
        }
    }
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::from_file_text(&fs::read_to_string(path)?)
}

fn cmd_train(
    config: Option<&Path>,
    train_dir: &Path,
    val_dir: &Path,
    out_ckpt: &Path,
    init_ckpt: Option<&Path>,
    sets: &[String],
) -> Result<ExitCode> {
    let mut cfg = match config {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    for kv in sets {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Usage(format!("--set wants key=value, got {kv:?}")));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    let vocab = load_vocab(&train_dir.join("vocab.txt"))?;
    let train_set = Dataset::from_dir(train_dir, cfg.render)?;
    let val_set = Dataset::from_dir(val_dir, cfg.render)?;
    let model: Model<f32> = Model::new(cfg.enc.clone(), cfg.decoder_config(vocab.len()), cfg.train.seed)?;
    if let Some(p) = init_ckpt {
        Checkpoint::load(p)?.apply_to(&model)?;
    }
    let report = train(&model, &train_set, &val_set, &vocab, &cfg.train, |s| {
        println!(
            "epoch={} lr={} train_loss={:.6} val_cer={}",
            s.epoch, s.lr, s.train_loss, s.val_cer
        );
    })?;
    let (epoch, cer) = if report.epochs.is_empty() {
        (0, f64::NAN)
    } else {
        (report.best_epoch, report.best_cer)
    };
    Checkpoint::from_model(&model, vocab.hash(), epoch, cer).save(out_ckpt)?;
    Ok(ExitCode::SUCCESS)
}

fn load_model_and_vocab(ckpt: &Path, vocab_path: &Path) -> Result<(Model<f32>, Vocabulary)> {
    let ck = Checkpoint::load(ckpt)?;
    let vocab = load_vocab(vocab_path)?;
    if vocab.hash() != ck.vocab_hash {
        return Err(Error::Checkpoint(format!(
            "vocabulary hash {:#x} does not match checkpoint {:#x}",
            vocab.hash(),
            ck.vocab_hash
        )));
    }
    Ok((ck.build_model()?, vocab))
}

fn cmd_recognize(
    ckpt: &Path,
    vocab_path: &Path,
    inputs: &[PathBuf],
    dump_attn: Option<&Path>,
    rs: RenderSettings,
) -> Result<ExitCode> {
    let (model, vocab) = load_model_and_vocab(ckpt, vocab_path)?;
    let ds8 = model.enc.cfg.downsample_factor();
    for input in inputs {
        let img: RasterImage = if input.extension().is_some_and(|x| x == "pgm") {
            read_pgm(&fs::read(input)?)?
        } else {
            let sample = parse_ink(&fs::read_to_string(input)?)?;
            render(&sample, rs.height, rs.stroke_width, rs.max_width)?
        };
        let wpad = img.width.div_ceil(ds8) * ds8;
        let tensor = image_to_tensor::<f32>(&img, wpad)?;
        let (text, records, (gh, gw)) = model.recognize(&tensor, img.width, &vocab)?;
        println!("{}", aed::vocab::nfc(&text));
        if let Some(dir) = dump_attn {
            fs::create_dir_all(dir)?;
            let mut manifest = String::new();
            for (t, rec) in records.iter().enumerate() {
                let heat = attention_overlay(rec, gh, gw, ds8)?;
                fs::write(dir.join(format!("step_{t}.pgm")), write_pgm(&heat))?;
                let argmax = rec
                    .weights
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap_or(0);
                let symbol = text.chars().nth(t).unwrap_or('?');
                manifest.push_str(&format!("{t}\t{symbol}\t{argmax}\n"));
            }
            fs::write(dir.join("manifest.tsv"), manifest)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(ckpt: &Path, test_dir: &Path, report: &Path, rs: RenderSettings) -> Result<ExitCode> {
    let (model, vocab) = load_model_and_vocab(ckpt, &test_dir.join("vocab.txt"))?;
    let test_set = Dataset::from_dir(test_dir, rs)?;
    let rep = evaluate(&model, &test_set, &vocab)?;
    fs::write(report, rep.to_tsv())?;
    println!("{}", rep.summary_line());
    Ok(ExitCode::SUCCESS)
}
