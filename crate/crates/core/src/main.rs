//! Command line entry point: corpus prep, training, evaluation, and the
//! gradient self-check. Exit codes: 0 success, 1 usage/config error,
//! 2 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fsmn::checkpoint::{self, Checkpoint};
use fsmn::config::RunConfig;
use fsmn::data::{build_vocab, encode_corpus, SentenceBatch, Vocabulary};
use fsmn::error::Error;
use fsmn::model::{grad_check, perplexity};
use fsmn::optim::Decision;
use fsmn::trainer::Trainer;

#[derive(Parser)]
#[command(name = "fsmn", about = "FSMN language models", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary and encode train/valid/test splits.
    Prep {
        /// Raw training text, one sentence per line.
        #[arg(long)]
        train: PathBuf,
        /// Raw validation text; carved out of the training file when absent.
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Raw test text; carved out of the training file when absent.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Vocabulary cap including the reserved tokens.
        #[arg(long, default_value_t = 10003)]
        max_vocab: usize,
    },
    /// Train a model from a run-config file.
    Train { config: PathBuf },
    /// Print the perplexity of a checkpoint on a dataset.
    Eval {
        checkpoint: PathBuf,
        /// Encoded id file, or raw text when --vocab is given.
        data: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences on the
    /// configured (tiny) model.
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::Prep {
            train,
            valid,
            test,
            out_dir,
            max_vocab,
        } => cmd_prep(&train, valid.as_deref(), test.as_deref(), &out_dir, max_vocab),
        Command::Train { config } => cmd_train(&config),
        Command::Eval {
            checkpoint,
            data,
            vocab,
        } => cmd_eval(&checkpoint, &data, vocab.as_deref()),
        Command::Gradcheck {
            config,
            step,
            tolerance,
        } => cmd_gradcheck(&config, step, tolerance),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn read_lines(path: &Path) -> fsmn::Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

fn load_vocab(path: &Path) -> fsmn::Result<Vocabulary> {
    let words = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Vocabulary::from_words(words.lines().map(str::to_string))
}

fn load_ids(path: &Path) -> fsmn::Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for (lineno, line) in read_lines(path)?.iter().enumerate() {
        let ids: fsmn::Result<Vec<usize>> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse().map_err(|_| {
                    Error::Config(format!(
                        "{}:{}: not a token id: {tok:?}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect();
        out.push(ids?);
    }
    if out.is_empty() {
        return Err(Error::Empty("encoded data file"));
    }
    Ok(out)
}

fn write_ids(path: &Path, sentences: &[Vec<usize>]) -> fsmn::Result<()> {
    let mut out = String::new();
    for sent in sentences {
        let line: Vec<String> = sent.iter().map(|id| id.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn oov_rate(lines: &[String], vocab: &Vocabulary) -> (usize, f64) {
    let mut tokens = 0usize;
    let mut oov = 0usize;
    for line in lines {
        for tok in line.split_whitespace() {
            tokens += 1;
            if !vocab.contains(tok) {
                oov += 1;
            }
        }
    }
    let rate = if tokens == 0 { 0.0 } else { oov as f64 / tokens as f64 };
    (tokens, rate)
}

fn cmd_prep(
    train: &Path,
    valid: Option<&Path>,
    test: Option<&Path>,
    out_dir: &Path,
    max_vocab: usize,
) -> fsmn::Result<ExitCode> {
    let train_lines = read_lines(train)?;
    if train_lines.is_empty() {
        return Err(Error::Empty("training text"));
    }
    // Carve held-out splits from the tail of the training file when no
    // separate files are given: 90/5/5 by sentence.
    let (train_lines, valid_lines, test_lines) = match (valid, test) {
        (Some(v), Some(t)) => (train_lines, read_lines(v)?, read_lines(t)?),
        (Some(v), None) => {
            let v_lines = read_lines(v)?;
            let cut = train_lines.len() - train_lines.len() / 20;
            let (tr, te) = train_lines.split_at(cut.max(1));
            (tr.to_vec(), v_lines, te.to_vec())
        }
        (None, _) => {
            let n = train_lines.len();
            let tr_end = n - 2 * (n / 20).max(1);
            let va_end = n - (n / 20).max(1);
            (
                train_lines[..tr_end.max(1)].to_vec(),
                train_lines[tr_end.max(1)..va_end].to_vec(),
                train_lines[va_end..].to_vec(),
            )
        }
    };

    let tokens = train_lines
        .iter()
        .flat_map(|l| l.split_whitespace())
        .collect::<Vec<_>>();
    let vocab = build_vocab(tokens.iter().copied(), max_vocab)?;

    std::fs::create_dir_all(out_dir)?;
    let mut vocab_text = String::new();
    for w in vocab.words() {
        vocab_text.push_str(w);
        vocab_text.push('\n');
    }
    std::fs::write(out_dir.join("vocab.txt"), vocab_text)?;

    for (name, lines) in [
        ("train", &train_lines),
        ("valid", &valid_lines),
        ("test", &test_lines),
    ] {
        let text = lines.join("\n");
        let encoded = encode_corpus(&text, &vocab);
        write_ids(&out_dir.join(format!("{name}.ids")), &encoded)?;
        let (tok, rate) = oov_rate(lines, &vocab);
        println!(
            "split={name} sentences={} tokens={tok} oov_rate={:.4}",
            lines.len(),
            rate
        );
    }
    println!("vocab_size={}", vocab.size());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(config_path: &Path) -> fsmn::Result<ExitCode> {
    let run = RunConfig::parse_file(config_path)?;
    let vocab = load_vocab(&run.vocab_path)?;
    let train_data = load_ids(&run.train_path)?;
    let valid_data = load_ids(&run.valid_path)?;
    let model_config = run.model_config(vocab.size());
    model_config.validate()?;
    for data in [&train_data, &valid_data] {
        let max_id = data.iter().flatten().copied().max().unwrap_or(0);
        if max_id >= vocab.size() {
            return Err(Error::Config(format!(
                "token id {max_id} exceeds vocabulary of {}",
                vocab.size()
            )));
        }
    }

    let mut trainer = match &run.resume_from {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if ckpt.config != model_config {
                return Err(Error::Config(
                    "resume checkpoint architecture does not match config".into(),
                ));
            }
            Trainer::resume(ckpt, run.optim, run.batch_size, run.seed)?
        }
        None => Trainer::new(model_config, run.optim, run.batch_size, run.seed)?,
    };

    println!(
        "run=start vocab_size={} params={} seed={}",
        vocab.size(),
        trainer.params.param_count(),
        run.seed
    );
    let outcome = trainer.train_until_stop(&train_data, &valid_data, run.max_epochs, |rec| {
        let decision = match rec.decision {
            Decision::Continue => "continue",
            Decision::ContinueHalved => "continue_halved",
            Decision::Stop => "stop",
        };
        println!(
            "epoch={} train_loss={:.6} valid_ppl={:.4} lr_scale={} decision={decision}",
            rec.epoch, rec.train_loss, rec.valid_ppl, rec.lr_scale
        );
    })?;

    let best_path = with_suffix(&run.checkpoint_path, "best");
    let final_path = with_suffix(&run.checkpoint_path, "final");
    checkpoint::save(&best_path, &outcome.best_checkpoint)?;
    checkpoint::save(&final_path, &outcome.final_checkpoint)?;
    println!(
        "run=done epochs={} best_valid_ppl={:.4} best_checkpoint={} final_checkpoint={}",
        outcome.records.len(),
        outcome.best_valid_ppl,
        best_path.display(),
        final_path.display()
    );

    if let Some(test_path) = &run.test_path {
        let test_data = load_ids(test_path)?;
        let best = &outcome.best_checkpoint;
        let ppl = perplexity(&best.params, &best.config, &test_data)?;
        println!("test_ppl={}", sig4(ppl));
    }
    Ok(ExitCode::SUCCESS)
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(format!(".{suffix}"));
    PathBuf::from(s)
}

/// Formats with 4 significant digits.
fn sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (3 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn cmd_eval(ckpt_path: &Path, data_path: &Path, vocab: Option<&Path>) -> fsmn::Result<ExitCode> {
    let ckpt: Checkpoint = checkpoint::load(ckpt_path)?;
    let data = match vocab {
        Some(vocab_path) => {
            let vocab = load_vocab(vocab_path)?;
            if vocab.size() != ckpt.config.vocab_size {
                return Err(Error::Config(format!(
                    "vocabulary of {} does not match checkpoint vocab_size {}",
                    vocab.size(),
                    ckpt.config.vocab_size
                )));
            }
            let text = std::fs::read_to_string(data_path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", data_path.display())))?;
            encode_corpus(&text, &vocab)
        }
        None => load_ids(data_path)?,
    };
    let max_id = data.iter().flatten().copied().max().unwrap_or(0);
    if max_id >= ckpt.config.vocab_size {
        return Err(Error::Config(format!(
            "token id {max_id} out of range for checkpoint vocab_size {}",
            ckpt.config.vocab_size
        )));
    }
    let ppl = perplexity(&ckpt.params, &ckpt.config, &data)?;
    println!("ppl={}", sig4(ppl));
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(config_path: &Path, step: f64, tolerance: f64) -> fsmn::Result<ExitCode> {
    let run = RunConfig::parse_file(config_path)?;
    let vocab = load_vocab(&run.vocab_path)?;
    let model_config = run.model_config(vocab.size());
    model_config.validate()?;
    let mut params = fsmn::model::init_parameters(&model_config, run.seed)?;
    // check at a generic point, away from the ReLU kinks of the raw init
    fsmn::model::jitter_parameters(&mut params, 0.1, run.seed.wrapping_add(1));
    if params.param_count() > 10_000 {
        return Err(Error::Config(format!(
            "gradcheck needs a tiny model; this one has {} parameters",
            params.param_count()
        )));
    }
    let train_data = load_ids(&run.train_path)?;
    let sample: Vec<Vec<usize>> = train_data.into_iter().take(2).collect();
    let batch = SentenceBatch::new(sample, model_config.context_window)?;
    let report = grad_check(&params, &model_config, &batch, step)?;
    let mut ok = true;
    for g in &report.groups {
        let pass = g.max_error < tolerance;
        ok &= pass;
        println!(
            "group={} max_error={:.3e} status={}",
            g.group,
            g.max_error,
            if pass { "pass" } else { "fail" }
        );
    }
    if ok {
        println!("gradcheck=pass step={step} tolerance={tolerance}");
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::NonFinite(format!(
            "gradient check exceeded tolerance {tolerance}"
        )))
    }
}
