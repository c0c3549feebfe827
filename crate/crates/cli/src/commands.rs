use std::fs;
use std::path::{Path, PathBuf};

use gfus::corpus::{
    encode_pairs, load_pairs, split_corpus, synth_reversal, tokenize, ExamplePair, PairingMode, TextPair,
    Vocabulary,
};
use gfus::generator::{decode, DecodeConfig};
use gfus::metrics::{evaluate_variant, report, ReportRow};
use gfus::model::gradcheck::{check_model_gradients, fixture, tiny_config, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
use gfus::model::{encode_checkpoint, init_parameters, load_checkpoint, Checkpoint, FusionMode, GateGranularity};
use gfus::numerics::OpKind;
use gfus::trainer::{train_with_observer, validate_inputs};

use crate::error::{CliError, CliResult};
use crate::settings::RunConfig;
use crate::svg::loss_curve;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn build_vocab(corpus: &Path, min_freq: usize, max_size: usize, out: &Path) -> CliResult<()> {
    let text = read_text(corpus)?;
    let lines: Vec<&str> = text.lines().collect();
    let vocab = Vocabulary::build(&lines, min_freq, max_size)?;
    write_file(out, vocab.to_file_string())?;
    println!("{} tokens", vocab.len());
    Ok(())
}

pub fn synth(n: usize, len: usize, alphabet: usize, seed: u64, out: &Path) -> CliResult<()> {
    let pairs = synth_reversal(n, len, alphabet, seed)?;
    let text: String = pairs.iter().map(|p| format!("{}\n", p.to_tsv_line())).collect();
    write_file(out, text)?;
    println!("{n} pairs written to {}", out.display());
    Ok(())
}

fn tsv(pairs: &[TextPair]) -> String {
    pairs.iter().map(|p| format!("{}\n", p.to_tsv_line())).collect()
}

/// Files of a finished training run, staged next to the output directory
/// and moved into place only after everything succeeded.
struct Staging {
    dir: tempfile::TempDir,
    files: Vec<String>,
}

impl Staging {
    fn new(out: &Path) -> CliResult<Self> {
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
        let dir = tempfile::Builder::new()
            .prefix(".gfus-staging")
            .tempdir_in(&parent)
            .map_err(|e| CliError::Data(format!("cannot stage outputs in {}: {e}", parent.display())))?;
        Ok(Staging { dir, files: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        write_file(&self.dir.path().join(name), contents)?;
        self.files.push(name.to_owned());
        Ok(())
    }

    fn commit(self, out: &Path) -> CliResult<()> {
        fs::create_dir_all(out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
        for name in &self.files {
            let to = out.join(name);
            fs::rename(self.dir.path().join(name), &to)
                .map_err(|e| CliError::Data(format!("cannot move output to {}: {e}", to.display())))?;
        }
        Ok(())
    }
}

pub fn train(mut config: RunConfig) -> CliResult<()> {
    let out = config
        .output_dir
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set output.dir".into()))?;
    let data_path = config
        .data
        .train
        .clone()
        .ok_or_else(|| CliError::Usage("no training data: pass --data or set data.train".into()))?;
    config.train.validate()?;
    config.decode.validate()?;
    let pairing = config.data.pairing();
    if let PairingMode::AutoSplit { prefix_fraction } = pairing {
        log::info!("auto-split documents with prefix fraction {prefix_fraction}");
    }

    let loaded = load_pairs(&data_path, pairing)?;
    if loaded.pairs.len() < 10 {
        return Err(CliError::Data(format!(
            "{}: need at least 10 pairs to split, found {}",
            data_path.display(),
            loaded.pairs.len()
        )));
    }
    let text_split = split_corpus(&loaded.pairs, config.data.split_seed)?;
    let vocab = match &config.data.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => {
            let texts: Vec<String> = text_split
                .train
                .iter()
                .map(|p| format!("{} {}", p.source.join(" "), p.target.join(" ")))
                .collect();
            Vocabulary::build(&texts, config.data.min_freq, config.data.max_vocab)?
        }
    };
    config.model.vocab_size = vocab.len();
    config.model.validate()?;
    let split = gfus::corpus::CorpusSplit {
        train: encode_pairs(&text_split.train, &vocab)?,
        validation: encode_pairs(&text_split.validation, &vocab)?,
        test: encode_pairs(&text_split.test, &vocab)?,
    };
    let init = init_parameters(&config.model)?;
    validate_inputs(&init, &split, &config.train)?;

    let mut staging = Staging::new(&out)?;
    staging.write("config.resolved", config.to_text())?;
    staging.write("vocab.txt", vocab.to_file_string())?;
    staging.write("train.tsv", tsv(&text_split.train))?;
    staging.write("valid.tsv", tsv(&text_split.validation))?;
    staging.write("test.tsv", tsv(&text_split.test))?;
    log::info!(
        "{} train / {} validation / {} test pairs, vocabulary {}, {} parameters",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        vocab.len(),
        init.num_parameters()
    );

    let (ckpt, log) = train_with_observer(init, &split, &config.train, |r| {
        if r.save_due {
            staging
                .write(&format!("checkpoint_epoch{:04}.gfus", r.epoch), encode_checkpoint(r.checkpoint))
                .map_err(|e| gfus::Error::Contract(e.to_string()))?;
        }
        Ok(())
    })?;
    staging.write("checkpoint.gfus", encode_checkpoint(&ckpt))?;
    staging.write("train_log.csv", log.to_csv())?;
    staging.write("loss_curve.svg", loss_curve(&log))?;
    staging.commit(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn vocab_for(checkpoint: &Path, explicit: Option<&Path>) -> CliResult<Vocabulary> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name("vocab.txt"),
    };
    Ok(Vocabulary::load(path)?)
}

fn load_model(checkpoint: &Path, vocab: Option<&Path>) -> CliResult<(Checkpoint, Vocabulary)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let vocab = vocab_for(checkpoint, vocab)?;
    if vocab.len() != ckpt.config().vocab_size {
        return Err(CliError::Data(format!(
            "vocabulary has {} tokens but checkpoint {} expects {}",
            vocab.len(),
            checkpoint.display(),
            ckpt.config().vocab_size
        )));
    }
    Ok((ckpt, vocab))
}

pub fn generate(
    checkpoint: &Path,
    vocab: Option<&Path>,
    input: Option<&str>,
    input_file: Option<&Path>,
    decode_config: &DecodeConfig,
) -> CliResult<()> {
    decode_config.validate()?;
    let lines: Vec<String> = match (input, input_file) {
        (Some(text), None) => vec![text.to_owned()],
        (None, Some(path)) => read_text(path)?.lines().map(str::to_owned).collect(),
        _ => return Err(CliError::Usage("pass exactly one of --input or --input-file".into())),
    };
    let sources: Vec<Vec<String>> = lines.iter().map(|l| tokenize(l)).collect();
    if sources.is_empty() || sources.iter().any(Vec::is_empty) {
        return Err(CliError::Usage("source must be non-empty".into()));
    }
    let (ckpt, vocab) = load_model(checkpoint, vocab)?;
    for source in sources {
        let ids = decode(&ckpt, &vocab.encode(&source), decode_config)?;
        println!("{}", vocab.decode(&ids).join(" "));
    }
    Ok(())
}

pub struct EvalArgs<'a> {
    pub checkpoints: &'a [PathBuf],
    pub names: &'a [String],
    pub vocab: Option<&'a Path>,
    pub test: &'a Path,
    pub pairing: PairingMode,
    pub decode: &'a DecodeConfig,
    pub out_dir: &'a Path,
}

pub fn eval(args: EvalArgs<'_>) -> CliResult<()> {
    args.decode.validate()?;
    if !args.names.is_empty() && args.names.len() != args.checkpoints.len() {
        return Err(CliError::Usage(format!(
            "{} names for {} checkpoints",
            args.names.len(),
            args.checkpoints.len()
        )));
    }
    let text_pairs = load_pairs(args.test, args.pairing)?.pairs;
    if text_pairs.is_empty() {
        return Err(CliError::Data(format!("{}: no test pairs", args.test.display())));
    }
    let dataset = args
        .test
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| args.test.display().to_string());
    let mut rows = Vec::with_capacity(args.checkpoints.len());
    for (i, path) in args.checkpoints.iter().enumerate() {
        let (ckpt, vocab) = load_model(path, args.vocab)?;
        let pairs: Vec<ExamplePair> = encode_pairs(&text_pairs, &vocab)?;
        let score = evaluate_variant(&ckpt, &pairs, args.decode)?;
        let name = match args.names.get(i) {
            Some(n) => n.clone(),
            None => ckpt.config().fusion_mode.to_string(),
        };
        log::info!(
            "{name}: perplexity {:.4}, bleu {:.4}, exact {:.4}",
            score.perplexity,
            score.bleu.score,
            score.exact_match
        );
        rows.push(ReportRow {
            model: name,
            perplexity: score.perplexity,
            bleu: score.bleu.score,
            decode: args.decode.strategy.to_string(),
            dataset: dataset.clone(),
            seed: args.decode.seed,
        });
    }
    let report = report(rows)?;
    fs::create_dir_all(args.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out_dir.display())))?;
    write_file(&args.out_dir.join("report.csv"), report.to_csv())?;
    let table = report.to_table();
    write_file(&args.out_dir.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck(seed: u64, mode: FusionMode, granularity: GateGranularity, fault: Option<OpKind>) -> CliResult<()> {
    let config = gfus::model::ModelConfig {
        fusion_mode: mode,
        gate_granularity: granularity,
        ..tiny_config()
    };
    let (ckpt, pairs) = fixture(&config, seed)?;
    let checks = check_model_gradients(&ckpt, &pairs, GRADCHECK_STEP, fault)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        println!(
            "{:<width$}  {:>6}  {:.3e}  {}",
            c.name,
            c.len,
            c.max_rel_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(CliError::Failed(format!(
            "{failed} of {} tensors exceed relative error {GRADCHECK_TOLERANCE:e}",
            checks.len()
        )));
    }
    println!("all {} tensors below {GRADCHECK_TOLERANCE:e}", checks.len());
    Ok(())
}
