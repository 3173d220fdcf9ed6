//! The subcommands. Each returns `Ok(())` or a [`CliError`] whose exit code
//! reflects where it failed.

use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use mnat::data::{
    generate_synthetic_task, load_parallel_corpus, read_lines, save_parallel_corpus,
    tokenize_lines, SentencePair, TaskKind, TokenId, Vocabulary,
};
use mnat::decoding::mask_predict;
use mnat::metrics::{bleu, repetition_rate, similarity_probe};
use mnat::model::NatModel;
use mnat::training::{
    average_checkpoints, checkpoint, CheckpointPolicy, Trainer, UpdateRecord, LOG_HEADER,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::CliError;

fn output_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Output {
        path: path.display().to_string(),
        source,
    }
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    let p = path
        .clone()
        .ok_or_else(|| CliError::Config(format!("no {what} given")))?;
    if !p.exists() {
        return Err(CliError::DataMessage(format!(
            "{what} not found: {}",
            p.display()
        )));
    }
    Ok(p)
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(output_err(p)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(output_err(Path::new("<stdout>")))
        }
    }
}

/// Loads the vocabulary, or builds it from the training corpus and saves it.
fn training_vocabulary(cfg: &RunConfig, train: &Path) -> Result<Vocabulary, CliError> {
    let path = cfg.paths.vocab_file();
    if path.exists() {
        return Vocabulary::load(&path).map_err(CliError::Data);
    }
    let vocab = Vocabulary::build(&[train]).map_err(CliError::Data)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(output_err(dir))?;
    }
    vocab.save(&path).map_err(CliError::Data)?;
    log::info!(
        "built vocabulary of {} ids at {}",
        vocab.len(),
        path.display()
    );
    Ok(vocab)
}

fn load_vocabulary(cfg: &RunConfig) -> Result<Vocabulary, CliError> {
    let path = cfg.paths.vocab_file();
    if !path.exists() {
        return Err(CliError::DataMessage(format!(
            "vocabulary not found: {}",
            path.display()
        )));
    }
    Vocabulary::load(&path).map_err(CliError::Data)
}

fn load_model(path: &Path, vocab: &Vocabulary) -> Result<NatModel, CliError> {
    if !path.exists() {
        return Err(CliError::DataMessage(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    let ckpt = checkpoint::load(path).map_err(CliError::Data)?;
    if ckpt.model_config.vocab_size != vocab.len() {
        return Err(CliError::DataMessage(format!(
            "checkpoint expects {} vocabulary ids, vocabulary has {}",
            ckpt.model_config.vocab_size,
            vocab.len()
        )));
    }
    NatModel::from_params(ckpt.model_config, ckpt.params).map_err(CliError::Data)
}

/// Translates in batches of `batch_size`, keeping input order. Empty
/// sources yield empty hypotheses.
pub fn translate_ids(
    model: &NatModel,
    sources: &[Vec<TokenId>],
    iterations: usize,
    candidates: usize,
    batch_size: usize,
) -> mnat::Result<Vec<Vec<TokenId>>> {
    let mut out = vec![Vec::new(); sources.len()];
    let live: Vec<usize> = (0..sources.len())
        .filter(|&i| !sources[i].is_empty())
        .collect();
    for chunk in live.chunks(batch_size) {
        let refs: Vec<&[TokenId]> = chunk.iter().map(|&i| sources[i].as_slice()).collect();
        for (&i, t) in chunk
            .iter()
            .zip(mask_predict(model, &refs, iterations, candidates)?)
        {
            out[i] = t.tokens;
        }
    }
    Ok(out)
}

pub struct TrainOptions {
    pub log: Option<PathBuf>,
}

pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<(), CliError> {
    let train_path = require(&cfg.paths.train, "training corpus")?;
    let vocab = training_vocabulary(cfg, &train_path)?;
    let model_cfg = cfg.model_for_vocab(vocab.len())?;
    let corpus = load_parallel_corpus(&train_path, &vocab, model_cfg.max_positions)
        .map_err(CliError::Data)?;
    if corpus.pairs.is_empty() {
        return Err(CliError::DataMessage(format!(
            "no usable pairs in {}",
            train_path.display()
        )));
    }
    let longest = corpus
        .pairs
        .iter()
        .map(|p| p.target.len())
        .max()
        .unwrap_or(0);
    model_cfg
        .check_target_length(longest)
        .map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(p) = corpus
        .pairs
        .iter()
        .find(|p| p.target.len() > cfg.train.token_budget)
    {
        return Err(CliError::Config(format!(
            "train.token_budget = {} is smaller than a {}-token target",
            cfg.train.token_budget,
            p.target.len()
        )));
    }
    let valid = match &cfg.paths.valid {
        Some(_) => {
            let p = require(&cfg.paths.valid, "validation corpus")?;
            Some(
                load_parallel_corpus(&p, &vocab, model_cfg.max_positions)
                    .map_err(CliError::Data)?,
            )
        }
        None => None,
    };
    log::info!(
        "training on {} pairs ({} skipped), {} parameters",
        corpus.pairs.len(),
        corpus.skipped,
        model_cfg.parameter_count()
    );

    let dir = &cfg.paths.checkpoint_dir;
    fs::create_dir_all(dir).map_err(output_err(dir))?;
    let log_path = opts.log.clone().unwrap_or_else(|| dir.join("train.log"));
    let mut log_file =
        std::io::BufWriter::new(fs::File::create(&log_path).map_err(output_err(&log_path))?);
    writeln!(log_file, "{LOG_HEADER}").map_err(output_err(&log_path))?;

    let model = NatModel::new(model_cfg).map_err(CliError::Training)?;
    let mut trainer =
        Trainer::new(model, cfg.train.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let policy = CheckpointPolicy { dir: dir.clone() };
    let mut last: Option<UpdateRecord> = None;
    let mut write_failure: Option<std::io::Error> = None;
    let summary = trainer
        .train(
            &corpus.pairs,
            Some(&policy),
            |record| {
                if let Err(e) = writeln!(log_file, "{}", record.log_line()) {
                    write_failure.get_or_insert(e);
                }
                last = Some(*record);
                Ok(())
            },
            |t, epoch| {
                if let Some(valid) = &valid {
                    let score = validation_bleu(&t.model, &valid.pairs, cfg)?;
                    log::info!("epoch {epoch}: valid BLEU {score:.2}");
                }
                Ok(ControlFlow::Continue(()))
            },
        )
        .map_err(CliError::Training)?;
    log_file.flush().map_err(output_err(&log_path))?;
    if let Some(e) = write_failure {
        return Err(output_err(&log_path)(e));
    }

    let averaged = average_checkpoints(&summary.checkpoints).map_err(CliError::Training)?;
    checkpoint::save(&averaged, cfg.paths.averaged_checkpoint()).map_err(CliError::Training)?;
    log::info!(
        "averaged {} checkpoints into {}",
        summary.checkpoints.len(),
        cfg.paths.averaged_checkpoint().display()
    );
    if let Some(r) = last {
        let l = r.losses;
        let text = format!(
            "updates={}\nepochs={}\nnll1={}\nnll2={}\nnll3={}\nkld1={}\nkld2={}\nlen_loss={}\ntotal={}\nk_used={}\nlr={}\naveraged_checkpoint={}\n",
            summary.updates,
            summary.epochs,
            l.nll1,
            l.nll2,
            l.nll3,
            l.kld1,
            l.kld2,
            l.len_loss,
            l.total,
            l.k_used,
            r.lr,
            cfg.paths.averaged_checkpoint().display()
        );
        write_text(None, &text)?;
    }
    Ok(())
}

fn validation_bleu(model: &NatModel, pairs: &[SentencePair], cfg: &RunConfig) -> mnat::Result<f64> {
    let sources: Vec<Vec<TokenId>> = pairs.iter().map(|p| p.source.clone()).collect();
    let refs: Vec<Vec<TokenId>> = pairs.iter().map(|p| p.target.clone()).collect();
    let hyps = translate_ids(
        model,
        &sources,
        cfg.decode.iterations,
        cfg.decode.candidates,
        cfg.decode.batch_size,
    )?;
    Ok(bleu(&hyps, &refs)?.bleu)
}

pub struct TranslateOptions {
    pub checkpoint: Option<PathBuf>,
    pub input: PathBuf,
    pub output: Option<PathBuf>,
}

pub fn translate(cfg: &RunConfig, opts: &TranslateOptions) -> Result<(), CliError> {
    let vocab = load_vocabulary(cfg)?;
    let ckpt = opts
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.paths.averaged_checkpoint());
    let model = load_model(&ckpt, &vocab)?;
    if cfg.decode.candidates >= model.config.max_length_bins {
        return Err(CliError::Config(format!(
            "{} length candidates requested but the model has {} length bins",
            cfg.decode.candidates, model.config.max_length_bins
        )));
    }
    let input = require(&Some(opts.input.clone()), "input file")?;
    let lines = read_lines(&input).map_err(CliError::Data)?;
    let sources: Vec<Vec<TokenId>> = lines.iter().map(|l| vocab.encode(l)).collect();
    if let Some(i) = sources
        .iter()
        .position(|s| s.len() > model.config.max_positions)
    {
        return Err(CliError::DataMessage(format!(
            "{}:{}: sentence longer than {} tokens",
            input.display(),
            i + 1,
            model.config.max_positions
        )));
    }
    let hyps = translate_ids(
        &model,
        &sources,
        cfg.decode.iterations,
        cfg.decode.candidates,
        cfg.decode.batch_size,
    )
    .map_err(CliError::Data)?;
    let mut text = String::new();
    for h in &hyps {
        text.push_str(&vocab.decode(h));
        text.push('\n');
    }
    write_text(opts.output.as_deref(), &text)?;
    log::info!("translated {} sentences", hyps.len());
    Ok(())
}

pub struct EvaluateOptions {
    pub hypotheses: PathBuf,
    pub references: PathBuf,
}

pub fn evaluate(opts: &EvaluateOptions) -> Result<String, CliError> {
    let hyp_path = require(&Some(opts.hypotheses.clone()), "hypothesis file")?;
    let ref_path = require(&Some(opts.references.clone()), "reference file")?;
    let hyps = tokenize_lines(&read_lines(&hyp_path).map_err(CliError::Data)?);
    let refs = tokenize_lines(&read_lines(&ref_path).map_err(CliError::Data)?);
    if hyps.len() != refs.len() {
        return Err(CliError::DataMessage(format!(
            "{} has {} lines but {} has {}",
            hyp_path.display(),
            hyps.len(),
            ref_path.display(),
            refs.len()
        )));
    }
    let report = bleu(&hyps, &refs).map_err(CliError::Data)?;
    let rep = repetition_rate(&hyps).map_err(CliError::Data)?;
    Ok(format!(
        "{}\trepetition\t{rep:.2}\n{}repetition_rate={rep}\n",
        report.to_tsv(),
        report.to_key_values()
    ))
}

pub struct ProbeOptions {
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

pub fn probe(cfg: &RunConfig, opts: &ProbeOptions) -> Result<(), CliError> {
    let vocab = load_vocabulary(cfg)?;
    let ckpt = opts
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.paths.averaged_checkpoint());
    let model = load_model(&ckpt, &vocab)?;
    let corpus_path = require(
        &opts.corpus.clone().or_else(|| cfg.paths.valid.clone()),
        "probe corpus",
    )?;
    let corpus = load_parallel_corpus(&corpus_path, &vocab, model.config.max_positions)
        .map_err(CliError::Data)?;
    if corpus.pairs.is_empty() {
        return Err(CliError::DataMessage(format!(
            "no usable pairs in {}",
            corpus_path.display()
        )));
    }
    let mut sample = cfg.probe.sample_size;
    if sample > corpus.pairs.len() {
        log::warn!(
            "probe sample size {sample} exceeds the {} available pairs; using all of them",
            corpus.pairs.len()
        );
        sample = corpus.pairs.len();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let report = similarity_probe(
        &model,
        &corpus.pairs,
        cfg.probe.beta,
        cfg.probe.max_iterations,
        &mut rng,
        sample,
    )
    .map_err(CliError::Data)?;
    let text = format!("{}{}", report.to_tsv(), report.to_key_values());
    write_text(opts.output.as_deref(), &text)
}

pub struct GenerateOptions {
    pub task: TaskKind,
    pub vocab_size: usize,
    pub count: usize,
    pub max_len: usize,
    pub output: PathBuf,
    pub vocab_out: Option<PathBuf>,
}

pub fn generate(cfg: &RunConfig, opts: &GenerateOptions) -> Result<(), CliError> {
    let vocab =
        Vocabulary::synthetic(opts.vocab_size).map_err(|e| CliError::Config(e.to_string()))?;
    let pairs = generate_synthetic_task(
        opts.task,
        opts.vocab_size,
        opts.count,
        opts.max_len,
        cfg.seed,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    save_parallel_corpus(&opts.output, &pairs, &vocab).map_err(CliError::Data)?;
    if let Some(path) = &opts.vocab_out {
        vocab.save(path).map_err(CliError::Data)?;
    }
    log::info!(
        "wrote {} {} pairs to {}",
        pairs.len(),
        opts.task,
        opts.output.display()
    );
    Ok(())
}
