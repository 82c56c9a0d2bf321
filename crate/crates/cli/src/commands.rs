use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde_json::json;
use unicross::backbone::{save_weight_archive, Backbone};
use unicross::config::RunConfig;
use unicross::data::image::load_image;
use unicross::data::{normalized_text, Split, Vocabulary};
use unicross::decoder::PAD_ID;
use unicross::metrics::ScoreReport;
use unicross::model::Ablation;
use unicross::nn::{ParamBuilder, ParamStore};
use unicross::trainer::{self, checkpoint, Corpus, CorpusPaths, TrainLog, Trainer};
use unicross::{Error, Result};

const DTYPE: DType = DType::F32;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn prepare(config: &Path, overrides: &[String]) -> Result<()> {
    let cfg = RunConfig::load(config, overrides)?;
    let summary = trainer::prepare(&cfg)?;
    println!("manifest    {}", summary.paths.manifest.display());
    println!("vocabulary  {} ({} tokens)", summary.paths.vocab.display(), summary.vocab_size);
    for (split, n) in summary.split_sizes {
        println!("{split:<11} {n}");
    }
    Ok(())
}

pub fn train(
    config: Option<&Path>,
    overrides: &[String],
    resume: Option<&Path>,
    epochs: Option<usize>,
    ablation: Option<Ablation>,
) -> Result<()> {
    let (resumed, cfg) = match (resume, config) {
        (Some(path), _) => {
            if ablation.is_some() || !overrides.is_empty() {
                return Err(Error::Config("--ablation and --set cannot change a resumed run".into()));
            }
            let t = Trainer::resume(&checkpoint::load(path)?)?;
            let cfg = t.cfg.clone();
            (Some(t), cfg)
        }
        (None, Some(path)) => {
            let mut sets = overrides.to_vec();
            if let Some(a) = ablation {
                sets.push(format!("train.ablation={a}"));
            }
            (None, RunConfig::load(path, &sets)?)
        }
        (None, None) => return Err(Error::Config("train needs --config or --resume".into())),
    };
    let corpus = Corpus::load(&cfg, DTYPE)?;
    let mut trainer = match resumed {
        Some(t) => {
            if t.model.decoder().vocab_size() != corpus.vocab.len() {
                return Err(Error::Checkpoint("checkpoint vocabulary differs from the prepared corpus".into()));
            }
            t
        }
        None => Trainer::new(&cfg, &corpus, DTYPE)?,
    };
    let until = epochs.unwrap_or(cfg.train.epochs);
    let log_path = cfg.run_dir().join(trainer::LOG_FILE);
    let mut log = TrainLog::create(&log_path, resume.is_some())?;
    eprintln!(
        "training {} ({} trainable of {} parameters) from epoch {} to {until}",
        cfg.run_name,
        trainer.model.store().trainable_count(),
        trainer.model.store().count(""),
        trainer.epoch
    );
    let summary = trainer::fit(&mut trainer, &corpus, until, &mut log)?;
    println!("epochs      {}", summary.epochs_run);
    println!("train loss  {:.6}", summary.final_loss);
    if let Some(best) = &summary.best {
        println!("best        epoch {} (val BLEU-4 {:.4}, val loss {:.4})", best.epoch, best.val_bleu_4, best.val_loss);
    }
    println!("checkpoint  {}", summary.best_path.display());
    Ok(())
}

pub fn generate(checkpoint_path: &Path, image: Option<&Path>, split: Option<Split>, output: Option<&Path>) -> Result<()> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let cfg = &ckpt.meta.config;
    let model = ckpt.model()?;
    let mut lines = Vec::new();
    match (image, split) {
        (Some(path), _) => {
            let b = &cfg.backbone;
            let img = load_image(path, b.in_channels, b.image_size, DTYPE, &Device::Cpu)?.unsqueeze(0)?;
            let vocab = ckpt.vocabulary()?;
            let result = model.generate(&img)?;
            let text = vocab.decode(&result[0].tokens.ids);
            match output {
                Some(_) => lines.push(json!({ "id": path.display().to_string(), "text": text }).to_string()),
                None => lines.push(text),
            }
        }
        (None, Some(split)) => {
            let corpus = corpus_for_checkpoint(&ckpt)?;
            let indices = corpus.indices(split);
            let texts = trainer::generate_texts(&model, &corpus, &indices, cfg.train.batch_size)?;
            for (i, text) in indices.iter().zip(texts) {
                lines.push(json!({ "id": corpus.examples[*i].id, "text": text }).to_string());
            }
        }
        (None, None) => return Err(Error::Config("generate needs --image or --split".into())),
    }
    let mut body = lines.join("\n");
    body.push('\n');
    match output {
        Some(path) => write_file(path, body),
        None => std::io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| Error::Data(format!("stdout: {e}"))),
    }
}

/// Loads the prepared corpus a checkpoint was trained on, checking that the
/// vocabulary on disk still matches the one stored in the checkpoint.
fn corpus_for_checkpoint(ckpt: &checkpoint::Checkpoint) -> Result<Corpus> {
    let corpus = Corpus::load(&ckpt.meta.config, DTYPE)?;
    if corpus.vocab != ckpt.vocabulary()? {
        return Err(Error::Checkpoint(format!(
            "vocabulary at {} differs from the checkpoint's",
            CorpusPaths::for_config(&ckpt.meta.config).vocab.display()
        )));
    }
    Ok(corpus)
}

pub fn evaluate(checkpoint_path: &Path, split: Split, out_dir: Option<&Path>) -> Result<()> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let cfg = &ckpt.meta.config;
    let model = ckpt.model()?;
    let corpus = corpus_for_checkpoint(&ckpt)?;
    let eval = trainer::evaluate(&model, &corpus, split, cfg.train.batch_size)?;
    let dir: PathBuf = out_dir.map_or_else(|| cfg.run_dir(), Path::to_path_buf);
    let examples: Vec<_> = corpus
        .indices(split)
        .iter()
        .zip(&eval.predictions)
        .zip(&eval.report.examples)
        .map(|((&i, (id, text)), s)| {
            json!({
                "id": id,
                "candidate": text,
                "reference": corpus.examples[i].reference,
                "bleu_4": s.bleu_4,
                "rouge_l": s.rouge_l,
                "meteor": s.meteor,
            })
        })
        .collect();
    let doc = json!({
        "checkpoint": checkpoint_path.display().to_string(),
        "split": split,
        "scores": eval.report.rows_json(),
        "examples": examples,
    });
    let table = eval.report.table();
    write_file(&dir.join(format!("scores_{split}.txt")), &table)?;
    write_file(
        &dir.join(format!("scores_{split}.json")),
        serde_json::to_string_pretty(&doc).expect("json value serializes") + "\n",
    )?;
    trainer::append_results(&dir, &checkpoint_path.display().to_string(), split, &eval.report)?;
    print!("{table}");
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(normalized_text).collect())
}

pub fn score(candidates: &Path, references: &Path, as_json: bool) -> Result<()> {
    let cands = read_lines(candidates)?;
    let refs = read_lines(references)?;
    let ids: Vec<String> = (1..=cands.len()).map(|i| i.to_string()).collect();
    let report = ScoreReport::compute(&ids, &cands, &refs)?;
    if as_json {
        println!("{}", report.rows_json());
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

pub fn ablate(config: &Path, overrides: &[String]) -> Result<()> {
    let base = RunConfig::load(config, overrides)?;
    let mut rows = Vec::new();
    for ablation in [Ablation::None, Ablation::NoAdapter, Ablation::NoPretrained] {
        let mut cfg = base.clone();
        cfg.run_name = format!("{}-{ablation}", base.run_name);
        cfg.train.ablation = ablation;
        cfg.validate()?;
        trainer::prepare(&cfg)?;
        let corpus = Corpus::load(&cfg, DTYPE)?;
        let mut t = Trainer::new(&cfg, &corpus, DTYPE)?;
        let mut log = TrainLog::create(&cfg.run_dir().join(trainer::LOG_FILE), false)?;
        eprintln!("ablation {ablation}: {} trainable parameters", t.model.store().trainable_count());
        let summary = trainer::fit(&mut t, &corpus, cfg.train.epochs, &mut log)?;
        let best = checkpoint::load(&summary.best_path)?.model()?;
        let eval = trainer::evaluate(&best, &corpus, Split::Test, cfg.train.batch_size)?;
        trainer::append_results(&cfg.run_dir(), &summary.best_path.display().to_string(), Split::Test, &eval.report)?;
        rows.push((ablation, t.model.store().trainable_count(), eval.report));
    }
    let mut table = format!("{:<14} {:>10}", "ablation", "trainable");
    for m in ScoreReport::METRICS {
        table.push_str(&format!(" {m:>8}"));
    }
    table.push('\n');
    let mut doc = Vec::new();
    for (ablation, trainable, report) in &rows {
        table.push_str(&format!("{:<14} {trainable:>10}", ablation.to_string()));
        for (_, v) in report.rows() {
            table.push_str(&format!(" {v:>8.4}"));
        }
        table.push('\n');
        doc.push(json!({ "ablation": ablation, "trainable_parameters": trainable, "scores": report.rows_json() }));
    }
    let out = base.output_dir.join(format!("{}-ablation.json", base.run_name));
    write_file(&out, serde_json::to_string_pretty(&doc).expect("json value serializes") + "\n")?;
    print!("{table}");
    Ok(())
}

pub fn export_backbone(config: &Path, overrides: &[String], output: &Path) -> Result<()> {
    let cfg = RunConfig::load(config, overrides)?;
    let paths = CorpusPaths::for_config(&cfg);
    let text = fs::read_to_string(&paths.vocab)
        .map_err(|_| Error::Data(format!("{} not found; run `prepare` first", paths.vocab.display())))?;
    let vocab = Vocabulary::parse(&text)?;
    let store = ParamStore::new();
    let pb = ParamBuilder::new(&store, cfg.train.seed, DTYPE, &Device::Cpu);
    Backbone::new(&pb, &cfg.backbone, vocab.len(), cfg.dataset.max_length, PAD_ID)?;
    save_weight_archive(&store, output)?;
    println!("wrote {} ({} parameters)", output.display(), store.count(""));
    Ok(())
}
