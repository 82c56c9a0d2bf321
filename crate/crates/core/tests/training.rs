use candle_core::DType;
use unicross::config::RunConfig;
use unicross::data::Split;
use unicross::decoder::SOS_ID;
use unicross::error::Error;
use unicross::model::Ablation;
use unicross::trainer::{self, checkpoint, Corpus, Trainer};

fn small_config(dir: &std::path::Path, overrides: &[&str]) -> RunConfig {
    let mut sets: Vec<String> = vec![
        format!("output_dir={:?}", dir.display().to_string()),
        "dataset.synthetic_size=10".into(),
        "train.batch_size=4".into(),
        "adapter.adapter_dim=16".into(),
        "fusion.channels=16".into(),
        "fusion.vit_layers=1".into(),
        "decoder.num_layers=1".into(),
    ];
    sets.extend(overrides.iter().map(|s| s.to_string()));
    RunConfig::parse_with_overrides("", &sets).unwrap()
}

fn prepared(cfg: &RunConfig) -> Corpus {
    trainer::prepare(cfg).unwrap();
    Corpus::load(cfg, DType::F32).unwrap()
}

#[test]
fn frozen_backbone_is_untouched_by_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &[]);
    let corpus = prepared(&cfg);
    let mut t = Trainer::new(&cfg, &corpus, DType::F32).unwrap();
    let before = t.model.store().hash("backbone.").unwrap();
    let decoder_before = t.model.store().hash("decoder.").unwrap();
    let train = corpus.indices(Split::Train);
    for _ in 0..3 {
        t.step(&corpus, &train[..4]).unwrap();
    }
    assert_eq!(t.model.store().hash("backbone.").unwrap(), before);
    assert_ne!(t.model.store().hash("decoder.").unwrap(), decoder_before);
    t.model.check_trainable_partition().unwrap();
}

#[test]
fn unfrozen_ablation_updates_the_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &["train.ablation=no_pretrained"]);
    let corpus = prepared(&cfg);
    let mut t = Trainer::new(&cfg, &corpus, DType::F32).unwrap();
    let before = t.model.store().hash("backbone.").unwrap();
    t.step(&corpus, &corpus.indices(Split::Train)[..4]).unwrap();
    assert_ne!(t.model.store().hash("backbone.").unwrap(), before);
}

#[test]
fn same_seed_gives_identical_loss_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &["train.dropout=0.1"]);
    let corpus = prepared(&cfg);
    let run = || {
        let mut t = Trainer::new(&cfg, &corpus, DType::F32).unwrap();
        let mut losses = Vec::new();
        t.train_epoch(&corpus, &mut |r| losses.push(r.loss)).unwrap();
        losses
    };
    let a = run();
    assert_eq!(a.len(), 2);
    assert_eq!(a, run());
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &["train.dropout=0.1"]);
    let corpus = prepared(&cfg);

    let mut straight = Trainer::new(&cfg, &corpus, DType::F32).unwrap();
    let mut straight_losses = Vec::new();
    for _ in 0..2 {
        straight.train_epoch(&corpus, &mut |r| straight_losses.push(r.loss)).unwrap();
    }

    let mut first = Trainer::new(&cfg, &corpus, DType::F32).unwrap();
    let mut resumed_losses = Vec::new();
    first.train_epoch(&corpus, &mut |r| resumed_losses.push(r.loss)).unwrap();
    let path = dir.path().join("mid.safetensors");
    first.save(&path).unwrap();
    drop(first);
    let mut second = Trainer::resume(&checkpoint::load(&path).unwrap()).unwrap();
    second.train_epoch(&corpus, &mut |r| resumed_losses.push(r.loss)).unwrap();

    assert_eq!(straight_losses, resumed_losses);
    assert_eq!(straight.checkpoint_bytes().unwrap(), second.checkpoint_bytes().unwrap());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &[]);
    let corpus = prepared(&cfg);
    let mut t = Trainer::new(&cfg, &corpus, DType::F32).unwrap();
    t.step(&corpus, &corpus.indices(Split::Train)[..4]).unwrap();
    let path = dir.path().join("c.safetensors");
    t.save(&path).unwrap();
    let ckpt = checkpoint::load(&path).unwrap();
    let reloaded = ckpt.model().unwrap();

    let test = corpus.indices(Split::Test);
    let (images, _) = corpus.batch(&test).unwrap();
    let query = vec![vec![SOS_ID, 5, 6, 7]; test.len()];
    let ctx = unicross::nn::ops::Ctx::eval();
    let a = t.model.logits(&images, &query, &ctx).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let b = reloaded.logits(&images, &query, &ctx).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

    let ea = trainer::evaluate(&t.model, &corpus, Split::Test, 4).unwrap();
    let eb = trainer::evaluate(&reloaded, &corpus, Split::Test, 4).unwrap();
    assert_eq!(ea.report, eb.report);
    assert_eq!(ea.predictions, eb.predictions);

    let resumed = Trainer::resume(&ckpt).unwrap();
    assert_eq!(resumed.checkpoint_bytes().unwrap(), std::fs::read(&path).unwrap());
    assert_eq!(ckpt.vocabulary().unwrap(), corpus.vocab);
}

#[test]
fn initial_loss_is_near_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &[]);
    let corpus = prepared(&cfg);
    let t = Trainer::new(&cfg, &corpus, DType::F32).unwrap();
    let loss = trainer::mean_loss(&t.model, &corpus, &corpus.indices(Split::Train), 4).unwrap();
    let uniform = (corpus.vocab.len() as f64).ln();
    assert!((loss - uniform).abs() < 0.15 * uniform, "{loss} vs ln V = {uniform}");
}

#[test]
fn non_finite_loss_names_the_batch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &[]);
    let corpus = prepared(&cfg);
    let first = corpus.indices(Split::Train)[0];
    let mut t = Trainer::new(&cfg, &corpus, DType::F32).unwrap();
    let bias = t.model.store().get("decoder.output.bias").unwrap().var.unwrap();
    bias.set(&(bias.as_tensor() * f64::NAN).unwrap()).unwrap();
    let before = t.model.store().hash("").unwrap();
    let err = t.step(&corpus, &[first]).unwrap_err();
    match err {
        Error::NonFiniteLoss { step, batch_ids } => {
            assert_eq!(step, 0);
            assert_eq!(batch_ids, vec![corpus.examples[first].id.clone()]);
        }
        other => panic!("unexpected error {other}"),
    }
    assert_eq!(t.model.store().hash("").unwrap(), before);
}

#[test]
fn no_adapter_trains_fewer_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let full = small_config(dir.path(), &[]);
    let corpus = prepared(&full);
    let bypass = small_config(dir.path(), &["train.ablation=no_adapter"]);
    let a = Trainer::new(&full, &corpus, DType::F32).unwrap();
    let b = Trainer::new(&bypass, &corpus, DType::F32).unwrap();
    assert_eq!(b.model.ablation(), Ablation::NoAdapter);
    assert!(b.model.store().trainable_count() < a.model.store().trainable_count());
}

#[test]
fn fit_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &["train.epochs=1"]);
    let corpus = prepared(&cfg);
    let mut t = Trainer::new(&cfg, &corpus, DType::F32).unwrap();
    let log_path = cfg.run_dir().join(trainer::LOG_FILE);
    let mut log = trainer::TrainLog::create(&log_path, false).unwrap();
    let summary = trainer::fit(&mut t, &corpus, 1, &mut log).unwrap();
    assert!(summary.best_path.is_file() && summary.last_path.is_file());
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log_path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0]["event"], "start");
    assert_eq!(lines[0]["learning_rate"], 2e-3);
    let steps: Vec<_> = lines.iter().filter(|l| l.get("step").is_some()).collect();
    assert_eq!(steps.len(), 2);
    for key in ["epoch", "step", "loss", "lr"] {
        assert!(steps[0].get(key).is_some(), "{key}");
    }
    assert_eq!(lines.last().unwrap()["event"], "epoch");
    assert_eq!(summary.best.unwrap().epoch, 1);
}

#[test]
fn missing_preparation_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &[]);
    assert!(matches!(Corpus::load(&cfg, DType::F32), Err(Error::Data(_))));
}
