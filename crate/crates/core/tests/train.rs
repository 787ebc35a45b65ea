use std::path::Path;

use xmodal_kws::data::*;
use xmodal_kws::embeddings::{EmbeddingLayerTag, EmbeddingStore};
use xmodal_kws::metrics::{auc, ScoredPair};
use xmodal_kws::model::{KwsModel, ModelConfig, PairInput};
use xmodal_kws::numerics::{Adam, Mode, Tensor};
use xmodal_kws::train::*;
use xmodal_kws::Error;

struct Fixture {
    _dir: tempfile::TempDir,
    mels: MelStore,
    emb: EmbeddingStore,
    train: Vec<PairExample>,
    val: Vec<PairExample>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_toy_corpus(4, 6, 5, dir.path()).unwrap();
    let mels = MelStore::compute(&corpus.records, 1).unwrap();
    let emb = EmbeddingStore::synthesize(
        corpus.keywords.iter().map(|k| k.text.as_str()),
        EmbeddingLayerTag::E1,
        5,
    )
    .unwrap();
    let train = build_episodes(&corpus.records, 1, 3).unwrap().pairs();
    let val = build_episodes(&corpus.records, 2, 3).unwrap().pairs();
    Fixture {
        _dir: dir,
        mels,
        emb,
        train,
        val,
    }
}

fn small_model(seed: u64) -> KwsModel {
    let cfg = ModelConfig {
        conv1_channels: 4,
        conv2_channels: 4,
        audio_gru_hidden: 8,
        text_gru_hidden: 8,
        embed_dim: 16,
        disc_gru_hidden: 8,
        ..ModelConfig::for_tag(EmbeddingLayerTag::E1)
    };
    KwsModel::new(cfg, seed).unwrap()
}

fn config(max_epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        max_epochs,
        patience,
        rng_seed: 3,
        embedding_tag: EmbeddingLayerTag::E1,
        ..TrainConfig::default()
    }
}

fn fit(f: &Fixture, cfg: &TrainConfig) -> TrainOutcome {
    fit_model(
        small_model(cfg.rng_seed),
        cfg,
        &f.train,
        &f.val,
        &f.mels,
        &f.emb,
        &mut |_| {},
    )
    .unwrap()
}

#[test]
fn one_epoch_gives_one_row() {
    let f = fixture();
    let out = fit(&f, &config(1, 0));
    assert_eq!(out.log.rows.len(), 1);
    assert_eq!(out.log.rows[0].epoch, 1);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn patience_stops_after_stale_epochs_and_best_is_restored() {
    let f = fixture();
    let cfg = config(6, 1);
    let out = fit(&f, &cfg);
    let rows = &out.log.rows;
    let best = rows.iter().map(|r| r.val_auc).fold(f64::MIN, f64::max);
    assert_eq!(out.best_val_auc, best);
    assert_eq!(rows[out.best_epoch - 1].val_auc, best);
    // the first epoch reaching the maximum wins
    assert!(rows[..out.best_epoch - 1].iter().all(|r| r.val_auc < best));
    if rows.len() < cfg.max_epochs {
        let last = rows.last().unwrap();
        let before = rows[..rows.len() - 1]
            .iter()
            .map(|r| r.val_auc)
            .fold(f64::MIN, f64::max);
        assert!(last.val_auc <= before);
    }
    // restored parameters reproduce the selected validation AUC
    let scores = score_pairs(&out.model, &f.val, &f.mels, &f.emb, 8).unwrap();
    let scored: Vec<ScoredPair> = f
        .val
        .iter()
        .zip(&scores)
        .map(|(p, s)| ScoredPair::from_pair(p, *s).unwrap())
        .collect();
    assert_eq!(auc(&scored).unwrap() / 100.0, out.best_val_auc);
}

#[test]
fn training_is_deterministic() {
    let f = fixture();
    let a = fit(&f, &config(2, 5));
    let b = fit(&f, &config(2, 5));
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    for ((_, pa), (_, pb)) in a.model.store().iter().zip(b.model.store().iter()) {
        assert_eq!(pa.value, pb.value, "{}", pa.name);
    }
    let c = fit(
        &f,
        &TrainConfig {
            rng_seed: 4,
            ..config(2, 5)
        },
    );
    assert_ne!(a.log.to_csv(), c.log.to_csv());
}

fn batch<'a>(f: &'a Fixture, n: usize) -> (Vec<PairInput<'a>>, Vec<f64>) {
    let pairs = &f.train[..n];
    (
        pairs
            .iter()
            .map(|p| PairInput {
                mel: f.mels.get(&p.audio_id).unwrap().values(),
                text: f.emb.get(&p.keyword).unwrap().values(),
            })
            .collect(),
        pairs.iter().map(|p| f64::from(p.label)).collect(),
    )
}

#[test]
fn one_step_decreases_loss_on_a_fixed_batch() {
    let f = fixture();
    let (inputs, labels) = batch(&f, 6);
    let mut model = KwsModel::new(ModelConfig::for_tag(EmbeddingLayerTag::E1), 11).unwrap();
    let mode = Mode::Train {
        dropout_p: 0.0,
        seed: 0,
    };
    let before = train_step(
        &mut model,
        &Adam::new(1e-4).unwrap(),
        &inputs,
        &labels,
        mode,
    )
    .unwrap();
    let (after, _, _) = batch_gradients(&model, &inputs, &labels, mode).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn gradients_are_reset_between_steps() {
    let f = fixture();
    let (inputs, labels) = batch(&f, 4);
    let mut model = small_model(2);
    let mode = Mode::Train {
        dropout_p: 0.0,
        seed: 0,
    };
    let opt = Adam::new(1e-3).unwrap();
    train_step(&mut model, &opt, &inputs, &labels, mode).unwrap();
    assert!(model.store().iter().all(|(_, p)| p.grad.max_abs() == 0.0));

    // accumulating one batch into the reset buffers gives exactly that batch's gradient
    let (_, fresh, _) = batch_gradients(&model, &inputs, &labels, mode).unwrap();
    model.store_mut().accumulate(&fresh);
    for (id, g) in fresh.iter() {
        assert_eq!(&model.store().get(*id).grad, g);
    }
    train_step(&mut model, &opt, &inputs, &labels, mode).unwrap();
    assert!(model.store().iter().all(|(_, p)| p.grad.max_abs() == 0.0));
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let f = fixture();
    let mut model = small_model(3);
    let id = model.store().find("disc.dense.w").unwrap();
    let shape = model.store().value(id).shape().to_vec();
    model.store_mut().get_mut(id).value = Tensor::filled(&shape, f64::NAN);
    match fit_model(
        model,
        &config(2, 2),
        &f.train,
        &f.val,
        &f.mels,
        &f.emb,
        &mut |_| {},
    ) {
        Err(Error::NonFiniteLoss {
            epoch,
            batch,
            history,
        }) => {
            assert_eq!((epoch, batch), (1, 0));
            assert!(history.last().unwrap().is_nan());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn argument_errors() {
    let f = fixture();
    let wrong_tag = TrainConfig {
        embedding_tag: EmbeddingLayerTag::E3,
        ..config(1, 0)
    };
    assert!(matches!(
        fit_model(
            small_model(1),
            &wrong_tag,
            &f.train,
            &f.val,
            &f.mels,
            &f.emb,
            &mut |_| {}
        ),
        Err(Error::Validation { .. })
    ));
    assert!(matches!(
        fit_model(
            small_model(1),
            &config(1, 0),
            &[],
            &f.val,
            &f.mels,
            &f.emb,
            &mut |_| {}
        ),
        Err(Error::InvalidArgument(_))
    ));
    let bad_lr = TrainConfig {
        learning_rate: 0.0,
        ..config(1, 0)
    };
    assert!(bad_lr.validate().is_err());
}

fn log3() -> LossLog {
    LossLog {
        rows: (1..=3)
            .map(|e| LossRow {
                epoch: e,
                train_loss: std::f64::consts::LN_2 / e as f64,
                val_loss: 1.0 / 3.0 + e as f64,
                val_auc: 0.0123456789123 * e as f64,
            })
            .collect(),
    }
}

#[test]
fn loss_log_export() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("loss.csv");
    let log = log3();
    log.write(&p).unwrap();
    let first = std::fs::read(&p).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(text.lines().next(), Some(LOSS_LOG_HEADER));
    log.write(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);

    let back = LossLog::read(&p).unwrap();
    for (a, b) in log.rows.iter().zip(&back.rows) {
        assert_eq!(a.epoch, b.epoch);
        for (x, y) in [
            (a.train_loss, b.train_loss),
            (a.val_loss, b.val_loss),
            (a.val_auc, b.val_auc),
        ] {
            // half a unit in the ninth significant digit
            assert!((x - y).abs() <= 5e-9 * x.abs(), "{x} {y}");
            if x.abs() < 0.2 {
                assert!((x - y).abs() <= 1e-9, "{x} {y}");
            }
        }
    }
    assert!(LossLog::default().write(&p).is_err());
    let bad = |s: &str, path: &Path| {
        std::fs::write(path, s).unwrap();
        LossLog::read(path).unwrap_err()
    };
    assert!(matches!(bad("epoch,loss\n", &p), Error::Format { .. }));
    assert!(matches!(
        bad(&format!("{LOSS_LOG_HEADER}\n2,1,1,1\n"), &p),
        Error::Validation { .. }
    ));
    assert!(matches!(
        bad(&format!("{LOSS_LOG_HEADER}\n1,x,1,1\n"), &p),
        Error::Format { .. }
    ));
}
