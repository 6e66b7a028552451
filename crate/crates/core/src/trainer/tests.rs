use super::*;
use crate::episodes::{make_synthetic_splits, Instance, SyntheticSpec};

fn tiny_data(seed: u64) -> TrainData {
    let spec = SyntheticSpec {
        n_classes: 0,
        instances_per_class: 12,
        dim: 10,
        min_len: 4,
        max_len: 8,
        ..SyntheticSpec::default()
    };
    let (mut splits, table) = make_synthetic_splits(&spec, &[6, 5, 5], &mut Rng::new(seed)).unwrap();
    let test = splits.pop();
    let dev = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    TrainData {
        train,
        dev,
        test,
        table,
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        n_way: 5,
        k_shot: 2,
        queries_per_class: 2,
        epochs: 3,
        episodes_per_epoch: 6,
        eval_episodes: 8,
        hidden: 6,
        patience: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_leaves_data_untouched() {
    let data = tiny_data(1);
    let before = data.clone();
    let config = tiny_config();
    let a = train(&config, &data).unwrap();
    let b = train(&config, &data).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best, b.best);
    assert_eq!(data.train, before.train);
    assert_eq!(data.dev, before.dev);
    assert_eq!(data.table.matrix(), before.table.matrix());
    assert!(a.log[0].losses.iter().all(|l| l.is_finite()));
}

#[test]
fn best_checkpoint_reproduces_dev_auc() {
    let data = tiny_data(2);
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..tiny_config()
    };
    let out = train(&config, &data).unwrap();
    for e in &out.log {
        assert!(e.dev.auc <= out.best_dev_auc);
    }
    assert_eq!(out.log[out.best_epoch].dev.auc, out.best_dev_auc);

    let ck = Checkpoint::load(&dir.path().join("best.json")).unwrap();
    assert_eq!(ck.best_dev_auc, Some(out.best_dev_auc));
    let model = ck.into_model().unwrap();
    let eps = sample_episodes(&data.dev, config.shape(), config.eval_episodes, dev_episode_seed(config.seed)).unwrap();
    let m = evaluate_episodes(&model, &eps, &data.dev, &data.table, None).unwrap();
    assert!((m.auc - out.best_dev_auc).abs() <= 1e-9);
    assert!(dir.path().join("last.json").exists());
}

#[test]
fn zero_lambda_without_las_is_the_base_objective() {
    let data = tiny_data(3);
    let base_cfg = tiny_config().with_ablation(Ablation::Base);
    let full_cfg = TrainConfig {
        lambda: 0.0,
        use_las: false,
        ..tiny_config().with_ablation(Ablation::Ldf)
    };
    let model = Model::new(base_cfg.model_config(data.table.dim()), &data.table, &mut Rng::new(4)).unwrap();
    for s in 0..5 {
        let ep = sample_episode(&data.train, base_cfg.shape(), &mut Rng::new(s)).unwrap();
        let a = episode_loss(&model, &ep, &data.train, &data.table, &base_cfg).unwrap();
        let b = episode_loss(&model, &ep, &data.train, &data.table, &full_cfg).unwrap();
        assert_eq!(a.tape.scalar(a.loss), b.tape.scalar(b.loss));
        assert!(b.contrastive.is_some());
    }
}

#[test]
fn scl_and_lcl_coincide_for_identical_labels() {
    let rows = ["alpha", "beta", "gamma", "x", "y", "z"]
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let v = if i < 3 {
                vec![1.0, 1.0, 0.0]
            } else {
                vec![0.0, (i as f64).sin(), (i as f64).cos()]
            };
            (w.to_string(), v)
        });
    let table = EmbeddingTable::from_rows(3, rows).unwrap();
    let mut inst = Vec::new();
    for (c, w) in ["alpha", "beta", "gamma"].iter().enumerate() {
        for i in 0..4 {
            inst.push(Instance {
                text: format!("{w} x y {} z", ["x", "y", "z"][(c + i) % 3]),
                labels: vec![w.to_string()],
            });
        }
    }
    let corpus = Corpus::new(inst).unwrap();
    let cfg = TrainConfig {
        n_way: 3,
        k_shot: 2,
        queries_per_class: 1,
        threshold: Some(0.3),
        hidden: 4,
        ..TrainConfig::default()
    };
    let lcl = cfg.clone().with_ablation(Ablation::Lcl);
    let scl = cfg.with_ablation(Ablation::Scl);
    let model = Model::new(lcl.model_config(3), &table, &mut Rng::new(7)).unwrap();
    let ep = sample_episode(&corpus, lcl.shape(), &mut Rng::new(8)).unwrap();
    let a = episode_loss(&model, &ep, &corpus, &table, &lcl).unwrap();
    let b = episode_loss(&model, &ep, &corpus, &table, &scl).unwrap();
    let (ca, cb) = (a.contrastive.unwrap(), b.contrastive.unwrap());
    assert!((a.tape.scalar(ca) - b.tape.scalar(cb)).abs() <= 1e-12);
}

#[test]
fn diverging_run_reports_numeric_error() {
    let data = tiny_data(5);
    let config = TrainConfig {
        lr: 1e200,
        ..tiny_config()
    };
    match train(&config, &data) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("episode seed"), "{msg}"),
        other => panic!("expected numeric error, got {:?}", other.map(|o| o.best_dev_auc)),
    }
}

#[test]
fn evaluate_summarizes_seeds() {
    let data = tiny_data(6);
    let config = tiny_config();
    let model = Model::new(config.model_config(data.table.dim()), &data.table, &mut Rng::new(1)).unwrap();
    let test = data.test.as_ref().unwrap();
    let r = evaluate(&model, test, &data.table, &config, &DEFAULT_SEEDS).unwrap();
    assert_eq!(r.per_seed.len(), 5);
    assert_eq!(r.auc.values.len(), 5);
    let again = evaluate(&model, test, &data.table, &config, &DEFAULT_SEEDS).unwrap();
    assert_eq!(r, again);

    let wrong = EmbeddingTable::from_rows(4, vec![("a".to_string(), vec![0.0; 4])]).unwrap();
    assert!(matches!(
        evaluate(&model, test, &wrong, &config, &[5]),
        Err(Error::Checkpoint(_))
    ));
}
