use crowding::datasets::{Glyph, GlyphSet, Split};
use crowding::image::Image;
use crowding::models::{ModelConfig, SpatialPooling};
use crowding::trainer::{initial_loss, train, train_to_dir, Regime, RunFiles, TrainConfig, TrainSets};
use crowding::Error;

/// Five bar glyphs whose row encodes the class, plus per-item jitter.
fn bars(name: &str, n: usize, offset: usize) -> GlyphSet {
    let items = (0..n)
        .map(|i| {
            let l = (i + offset) % 5;
            let mut img = Image::zeros(28, 28);
            for y in 3 + l * 5..6 + l * 5 {
                for x in 4 + i % 3..20 + i % 4 {
                    img.set(x, y, 1.0);
                }
            }
            Glyph {
                id: format!("{name}{i}"),
                label: l,
                image: img,
            }
        })
        .collect();
    GlyphSet::new(name, Split::Train, items)
}

fn small(pooling: SpatialPooling) -> TrainConfig {
    let mut c = TrainConfig::new(ModelConfig::dcnn(pooling).with_seed(4), Regime::Isolated);
    c.epochs = 1;
    c.minibatch = 8;
    c.max_train_items = Some(32);
    c.holdout_eval = 200;
    c.seed = 21;
    c
}

#[test]
fn zero_learning_rate_leaves_parameters_at_chance() {
    let (train_set, holdout) = (bars("t", 64, 0), bars("h", 300, 2));
    let sets = TrainSets {
        train: &train_set,
        holdout: &holdout,
        flankers: None,
    };
    let mut cfg = small(SpatialPooling::AtEnd);
    cfg.lr = Some(0.0);
    let out = train(&cfg, &sets).unwrap();
    let init = crowding::models::Model::<f32>::build(&cfg.model).unwrap();
    for (a, b) in out.model.params.iter().zip(&init.params) {
        assert_eq!(a.data(), b.data());
    }
    let acc = out.log[0].holdout_acc;
    assert!((acc - 0.2).abs() <= 0.12, "holdout accuracy {acc}");
}

#[test]
fn first_batch_loss_is_near_ln5() {
    let (train_set, holdout) = (bars("t", 64, 0), bars("h", 10, 0));
    let sets = TrainSets {
        train: &train_set,
        holdout: &holdout,
        flankers: None,
    };
    for p in SpatialPooling::ALL {
        let loss = initial_loss(&small(p), &sets).unwrap();
        assert!((loss - 5f64.ln()).abs() < 0.1, "{p:?}: {loss}");
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (train_set, holdout) = (bars("t", 64, 0), bars("h", 20, 1));
    let flankers = bars("f", 9, 3);
    let sets = TrainSets {
        train: &train_set,
        holdout: &holdout,
        flankers: Some(&flankers),
    };
    let mut cfg = small(SpatialPooling::Progressive);
    cfg.regime = Regime::WithFlankersXax120;
    cfg.epochs = 2;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let files: Vec<RunFiles> = dirs
        .iter()
        .map(|d| train_to_dir(&cfg, &sets, d.path()).unwrap().1)
        .collect();
    assert!(files[0].exist());
    let read = |p: &std::path::Path| std::fs::read(p).unwrap();
    assert_eq!(read(&files[0].checkpoint), read(&files[1].checkpoint));
    assert_eq!(read(&files[0].config), read(&files[1].config));
    assert!(files[0]
        .checkpoint
        .file_name()
        .unwrap()
        .to_string_lossy()
        .contains(&cfg.hash()[..12]));
    let log = std::fs::read_to_string(&files[0].log).unwrap();
    assert!(log.starts_with("epoch,mean_loss,holdout_acc,wall_seconds"));
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn training_lowers_the_loss() {
    let (train_set, holdout) = (bars("t", 256, 0), bars("h", 50, 1));
    let sets = TrainSets {
        train: &train_set,
        holdout: &holdout,
        flankers: None,
    };
    let mut cfg = small(SpatialPooling::Progressive);
    cfg.max_train_items = None;
    cfg.epochs = 3;
    let out = train(&cfg, &sets).unwrap();
    assert!(out.log.last().unwrap().mean_loss < out.log[0].mean_loss);
}

#[test]
fn huge_learning_rate_diverges() {
    let (train_set, holdout) = (bars("t", 64, 0), bars("h", 10, 1));
    let sets = TrainSets {
        train: &train_set,
        holdout: &holdout,
        flankers: None,
    };
    let mut cfg = small(SpatialPooling::Progressive);
    cfg.lr = Some(1e30);
    cfg.epochs = 3;
    cfg.max_train_items = None;
    match train(&cfg, &sets) {
        Err(Error::Divergence(msg)) => assert!(msg.contains("smaller learning rate")),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training at lr 1e30 did not diverge"),
    }
}
