use std::io::Cursor;

use advns::aux_tree::{self, AuxiliaryTree};
use advns::data_io::{self, LabelPolicy, LoadOptions, PcaProjection, SparseDataset};
use advns::inference::{self, PredictionConfig};
use advns::linear_model::LinearClassifier;
use advns::noise::NoiseModel;
use advns::training::{self, Method, TrainConfig};

/// Three labels with disjoint feature support, one multi-label line, a header.
fn svmlight_text() -> String {
    let mut s = String::from("90 6 4\n");
    for i in 0..90 {
        let y = i % 3;
        let v = 0.5 + (i % 7) as f64 / 10.0;
        if i == 4 {
            s += &format!("3,{y} {}:{v} {}:0.1\n", 2 * y, 2 * y + 1);
        } else {
            s += &format!("{y} {}:{v} {}:0.1\n", 2 * y, 2 * y + 1);
        }
    }
    s
}

fn dataset() -> SparseDataset {
    let raw = data_io::parse_svmlight(Cursor::new(svmlight_text()), LoadOptions::default()).unwrap();
    data_io::reduce_multilabel(&raw, LabelPolicy::SmallestId).unwrap()
}

#[test]
fn files_round_trip_through_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset();
    assert_eq!((ds.len(), ds.num_features(), ds.num_labels()), (90, 6, 3));
    let (train, val) = ds.split(0.2, 9).unwrap();
    train.save(&dir.path().join("train.ds")).unwrap();
    let train = SparseDataset::load(&dir.path().join("train.ds")).unwrap();

    let pca = data_io::fit_pca(&train, 2).unwrap();
    pca.save(&dir.path().join("pca.bin")).unwrap();
    let pca = PcaProjection::load(&dir.path().join("pca.bin")).unwrap();
    let tree = aux_tree::fit_tree(&train.project(&pca).unwrap(), aux_tree::DEFAULT_NODE_REGULARIZER).unwrap();
    tree.save(&dir.path().join("tree.bin")).unwrap();
    let tree = AuxiliaryTree::load(&dir.path().join("tree.bin")).unwrap();
    let noise = NoiseModel::adversarial(tree, pca).unwrap();

    let cfg = TrainConfig {
        method: Method::NegSampling,
        rho: 0.1,
        epochs: 5,
        seed: 4,
        log_every_steps: 20,
        ..TrainConfig::default()
    };
    let mut model = LinearClassifier::zeros(train.num_labels(), train.num_features());
    let report = training::train(&train, &cfg, &mut model, Some(&noise), Some(&val)).unwrap();
    assert_eq!(report.epochs.len(), 5);
    assert_eq!(report.curve[0].steps, 0);

    let path = dir.path().join("model.bin");
    model.save(&path, true).unwrap();
    let loaded = LinearClassifier::load(&path).unwrap();
    let pc = PredictionConfig::default();
    let a = inference::evaluate(&model, Some(&noise), &val, &pc).unwrap();
    let b = inference::evaluate(&loaded, Some(&noise), &val, &pc).unwrap();
    assert_eq!((a.accuracy, a.log_likelihood), (b.accuracy, b.log_likelihood));
    assert_eq!(a.accuracy, 1.0);
}

#[test]
fn sequential_training_is_deterministic() {
    let ds = dataset();
    let noise = NoiseModel::frequency(&ds, 1.0).unwrap();
    let cfg = TrainConfig { epochs: 3, seed: 11, ..TrainConfig::default() };
    let run = || {
        let mut m = LinearClassifier::zeros(3, 6);
        let r = training::train(&ds, &cfg, &mut m, Some(&noise), Some(&ds)).unwrap();
        let mut bytes = Vec::new();
        m.write(&mut bytes, true).unwrap();
        (bytes, r.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn lock_free_mode_still_learns() {
    let ds = dataset();
    let noise = NoiseModel::uniform(3).unwrap();
    let cfg = TrainConfig { epochs: 10, rho: 0.1, threads: 4, ..TrainConfig::default() };
    let mut m = LinearClassifier::zeros(3, 6);
    training::train(&ds, &cfg, &mut m, Some(&noise), None).unwrap();
    let r = inference::evaluate(&m, Some(&noise), &ds, &PredictionConfig::default()).unwrap();
    assert!(r.accuracy > 0.95, "{}", r.accuracy);
}
