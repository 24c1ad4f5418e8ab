//! Loss against a hand-worked case, and training resume.

use cat_core::cat::CatConfig;
use cat_core::data::{generate_dataset, DatasetConfig};
use cat_core::detector::loss::HeadOutputs;
use cat_core::detector::{detection_loss, AnchorGrid, BBox, DetectorConfig, LossConfig, OneShotDetector};
use cat_core::numerics::{Graph, Tensor};
use cat_core::train::{load_checkpoint, save_checkpoint, train, training_samples, TrainConfig, TrainState};

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn bce(z: f64, t: f64) -> f64 {
    -(t * sigmoid(z).ln() + (1.0 - t) * (1.0 - sigmoid(z)).ln())
}

fn huber(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

#[test]
fn loss_matches_worked_example() {
    // 2×2 grid, stride 16, anchors 16 and 32 on a 32×32 image, one GT in the
    // top-left cell. Anchor labels in (row, col, size) order work out to
    // [pos, ignored, neg ×6]: the clipped 32-anchor at (0,0) has IoU 4/9.
    let anchors = AnchorGrid {
        height: 2,
        width: 2,
        stride: 16,
        sizes: vec![16.0, 32.0],
        image_width: 32.0,
        image_height: 32.0,
    };
    let gt = [BBox::new(0.0, 0.0, 16.0, 16.0)];
    // A×H×W layout
    let obj = [0.3, -1.2, 0.8, -0.1, 1.5, -0.7, 0.2, -2.0];
    let label_of = |a: usize, r: usize, c: usize| match (a, r, c) {
        (0, 0, 0) => Some(1.0),
        (1, 0, 0) => None,
        _ => Some(0.0),
    };
    let mut obj_ref = 0.0;
    for a in 0..2 {
        for r in 0..2 {
            for c in 0..2 {
                let z = obj[a * 4 + r * 2 + c];
                match label_of(a, r, c) {
                    Some(1.0) => obj_ref += 0.5 * bce(z, 1.0),
                    Some(_) => obj_ref += 0.5 / 6.0 * bce(z, 0.0),
                    None => {}
                }
            }
        }
    }

    // IoU(roi1, gt) = 210/302; roi2 misses.
    let rois = [
        gt[0],
        BBox::new(2.0, 1.0, 18.0, 17.0),
        BBox::new(16.0, 16.0, 32.0, 32.0),
    ];
    let logits = [1.1, -0.4, 0.6];
    let match_ref = 0.25 * bce(logits[0], 1.0) + 0.25 * bce(logits[1], 1.0) + 0.5 * bce(logits[2], 0.0);

    let reg = [[0.2, -0.1, 0.05, 1.4], [-1.0, 0.3, -0.2, 0.1], [5.0, 5.0, 5.0, 5.0]];
    let targets = [[0.0; 4], [-2.0 / 16.0 * 10.0, -1.0 / 16.0 * 10.0, 0.0, 0.0]];
    let reg_ref: f64 = (0..2)
        .map(|i| 0.5 * (0..4).map(|k| huber(reg[i][k] - targets[i][k])).sum::<f64>())
        .sum();

    let mut g = Graph::new();
    let ov = g.constant(Tensor::new(vec![2, 2, 2], obj.to_vec()).unwrap());
    let mv = g.constant(Tensor::new(vec![3], logits.to_vec()).unwrap());
    let rv = g.constant(Tensor::from_rows(&reg.map(|r| r.to_vec())).unwrap());
    let out = HeadOutputs {
        objectness: ov,
        anchors: &anchors,
        rois: &rois,
        match_logits: mv,
        regression: rv,
    };
    let (total, terms) = detection_loss(&mut g, &out, &gt, &LossConfig::default()).unwrap();
    assert!((terms.objectness - obj_ref).abs() <= 1e-9);
    assert!((terms.matching - match_ref).abs() <= 1e-9);
    assert!((terms.regression - reg_ref).abs() <= 1e-9);
    assert!((g.value(total).item() - (obj_ref + match_ref + reg_ref)).abs() <= 1e-9);
}

fn tiny_detector() -> DetectorConfig {
    DetectorConfig {
        image_size: 96,
        query_size: 32,
        backbone_channels: [4, 4, 8, 8],
        anchor_sizes: vec![16.0, 24.0],
        roi_size: 2,
        train_proposals: 6,
        test_proposals: 8,
        cat: CatConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            d_ff: 16,
            ..CatConfig::paper()
        },
        ..DetectorConfig::default()
    }
}

#[test]
fn resumed_training_is_bit_identical() {
    let ds = generate_dataset(&DatasetConfig {
        seed: 3,
        train_samples: 6,
        eval_samples: 4,
        image_size: 96,
        query_size: 48,
        min_glyph: 16.0,
        max_glyph: 24.0,
        ..DatasetConfig::default()
    })
    .unwrap();
    let samples = training_samples(&ds).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        lr_steps: vec![2],
        batch_size: 2,
        warmup_steps: 2,
        ..TrainConfig::default()
    };

    let mut straight = OneShotDetector::new(tiny_detector(), 9).unwrap();
    let mut st = TrainState::new(&straight, &cfg).unwrap();
    let full_log = train(&mut straight, &samples, &cfg, 4, &mut st, |_, _, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let mut first = OneShotDetector::new(tiny_detector(), 9).unwrap();
    let mut st1 = TrainState::new(&first, &cfg).unwrap();
    let partial = TrainConfig {
        epochs: 1,
        ..cfg.clone()
    };
    train(&mut first, &samples, &partial, 4, &mut st1, |_, _, _| Ok(())).unwrap();
    save_checkpoint(&path, &first, Some(&st1)).unwrap();

    let mut resumed = OneShotDetector::new(tiny_detector(), 1234).unwrap();
    let mut st2 = load_checkpoint(&path, &mut resumed, &cfg)
        .unwrap()
        .expect("optimizer state");
    assert_eq!((st2.epoch, st2.step), (1, 3));
    let rest = train(&mut resumed, &samples, &cfg, 4, &mut st2, |_, _, _| Ok(())).unwrap();

    assert_eq!(rest.len(), 2);
    assert_eq!(rest[1], full_log[2]);
    assert_eq!(straight.store.named_tensors(), resumed.store.named_tensors());
}

#[test]
fn weights_only_checkpoint_has_no_state() {
    let det = OneShotDetector::new(tiny_detector(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    save_checkpoint(&path, &det, None).unwrap();
    let mut other = OneShotDetector::new(tiny_detector(), 3).unwrap();
    assert!(load_checkpoint(&path, &mut other, &TrainConfig::default())
        .unwrap()
        .is_none());
    assert_eq!(det.store.named_tensors(), other.store.named_tensors());
}
