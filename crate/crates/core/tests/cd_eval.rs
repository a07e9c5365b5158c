use bitemporal_core::cd_eval::{
    accumulate_confusion, compute_metrics, real_toy_dataset, train_cd_model, transfer_experiment,
    Arm, CdModel, CdTrainConfig, ConfusionCounts, EvalError, RealToyConfig, TransferConfig,
};
use bitemporal_core::change::{derive_change_mask, ChangeMask};
use bitemporal_core::generator::SamplePair;
use bitemporal_core::nn::{checkpoint_bytes, OptimizerConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_change(seed: u64, w: usize, h: usize) -> ChangeMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ChangeMask::new(w, h, (0..w * h).map(|_| rng.random_range(0..2)).collect()).unwrap()
}

#[test]
fn confusion_matches_naive_recount() {
    let pred = random_change(1, 32, 32);
    let gt = random_change(2, 32, 32);
    let mut counts = ConfusionCounts::default();
    accumulate_confusion(&pred, &gt, &mut counts).unwrap();
    let mut naive = [0u64; 4];
    for y in 0..32 {
        for x in 0..32 {
            let idx = match (pred.get(x, y) == 1, gt.get(x, y) == 1) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            naive[idx] += 1;
        }
    }
    assert_eq!([counts.tp, counts.fp, counts.fn_, counts.tn], naive);
    assert_eq!(counts.total(), 1024);
}

#[test]
fn confusion_order_independent() {
    let masks: Vec<(ChangeMask, ChangeMask)> = (0..6)
        .map(|i| (random_change(10 + i, 8, 8), random_change(20 + i, 8, 8)))
        .collect();
    let mut fwd = ConfusionCounts::default();
    for (p, g) in &masks {
        accumulate_confusion(p, g, &mut fwd).unwrap();
    }
    let mut rev = ConfusionCounts::default();
    for (p, g) in masks.iter().rev() {
        accumulate_confusion(p, g, &mut rev).unwrap();
    }
    assert_eq!(fwd, rev);
}

proptest! {
    #[test]
    fn metric_identities(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
        let m = compute_metrics(&ConfusionCounts::new(tp, fp, fn_, tn));
        for v in [m.precision, m.recall, m.f1, m.iou].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let (Some(f1), Some(iou)) = (m.f1, m.iou) {
            prop_assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
        }
        if let (Some(p), Some(r), Some(f1)) = (m.precision, m.recall, m.f1) {
            if p + r > 0.0 {
                prop_assert!((f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
            }
        }
    }
}

fn real(count: usize) -> Vec<SamplePair> {
    real_toy_dataset(count, 5, &RealToyConfig::new(32, 4)).unwrap()
}

fn train_cfg(steps: usize) -> CdTrainConfig {
    CdTrainConfig {
        steps,
        batch_size: 2,
        optimizer: OptimizerConfig::new(2e-3, 0.0),
        change_weight: 1.0,
    }
}

#[test]
fn real_toy_pairs_are_consistent() {
    let pairs = real(6);
    assert_eq!(pairs, real(6));
    for (i, p) in pairs.iter().enumerate() {
        assert_eq!(p.id, format!("real-{i:06}"));
        assert_eq!(p.change, derive_change_mask(&p.y1, &p.y2).unwrap());
        assert!(p.change.count_changed() > 0);
    }
}

#[test]
fn cd_training_reduces_loss_and_is_deterministic() {
    let pairs = real(8);
    let refs: Vec<&SamplePair> = pairs.iter().collect();
    let run = |steps| {
        let mut m = CdModel::new(3, 8, 1);
        let log = train_cd_model(
            &mut m,
            &refs,
            &train_cfg(steps),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        (m, log.losses)
    };
    let (m, losses) = run(200);
    let head = losses[..10].iter().sum::<f64>() / 10.0;
    let tail = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "head {head} tail {tail}");
    assert_eq!(
        checkpoint_bytes(m.params()),
        checkpoint_bytes(run(200).0.params())
    );

    let (untouched, empty) = run(0);
    assert!(empty.is_empty());
    assert_eq!(untouched.params(), CdModel::new(3, 8, 1).params());
    assert_eq!(
        train_cd_model(
            &mut CdModel::new(3, 8, 1),
            &[],
            &train_cfg(1),
            &mut ChaCha8Rng::seed_from_u64(0)
        )
        .unwrap_err(),
        EvalError::EmptyStream
    );
}

fn protocol(ratios: Vec<f64>, seeds: Vec<u64>) -> TransferConfig {
    TransferConfig {
        ratios,
        seeds,
        test_fraction: 0.5,
        hidden_channels: 8,
        pretrain: train_cfg(20),
        finetune: train_cfg(10),
    }
}

#[test]
fn transfer_protocol_smoke() {
    let mut synthetic = real_toy_dataset(6, 77, &RealToyConfig::new(32, 4)).unwrap();
    for p in &mut synthetic {
        p.id = p.id.replace("real", "syn");
    }
    let real = real(10);
    let report = transfer_experiment(&synthetic, &real, &protocol(vec![1.0], vec![0])).unwrap();
    assert_eq!(report.rows.len(), 3);
    for arm in [Arm::OnlySup, Arm::PretrainFinetune, Arm::ZeroShot] {
        assert_eq!(report.row(arm, 1.0).unwrap().runs, 1);
    }
    let ft: Vec<usize> = report
        .runs
        .iter()
        .filter(|r| r.arm != Arm::ZeroShot)
        .map(|r| r.train_pairs)
        .collect();
    assert_eq!(ft, vec![5, 5]);
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().all(|l| l.split(',').count() == 11));
    assert_eq!(report.to_table().lines().count(), 4);
    assert_eq!(
        report,
        transfer_experiment(&synthetic, &real, &protocol(vec![1.0], vec![0])).unwrap()
    );
}

#[test]
fn transfer_protocol_rejects_bad_input() {
    let real = real(10);
    assert_eq!(
        transfer_experiment(&real, &real, &protocol(vec![0.0], vec![0])).unwrap_err(),
        EvalError::InvalidRatio(0.0)
    );
    assert_eq!(
        transfer_experiment(&real, &real, &protocol(vec![1.5], vec![0])).unwrap_err(),
        EvalError::InvalidRatio(1.5)
    );
    assert!(matches!(
        transfer_experiment(&real, &real, &protocol(vec![0.5], vec![0])).unwrap_err(),
        EvalError::OverlappingSplits(_)
    ));
}
