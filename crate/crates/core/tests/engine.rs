//! End-to-end engine semantics on the affine toy model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcseq::io::{load_checkpoint, save_checkpoint};
use dcseq::models::LinearModel;
use dcseq::qoi::mud_estimate_with;
use dcseq::sequential::{
    DataPacket, Decision, DriftResponse, EngineConfig, InitialDensity, SequentialEngine,
    Thresholds,
};

fn toy_model(n: usize, p: usize, seed: u64) -> LinearModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0));
    let b = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
    LinearModel::new(a, b).unwrap()
}

fn box_density(p: usize, lo: f64, hi: f64) -> InitialDensity {
    InitialDensity::UniformBox {
        lower: DVector::from_element(p, lo),
        upper: DVector::from_element(p, hi),
    }
}

fn config(eps_samples: f64) -> EngineConfig {
    EngineConfig {
        thresholds: Thresholds {
            eps_pred: 0.5,
            eps_kl: 1e6,
            eps_samples,
            q_max: 2,
            q_min: 1,
            resample_increment: 0,
            ..Thresholds::default()
        },
        drift_response: DriftResponse::Resample,
        reset: None,
        pca_centering: Default::default(),
    }
}

#[test]
fn single_window_stream_matches_one_shot_estimate_plus_propagation() {
    let model = toy_model(20, 2, 3);
    let lambda = DVector::from_vec(vec![0.3, -0.4]);
    let packets = model.truth_packets(&lambda, 0.05, 1, 9).unwrap();
    let initial = box_density(2, -1.0, 1.0);

    // A wide-open validity band makes the first q = q_max candidate the
    // accepted one, so the window must equal a single estimator call.
    let mut cfg = config(0.0);
    cfg.thresholds.eps_pred = 10.0;
    let mut engine =
        SequentialEngine::new(cfg, model.clone(), initial.clone(), 400, 77).unwrap();
    let before = engine.ensemble().clone();
    let record = engine.run_window(&packets[0]).unwrap();

    // Reproduce by hand: same draw, one estimate, multiplicative reweight.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let samples = initial.sample_matrix(&mut rng, 400).unwrap();
    assert_eq!(samples, before.samples);
    let sim = dcseq::sequential::Simulator::simulate(&model, &samples, &packets[0]).unwrap();
    let solution = mud_estimate_with(
        &packets[0].values,
        &packets[0].sigmas,
        &before,
        &sim,
        2,
        Default::default(),
    )
    .unwrap();
    assert_eq!(record.decision, Decision::AcceptedReweight);
    assert_eq!(record.q_used, 2);
    assert_eq!(record.expected_ratio, solution.dci.expected_ratio);
    assert_eq!(record.kl_dci, solution.dci.kl_dci);
    assert_eq!(
        record.mud_point,
        solution.mud_point.iter().copied().collect::<Vec<f64>>()
    );
    let products = before.weights.component_mul(&solution.dci.ratios);
    let mean = products.sum() / products.len() as f64;
    assert_eq!(engine.ensemble().weights, products / mean);
    assert_eq!(engine.ensemble().samples, before.samples);
    assert!(record.attempts.is_empty());
}

#[test]
fn identical_runs_produce_bit_identical_records() {
    let model = toy_model(15, 2, 4);
    let lambda = DVector::from_vec(vec![-0.2, 0.6]);
    let packets = model.truth_packets(&lambda, 0.05, 4, 10).unwrap();
    let initial = box_density(2, -1.0, 1.0);
    let run = || {
        let mut engine =
            SequentialEngine::new(config(0.5), model.clone(), initial.clone(), 300, 5).unwrap();
        let mut records = Vec::new();
        for p in &packets {
            records.push(engine.run_window(p).unwrap());
        }
        (
            serde_json::to_string(&records).unwrap(),
            serde_json::to_string(&engine.snapshot()).unwrap(),
        )
    };
    let (rec_a, snap_a) = run();
    let (rec_b, snap_b) = run();
    assert_eq!(rec_a, rec_b);
    assert_eq!(snap_a, snap_b);
}

#[test]
fn forced_resample_and_forced_reweight_propagation() {
    let model = toy_model(25, 2, 6);
    let lambda = DVector::from_vec(vec![0.1, 0.2]);
    let packets = model.truth_packets(&lambda, 0.05, 5, 11).unwrap();
    let initial = box_density(2, -1.0, 1.0);

    // eps_samples = 1: every accepted window re-samples.
    let mut engine =
        SequentialEngine::new(config(1.0), model.clone(), initial.clone(), 250, 21).unwrap();
    for (i, p) in packets.iter().enumerate() {
        let record = engine.run_window(p).unwrap();
        assert_eq!(record.decision, Decision::AcceptedResample, "window {}", i + 1);
        assert_eq!(engine.ensemble().generation, (i + 1) as u32);
        assert!(engine.ensemble().weights.iter().all(|w| *w == 1.0));
    }

    // eps_samples = 0: every accepted window re-weights in place.
    let mut engine =
        SequentialEngine::new(config(0.0), model.clone(), initial.clone(), 250, 21).unwrap();
    let first_samples = engine.ensemble().samples.clone();
    for p in &packets {
        let record = engine.run_window(p).unwrap();
        assert_eq!(record.decision, Decision::AcceptedReweight);
        assert_eq!(engine.ensemble().generation, 0);
        assert_eq!(engine.ensemble().samples, first_samples);
    }
}

#[test]
fn repeated_identical_data_concentrates_weights() {
    let model = toy_model(20, 2, 8);
    let lambda = DVector::from_vec(vec![0.25, -0.5]);
    let mut packets = model.truth_packets(&lambda, 0.05, 1, 13).unwrap();
    let mut second = packets[0].clone();
    second.window_index = 2;
    packets.push(second);

    let mut engine =
        SequentialEngine::new(config(0.0), model, box_density(2, -1.0, 1.0), 500, 31).unwrap();
    let r1 = engine.run_window(&packets[0]).unwrap();
    let r2 = engine.run_window(&packets[1]).unwrap();
    assert_eq!(r1.decision, Decision::AcceptedReweight);
    assert_eq!(r2.decision, Decision::AcceptedReweight);
    assert!(
        r2.eff_fraction <= r1.eff_fraction,
        "eff grew: {} -> {}",
        r1.eff_fraction,
        r2.eff_fraction
    );
    assert!(r2.kl_successive.is_finite());
}

#[test]
fn exhausted_ladder_skips_and_leaves_the_ensemble_alone() {
    let model = toy_model(20, 2, 14);
    let lambda = DVector::from_vec(vec![0.0, 0.0]);
    let packets = model.truth_packets(&lambda, 0.05, 2, 15).unwrap();
    let mut cfg = config(0.5);
    // Impossible acceptance band; divergence threshold too high to flag.
    cfg.thresholds.eps_pred = 1e-12;
    let mut engine =
        SequentialEngine::new(cfg, model, box_density(2, -1.0, 1.0), 200, 41).unwrap();
    let before = engine.ensemble().clone();
    let record = engine.run_window(&packets[0]).unwrap();
    assert_eq!(record.decision, Decision::Skipped);
    assert!(!record.change_point_flag);
    assert!(record.kl_successive.is_nan());
    // One Control-1 step from q = 2 to q = 1, then exhaustion.
    assert_eq!(record.attempts.len(), 1);
    assert_eq!(record.attempts[0].action, Decision::Control1);
    assert_eq!(record.attempts[0].q, 2);
    assert_eq!(record.q_used, 1);
    assert_eq!(engine.ensemble().samples, before.samples);
    assert_eq!(engine.ensemble().weights, before.weights);
    assert_eq!(engine.ensemble().generation, before.generation);
    // The stream still advanced.
    assert!(matches!(
        engine.run_window(&packets[0]),
        Err(dcseq::Error::ProtocolViolation { .. })
    ));
    assert!(engine.run_window(&packets[1]).is_ok());
}

#[test]
fn control2_augments_the_cloud_before_accepting() {
    let model = toy_model(30, 2, 16);
    let lambda = DVector::from_vec(vec![0.4, 0.1]);
    let packets = model.truth_packets(&lambda, 0.05, 1, 17).unwrap();
    let mut cfg = config(0.0);
    cfg.thresholds.q_max = 1; // no Control-1 room: go straight to Control 2
    cfg.thresholds.q_min = 1;
    cfg.thresholds.eps_pred = 0.05;
    cfg.thresholds.resample_increment = 150;
    let mut engine =
        SequentialEngine::new(cfg, model, box_density(2, -1.0, 1.0), 12, 4242).unwrap();
    let record = engine.run_window(&packets[0]).unwrap();
    let c2 = record
        .attempts
        .iter()
        .filter(|a| a.action == Decision::Control2)
        .count();
    assert!(c2 >= 1, "expected at least one Control-2 retry");
    assert!(matches!(
        record.decision,
        Decision::AcceptedReweight | Decision::Skipped
    ));
    if record.decision == Decision::AcceptedReweight {
        assert_eq!(engine.ensemble().size(), 12 + 150 * c2);
    } else {
        assert_eq!(engine.ensemble().size(), 12);
    }
}

#[test]
fn truth_shift_triggers_drift_response_and_recovery() {
    let model = toy_model(20, 2, 18);
    let lambda_a = DVector::from_vec(vec![0.2, -0.3]);
    let lambda_b = DVector::from_vec(vec![0.9, 0.8]);
    let mut packets = model.truth_packets(&lambda_a, 0.05, 2, 19).unwrap();
    for (i, mut p) in model
        .truth_packets(&lambda_b, 0.05, 3, 20)
        .unwrap()
        .into_iter()
        .enumerate()
    {
        p.window_index = 3 + i;
        packets.push(p);
    }

    // Re-weight propagation keeps the cloud spread over the box, so the
    // shifted data lands where samples still live and the divergence spikes.
    let mut cfg = config(0.0);
    cfg.thresholds.eps_pred = 0.5;
    cfg.thresholds.eps_kl = 3.0;
    cfg.drift_response = DriftResponse::Resample;
    cfg.reset = Some(box_density(2, -2.0, 2.0));
    let mut engine =
        SequentialEngine::new(cfg, model, box_density(2, -1.0, 1.0), 800, 51).unwrap();
    let mut flagged = Vec::new();
    let mut saw_control4 = false;
    let mut last = None;
    for p in &packets {
        let record = engine.run_window(p).unwrap();
        if record.change_point_flag {
            flagged.push(record.window_index);
        }
        saw_control4 |= record
            .attempts
            .iter()
            .any(|a| a.action == Decision::Control4);
        last = Some(record);
    }
    assert!(
        flagged.contains(&3) || flagged.contains(&4),
        "shift not flagged near window 3: {flagged:?}"
    );
    assert!(!flagged.contains(&1));
    assert!(!flagged.contains(&2));
    assert!(saw_control4, "expected a Control-4 redraw");
    assert!(engine.ensemble().generation >= 1);
    // After the redraw the estimate tracks the shifted truth.
    let last = last.unwrap();
    assert!(
        matches!(
            last.decision,
            Decision::AcceptedReweight | Decision::AcceptedResample
        ),
        "final window not accepted: {:?}",
        last.decision
    );
    assert!(
        (last.mud_point[0] - 0.9).abs() < 0.3 && (last.mud_point[1] - 0.8).abs() < 0.3,
        "post-shift estimate {:?}",
        last.mud_point
    );
}

#[test]
fn reweight_drift_response_keeps_samples_but_resets_weights() {
    let model = toy_model(30, 2, 22);
    let lambda_a = DVector::from_vec(vec![0.2, -0.3]);
    let lambda_b = DVector::from_vec(vec![0.9, 0.8]);
    let mut packets = model.truth_packets(&lambda_a, 0.02, 2, 23).unwrap();
    for (i, mut p) in model
        .truth_packets(&lambda_b, 0.02, 2, 24)
        .unwrap()
        .into_iter()
        .enumerate()
    {
        p.window_index = 3 + i;
        packets.push(p);
    }
    let mut cfg = config(0.0);
    cfg.thresholds.eps_pred = 0.5;
    cfg.thresholds.eps_kl = 2.0;
    cfg.drift_response = DriftResponse::Reweight;
    cfg.reset = Some(box_density(2, -1.5, 1.5));
    let mut engine = SequentialEngine::new(
        cfg,
        model,
        box_density(2, -1.0, 1.0),
        600,
        61,
    )
    .unwrap();
    let first_samples = engine.ensemble().samples.clone();
    let mut saw_control3 = false;
    for p in &packets {
        let record = engine.run_window(p).unwrap();
        saw_control3 |= record
            .attempts
            .iter()
            .any(|a| a.action == Decision::Control3);
        assert_eq!(engine.ensemble().samples, first_samples);
        assert_eq!(engine.ensemble().generation, 0);
    }
    assert!(saw_control3, "expected a Control-3 re-weight");
}

#[test]
fn checkpoint_split_run_matches_uninterrupted_run() {
    let model = toy_model(18, 2, 26);
    let lambda = DVector::from_vec(vec![0.3, 0.3]);
    let packets = model.truth_packets(&lambda, 0.05, 5, 27).unwrap();
    let initial = box_density(2, -1.0, 1.0);
    let cfg = config(0.6);

    let mut full = SequentialEngine::new(cfg.clone(), model.clone(), initial.clone(), 300, 71)
        .unwrap();
    let mut full_records = Vec::new();
    for p in &packets {
        full_records.push(full.run_window(p).unwrap());
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cp.json");
    let mut head =
        SequentialEngine::new(cfg.clone(), model.clone(), initial.clone(), 300, 71).unwrap();
    head.run_window(&packets[0]).unwrap();
    head.run_window(&packets[1]).unwrap();
    save_checkpoint(&path, &head.snapshot()).unwrap();
    drop(head);

    let snapshot = load_checkpoint(&path).unwrap();
    let mut tail = SequentialEngine::restore(cfg, model, initial, snapshot).unwrap();
    assert_eq!(tail.last_window(), Some(2));
    for (i, p) in packets.iter().enumerate().skip(2) {
        let record = tail.run_window(p).unwrap();
        assert_eq!(
            serde_json::to_string(&record).unwrap(),
            serde_json::to_string(&full_records[i]).unwrap(),
            "window {} diverged after resume",
            i + 1
        );
    }
    assert_eq!(
        serde_json::to_string(&tail.snapshot()).unwrap(),
        serde_json::to_string(&full.snapshot()).unwrap()
    );
}

// Static truth observed through sensors that improve window over window.
// Each window's data then strictly dominates the last, so the estimate
// should contract; the check tolerates occasional unlucky seeds.
#[test]
fn sup_norm_error_is_stochastically_monotone() {
    let model = toy_model(25, 2, 30);
    let lambda = DVector::from_vec(vec![0.35, -0.15]);
    let sigmas = [2.0, 0.07, 2.4e-3, 8.0e-5];
    let mut good = 0;
    for seed in 0..10u64 {
        let mut packets = Vec::new();
        for (m, sigma) in sigmas.iter().enumerate() {
            let mut p = model
                .truth_packets(&lambda, *sigma, 1, 100 + seed * 10 + m as u64)
                .unwrap()
                .remove(0);
            p.window_index = m + 1;
            packets.push(p);
        }
        let mut cfg = config(0.5);
        cfg.thresholds.eps_pred = 1.6;
        cfg.thresholds.q_min = 2; // keep both directions identified
        cfg.thresholds.resample_increment = 1000;
        let mut engine = SequentialEngine::new(
            cfg,
            model.clone(),
            box_density(2, -1.0, 1.0),
            2000,
            200 + seed,
        )
        .unwrap();
        let mut errors = Vec::new();
        for p in &packets {
            let record = engine.run_window(p).unwrap();
            if !matches!(
                record.decision,
                Decision::AcceptedReweight | Decision::AcceptedResample
            ) {
                continue;
            }
            let err = record
                .mud_point
                .iter()
                .zip(lambda.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            errors.push(err);
        }
        assert!(errors.len() >= 3, "seed {seed}: too few accepted windows");
        if errors.windows(2).all(|w| w[1] <= w[0] + 1e-12) {
            good += 1;
        }
    }
    assert!(good >= 8, "monotone on only {good}/10 seeds");
}
