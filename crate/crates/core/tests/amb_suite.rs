use std::time::Instant;

use rand::Rng;
use reframe::amb::{
    reconstruction_error, train_autoencoder, AeConfig, AeTrainConfig, AutoencoderModel, BufferSource, ComponentStats,
    MemoryBuffer, SourceTrajectory,
};
use reframe::data::Trajectory;
use reframe::env::{generate_dataset, EnvSpec, PolicyTier};
use reframe::nn::{rng_from_seed, Tensor};
use reframe::Error;

fn expert(n: usize, seed: u64) -> Vec<Trajectory> {
    generate_dataset(&EnvSpec::point_mass(), &PolicyTier::expert(), n, seed)
        .unwrap()
        .trajectories
}

fn frozen_model(trajs: &[Trajectory], config: AeConfig, seed: u64) -> AutoencoderModel {
    let stats = ComponentStats::compute(trajs).unwrap();
    let mut m = AutoencoderModel::new(config, 4, 2, stats, seed).unwrap();
    m.freeze();
    m
}

fn unit_stats(obs_dim: usize, act_dim: usize) -> ComponentStats {
    ComponentStats {
        rtg_mean: 0.0,
        rtg_std: 1.0,
        obs_mean: vec![0.0; obs_dim],
        obs_std: vec![1.0; obs_dim],
        act_mean: vec![0.0; act_dim],
        act_std: vec![1.0; act_dim],
    }
}

/// A buffer over arbitrary latent rows of width `latent`.
fn raw_buffer(latent: usize, rows: Vec<f64>) -> MemoryBuffer {
    let config = AeConfig {
        latent,
        ..AeConfig::default()
    };
    let mut model = AutoencoderModel::new(config, 4, 2, unit_stats(4, 2), 3).unwrap();
    model.freeze();
    let m = (rows.len() / latent) as u32;
    let sources = if m == 0 {
        vec![]
    } else {
        vec![SourceTrajectory {
            id: 0,
            length: m,
            episode_seed: 0,
        }]
    };
    MemoryBuffer::from_rows(rows, sources, model, BufferSource::Expert).unwrap()
}

fn scan_oracle(rows: &[f64], latent: usize, q: &[f64]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for i in 0..rows.len() / latent {
        let mut d = 0.0;
        for k in 0..latent {
            d += (q[k] - rows[i * latent + k]).powi(2);
        }
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[test]
fn buffer_has_one_row_per_timestep() {
    let trajs = expert(60, 4);
    let model = frozen_model(&trajs, AeConfig::default(), 1);
    let one = MemoryBuffer::build(&trajs[..1], None, model.clone(), BufferSource::Expert).unwrap();
    assert_eq!(one.len(), 100);
    let full = MemoryBuffer::build(&trajs, None, model.clone(), BufferSource::Expert).unwrap();
    assert_eq!(full.len(), 6000);
    assert_eq!(full.provenance(250), Some((2, 50)));
    assert_eq!(full.provenance(6000), None);
    let again = MemoryBuffer::build(&trajs, None, model, BufferSource::Expert).unwrap();
    assert_eq!(full.rows(), again.rows());
}

#[test]
fn unfrozen_model_cannot_build_a_buffer() {
    let trajs = expert(2, 4);
    let stats = ComponentStats::compute(&trajs).unwrap();
    let model = AutoencoderModel::new(AeConfig::default(), 4, 2, stats, 1).unwrap();
    let err = MemoryBuffer::build(&trajs, None, model, BufferSource::Expert).unwrap_err();
    assert!(matches!(err, Error::State(_)));
}

#[test]
fn retrieval_geometry_and_identity() {
    let buf = raw_buffer(2, vec![0.0, 0.0, 1.0, 1.0]);
    let r = buf.retrieve(&[0.1, 0.1]).unwrap();
    assert_eq!(r.index, 0);
    let r = buf.retrieve(&[1.0, 1.0]).unwrap();
    assert_eq!((r.index, r.distance_sq), (1, 0.0));
}

#[test]
fn ties_go_to_the_lowest_index() {
    let buf = raw_buffer(2, vec![5.0, 5.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0]);
    assert_eq!(buf.retrieve(&[0.0, 0.0]).unwrap().index, 1);
    assert_eq!(buf.retrieve_exhaustive(&[0.0, 0.0]).unwrap().index, 1);
    let dup = raw_buffer(2, vec![2.0, 2.0, 2.0, 2.0]);
    assert_eq!(dup.retrieve(&[2.0, 2.0]).unwrap().index, 0);
}

#[test]
fn empty_buffer_and_bad_query_are_rejected() {
    let empty = raw_buffer(2, vec![]);
    assert!(matches!(empty.retrieve(&[0.0, 0.0]), Err(Error::State(_))));
    let buf = raw_buffer(2, vec![0.0, 0.0]);
    assert!(matches!(buf.retrieve(&[0.0]), Err(Error::Dimension { .. })));
}

#[test]
fn random_queries_match_the_scan_oracle() {
    let mut rng = rng_from_seed(17);
    let rows: Vec<f64> = (0..6000 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let buf = raw_buffer(16, rows.clone());
    for _ in 0..1000 {
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.2..1.2)).collect();
        let got = buf.retrieve(&q).unwrap();
        let (idx, d) = scan_oracle(&rows, 16, &q);
        assert_eq!(got.index, idx);
        assert_eq!(got.distance_sq, d);
        assert_eq!(buf.retrieve_exhaustive(&q).unwrap().index, idx);
    }
}

#[test]
fn retrieval_distance_equals_direct_arithmetic() {
    let mut rng = rng_from_seed(5);
    let rows: Vec<f64> = (0..50 * 16).map(|_| rng.random_range(-3.0..3.0)).collect();
    let buf = raw_buffer(16, rows);
    for _ in 0..200 {
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let r = buf.retrieve(&q).unwrap();
        let direct: f64 = q.iter().zip(buf.row(r.index)).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((r.distance_sq - direct).abs() <= 1e-12);
    }
}

#[test]
fn buffer_file_round_trips_and_stays_small() {
    let trajs = expert(60, 4);
    let model = frozen_model(&trajs, AeConfig::default(), 1);
    let buf = MemoryBuffer::build(&trajs, None, model, BufferSource::Dataset).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("amb.rfmb");
    buf.save(&path).unwrap();
    let back = MemoryBuffer::load(&path).unwrap();
    assert_eq!(back.rows(), buf.rows());
    assert_eq!(back.sources(), buf.sources());
    assert_eq!(back.source(), BufferSource::Dataset);
    assert_eq!(back.model().fingerprint(), buf.model().fingerprint());
    assert!(back.model().is_frozen());
    assert_eq!(back.encode(), buf.encode());

    let mut rng = rng_from_seed(2);
    for _ in 0..100 {
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        assert_eq!(back.retrieve(&q).unwrap(), buf.retrieve(&q).unwrap());
    }

    // The header grows with the trajectory count and the model, never with M.
    let bytes = std::fs::metadata(&path).unwrap().len() as usize;
    let model_bytes = {
        let mut w = reframe::binio::Writer::new();
        buf.model().write(&mut w);
        w.finish().len()
    };
    let header = bytes - 8 * 6000 * 16 - model_bytes;
    assert!(header <= 64 + 16 * 60, "header {header} bytes");
}

#[test]
fn corrupted_buffer_files_are_rejected() {
    let trajs = expert(2, 4);
    let buf = MemoryBuffer::build(&trajs, None, frozen_model(&trajs, AeConfig::default(), 1), BufferSource::Expert)
        .unwrap();
    let bytes = buf.encode();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(MemoryBuffer::decode(&bad), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[4] = 99;
    assert!(matches!(MemoryBuffer::decode(&bad), Err(Error::Format { .. })));
    assert!(MemoryBuffer::decode(&bytes[..bytes.len() - 1]).is_err());
    let missing = std::path::Path::new("/nonexistent/amb.rfmb");
    assert!(matches!(MemoryBuffer::load(missing), Err(Error::MissingArtifact(_))));
}

#[test]
fn decoded_actions_are_cached_and_deterministic() {
    let trajs = expert(3, 9);
    let buf = MemoryBuffer::build(&trajs, None, frozen_model(&trajs, AeConfig::default(), 1), BufferSource::Expert)
        .unwrap();
    for i in [0, 17, 299] {
        let t = Tensor::new(vec![1, 16], buf.row(i).to_vec()).unwrap();
        let a = buf.model().decode_action(&t).unwrap();
        assert_eq!(a.as_slice(), buf.decoded_action(i));
        assert_eq!(buf.model().decode_action(&t).unwrap(), a);
    }
}

#[test]
fn zero_steps_leave_the_init_and_freeze() {
    let trajs = expert(4, 1);
    let stats = ComponentStats::compute(&trajs).unwrap();
    let model = AutoencoderModel::new(AeConfig::default(), 4, 2, stats, 8).unwrap();
    let before = model.fingerprint();
    let cfg = AeTrainConfig {
        steps: 0,
        ..AeTrainConfig::default()
    };
    let (trained, report) = train_autoencoder(model, &trajs, &cfg).unwrap();
    assert_eq!(trained.fingerprint(), before);
    assert!(trained.is_frozen());
    assert_eq!(report.curve.len(), 1);
    assert!(train_autoencoder(trained, &trajs, &cfg).is_err());
}

#[test]
fn initial_loss_is_close_to_the_component_variance() {
    let trajs = expert(60, 4);
    let stats = ComponentStats::compute(&trajs).unwrap();
    let model = AutoencoderModel::new(AeConfig::default(), 4, 2, stats, 8).unwrap();
    let err = reconstruction_error(&model, &trajs).unwrap();
    // Standardized targets have unit variance and a small init predicts ~0.
    for (mse, var) in err.mse.as_array().into_iter().zip(err.variance.as_array()) {
        assert!((var - 1.0).abs() < 1e-9);
        assert!(mse > 0.5 * var && mse < 1.5 * var, "mse {mse} var {var}");
    }
}

#[test]
fn short_training_reduces_every_component_loss() {
    let trajs = expert(20, 4);
    let stats = ComponentStats::compute(&trajs).unwrap();
    let model = AutoencoderModel::new(AeConfig::default(), 4, 2, stats, 8).unwrap();
    let cfg = AeTrainConfig {
        steps: 300,
        batch: 64,
        ..AeTrainConfig::default()
    };
    let (trained, report) = train_autoencoder(model, &trajs, &cfg).unwrap();
    let first = report.curve.first().unwrap().losses.as_array();
    let last = report.curve.last().unwrap().losses.as_array();
    for k in 0..3 {
        assert!(last[k] < 0.5 * first[k], "component {k}: {} -> {}", first[k], last[k]);
    }
    // Distinct timesteps keep distinct embeddings after training.
    let t = &trajs[0];
    let (r, o, _) = trained
        .encode_components(&t.returns_to_go[..2], &t.observations[..8], &t.actions[..4])
        .unwrap();
    let gap: f64 = r.row(0).iter().zip(r.row(1)).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        + o.row(0).iter().zip(o.row(1)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    assert!(gap > 0.0);
}

#[test]
fn desk_budget_meets_the_reconstruction_target() {
    let train = expert(60, 4);
    let held_out = expert(20, 1234);
    let stats = ComponentStats::compute(&train).unwrap();
    let model = AutoencoderModel::new(AeConfig::default(), 4, 2, stats, 0).unwrap();
    let start = Instant::now();
    let (trained, _) = train_autoencoder(model, &train, &AeTrainConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let rel = reconstruction_error(&trained, &held_out).unwrap().relative();
    println!("stage-1 relative error {rel:?} in {secs:.1}s");
    assert!(rel.iter().all(|r| *r < 0.05), "{rel:?}");
    assert!(secs < 300.0);

    // Decoded buffer actions stay within the bounds up to the error budget.
    let spec = EnvSpec::point_mass();
    let buf = MemoryBuffer::build(&train, None, trained, BufferSource::Expert).unwrap();
    let eps = 0.5;
    for i in 0..buf.len() {
        for (d, a) in buf.decoded_action(i).iter().enumerate() {
            assert!(*a >= spec.action_low[d] - eps && *a <= spec.action_high[d] + eps);
        }
    }
}
