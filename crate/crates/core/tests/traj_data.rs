use proptest::prelude::*;
use rand::Rng;
use reframe::binio::sha256_hex;
use reframe::data::{compute_returns_to_go, io, sample_context_batch, ContextBatch, Trajectory, TrajectoryDataset, WindowSpec};
use reframe::env::{generate_dataset, EnvSpec, PolicyTier, TierKind};
use reframe::nn::rng_from_seed;
use reframe::Error;

fn suffix_oracle(r: &[f64]) -> Vec<f64> {
    (0..r.len())
        .map(|t| {
            let mut s = 0.0;
            for k in (t..r.len()).rev() {
                s += r[k];
            }
            s
        })
        .collect()
}

fn synthetic(lengths: &[usize]) -> TrajectoryDataset {
    let spec = EnvSpec::point_mass();
    let trajs = lengths
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let obs = (0..t * 4).map(|k| (k as f64 * 0.37 + i as f64).sin()).collect();
            let act = (0..t * 2).map(|k| (k as f64 * 0.11).cos() * 0.5).collect();
            let rew = (0..t).map(|k| -((k + i) as f64 * 0.01)).collect();
            Trajectory::new(4, 2, obs, act, rew, TierKind::Medium, i as u64).unwrap()
        })
        .collect();
    TrajectoryDataset::new(spec, TierKind::Medium, 1, trajs).unwrap()
}

#[test]
fn returns_to_go_match_the_double_loop_oracle() {
    let mut rng = rng_from_seed(1);
    let r: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..1.0)).collect();
    assert_eq!(compute_returns_to_go(&r).unwrap(), suffix_oracle(&r));
}

proptest! {
    #[test]
    fn suffix_identity_is_exact_on_integer_rewards(r in prop::collection::vec(-1000i32..1000, 1..80)) {
        let r: Vec<f64> = r.into_iter().map(f64::from).collect();
        let g = compute_returns_to_go(&r).unwrap();
        for t in 0..r.len() - 1 {
            prop_assert_eq!(g[t] - g[t + 1], r[t]);
        }
        prop_assert_eq!(*g.last().unwrap(), *r.last().unwrap());
    }

    #[test]
    fn suffix_identity_holds_to_rounding_on_real_rewards(r in prop::collection::vec(-3.0f64..1.0, 1..80)) {
        let g = compute_returns_to_go(&r).unwrap();
        for t in 0..r.len() - 1 {
            prop_assert!((g[t] - g[t + 1] - r[t]).abs() <= 1e-12 * (1.0 + g[t].abs()));
        }
    }
}

#[test]
fn short_trajectory_is_left_padded() {
    let ds = synthetic(&[5]);
    let b = ContextBatch::from_windows(&ds.trajectories, &[WindowSpec { trajectory: 0, end: 4 }], 60, &ds.stats).unwrap();
    assert_eq!(b.mask.iter().filter(|m| !**m).count(), 55);
    assert_eq!(b.num_valid(), 5);
    assert!(b.mask[..55].iter().all(|m| !m));
    assert!(b.returns_to_go[..55].iter().all(|x| *x == 0.0));
    assert!(b.observations[..55 * 4].iter().all(|x| *x == 0.0));
    assert!(b.actions[..55 * 2].iter().all(|x| *x == 0.0));
    assert_eq!(&b.timesteps[55..], &[0, 1, 2, 3, 4]);
}

#[test]
fn unit_context_holds_one_triple() {
    let ds = synthetic(&[7, 9]);
    let b = sample_context_batch(&ds, 16, 1, &mut rng_from_seed(3)).unwrap();
    assert_eq!(b.context, 1);
    assert!(b.mask.iter().all(|m| *m));
    assert_eq!(b.returns_to_go.len(), 16);
    assert_eq!(b.observations.len(), 16 * 4);
}

#[test]
fn bad_batch_arguments_are_rejected() {
    let ds = synthetic(&[3]);
    assert!(matches!(sample_context_batch(&ds, 4, 0, &mut rng_from_seed(0)), Err(Error::Argument(_))));
    assert!(matches!(sample_context_batch(&ds, 0, 4, &mut rng_from_seed(0)), Err(Error::Argument(_))));
}

#[test]
fn sampling_is_proportional_to_length() {
    let ds = synthetic(&[10, 30]);
    let mut rng = rng_from_seed(11);
    let windows = reframe::data::sample_windows(&ds.trajectories, 10_000, &mut rng).unwrap();
    let freq = windows.iter().filter(|w| w.trajectory == 1).count() as f64 / 10_000.0;
    assert!((freq - 0.75).abs() < 0.02, "{freq}");
}

#[test]
fn batches_are_well_formed() {
    let ds = generate_dataset(&EnvSpec::point_mass(), &PolicyTier::medium(), 30, 2).unwrap();
    let b = sample_context_batch(&ds, 64, 20, &mut rng_from_seed(4)).unwrap();
    for row in 0..b.batch {
        let mut prev: Option<usize> = None;
        for j in 0..b.context {
            let i = row * b.context + j;
            if !b.mask[i] {
                assert!(prev.is_none(), "padding must precede valid steps");
                assert_eq!(b.returns_to_go[i], 0.0);
                assert_eq!(b.timesteps[i], 0);
                continue;
            }
            if let Some(p) = prev {
                assert_eq!(b.timesteps[i], p + 1);
            }
            prev = Some(b.timesteps[i]);
            assert_eq!(b.returns_to_go[i], b.raw_returns_to_go[i] / ds.stats.return_scale);
        }
    }
}

#[test]
fn own_stats_standardize_the_dataset() {
    let ds = generate_dataset(&EnvSpec::obstacle(), &PolicyTier::medium_replay(), 50, 5).unwrap();
    let n = ds.num_timesteps() as f64;
    let mut sum = [0.0; 4];
    let mut sq = [0.0; 4];
    for t in &ds.trajectories {
        for row in t.observations.chunks(4) {
            for (d, z) in ds.stats.normalize_obs(row).into_iter().enumerate() {
                sum[d] += z;
                sq[d] += z * z;
            }
        }
    }
    for d in 0..4 {
        let mean = sum[d] / n;
        let var = sq[d] / n - mean * mean;
        assert!(mean.abs() < 1e-10, "dim {d} mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-8, "dim {d} std {}", var.sqrt());
    }
    let expert = ds.env.anchors.unwrap().expert;
    assert_eq!(ds.stats.return_scale, expert.abs());
}

#[test]
fn zero_variance_dims_keep_unit_std() {
    let spec = EnvSpec::point_mass();
    let t = Trajectory::new(4, 2, vec![1.0; 12], vec![0.0; 6], vec![-1.0; 3], TierKind::Expert, 0).unwrap();
    let ds = TrajectoryDataset::new(spec, TierKind::Expert, 0, vec![t]).unwrap();
    assert_eq!(ds.stats.obs_std, vec![1.0; 4]);
}

#[test]
fn dataset_round_trips_bit_exactly() {
    let ds = generate_dataset(&EnvSpec::obstacle(), &PolicyTier::medium(), 12, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.rfds");
    io::save(&ds, &path).unwrap();
    let back = io::load(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(io::encode(&back), std::fs::read(&path).unwrap());
}

#[test]
fn corrupted_files_are_rejected() {
    let bytes = io::encode(&synthetic(&[4, 6]));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(io::decode(&bad), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(io::decode(&bad), Err(Error::Format { offset: 4, .. })));
    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(io::decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(io::decode(&long), Err(Error::Format { .. })));
    let missing = std::path::Path::new("/nonexistent/d.rfds");
    assert!(matches!(io::load(missing), Err(Error::MissingArtifact(_))));
}

#[test]
fn six_thousand_trajectories_round_trip() {
    let ds = generate_dataset(&EnvSpec::point_mass(), &PolicyTier::medium(), 6000, 0).unwrap();
    let bytes = io::encode(&ds);
    let back = io::decode(&bytes).unwrap();
    assert_eq!(sha256_hex(&io::encode(&back)), sha256_hex(&bytes));
    assert_eq!(back.len(), 6000);
    assert_eq!(back.stats, ds.stats);
    assert_eq!(back.config_hash, ds.config_hash);
}
