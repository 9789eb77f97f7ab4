use std::io::Cursor;

use gripforce_core::control::Controller;
use gripforce_core::dataset::*;
use gripforce_core::oracle::{Oracle, OracleConfig};
use gripforce_core::plant::PlantParams;
use gripforce_core::sim::{Env, EnvConfig, ReferenceTrajectory};
use gripforce_core::Result;

/// Open-loop chirp, different on each motor.
struct Chirp;

impl Controller for Chirp {
    fn act(&mut self, env: &Env) -> Result<[f64; 2]> {
        let t = env.time();
        Ok([2.0 * (40.0 * t * t).sin() + 0.3, -1.5 * (25.0 * t).cos()])
    }
}

fn short_env(len: usize) -> Env {
    let cfg = EnvConfig {
        episode_len: len,
        ..EnvConfig::default()
    };
    Env::new(&PlantParams::default(), cfg).unwrap()
}

fn record(env: &mut Env, controller: &mut dyn Controller, seeds: &[u64]) -> (Vec<u8>, Vec<EpisodeSummary>) {
    let mut writer = EpisodeWriter::new(Cursor::new(Vec::new())).unwrap();
    let summaries = seeds
        .iter()
        .map(|&s| record_episode(env, controller, ReferenceTrajectory::sample(s), &mut writer).unwrap())
        .collect();
    (writer.finish().unwrap().into_inner(), summaries)
}

#[test]
fn summary_return_matches_file() {
    let mut env = short_env(120);
    let (bytes, summaries) = record(&mut env, &mut Chirp, &[1, 2, 3]);
    let episodes = read_dataset(Cursor::new(&bytes)).unwrap();
    assert_eq!(episodes.len(), 3);
    for (e, s) in episodes.iter().zip(&summaries) {
        assert_eq!(e.transitions.len(), s.length);
        let mut total = 0.0;
        for t in &e.transitions {
            total += t.reward;
        }
        assert_eq!(total, s.episode_return);
        assert!(e.transitions.last().unwrap().truncated);
        assert!(e.transitions[..e.transitions.len() - 1].iter().all(|t| !t.truncated && !t.terminated));
    }
}

#[test]
fn stored_episodes_replay_bit_identically() {
    let mut env = short_env(40);
    let mut oracle = Oracle::new(OracleConfig {
        max_evals: 31,
        seed: 5,
        ..OracleConfig::default()
    })
    .unwrap();
    let (bytes, _) = record(&mut env, &mut oracle, &[7, 8]);
    let (chirp_bytes, _) = record(&mut env, &mut Chirp, &[9]);
    let mut episodes = read_dataset(Cursor::new(&bytes)).unwrap();
    episodes.extend(read_dataset(Cursor::new(&chirp_bytes)).unwrap());

    let mut fresh = short_env(40);
    for e in &episodes {
        let obs = fresh.reset_with(e.trajectory).to_array();
        assert_eq!(obs.map(f64::to_bits), e.transitions[0].obs.map(f64::to_bits));
        for t in &e.transitions {
            let out = fresh.step(t.action).unwrap();
            assert_eq!(out.reward.to_bits(), t.reward.to_bits());
            assert_eq!(out.obs.to_array().map(f64::to_bits), t.next_obs.map(f64::to_bits));
            assert_eq!(out.terminated, t.terminated);
        }
    }
}

#[test]
fn recording_is_deterministic() {
    let mut env = short_env(60);
    let (a, _) = record(&mut env, &mut Chirp, &[4, 5]);
    let (b, _) = record(&mut short_env(60), &mut Chirp, &[4, 5]);
    assert_eq!(a, b);
}

#[test]
fn first_step_termination_yields_one_transition() {
    struct Slam;
    impl Controller for Slam {
        fn act(&mut self, _: &Env) -> Result<[f64; 2]> {
            Ok([6.0, 6.0])
        }
    }
    let cfg = EnvConfig {
        fail_band: 1e-6,
        ..EnvConfig::default()
    };
    let mut env = Env::new(&PlantParams::default(), cfg).unwrap();
    let (bytes, summaries) = record(&mut env, &mut Slam, &[0]);
    assert_eq!(summaries[0].length, 1);
    assert!(summaries[0].terminated_early);
    let episodes = read_dataset(Cursor::new(&bytes)).unwrap();
    assert_eq!(episodes[0].transitions.len(), 1);
    assert!(episodes[0].transitions[0].terminated);
    assert!(!episodes[0].transitions[0].truncated);
}

#[test]
fn files_on_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("episodes.ttw");
    let mut env = short_env(30);
    let mut writer = EpisodeWriter::create(&path).unwrap();
    record_episode(&mut env, &mut Chirp, ReferenceTrajectory::sample(3), &mut writer).unwrap();
    writer.finish().unwrap();
    let episodes = read_dataset_file(&path).unwrap();
    let again = dir.path().join("again.ttw");
    write_dataset_file(&again, &episodes).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let scalers = fit_scalers(&episodes, 6.0).unwrap();
    let spath = dir.path().join("scalers.bin");
    scalers.save(&spath).unwrap();
    assert_eq!(Scalers::load(&spath).unwrap(), scalers);
}
