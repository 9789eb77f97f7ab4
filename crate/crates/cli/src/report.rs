//! Evaluation summaries. Force errors are reported in newtons and as a
//! percentage of `F_ref`; angle errors in radians and as a percentage of the
//! reference's peak-to-peak range over the evaluated steps.

use serde::{Deserialize, Serialize};

use gripforce_core::control::EpisodeStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub traj_seed: u64,
    pub steps: usize,
    pub episode_return: f64,
    pub mean_force_err_n: f64,
    pub mean_force_err_pct: f64,
    pub max_force_err_n: f64,
    pub mean_angle_err_rad: f64,
    pub mean_angle_err_pct: f64,
    pub terminated: bool,
}

impl EpisodeReport {
    pub fn new(traj_seed: u64, stats: &EpisodeStats, f_ref: f64) -> Self {
        let range = stats.reference_range();
        EpisodeReport {
            traj_seed,
            steps: stats.steps,
            episode_return: stats.episode_return,
            mean_force_err_n: stats.mean_abs_force_err(),
            mean_force_err_pct: 100.0 * stats.mean_abs_force_err() / f_ref,
            max_force_err_n: stats.max_abs_force_err,
            mean_angle_err_rad: stats.mean_abs_angle_err(),
            mean_angle_err_pct: if range > 0.0 {
                100.0 * stats.mean_abs_angle_err() / range
            } else {
                f64::NAN
            },
            terminated: stats.terminated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub controller: String,
    pub f_ref: f64,
    pub episodes: Vec<EpisodeReport>,
    pub mean_return: f64,
    pub mean_force_err_n: f64,
    pub mean_force_err_pct: f64,
    pub max_force_err_n: f64,
    pub mean_angle_err_pct: f64,
    pub terminations: usize,
}

impl EvalReport {
    pub fn new(controller: impl Into<String>, f_ref: f64, episodes: Vec<EpisodeReport>) -> Self {
        let k = episodes.len().max(1) as f64;
        let mean = |f: fn(&EpisodeReport) -> f64| episodes.iter().map(f).sum::<f64>() / k;
        EvalReport {
            controller: controller.into(),
            f_ref,
            mean_return: mean(|e| e.episode_return),
            mean_force_err_n: mean(|e| e.mean_force_err_n),
            mean_force_err_pct: mean(|e| e.mean_force_err_pct),
            max_force_err_n: episodes.iter().map(|e| e.max_force_err_n).fold(0.0, f64::max),
            mean_angle_err_pct: mean(|e| e.mean_angle_err_pct),
            terminations: episodes.iter().filter(|e| e.terminated).count(),
            episodes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentages_use_documented_denominators() {
        let stats = EpisodeStats {
            steps: 4,
            episode_return: -1.0,
            terminated: false,
            sum_abs_force_err: 0.4,
            max_abs_force_err: 0.2,
            sum_abs_angle_err: 0.02,
            ref_min: -0.1,
            ref_max: 0.1,
        };
        let r = EpisodeReport::new(3, &stats, 10.0);
        assert!((r.mean_force_err_pct - 1.0).abs() < 1e-12);
        assert!((r.mean_angle_err_pct - 2.5).abs() < 1e-12);
        let agg = EvalReport::new("zero", 10.0, vec![r.clone(), r]);
        assert_eq!(agg.terminations, 0);
        assert!((agg.mean_return + 1.0).abs() < 1e-15);
    }
}
