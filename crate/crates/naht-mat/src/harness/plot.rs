//! Plot-ready sample-efficiency tables from metrics streams.

use std::collections::BTreeMap;
use std::path::Path;

use crate::harness::eval::normal_ci;
use crate::harness::HarnessError;
use crate::training::MetricsRecord;

/// One aligned grid point of the emitted table.
#[derive(Clone, Debug)]
pub struct PlotRow {
    pub env_steps: usize,
    /// variant -> (mean, ci_lo, ci_hi, n_seeds)
    pub cells: BTreeMap<String, (f64, f64, f64, usize)>,
}

/// Align per-seed metrics streams by nearest env_steps and reduce the
/// train return across seeds to mean and 95% CI. The reference grid is
/// the first stream of the first variant; a single-seed variant yields
/// degenerate intervals (visible via the n_seeds column).
pub fn emit_plot_data(
    streams: &BTreeMap<String, Vec<Vec<MetricsRecord>>>,
    out_csv: &Path,
) -> Result<Vec<PlotRow>, HarnessError> {
    if streams.is_empty() || streams.values().any(|s| s.is_empty()) {
        return Err(HarnessError::InconsistentRuns(
            "every variant needs at least one metrics stream".into(),
        ));
    }
    for (variant, seeds) in streams {
        for stream in seeds {
            if stream.is_empty() {
                return Err(HarnessError::InconsistentRuns(format!(
                    "variant {variant} has an empty metrics stream"
                )));
            }
        }
    }

    let grid: Vec<usize> = streams
        .values()
        .next()
        .unwrap()[0]
        .iter()
        .map(|r| r.env_steps)
        .collect();

    let nearest = |stream: &[MetricsRecord], steps: usize| -> f64 {
        stream
            .iter()
            .min_by_key(|r| r.env_steps.abs_diff(steps))
            .map(|r| r.mean_train_return)
            .unwrap()
    };

    let mut rows = Vec::with_capacity(grid.len());
    for &steps in &grid {
        let mut cells = BTreeMap::new();
        for (variant, seeds) in streams {
            let per_seed: Vec<f64> = seeds.iter().map(|s| nearest(s, steps)).collect();
            let stats = normal_ci(&per_seed);
            cells.insert(
                variant.clone(),
                (stats.mean, stats.ci_lo, stats.ci_hi, per_seed.len()),
            );
        }
        rows.push(PlotRow {
            env_steps: steps,
            cells,
        });
    }

    let mut csv = String::new();
    csv.push_str("env_steps");
    for variant in streams.keys() {
        csv.push_str(&format!(
            ",{v}_mean,{v}_ci_lo,{v}_ci_hi,{v}_n_seeds",
            v = variant
        ));
    }
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.env_steps.to_string());
        for (mean, lo, hi, n) in row.cells.values() {
            csv.push_str(&format!(",{mean},{lo},{hi},{n}"));
        }
        csv.push('\n');
    }
    std::fs::write(out_csv, csv)?;
    Ok(rows)
}

/// Read run directories produced by train/ablate and emit the table.
/// Every directory must carry a config whose env and pools sections
/// match; each directory contributes its variant's streams.
pub fn plot_from_run_dirs(dirs: &[std::path::PathBuf], out_csv: &Path) -> Result<Vec<PlotRow>, HarnessError> {
    let mut streams: BTreeMap<String, Vec<Vec<MetricsRecord>>> = BTreeMap::new();
    let mut reference: Option<(String, String)> = None;

    for dir in dirs {
        let config_path = dir.join("config.toml");
        let raw = std::fs::read_to_string(&config_path).map_err(|e| {
            HarnessError::InconsistentRuns(format!("{} has no config copy: {e}", dir.display()))
        })?;
        let cfg = crate::harness::ExperimentConfig::from_toml(&raw)?;
        let env_fingerprint = serde_json::to_string(&cfg.env).unwrap();
        let pools_fingerprint = serde_json::to_string(&cfg.pools).unwrap();
        match &reference {
            None => reference = Some((env_fingerprint, pools_fingerprint)),
            Some((env_ref, pools_ref)) => {
                if *env_ref != env_fingerprint || *pools_ref != pools_fingerprint {
                    return Err(HarnessError::InconsistentRuns(format!(
                        "{} was produced with a different env/pool setup",
                        dir.display()
                    )));
                }
            }
        }
        let variant = cfg.run.variant.dir_name().to_string();
        for seed in &cfg.run.seeds {
            let metrics_path = dir.join(format!("seed_{seed}")).join("metrics.jsonl");
            let stream = read_metrics(&metrics_path)?;
            streams.entry(variant.clone()).or_default().push(stream);
        }
    }
    emit_plot_data(&streams, out_csv)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    let raw = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(line)
            .map_err(|e| HarnessError::InconsistentRuns(format!("bad metrics line: {e}")))?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(env_steps: usize, ret: f64) -> MetricsRecord {
        MetricsRecord {
            iteration: 0,
            env_steps,
            mean_train_return: ret,
            mean_test_return: ret,
            per_family_test_return: Default::default(),
            policy_loss: 0.0,
            value_loss: 0.0,
            entropy: 0.0,
            n_histogram: Default::default(),
            seed: 0,
        }
    }

    fn tmp_csv(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("naht-plot-{tag}-{}.csv", std::process::id()))
    }

    #[test]
    fn identical_streams_have_zero_ci_width() {
        let stream: Vec<MetricsRecord> =
            (0..5).map(|i| record(i * 100, 0.42)).collect();
        let mut streams = BTreeMap::new();
        streams.insert("mat_naht".to_string(), vec![stream.clone(); 5]);
        let out = tmp_csv("zero-width");
        let rows = emit_plot_data(&streams, &out).unwrap();
        for row in &rows {
            let (mean, lo, hi, n) = row.cells["mat_naht"];
            assert!((mean - 0.42).abs() < 1e-15);
            assert!((hi - lo).abs() < 1e-15);
            assert_eq!(n, 5);
        }
        std::fs::remove_file(&out).ok();
    }

    #[test]
    fn single_seed_ci_degenerates_to_mean() {
        let mut streams = BTreeMap::new();
        streams.insert(
            "mat_naht".to_string(),
            vec![(0..3).map(|i| record(i * 50, 0.1 * i as f64)).collect()],
        );
        let out = tmp_csv("single");
        let rows = emit_plot_data(&streams, &out).unwrap();
        for row in &rows {
            let (mean, lo, hi, n) = row.cells["mat_naht"];
            assert_eq!(n, 1);
            assert_eq!(mean, lo);
            assert_eq!(mean, hi);
        }
        std::fs::remove_file(&out).ok();
    }

    #[test]
    fn known_variance_matches_hand_formula() {
        // Five streams, constant offsets -> per-point sample std is the
        // same everywhere; the CI must equal mean ± 1.96 s/sqrt(5).
        let offsets = [-0.2, -0.1, 0.0, 0.1, 0.2];
        let streams_vec: Vec<Vec<MetricsRecord>> = offsets
            .iter()
            .map(|o| (0..4).map(|i| record(i * 10, 0.5 + o)).collect())
            .collect();
        let mut streams = BTreeMap::new();
        streams.insert("v".to_string(), streams_vec);
        let out = tmp_csv("variance");
        let rows = emit_plot_data(&streams, &out).unwrap();
        let s = (offsets.iter().map(|o| o * o).sum::<f64>() / 4.0).sqrt();
        let half = 1.96 * s / 5.0_f64.sqrt();
        for row in rows {
            let (mean, lo, hi, _) = row.cells["v"];
            assert!((mean - 0.5).abs() < 1e-9);
            assert!((lo - (0.5 - half)).abs() < 1e-9);
            assert!((hi - (0.5 + half)).abs() < 1e-9);
        }
        std::fs::remove_file(&out).ok();
    }

    #[test]
    fn alignment_picks_nearest_env_steps() {
        let mut streams = BTreeMap::new();
        streams.insert(
            "a".to_string(),
            vec![vec![record(0, 0.0), record(100, 1.0), record(200, 2.0)]],
        );
        // Off-grid stream: 0, 90, 210.
        streams.insert(
            "b".to_string(),
            vec![vec![record(0, 5.0), record(90, 6.0), record(210, 7.0)]],
        );
        let out = tmp_csv("align");
        let rows = emit_plot_data(&streams, &out).unwrap();
        assert_eq!(rows[1].env_steps, 100);
        assert_eq!(rows[1].cells["b"].0, 6.0);
        assert_eq!(rows[2].cells["b"].0, 7.0);
        std::fs::remove_file(&out).ok();
    }

    #[test]
    fn empty_variant_is_an_error() {
        let mut streams: BTreeMap<String, Vec<Vec<MetricsRecord>>> = BTreeMap::new();
        streams.insert("a".to_string(), vec![]);
        let out = tmp_csv("err");
        assert!(emit_plot_data(&streams, &out).is_err());
    }
}
