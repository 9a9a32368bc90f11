use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{evaluate, EvalError};
use crate::data::Dataset;
use crate::granularity::CANONICAL_WIDTHS;
use crate::losses::LossConfig;
use crate::model::{build_model, BranchId, InferencePolicy, ModelSpec};
use crate::train::{train, TrainConfig, TrainHistory};

#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

/// One ladder cell. Improvement columns are empty on the baseline row and
/// whenever the baseline or this cell failed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub loss_combination: LossConfig,
    pub mae: Option<f64>,
    /// Baseline MAE minus this row's MAE.
    pub improvement: Option<f64>,
    /// `improvement / baseline MAE`.
    pub relative_improvement: Option<f64>,
    pub lowest: bool,
    pub error: Option<String>,
    pub history: Option<TrainHistory>,
}

impl AblationRow {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AblationReport {
    pub fn all_failed(&self) -> bool {
        self.rows.iter().all(AblationRow::failed)
    }

    /// Machine-readable rows, floats in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,loss_combination,mae,improvement,relative_improvement,lowest,status\n");
        for (i, r) in self.rows.iter().enumerate() {
            let status = match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                i + 1,
                r.loss_combination,
                opt(r.mae),
                opt(r.improvement),
                opt(r.relative_improvement),
                r.lowest,
                status
            )
            .unwrap();
        }
        out
    }

    /// Aligned text table: one check column per loss term, then MAE,
    /// improvement and relative improvement (integer percent). The lowest
    /// MAE carries a `*`.
    pub fn to_table(&self) -> String {
        let mut header: Vec<String> = CANONICAL_WIDTHS
            .iter()
            .map(|&w| {
                format!(
                    "{}-classes",
                    BranchId::Classification(w).label().trim_start_matches("ce")
                )
            })
            .collect();
        header.extend(["mse", "MAE", "improvement", "relative"].map(String::from));

        let mut lines: Vec<Vec<String>> = vec![header];
        for r in &self.rows {
            let active = r.loss_combination.active_granularities();
            let mut cells: Vec<String> = CANONICAL_WIDTHS
                .iter()
                .map(|w| if active.contains(w) { "x".into() } else { String::new() })
                .collect();
            cells.push(if r.loss_combination.use_regression() {
                "x".into()
            } else {
                String::new()
            });
            match r.mae {
                Some(m) => cells.push(format!("{m:.2}{}", if r.lowest { "*" } else { "" })),
                None => cells.push("failed".into()),
            }
            cells.push(r.improvement.map(|v| format!("{v:.2}")).unwrap_or_default());
            cells.push(
                r.relative_improvement
                    .map(|v| format!("{:.0}%", v * 100.0))
                    .unwrap_or_default(),
            );
            lines.push(cells);
        }

        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let row: Vec<String> = l.iter().zip(&widths).map(|(cell, &w)| format!("{cell:^w$}")).collect();
            out.push_str(row.join(" | ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
                out.push_str(&rule.join("-|-"));
                out.push('\n');
            }
        }
        out
    }
}

fn run_cell(
    base: &TrainConfig,
    model_spec: &ModelSpec,
    combination: &LossConfig,
    splits: &Splits<'_>,
) -> Result<(f64, TrainHistory), String> {
    let config = TrainConfig {
        loss_config: combination.clone(),
        ..base.clone()
    };
    let spec = model_spec.clone().with_branches_for(combination);
    let model = build_model(&spec, base.seed).map_err(|e| e.to_string())?;
    let (model, history) = train(model, splits.train, splits.val, &config).map_err(|e| e.to_string())?;
    let report = evaluate(&model, splits.test, InferencePolicy::default(), false).map_err(|e| e.to_string())?;
    Ok((report.mae, history))
}

/// Baseline MAE minus row MAE, kept at full precision. Adding the row MAE
/// back recovers the baseline exactly when the two are within a factor of
/// two, and to within one ulp otherwise.
pub fn improvement(baseline: f64, mae: f64) -> f64 {
    baseline - mae
}

type CellResult = Result<(f64, TrainHistory), String>;

/// Trains one fresh model per combination (same seed, so shared tensors
/// start identical), scores each on the test split with the default policy
/// and fills the improvement columns relative to the first row. Up to
/// `parallel` cells run at once; rows keep input order either way.
pub fn run_ablation(
    base: &TrainConfig,
    model_spec: &ModelSpec,
    combinations: &[LossConfig],
    splits: Splits<'_>,
    parallel: usize,
) -> Result<AblationReport, EvalError> {
    let first = combinations.first().ok_or(EvalError::NoCombinations)?;
    if !first.is_baseline() {
        return Err(EvalError::BaselineFirst(first.to_string()));
    }

    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; combinations.len()]);
    let next = AtomicUsize::new(0);
    let workers = parallel.clamp(1, combinations.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(combination) = combinations.get(i) else {
                    break;
                };
                log::info!("ablation cell {}: {combination}", i + 1);
                let result = run_cell(base, model_spec, combination, &splits);
                if let Err(e) = &result {
                    log::error!("ablation cell {} ({combination}) failed: {e}", i + 1);
                }
                results.lock().expect("no poisoned cells")[i] = Some(result);
            });
        }
    });

    let results = results.into_inner().expect("no poisoned cells");
    let baseline = results[0].as_ref().and_then(|r| r.as_ref().ok()).map(|(m, _)| *m);
    let mut rows: Vec<AblationRow> = combinations
        .iter()
        .zip(results)
        .enumerate()
        .map(|(i, (combination, result))| {
            let result = result.expect("every cell ran");
            let (mae, history, error) = match result {
                Ok((m, h)) => (Some(m), Some(h), None),
                Err(e) => (None, None, Some(e)),
            };
            let improvement = match (i, baseline, mae) {
                (0, _, _) => None,
                (_, Some(b), Some(m)) => Some(improvement(b, m)),
                _ => None,
            };
            AblationRow {
                loss_combination: combination.clone(),
                mae,
                improvement,
                relative_improvement: improvement.zip(baseline).map(|(d, b)| d / b),
                lowest: false,
                error,
                history,
            }
        })
        .collect();

    let lowest = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.mae.map(|m| (i, m)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    if let Some(i) = lowest {
        rows[i].lowest = true;
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ulp(x: f64) -> f64 {
        let x = x.abs();
        f64::from_bits(x.to_bits() + 1) - x
    }

    proptest! {
        #[test]
        fn improvement_is_exact_within_factor_two(b in 1e-3f64..100.0, t in 0.5f64..2.0) {
            let m = b * t;
            prop_assume!(m >= b / 2.0 && m <= 2.0 * b);
            prop_assert_eq!(improvement(b, m) + m, b);
        }

        #[test]
        fn improvement_is_within_one_ulp(b in 1e-3f64..100.0, m in 1e-3f64..100.0) {
            let d = improvement(b, m);
            prop_assert!((d + m - b).abs() <= ulp(b.abs().max(d.abs())));
        }
    }
    use crate::data::{synth_dataset, AugmentConfig};

    fn tiny() -> (Dataset, Dataset, Dataset, TrainConfig) {
        let config = TrainConfig {
            max_epochs: 1,
            batch_size: 8,
            seed: 11,
            augment: AugmentConfig::disabled(),
            ..TrainConfig::default()
        };
        (
            synth_dataset(16, 1, 32).unwrap(),
            synth_dataset(8, 2, 32).unwrap(),
            synth_dataset(8, 3, 32).unwrap(),
            config,
        )
    }

    #[test]
    fn baseline_must_come_first() {
        let (tr, va, te, cfg) = tiny();
        let splits = Splits {
            train: &tr,
            val: &va,
            test: &te,
        };
        let spec = ModelSpec::desk(32);
        assert!(matches!(
            run_ablation(&cfg, &spec, &[], splits, 1),
            Err(EvalError::NoCombinations)
        ));
        assert!(matches!(
            run_ablation(&cfg, &spec, &[LossConfig::full()], splits, 1),
            Err(EvalError::BaselineFirst(_))
        ));
    }

    #[test]
    fn identical_cells_match_and_parallel_agrees() {
        let (tr, va, te, cfg) = tiny();
        let splits = Splits {
            train: &tr,
            val: &va,
            test: &te,
        };
        let spec = ModelSpec::desk(32);
        let combos = [
            LossConfig::baseline(),
            LossConfig::baseline(),
            "100+20+mse".parse().unwrap(),
        ];
        let serial = run_ablation(&cfg, &spec, &combos, splits, 1).unwrap();
        assert_eq!(serial.rows[0].mae, serial.rows[1].mae);
        assert_eq!(serial.rows[1].improvement, Some(0.0));
        assert_eq!(serial.rows[0].improvement, None);
        let parallel = run_ablation(&cfg, &spec, &combos, splits, 3).unwrap();
        assert_eq!(serial.to_csv(), parallel.to_csv());
        for (a, b) in serial.rows.iter().zip(&parallel.rows) {
            let (ha, hb) = (a.history.as_ref().unwrap(), b.history.as_ref().unwrap());
            assert_eq!(ha.to_csv(false), hb.to_csv(false));
        }
        assert_eq!(serial.rows.iter().filter(|r| r.lowest).count(), 1);
    }

    #[test]
    fn single_row_has_no_improvement() {
        let (tr, va, te, cfg) = tiny();
        let splits = Splits {
            train: &tr,
            val: &va,
            test: &te,
        };
        let report = run_ablation(&cfg, &ModelSpec::desk(32), &[LossConfig::baseline()], splits, 1).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(report.rows[0].improvement.is_none() && report.rows[0].relative_improvement.is_none());
        assert!(report.rows[0].lowest);
    }

    #[test]
    fn failed_cell_does_not_stop_the_rest() {
        let (tr, va, te, cfg) = tiny();
        let splits = Splits {
            train: &tr,
            val: &va,
            test: &te,
        };
        // no width-1 head, so the default policy cannot score it
        let combos = [
            LossConfig::baseline(),
            "20+mse".parse().unwrap(),
            "100+5".parse().unwrap(),
        ];
        let report = run_ablation(&cfg, &ModelSpec::desk(32), &combos, splits, 1).unwrap();
        assert!(!report.rows[0].failed());
        assert!(report.rows[1].failed());
        assert!(!report.rows[2].failed());
        assert!(report.rows[2].improvement.is_some());
        assert!(report.to_csv().lines().nth(2).unwrap().contains("failed"));
        assert!(!report.all_failed());
    }

    fn synthetic_report(maes: &[f64]) -> AblationReport {
        let ladder = LossConfig::default_ladder();
        let base = maes[0];
        AblationReport {
            rows: maes
                .iter()
                .zip(ladder)
                .enumerate()
                .map(|(i, (&m, c))| AblationRow {
                    loss_combination: c,
                    mae: Some(m),
                    improvement: (i > 0).then_some(base - m),
                    relative_improvement: (i > 0).then(|| (base - m) / base),
                    lowest: i == maes.len() - 1,
                    error: None,
                    history: None,
                })
                .collect(),
        }
    }

    #[test]
    fn table_layout() {
        let table = synthetic_report(&[7.35, 6.9, 6.5, 6.2, 6.11]).to_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 7);
        for col in [
            "100-classes",
            "20-classes",
            "10-classes",
            "5-classes",
            "mse",
            "MAE",
            "improvement",
            "relative",
        ] {
            assert!(lines[0].contains(col), "{col}");
        }
        assert!(lines[6].contains("6.11*"));
        assert!(lines[6].contains("1.24"));
        assert!(lines[6].contains("17%"));
        // baseline row: blank improvement columns
        let baseline: Vec<&str> = lines[2].split('|').map(str::trim).collect();
        assert_eq!(baseline.len(), 8);
        assert_eq!(&baseline[5..], &["7.35", "", ""]);
    }
}
