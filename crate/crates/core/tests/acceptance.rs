//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1 to 6 run the invariant families. Criteria 7 to 9 train the
//! default five-row ablation ladder on the synthetic desk splits twice.
//! A line tagged "reported as finding" is a criterion that allows a failed
//! comparison to be reported instead of met; it does not fail the run.

use std::time::{Duration, Instant};

use granage::cli::{RunConfig, SplitName};
use granage::data::Dataset;
use granage::eval::{run_ablation, AblationReport, Splits};
use granage::losses::LossConfig;
use granage::verify::{run_family, Family, Implementations};

const QUANTIZE_BUDGET: Duration = Duration::from_secs(1);
const HIERARCHY_BUDGET: Duration = Duration::from_secs(1);
const GRADIENT_BUDGET: Duration = Duration::from_secs(30);
const DESK_BUDGET: Duration = Duration::from_secs(600);
const REQUIRED_LOSS_DROP: f64 = 0.5;
const FALLBACK_SEEDS: [u64; 2] = [1, 2];
const TABLE_COLUMNS: [&str; 8] = [
    "100-classes",
    "20-classes",
    "10-classes",
    "5-classes",
    "mse",
    "MAE",
    "improvement",
    "relative",
];

#[derive(PartialEq)]
enum Outcome {
    Pass,
    Fail,
    Finding,
}

struct Tally {
    hard_failures: Vec<u32>,
}

impl Tally {
    fn record(&mut self, id: u32, name: &str, outcome: Outcome, detail: &str) {
        let tag = match outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Finding => "FAIL (reported as finding)",
        };
        println!("criterion {id} [{name}]: {tag}  {detail}");
        if outcome == Outcome::Fail {
            self.hard_failures.push(id);
        }
    }

    fn check(&mut self, id: u32, name: &str, ok: bool, detail: &str) {
        self.record(id, name, if ok { Outcome::Pass } else { Outcome::Fail }, detail);
    }
}

fn family(tally: &mut Tally, id: u32, name: &str, family: Family, budget: Option<Duration>) {
    let r = run_family(family, &Implementations::default());
    let in_time = budget.is_none_or(|b| r.elapsed < b);
    let budget_note = budget.map(|b| format!(", budget {}s", b.as_secs())).unwrap_or_default();
    let detail = format!("{} ({:.3}s{budget_note})", r.detail, r.elapsed.as_secs_f64());
    tally.check(id, name, r.passed && in_time, &detail);
}

fn desk_ablation(cfg: &RunConfig, seed: u64, ladder: &[LossConfig], data: &[Dataset; 3]) -> (AblationReport, Duration) {
    let mut train = cfg.train.clone();
    train.seed = seed;
    let started = Instant::now();
    let splits = Splits {
        train: &data[0],
        val: &data[1],
        test: &data[2],
    };
    let report = run_ablation(&train, &cfg.model, ladder, splits, 1).expect("ladder is well formed");
    (report, started.elapsed())
}

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

fn histories(report: &AblationReport) -> Vec<String> {
    report
        .rows
        .iter()
        .map(|r| r.history.as_ref().map(|h| h.to_csv(false)).unwrap_or_default())
        .collect()
}

fn main() {
    let mut tally = Tally {
        hard_failures: Vec::new(),
    };

    family(
        &mut tally,
        1,
        "quantization oracle",
        Family::Quantize,
        Some(QUANTIZE_BUDGET),
    );
    family(
        &mut tally,
        2,
        "hierarchy consistency",
        Family::Hierarchy,
        Some(HIERARCHY_BUDGET),
    );
    family(&mut tally, 3, "gradient check", Family::Gradient, Some(GRADIENT_BUDGET));
    family(&mut tally, 4, "loss composition", Family::Composition, None);
    family(&mut tally, 5, "plateau scheduler", Family::Scheduler, None);
    family(&mut tally, 6, "MAE oracle", Family::Mae, None);

    // Defaults: desk backbone at 32 px, 2000/500/500 synthetic samples, 30 epochs.
    let cfg = RunConfig::load(None, &[]).expect("defaults are valid");
    let data = [SplitName::Train, SplitName::Val, SplitName::Test].map(|s| cfg.load_split(s).expect("synthetic split"));
    let ladder = LossConfig::default_ladder();
    let (first, elapsed) = desk_ablation(&cfg, cfg.train.seed, &ladder, &data);
    print!("{}", first.to_table());

    let baseline = &first.rows[0];
    let full = first.rows.last().unwrap();
    let full_history = full.history.as_ref().expect("full cell trained");
    let (epoch1, last) = (
        full_history.records[0].train_loss,
        full_history.records.last().unwrap().train_loss,
    );
    let drop = 1.0 - last / epoch1;
    tally.check(
        7,
        "desk run: training loss drop",
        drop >= REQUIRED_LOSS_DROP,
        &format!(
            "full configuration {epoch1:.3} -> {last:.3} ({:.1}% drop, need 50%)",
            100.0 * drop
        ),
    );
    tally.check(
        7,
        "desk run: runtime",
        elapsed < DESK_BUDGET,
        &format!(
            "{} cells in {:.1}s, budget {}s",
            first.rows.len(),
            elapsed.as_secs_f64(),
            DESK_BUDGET.as_secs()
        ),
    );

    let (base_mae, full_mae) = (baseline.mae.unwrap(), full.mae.unwrap());
    if full_mae <= base_mae {
        tally.check(
            7,
            "desk run: full vs single loss",
            true,
            &format!("seed {}: full {full_mae:.4} <= baseline {base_mae:.4}", cfg.train.seed),
        );
    } else {
        let mut base = [base_mae, 0.0, 0.0];
        let mut fulls = [full_mae, 0.0, 0.0];
        let pair = [LossConfig::baseline(), LossConfig::full()];
        for (i, seed) in FALLBACK_SEEDS.into_iter().enumerate() {
            let (r, _) = desk_ablation(&cfg, seed, &pair, &data);
            base[i + 1] = r.rows[0].mae.unwrap();
            fulls[i + 1] = r.rows[1].mae.unwrap();
        }
        let (mb, mf) = (median3(base), median3(fulls));
        let detail = format!(
            "seed {} full {full_mae:.4} > baseline {base_mae:.4}; 3-seed medians full {mf:.4} vs baseline {mb:.4} \
             (baseline {base:.4?}, full {fulls:.4?})",
            cfg.train.seed
        );
        let outcome = if mf <= mb { Outcome::Pass } else { Outcome::Finding };
        tally.record(7, "desk run: full vs single loss", outcome, &detail);
    }

    let (second, _) = desk_ablation(&cfg, cfg.train.seed, &ladder, &data);
    let header: Vec<String> = first
        .to_table()
        .lines()
        .next()
        .unwrap_or_default()
        .split('|')
        .map(|c| c.trim().to_string())
        .collect();
    let structure_ok = header == TABLE_COLUMNS;
    let stable = first.to_csv() == second.to_csv() && first.to_table() == second.to_table();
    tally.check(
        8,
        "ablation report",
        structure_ok && stable && !first.rows.iter().any(|r| r.failed()),
        &format!(
            "columns {header:?}; byte-stable across runs: {stable}. Absolute MAEs are synthetic-data values \
             and are not comparable with published face-age results"
        ),
    );
    let same_histories = histories(&first) == histories(&second);
    tally.check(
        9,
        "determinism",
        same_histories,
        &format!(
            "history CSVs of all {} cells identical on rerun: {same_histories}",
            first.rows.len()
        ),
    );

    if !tally.hard_failures.is_empty() {
        eprintln!("failed criteria: {:?}", tally.hard_failures);
        std::process::exit(1);
    }
}
