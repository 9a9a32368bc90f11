//! On-demand invariant checks against brute-force oracles.
//!
//! The functions under test are passed in through [`Implementations`], so a
//! harness can substitute a faulty version and confirm the matching family
//! reports it.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::synth_age;
use crate::eval::{self, EvalError};
use crate::granularity::{
    self, make_spec, AgeLabel, GranularityError, GranularitySpec, AGE_MAX, AGE_MIN, CANONICAL_WIDTHS,
};
use crate::losses::{self, cross_entropy, LossBreakdown, LossConfig, LossError};
use crate::model::{BranchId, BranchOutputs};
use crate::rng;
use crate::train::plateau_lr_from_losses;

const VERIFY_SEED: u64 = 0x5645_5249; // "VERI"
pub const GRADIENT_CASES: usize = 100;
pub const FD_STEP: f64 = 1e-5;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Relative error denominator never drops below this.
pub const GRADIENT_FLOOR: f64 = 1e-3;
pub const COMPOSITION_CASES: usize = 1000;
pub const COMPOSITION_ULPS: u64 = 8;
pub const MAE_ULPS: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Family {
    Quantize,
    Hierarchy,
    Gradient,
    Composition,
    Scheduler,
    Mae,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Quantize,
        Family::Hierarchy,
        Family::Gradient,
        Family::Composition,
        Family::Scheduler,
        Family::Mae,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Quantize => "quantize",
            Family::Hierarchy => "hierarchy",
            Family::Gradient => "gradient",
            Family::Composition => "composition",
            Family::Scheduler => "scheduler",
            Family::Mae => "mae",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|f| f.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(Family::as_str).collect();
            format!("unknown family '{s}' (expected one of: {})", names.join(", "))
        })
    }
}

type QuantizeFn = fn(AgeLabel, &GranularitySpec) -> Result<usize, GranularityError>;
type CoarsenFn = fn(usize, &GranularitySpec, &GranularitySpec) -> Result<usize, GranularityError>;
type AggregateFn = fn(&BranchOutputs, AgeLabel, &LossConfig) -> Result<LossBreakdown, LossError>;
type GradientFn = fn(&BranchOutputs, AgeLabel, &LossConfig) -> Result<BranchOutputs, LossError>;
type PlateauFn = fn(&[f64], f64, usize, f64) -> f64;
type MaeFn = fn(&[f64], &[f64]) -> Result<f64, EvalError>;

/// The functions each family exercises.
#[derive(Clone, Copy)]
pub struct Implementations {
    pub quantize: QuantizeFn,
    pub coarsen: CoarsenFn,
    pub aggregate_loss: AggregateFn,
    pub loss_gradients: GradientFn,
    pub plateau_lr: PlateauFn,
    pub mae: MaeFn,
}

impl Default for Implementations {
    fn default() -> Self {
        Self {
            quantize: granularity::quantize,
            coarsen: granularity::coarsen,
            aggregate_loss: losses::aggregate_loss,
            loss_gradients: losses::loss_gradients,
            plateau_lr: plateau_lr_from_losses,
            mae: eval::mae,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FamilyResult {
    pub family: Family,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for FamilyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<12} {}  {} ({:.3}s)",
            self.family.as_str(),
            if self.passed { "PASS" } else { "FAIL" },
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// Distance in representable doubles; `u64::MAX` when signs differ.
pub fn ulp_distance(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    if a.is_sign_negative() != b.is_sign_negative() || !a.is_finite() || !b.is_finite() {
        return u64::MAX;
    }
    a.to_bits().abs_diff(b.to_bits())
}

pub fn run_family(family: Family, imp: &Implementations) -> FamilyResult {
    let started = Instant::now();
    let outcome = match family {
        Family::Quantize => check_quantize(imp),
        Family::Hierarchy => check_hierarchy(imp),
        Family::Gradient => check_gradient(imp),
        Family::Composition => check_composition(imp),
        Family::Scheduler => check_scheduler(imp),
        Family::Mae => check_mae(imp),
    };
    let (passed, detail) = match outcome {
        Ok(detail) => (true, detail),
        Err(detail) => (false, detail),
    };
    FamilyResult {
        family,
        passed,
        detail,
        elapsed: started.elapsed(),
    }
}

pub fn run_families(families: &[Family], imp: &Implementations) -> Vec<FamilyResult> {
    families.iter().map(|&f| run_family(f, imp)).collect()
}

type Check = Result<String, String>;

/// Class of `age` found by scanning the bins `[lo, lo + width)` in order.
fn enumerated_class(age: u32, width: u32) -> usize {
    let mut lo = AGE_MIN;
    let mut k = 0;
    while !(lo..lo + width).contains(&age) {
        lo += width;
        k += 1;
    }
    k
}

fn check_quantize(imp: &Implementations) -> Check {
    let mut checked = 0;
    for w in CANONICAL_WIDTHS {
        let spec = make_spec(w).map_err(|e| e.to_string())?;
        for age in AGE_MIN..=AGE_MAX {
            let got = (imp.quantize)(AgeLabel::new(age as f64), &spec).map_err(|e| e.to_string())?;
            let want = enumerated_class(age, w);
            if got != want {
                return Err(format!("age {age}, width {w}: got class {got}, expected {want}"));
            }
            checked += 1;
        }
    }
    let example: Vec<usize> = CANONICAL_WIDTHS
        .iter()
        .map(|&w| (imp.quantize)(AgeLabel::new(44.0), &make_spec(w).unwrap()).unwrap_or(usize::MAX))
        .collect();
    if example != [43, 8, 4, 2] {
        return Err(format!("age 44 maps to {example:?}, expected [43, 8, 4, 2]"));
    }
    Ok(format!(
        "{checked} (age, width) pairs match interval enumeration; 44 -> 43/8/4/2"
    ))
}

fn check_hierarchy(imp: &Implementations) -> Check {
    let mut checked = 0;
    for &fine in &CANONICAL_WIDTHS {
        for &coarse in &CANONICAL_WIDTHS {
            if coarse <= fine || coarse % fine != 0 {
                continue;
            }
            let (fs, cs) = (make_spec(fine).unwrap(), make_spec(coarse).unwrap());
            for age in AGE_MIN..=AGE_MAX {
                let a = AgeLabel::new(age as f64);
                let fi = (imp.quantize)(a, &fs).map_err(|e| e.to_string())?;
                let via = (imp.coarsen)(fi, &fs, &cs).map_err(|e| e.to_string())?;
                let direct = (imp.quantize)(a, &cs).map_err(|e| e.to_string())?;
                if via != direct {
                    return Err(format!(
                        "age {age}: width {fine} class {fi} coarsens to {via}, width {coarse} gives {direct}"
                    ));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} (age, nested pair) cases consistent"))
}

fn random_outputs(r: &mut impl Rng, widths: &[u32], regression: Option<f64>) -> BranchOutputs {
    let logit = Normal::new(0.0, 3.0).unwrap();
    let mut out = BranchOutputs {
        regression,
        ..Default::default()
    };
    for &w in widths {
        let n = make_spec(w).unwrap().num_classes();
        out.class_logits.insert(w, (0..n).map(|_| logit.sample(r)).collect());
    }
    out
}

/// Perturbs one output coordinate; `None` indexes the regression node.
fn nudge(out: &BranchOutputs, coord: (Option<u32>, usize), delta: f64) -> BranchOutputs {
    let mut o = out.clone();
    match coord {
        (Some(w), k) => o.class_logits.get_mut(&w).unwrap()[k] += delta,
        (None, _) => *o.regression.as_mut().unwrap() += delta,
    }
    o
}

fn check_gradient(imp: &Implementations) -> Check {
    let mut r = rng::stream(VERIFY_SEED, &[1]);
    let mut worst = 0.0f64;
    let mut cases = 0;
    // one classification branch per term set, plus regression alone
    let term_sets: Vec<Option<u32>> = CANONICAL_WIDTHS.iter().map(|&w| Some(w)).chain([None]).collect();
    for term in term_sets {
        for _ in 0..GRADIENT_CASES {
            let age = AgeLabel::new(r.random_range(1.0..=100.0));
            let lambda = r.random_range(0.1..2.0);
            // keep regression errors within 20 years so the step's roundoff stays small
            let y_hat = age.years() + r.random_range(-20.0..20.0);
            let (widths, config) = match term {
                Some(w) => (vec![w], LossConfig::new([w], true, lambda)),
                None => (vec![], LossConfig::new([], true, lambda)),
            };
            let config = config.map_err(|e| e.to_string())?;
            let out = random_outputs(&mut r, &widths, Some(y_hat));
            let analytic = (imp.loss_gradients)(&out, age, &config).map_err(|e| e.to_string())?;

            let mut coords: Vec<(Option<u32>, usize, f64)> = Vec::new();
            for (&w, g) in &analytic.class_logits {
                coords.extend(g.iter().enumerate().map(|(k, &v)| (Some(w), k, v)));
            }
            coords.push((None, 0, analytic.regression.unwrap_or(f64::NAN)));
            for (w, k, a) in coords {
                let loss = |d| (imp.aggregate_loss)(&nudge(&out, (w, k), d), age, &config).map(|b| b.aggregate);
                let plus = loss(FD_STEP).map_err(|e| e.to_string())?;
                let minus = loss(-FD_STEP).map_err(|e| e.to_string())?;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
                if !(rel <= GRADIENT_TOLERANCE) {
                    let name = w.map_or("mse".to_string(), |w| BranchId::Classification(w).label());
                    return Err(format!(
                        "{name}[{k}]: analytic {a:e}, finite difference {numeric:e}, relative error {rel:e}"
                    ));
                }
                worst = worst.max(rel);
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} instances, max relative error {worst:.2e}"))
}

fn check_composition(imp: &Implementations) -> Check {
    let mut r = rng::stream(VERIFY_SEED, &[2]);
    let full = LossConfig::full();
    let mut worst = 0;
    for case in 0..COMPOSITION_CASES {
        let age = AgeLabel::new(r.random_range(1.0..=100.0));
        let y_hat = r.random_range(-10.0..110.0);
        let out = random_outputs(&mut r, &CANONICAL_WIDTHS, Some(y_hat));
        let got = (imp.aggregate_loss)(&out, age, &full)
            .map_err(|e| e.to_string())?
            .aggregate;
        let mut expected = 0.0;
        for w in CANONICAL_WIDTHS {
            let target = enumerated_class(age.years().round() as u32, w);
            expected += cross_entropy(out.logits(w).unwrap(), target).map_err(|e| e.to_string())?;
        }
        let d = y_hat - age.years();
        expected += d * d;
        let ulps = ulp_distance(got, expected);
        if ulps > COMPOSITION_ULPS {
            return Err(format!(
                "case {case}: aggregate {got:e} vs term sum {expected:e} ({ulps} ulps)"
            ));
        }
        worst = worst.max(ulps);
    }

    for combo in LossConfig::default_ladder() {
        let age = AgeLabel::new(r.random_range(1.0..=100.0));
        let y_hat = r.random_range(1.0..100.0);
        let out = random_outputs(&mut r, &CANONICAL_WIDTHS, Some(y_hat));
        let breakdown = (imp.aggregate_loss)(&out, age, &combo).map_err(|e| e.to_string())?;
        let terms: Vec<BranchId> = breakdown.per_branch.keys().copied().collect();
        if terms != combo.active_branches() {
            return Err(format!("{combo}: terms {terms:?} do not match the active set"));
        }
        let grads = (imp.loss_gradients)(&out, age, &combo).map_err(|e| e.to_string())?;
        for w in CANONICAL_WIDTHS {
            let zero = grads.logits(w).unwrap().iter().all(|&g| g == 0.0);
            if zero == combo.active_granularities().contains(&w) {
                return Err(format!("{combo}: width {w} gradient zero = {zero}"));
            }
        }
        if (grads.regression == Some(0.0)) == combo.use_regression() {
            return Err(format!("{combo}: regression gradient {:?}", grads.regression));
        }
    }
    Ok(format!(
        "{COMPOSITION_CASES} cases within {worst} ulps; ladder masks zero exactly the inactive terms"
    ))
}

fn check_scheduler(imp: &Implementations) -> Check {
    let (lr0, patience, factor) = (1e-3, 8, 10.0);
    // best at epoch 1, flat afterwards
    let history: Vec<f64> = std::iter::once(1.0).chain(std::iter::repeat_n(1.5, 15)).collect();
    for epoch in 1..=10 {
        let lr = (imp.plateau_lr)(&history[..epoch - 1], lr0, patience, factor);
        let want = if epoch <= 9 { 1e-3 } else { 1e-4 };
        if lr != want {
            return Err(format!("epoch {epoch}: lr {lr:e}, expected {want:e}"));
        }
    }
    let mut r = rng::stream(VERIFY_SEED, &[3]);
    for _ in 0..100 {
        let mut loss = r.random_range(1.0..10.0);
        let mut history = Vec::new();
        for _ in 0..r.random_range(1..60) {
            history.push(loss);
            loss -= r.random_range(1e-6..0.1);
        }
        for e in 0..=history.len() {
            let lr = (imp.plateau_lr)(&history[..e], lr0, patience, factor);
            if lr != lr0 {
                return Err(format!(
                    "strictly decreasing history decayed to {lr:e} after {e} epochs"
                ));
            }
        }
    }
    Ok("plateau after epoch 1 decays at epoch 10; decreasing histories never decay".into())
}

fn check_mae(imp: &Implementations) -> Check {
    let mut r = rng::stream(VERIFY_SEED, &[4]);
    let mut worst = 0;
    for _ in 0..200 {
        let n = r.random_range(1..500);
        let p: Vec<f64> = (0..n).map(|_| r.random_range(-20.0..120.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| r.random_range(1.0..100.0)).collect();
        let got = (imp.mae)(&p, &t).map_err(|e| e.to_string())?;
        let mut sum = 0.0;
        for i in 0..n {
            sum += if p[i] > t[i] { p[i] - t[i] } else { t[i] - p[i] };
        }
        let want = sum / n as f64;
        let ulps = ulp_distance(got, want);
        if ulps > MAE_ULPS {
            return Err(format!("n = {n}: mae {got:e}, brute force {want:e} ({ulps} ulps)"));
        }
        worst = worst.max(ulps);
    }
    let n = 10_000;
    let ages: Vec<f64> = (0..n).map(|i| synth_age(VERIFY_SEED, i)).collect();
    let midpoint = vec![(AGE_MIN + AGE_MAX) as f64 / 2.0; n as usize];
    let constant = (imp.mae)(&midpoint, &ages).map_err(|e| e.to_string())?;
    if (constant - 25.0).abs() > 1.0 {
        return Err(format!("constant midpoint predictor MAE {constant}, expected 25 +- 1"));
    }
    Ok(format!(
        "random vectors within {worst} ulps; midpoint predictor MAE {constant:.3}"
    ))
}
