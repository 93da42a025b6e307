//! Built-in self checks. Each check exercises one mathematical invariant
//! on freshly built randomized models and reports a named pass/fail with
//! the measured quantity, so a failure points at the broken property
//! rather than at a test file.
//!
//! `Fast` covers invertibility, metric-oracle agreement, attention gate
//! bounds, and the identity start; it is meant to finish in seconds.
//! `Full` adds finite-difference cross-checks of the log-determinant and
//! of every parameter gradient, which are minutes-scale.

use crate::error::Error;
use crate::eval::{auroc, auroc_bruteforce, sample_standard_normal};
use crate::flow::{
    flow_forward, flow_inverse, nll_grad_check, numerical_logdet_oracle, FlowModel,
};
use crate::parallel::map_indexed;
use crate::rng::{seeded, sub_seed};
use crate::scalar::Scalar;
use crate::subnet::{
    cbam_apply, channel_attention, spatial_attention, subnet_init, SubnetConfig, SubnetParams,
    Variant,
};
use crate::tensor::{Shape, Tensor};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

/// How much of the suite to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyLevel {
    Fast,
    Full,
}

impl fmt::Display for VerifyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerifyLevel::Fast => "fast",
            VerifyLevel::Full => "full",
        })
    }
}

impl FromStr for VerifyLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "fast" => Ok(VerifyLevel::Fast),
            "full" => Ok(VerifyLevel::Full),
            other => Err(Error::contract(
                "verify_level",
                format!("unknown level {other:?}, expected fast or full"),
            )),
        }
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

type Check = Box<dyn Fn() -> (bool, String) + Send + Sync>;

/// Wraps a fallible check body; an error is a failure, not an abort.
fn outcome(body: impl FnOnce() -> crate::error::Result<(bool, String)>) -> (bool, String) {
    body().unwrap_or_else(|e| (false, format!("errored: {e}")))
}

fn randomized_model<T: Scalar>(variant: Variant, steps: usize, seed: u64) -> crate::error::Result<FlowModel<T>> {
    let mut model = FlowModel::<T>::new((4, 6, 6), steps, variant, None, Some(T::from_f64(1.9)), seed)?;
    model.randomize(sub_seed(seed, 1), 0.1);
    let mean: Vec<T> = (0..4).map(|c| T::from_f64(0.1 * c as f64 - 0.2)).collect();
    let std: Vec<T> = (0..4).map(|c| T::from_f64(0.8 + 0.2 * c as f64)).collect();
    model.set_feature_norm(mean, std)?;
    Ok(model)
}

fn bijectivity_error<T: Scalar>(variant: Variant, steps: usize, seed: u64) -> crate::error::Result<f64> {
    let model = randomized_model::<T>(variant, steps, seed)?;
    let x = sample_standard_normal::<T>(Shape::new(8, 4, 6, 6), sub_seed(seed, 2));
    let out = flow_forward(&x, &model)?;
    let back = flow_inverse(&out.z, &model)?;
    Ok(back.max_abs_diff(&x))
}

fn bijectivity_check(variant: Variant, steps: usize) -> (String, Check) {
    let name = format!("bijectivity/{variant}/k{steps}");
    let check: Check = Box::new(move || {
        outcome(|| {
            let seed = 100 + steps as u64;
            let e32 = bijectivity_error::<f32>(variant, steps, seed)?;
            let e64 = bijectivity_error::<f64>(variant, steps, seed)?;
            let passed = e32 < 1e-6 && e64 < 1e-10;
            Ok((passed, format!("round-trip error f32 {e32:.2e} (tol 1e-6), f64 {e64:.2e} (tol 1e-10)")))
        })
    });
    (name, check)
}

fn identity_start_check(variant: Variant) -> (String, Check) {
    let name = format!("identity-start/{variant}");
    let check: Check = Box::new(move || {
        outcome(|| {
            let model = FlowModel::<f64>::new((4, 6, 6), 2, variant, None, Some(1.9), 7)?;
            let x = sample_standard_normal::<f64>(Shape::new(4, 4, 6, 6), 13);
            let out = flow_forward(&x, &model)?;
            let z_err = out.z.max_abs_diff(&x);
            let ld_max = out.logdet.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            Ok((
                z_err == 0.0 && ld_max == 0.0,
                format!("fresh model: |z - x| = {z_err:.1e}, max |logdet| = {ld_max:.1e} (both must be 0)"),
            ))
        })
    });
    (name, check)
}

fn auroc_oracle_check() -> (String, Check) {
    let name = "auroc/oracle-agreement".to_string();
    let check: Check = Box::new(|| {
        outcome(|| {
            let mut rng = seeded(31);
            let mut worst = 0.0f64;
            for _ in 0..100 {
                let m = rng.random_range(1..50);
                let n = rng.random_range(1..50);
                let pos: Vec<f64> = (0..m).map(|_| rng.random_range(0..8) as f64).collect();
                let neg: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
                let gap = (auroc(&pos, &neg)? - auroc_bruteforce(&pos, &neg)?).abs();
                worst = worst.max(gap);
            }
            Ok((worst < 1e-12, format!("rank-sum vs pair-count worst gap {worst:.2e} over 100 tie-heavy instances (tol 1e-12)")))
        })
    });
    (name, check)
}

fn gate_bounds_check() -> (String, Check) {
    let name = "cbam/gate-bounds".to_string();
    let check: Check = Box::new(|| {
        outcome(|| {
            let cfg = SubnetConfig {
                variant: Variant::Ca,
                in_channels: 4,
                hidden_channels: 4,
                out_channels: 8,
                seed: 5,
            };
            let mut params = subnet_init::<f64>(&cfg)?;
            let mut rng = seeded(41);
            params.visit_mut("", &mut |_, t| {
                for v in t.data_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
            });
            let cbam = match &params {
                SubnetParams::Ca { cbam, .. } => cbam,
                _ => unreachable!("built as ca"),
            };
            // conv-then-attend wiring: the gates see the conv output width
            let gated_c = cfg.out_channels;
            let x = sample_standard_normal::<f64>(Shape::new(2, gated_c, 5, 5), 43).scale_add(2.0, 0.0);
            let gc = channel_attention(&x, &cbam.channel)?;
            let gs = spatial_attention(&x, &cbam.spatial)?;
            let open_unit = |t: &Tensor<f64>| t.data().iter().all(|&v| v > 0.0 && v < 1.0);
            let gated = cbam_apply(&x, &cbam.channel, &cbam.spatial)?;
            let contractive = gated
                .data()
                .iter()
                .zip(x.data())
                .all(|(g, v)| g.abs() <= v.abs());
            let passed = open_unit(&gc) && open_unit(&gs) && contractive && gated.is_finite();
            Ok((passed, format!(
                "channel gate in (0,1): {}, spatial gate in (0,1): {}, gating contracts magnitudes: {contractive}",
                open_unit(&gc), open_unit(&gs),
            )))
        })
    });
    (name, check)
}

fn logdet_check(variant: Variant, steps: usize) -> (String, Check) {
    let name = format!("logdet-fd/{variant}/k{steps}");
    let check: Check = Box::new(move || {
        outcome(|| {
            let seed = 300 + steps as u64;
            let mut model =
                FlowModel::<f64>::new((4, 2, 2), steps, variant, None, Some(1.9), seed)?;
            model.randomize(sub_seed(seed, 1), 0.1);
            let mean: Vec<f64> = (0..4).map(|c| 0.05 * c as f64).collect();
            let std: Vec<f64> = (0..4).map(|c| 0.9 + 0.1 * c as f64).collect();
            model.set_feature_norm(mean, std)?;
            let x = sample_standard_normal::<f64>(Shape::new(1, 4, 2, 2), sub_seed(seed, 2));
            let analytic = flow_forward(&x, &model)?.logdet[0];
            let numeric = numerical_logdet_oracle(&x, &model, 1e-5)?;
            let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
            Ok((rel < 1e-3, format!("analytic {analytic:.6} vs finite-difference {numeric:.6}, relative gap {rel:.2e} (tol 1e-3)")))
        })
    });
    (name, check)
}

fn grad_check(variant: Variant, steps: usize) -> (String, Check) {
    let name = format!("gradcheck/{variant}/k{steps}");
    let check: Check = Box::new(move || {
        outcome(|| {
            let seed = 500 + steps as u64;
            let mut model =
                FlowModel::<f64>::new((4, 2, 2), steps, variant, None, Some(1.9), seed)?;
            model.randomize(sub_seed(seed, 1), 0.1);
            let x = sample_standard_normal::<f64>(Shape::new(2, 4, 2, 2), sub_seed(seed, 2));
            let checks = nll_grad_check(&model, &x, 1e-5)?;
            let (worst_name, worst) = checks
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(n, e)| (n.clone(), *e))
                .expect("models have parameters");
            Ok((worst < 1e-4, format!("worst of {} parameters: {worst:.2e} at {worst_name} (tol 1e-4)", checks.len())))
        })
    });
    (name, check)
}

/// Runs the suite at `level`. Checks are independent and run in parallel;
/// results keep a fixed order and depend only on the level.
pub fn run(level: VerifyLevel) -> Vec<CheckResult> {
    let mut cases: Vec<(String, Check)> = Vec::new();
    for variant in Variant::ALL {
        for steps in [1, 2] {
            cases.push(bijectivity_check(variant, steps));
        }
    }
    for variant in Variant::ALL {
        cases.push(identity_start_check(variant));
    }
    cases.push(auroc_oracle_check());
    cases.push(gate_bounds_check());
    if level == VerifyLevel::Full {
        for variant in Variant::ALL {
            for steps in [1, 2] {
                cases.push(logdet_check(variant, steps));
                cases.push(grad_check(variant, steps));
            }
        }
    }
    map_indexed(cases.len(), |i| {
        let (name, check) = &cases[i];
        let (passed, detail) = check();
        CheckResult { name: name.clone(), passed, detail }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suite_passes_and_names_every_check() {
        let results = run(VerifyLevel::Fast);
        assert!(all_passed(&results), "{results:#?}");
        assert_eq!(results.len(), 8 + 4 + 2);
        for r in &results {
            assert!(!r.name.is_empty() && !r.detail.is_empty());
        }
        let names: std::collections::HashSet<_> = results.iter().map(|r| &r.name).collect();
        assert_eq!(names.len(), results.len(), "check names must be unique");
        assert!(names.iter().any(|n| n.contains("bijectivity/cac/k2")));
        assert!(names.iter().any(|n| n.contains("auroc")));
        assert!(names.iter().any(|n| n.contains("cbam")));
    }

    #[test]
    fn full_suite_adds_derivative_checks() {
        let results = run(VerifyLevel::Full);
        assert!(all_passed(&results), "{results:#?}");
        let fast = run(VerifyLevel::Fast);
        assert_eq!(results.len(), fast.len() + 16);
        assert!(results.iter().any(|r| r.name.starts_with("logdet-fd/")));
        assert!(results.iter().any(|r| r.name.starts_with("gradcheck/")));
        // the fast prefix is stable across levels
        for (a, b) in fast.iter().zip(&results) {
            assert_eq!(a.name, b.name);
        }
    }

    #[test]
    fn level_parsing_round_trips() {
        assert_eq!("fast".parse::<VerifyLevel>().unwrap(), VerifyLevel::Fast);
        assert_eq!("full".parse::<VerifyLevel>().unwrap(), VerifyLevel::Full);
        assert!("medium".parse::<VerifyLevel>().is_err());
        assert_eq!(VerifyLevel::Full.to_string(), "full");
    }
}
