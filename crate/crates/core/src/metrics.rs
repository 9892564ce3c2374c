//! Evaluation metrics and their uncertainty procedures: exact pairwise
//! AUROC with Hanley-McNeil standard errors, percentile-bootstrap
//! confidence intervals, Harrell's C-index, Dice overlap, MAE, F1,
//! Recall@K, and a z-test for comparing two reported metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMethod {
    HanleyMcneil,
    Bootstrap,
    /// Point estimate only; no uncertainty procedure was applied.
    Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub point: f64,
    pub se: f64,
    pub ci95: (f64, f64),
    /// Sample counts; meaning depends on the metric (e.g. [n_pos, n_neg]).
    pub n: Vec<usize>,
    pub method: UncertaintyMethod,
    /// Degenerate bootstrap resamples that had to be redrawn.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub redraws: usize,
    /// Set when the percentile interval failed to bracket the point estimate.
    #[serde(default, skip_serializing_if = "is_false")]
    pub pathological: bool,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}
fn is_false(v: &bool) -> bool {
    !*v
}

impl MetricReport {
    pub fn point_only(name: impl Into<String>, point: f64, n: Vec<usize>) -> Self {
        MetricReport {
            name: name.into(),
            point,
            se: 0.0,
            ci95: (point, point),
            n,
            method: UncertaintyMethod::Point,
            redraws: 0,
            pathological: false,
        }
    }
}

/// Midrank-based AUROC: `P(score_pos > score_neg) + 0.5 P(tie)` over all
/// positive x negative pairs.
pub fn auroc_value(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::data(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n1 = labels.iter().filter(|&&l| l).count();
    let n2 = labels.len() - n1;
    if n1 == 0 || n2 == 0 {
        return Err(Error::data(
            "AUROC needs both classes present".to_string(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::data("non-finite score".to_string()));
    }
    // midranks: ties share the average of the ranks they would occupy
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = (0..scores.len())
        .filter(|&i| labels[i])
        .map(|i| ranks[i])
        .sum();
    let u = rank_sum_pos - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 as f64 * n2 as f64))
}

/// Hanley-McNeil standard error of an AUROC estimate.
pub fn hanley_mcneil_se(a: f64, n_pos: usize, n_neg: usize) -> f64 {
    let q1 = a / (2.0 - a);
    let q2 = 2.0 * a * a / (1.0 + a);
    let n1 = n_pos as f64;
    let n2 = n_neg as f64;
    let var =
        (a * (1.0 - a) + (n1 - 1.0) * (q1 - a * a) + (n2 - 1.0) * (q2 - a * a)) / (n1 * n2);
    var.max(0.0).sqrt()
}

pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<MetricReport> {
    let a = auroc_value(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    let se = hanley_mcneil_se(a, n_pos, n_neg);
    Ok(MetricReport {
        name: "auroc".into(),
        point: a,
        se,
        ci95: (
            (a - 1.96 * se).max(0.0),
            (a + 1.96 * se).min(1.0),
        ),
        n: vec![n_pos, n_neg],
        method: UncertaintyMethod::HanleyMcneil,
        redraws: 0,
        pathological: false,
    })
}

/// Linear-interpolation empirical quantile of sorted values.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Percentile bootstrap over prediction rows. `metric` maps a resampled
/// index multiset to a value, or `None` when undefined on that resample
/// (the resample is then redrawn, at most [`MAX_REDRAWS`] times per slot).
pub const MAX_REDRAWS: usize = 100;

pub fn bootstrap_ci(
    name: &str,
    n: usize,
    metric: impl Fn(&[usize]) -> Option<f64>,
    n_resamples: usize,
    seed: u64,
) -> Result<MetricReport> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    if n < 2 {
        return Err(Error::data(format!(
            "bootstrap needs at least 2 predictions, got {n}"
        )));
    }
    let identity: Vec<usize> = (0..n).collect();
    let point = metric(&identity)
        .ok_or_else(|| Error::data("metric undefined on the full sample".to_string()))?;
    let mut values = Vec::with_capacity(n_resamples);
    let mut redraws = 0usize;
    let master = ChaCha8Rng::seed_from_u64(seed);
    for r in 0..n_resamples {
        // per-resample stream keeps resamples independent of evaluation order
        let mut rng = master.clone();
        rng.set_stream(r as u64 + 1);
        let mut v = None;
        for _ in 0..=MAX_REDRAWS {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            v = metric(&idx);
            if v.is_some() {
                break;
            }
            redraws += 1;
        }
        let v = v.ok_or_else(|| {
            Error::numerical(format!(
                "metric '{name}' undefined after {MAX_REDRAWS} redraws of one resample"
            ))
        })?;
        values.push(v);
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = quantile_sorted(&values, 0.025);
    let hi = quantile_sorted(&values, 0.975);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let se = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    Ok(MetricReport {
        name: name.into(),
        point,
        se,
        ci95: (lo, hi),
        n: vec![n],
        method: UncertaintyMethod::Bootstrap,
        redraws,
        pathological: !(lo <= point && point <= hi),
    })
}

/// Harrell's concordance: over pairs where subject `i` has an observed
/// event strictly before `j`'s time, count risk orderings `r_i > r_j`
/// (ties half). `times`/`events` follow the survival-record convention.
pub fn c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    if risks.len() != times.len() || risks.len() != events.len() {
        return Err(Error::data("c-index input length mismatch".to_string()));
    }
    let mut comparable = 0u64;
    let mut score = 0.0;
    for i in 0..risks.len() {
        if !events[i] {
            continue;
        }
        for j in 0..risks.len() {
            if i == j || times[i] >= times[j] {
                continue;
            }
            comparable += 1;
            if risks[i] > risks[j] {
                score += 1.0;
            } else if risks[i] == risks[j] {
                score += 0.5;
            }
        }
    }
    if comparable == 0 {
        return Err(Error::data(
            "no comparable pairs for the c-index".to_string(),
        ));
    }
    Ok(score / comparable as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct DiceReport {
    pub micro: f64,
    /// Unweighted mean over foreground classes present in ground truth.
    pub macro_: f64,
    /// Per foreground class (index c-1 for class c); `None` when the class
    /// is absent from ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub absent_classes: Vec<usize>,
}

/// Voxel-overlap Dice over foreground classes `1..n_classes`
/// (class 0 is background).
pub fn dice(pred: &[u8], truth: &[u8], n_classes: usize) -> Result<DiceReport> {
    if pred.len() != truth.len() {
        return Err(Error::data(format!(
            "dice: {} pred voxels vs {} truth voxels",
            pred.len(),
            truth.len()
        )));
    }
    if n_classes < 2 {
        return Err(Error::data("dice needs at least one foreground class".to_string()));
    }
    let mut tp = vec![0u64; n_classes];
    let mut fp = vec![0u64; n_classes];
    let mut fneg = vec![0u64; n_classes];
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        if p as usize >= n_classes || t as usize >= n_classes {
            return Err(Error::data(format!(
                "label out of range: pred {p}, truth {t}, {n_classes} classes"
            )));
        }
        if p == t {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fneg[t as usize] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(n_classes - 1);
    let mut absent = Vec::new();
    let (mut macro_sum, mut macro_n) = (0.0, 0usize);
    let (mut tp_pool, mut fp_pool, mut fn_pool) = (0u64, 0u64, 0u64);
    for c in 1..n_classes {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        let in_truth = tp[c] + fneg[c] > 0;
        tp_pool += tp[c];
        fp_pool += fp[c];
        fn_pool += fneg[c];
        if denom == 0 {
            per_class.push(None);
            absent.push(c);
            continue;
        }
        let d = 2.0 * tp[c] as f64 / denom as f64;
        per_class.push(Some(d));
        if in_truth {
            macro_sum += d;
            macro_n += 1;
        } else {
            absent.push(c);
        }
    }
    if macro_n == 0 {
        return Err(Error::data(
            "no foreground class present in ground truth".to_string(),
        ));
    }
    let micro_denom = 2 * tp_pool + fp_pool + fn_pool;
    let micro = if micro_denom == 0 {
        1.0
    } else {
        2.0 * tp_pool as f64 / micro_denom as f64
    };
    Ok(DiceReport {
        micro,
        macro_: macro_sum / macro_n as f64,
        per_class,
        absent_classes: absent,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Significance {
    pub z: f64,
    pub p: f64,
    pub significant: bool,
    /// Zero combined SE with unequal points: p forced to 0.
    pub degenerate: bool,
}

/// Two-sided z-test on the difference of two independent metric reports.
pub fn significance_test(a: &MetricReport, b: &MetricReport) -> Significance {
    let diff = a.point - b.point;
    let se = (a.se * a.se + b.se * b.se).sqrt();
    if se == 0.0 {
        if diff == 0.0 {
            return Significance {
                z: 0.0,
                p: 1.0,
                significant: false,
                degenerate: false,
            };
        }
        return Significance {
            z: f64::INFINITY * diff.signum(),
            p: 0.0,
            significant: true,
            degenerate: true,
        };
    }
    let z = diff / se;
    let p = statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2);
    Significance {
        z,
        p,
        significant: p < 0.05,
        degenerate: false,
    }
}

pub fn mae_value(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::data(format!(
            "mae: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// F1 of thresholded scores against boolean labels.
pub fn f1_value(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::data("f1: empty or mismatched input".to_string()));
    }
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&s, &l) in scores.iter().zip(labels.iter()) {
        let pred = s >= threshold;
        match (pred, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        return Err(Error::data(
            "f1 undefined: no positives in labels or predictions".to_string(),
        ));
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

/// Mean of per-query hit indicators.
pub fn recall_at_k_value(hits: &[bool]) -> Result<f64> {
    if hits.is_empty() {
        return Err(Error::data("recall@k over zero queries".to_string()));
    }
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Binary outcome "event by the horizon" for fixed-horizon discrimination.
/// Subjects censored before the horizon carry no outcome information and
/// are excluded; the returned indices select the kept subjects.
pub fn horizon_labels(
    times: &[f64],
    events: &[bool],
    horizon: f64,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if times.len() != events.len() {
        return Err(Error::data(format!(
            "{} times vs {} event flags",
            times.len(),
            events.len()
        )));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::config(format!("bad horizon {horizon}")));
    }
    let mut keep = Vec::new();
    let mut labels = Vec::new();
    for i in 0..times.len() {
        if events[i] && times[i] <= horizon {
            keep.push(i);
            labels.push(true);
        } else if times[i] >= horizon {
            keep.push(i);
            labels.push(false);
        }
        // censored before the horizon: dropped
    }
    if keep.is_empty() {
        return Err(Error::data(
            "no subjects evaluable at the horizon".to_string(),
        ));
    }
    Ok((keep, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn pair_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_separated_and_hand_se() {
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = [true, true, true, false, false];
        let rep = auroc(&scores, &labels).unwrap();
        assert_eq!(rep.point, 1.0);
        assert_eq!(rep.se, 0.0);
        assert_eq!(rep.n, vec![3, 2]);

        // A=0.5, n1=n2=10: Q1=Q2=1/3, SE = sqrt(1.75/100)
        let se = hanley_mcneil_se(0.5, 10, 10);
        assert!((se - 0.1323).abs() < 1e-4, "{se}");
        assert!((se - (1.75f64 / 100.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn auroc_matches_pairwise_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let n = rng.random_range(5..40);
            // coarse grid forces ties
            let scores: Vec<f64> =
                (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auroc_value(&scores, &labels).unwrap();
            let want = pair_oracle(&scores, &labels);
            assert!((a - want).abs() < 1e-12, "{a} vs {want}");
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let a = auroc_value(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
        assert_eq!(a, auroc_value(&warped, &labels).unwrap());

        let mut idx: Vec<usize> = (0..30).collect();
        idx.shuffle(&mut rng);
        let ps: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let pl: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        assert!((a - auroc_value(&ps, &pl).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn auroc_rejects_single_class() {
        assert!(auroc_value(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc_value(&[0.1, 0.2], &[false, false]).is_err());
    }

    #[test]
    fn bootstrap_deterministic_and_constant_metric() {
        let vals: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let metric = |idx: &[usize]| {
            Some(idx.iter().map(|&i| vals[i]).sum::<f64>() / idx.len() as f64)
        };
        let a = bootstrap_ci("mean", 50, metric, 500, 7).unwrap();
        let b = bootstrap_ci("mean", 50, metric, 500, 7).unwrap();
        assert_eq!(a.point, b.point);
        assert_eq!(a.ci95, b.ci95);
        assert_eq!(a.se, b.se);

        let constant = |_: &[usize]| Some(0.75);
        let c = bootstrap_ci("const", 20, constant, 200, 1).unwrap();
        assert_eq!(c.ci95, (0.75, 0.75));
        assert_eq!(c.se, 0.0);
        assert!(!c.pathological);
    }

    #[test]
    fn bootstrap_ci_of_normal_mean_matches_analytic_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..100)
            .map(|_| {
                let u1: f64 = rng.random_range(1e-12..1.0);
                let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                (-2.0 * u1.ln()).sqrt() * u2.cos()
            })
            .collect();
        let metric =
            |idx: &[usize]| Some(idx.iter().map(|&i| data[i]).sum::<f64>() / idx.len() as f64);
        let rep = bootstrap_ci("mean", 100, metric, 2000, 4).unwrap();
        // analytic width uses the sample sd, not the population sd
        let mean = data.iter().sum::<f64>() / 100.0;
        let sd =
            (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
        let expect = 2.0 * 1.96 * sd / 10.0;
        let width = rep.ci95.1 - rep.ci95.0;
        assert!(
            (width - expect).abs() / expect < 0.2,
            "width {width} vs {expect}"
        );
        assert!(!rep.pathological);
    }

    #[test]
    fn bootstrap_redraws_degenerate_resamples() {
        // AUROC on 3 samples: resamples drawing one class only are undefined
        let scores = [0.9, 0.6, 0.1];
        let labels = [true, false, false];
        let metric = |idx: &[usize]| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            auroc_value(&s, &l).ok()
        };
        let rep = bootstrap_ci("auroc", 3, metric, 400, 5).unwrap();
        assert!(rep.redraws > 0, "degenerate resamples should occur at n=3");
        assert!(rep.point == 1.0);
    }

    #[test]
    fn bootstrap_se_of_auroc_matches_hanley_mcneil() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // two overlapping score clouds, 60 per class
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..60 {
            scores.push(rng.random_range(0.0..1.0) + 0.3);
            labels.push(true);
            scores.push(rng.random_range(0.0..1.0));
            labels.push(false);
        }
        let rep = auroc(&scores, &labels).unwrap();
        let metric = |idx: &[usize]| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            auroc_value(&s, &l).ok()
        };
        let boot = bootstrap_ci("auroc", 120, metric, 2000, 7).unwrap();
        let rel = (boot.se - rep.se).abs() / rep.se;
        assert!(
            rel < 0.25,
            "bootstrap SE {} vs Hanley-McNeil {} (rel {rel})",
            boot.se,
            rep.se
        );
    }

    #[test]
    fn c_index_hand_cases_and_oracle() {
        // risks inverse to event times, all events
        let times = [1.0, 2.0, 3.0, 4.0];
        let risks = [4.0, 3.0, 2.0, 1.0];
        let events = [true; 4];
        assert_eq!(c_index(&risks, &times, &events).unwrap(), 1.0);
        assert_eq!(c_index(&[1.0; 4], &times, &events).unwrap(), 0.5);

        // mixed censoring, 6 subjects
        let times = [2.0, 5.0, 3.0, 3.0, 8.0, 1.0];
        let events = [true, false, true, false, true, false];
        let risks = [1.2, 0.3, 0.9, 0.9, -0.5, 2.0];
        let got = c_index(&risks, &times, &events).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..6 {
            for j in 0..6 {
                if i != j && events[i] && times[i] < times[j] {
                    den += 1.0;
                    num += if risks[i] > risks[j] {
                        1.0
                    } else if risks[i] == risks[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert_eq!(got, num / den);

        // no comparable pairs: everyone censored
        assert!(c_index(&risks, &times, &[false; 6]).is_err());
    }

    #[test]
    fn c_index_flip_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 20;
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..100.0)).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let risks: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = c_index(&risks, &times, &events).unwrap();
        let neg: Vec<f64> = risks.iter().map(|r| -r).collect();
        let cflip = c_index(&neg, &times, &events).unwrap();
        assert!((c + cflip - 1.0).abs() < 1e-12, "{c} + {cflip}");
    }

    #[test]
    fn dice_hand_counts_and_identity() {
        let truth = vec![0u8, 1, 1, 2, 2, 0, 1, 2];
        let rep = dice(&truth, &truth, 3).unwrap();
        assert_eq!(rep.micro, 1.0);
        assert_eq!(rep.macro_, 1.0);
        assert_eq!(rep.per_class, vec![Some(1.0), Some(1.0)]);

        // class 1 perfect, class 2 fully wrong with equal-size masks
        let truth = vec![1u8, 1, 2, 2];
        let pred = vec![1u8, 1, 0, 0];
        let rep = dice(&pred, &truth, 3).unwrap();
        assert_eq!(rep.per_class, vec![Some(1.0), Some(0.0)]);
        assert_eq!(rep.macro_, 0.5);
        // pooled: TP=2, FP=0, FN=2 -> 2*2/(4+0+2)
        assert!((rep.micro - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn dice_matches_counting_oracle_and_absent_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 512;
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..4) as u8).collect();
        let truth: Vec<u8> = (0..n).map(|_| rng.random_range(0..4) as u8).collect();
        let rep = dice(&pred, &truth, 4).unwrap();
        for c in 1..4u8 {
            let tp = pred
                .iter()
                .zip(&truth)
                .filter(|(p, t)| **p == c && **t == c)
                .count() as f64;
            let fp = pred
                .iter()
                .zip(&truth)
                .filter(|(p, t)| **p == c && **t != c)
                .count() as f64;
            let fneg = pred
                .iter()
                .zip(&truth)
                .filter(|(p, t)| **p != c && **t == c)
                .count() as f64;
            let want = 2.0 * tp / (2.0 * tp + fp + fneg);
            assert_eq!(rep.per_class[c as usize - 1].unwrap(), want);
        }

        // class 3 never appears anywhere: excluded and reported absent
        let truth = vec![0u8, 1, 1, 2];
        let pred = vec![0u8, 1, 2, 2];
        let rep = dice(&pred, &truth, 4).unwrap();
        assert_eq!(rep.per_class[2], None);
        assert_eq!(rep.absent_classes, vec![3]);
    }

    #[test]
    fn micro_equals_macro_under_identical_confusions() {
        // both classes: TP=2, FP=1, FN=1
        let truth = vec![1u8, 1, 1, 2, 2, 2, 0, 0];
        let pred = vec![1u8, 1, 2, 2, 2, 1, 0, 0];
        let rep = dice(&pred, &truth, 3).unwrap();
        assert!((rep.micro - rep.macro_).abs() < 1e-12);
    }

    #[test]
    fn significance_hand_values() {
        let mk = |p: f64, se: f64| MetricReport {
            name: "auroc".into(),
            point: p,
            se,
            ci95: (p - 1.96 * se, p + 1.96 * se),
            n: vec![100],
            method: UncertaintyMethod::HanleyMcneil,
            redraws: 0,
            pathological: false,
        };
        let eq = significance_test(&mk(0.8, 0.01), &mk(0.8, 0.02));
        assert_eq!(eq.p, 1.0);
        assert!(!eq.significant);

        // difference at exactly 1.96 combined SEs
        let se = (0.006f64.powi(2) * 2.0).sqrt();
        let border = significance_test(&mk(0.5 + 1.96 * se, 0.006), &mk(0.5, 0.006));
        assert!((border.p - 0.05).abs() < 1e-3, "{}", border.p);

        let strong = significance_test(&mk(0.870, 0.006), &mk(0.798, 0.006));
        assert!((strong.z - 8.4853).abs() < 1e-3, "{}", strong.z);
        assert!(strong.p < 1e-16, "{}", strong.p);
        assert!(strong.significant);

        let degen = significance_test(&mk(0.9, 0.0), &mk(0.8, 0.0));
        assert_eq!(degen.p, 0.0);
        assert!(degen.degenerate);
    }

    #[test]
    fn mae_f1_recall_hand_values() {
        assert_eq!(mae_value(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae_value(&[1.0, 3.0], &[2.0, 1.0]).unwrap(), 1.5);
        assert!(mae_value(&[], &[]).is_err());

        // TP=1, FP=1, FN=1 at threshold 0.5
        let scores = [0.9, 0.7, 0.1];
        let labels = [true, false, true];
        assert_eq!(f1_value(&scores, &labels, 0.5).unwrap(), 0.5);
        assert_eq!(
            f1_value(&[0.9, 0.1], &[true, false], 0.5).unwrap(),
            1.0
        );

        assert_eq!(recall_at_k_value(&[true, false, false, false]).unwrap(), 0.25);
        assert!(recall_at_k_value(&[]).is_err());
    }

    #[test]
    fn report_serialises_to_schema() {
        let rep = auroc(&[0.9, 0.2, 0.8, 0.1], &[true, false, true, false]).unwrap();
        let json = serde_json::to_value(&rep).unwrap();
        for key in ["name", "point", "se", "ci95", "n", "method"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["method"], "hanley_mcneil");
        assert!(json.get("redraws").is_none(), "zero redraws stay hidden");
    }

    #[test]
    fn horizon_labels_exclude_early_censoring() {
        // event before horizon -> positive; censored after -> negative;
        // censored before -> excluded; event after horizon -> negative
        let times = [100.0, 2000.0, 500.0, 1500.0];
        let events = [true, false, false, true];
        let (keep, labels) = horizon_labels(&times, &events, 1095.0).unwrap();
        assert_eq!(keep, vec![0, 1, 3]);
        assert_eq!(labels, vec![true, false, false]);

        // exact-horizon event counts as positive, exact-horizon censoring
        // counts as negative (observed to the horizon)
        let (keep, labels) = horizon_labels(&[1095.0], &[true], 1095.0).unwrap();
        assert_eq!((keep.len(), labels[0]), (1, true));
        let (_, labels) = horizon_labels(&[1095.0], &[false], 1095.0).unwrap();
        assert!(!labels[0]);

        assert!(horizon_labels(&[10.0], &[false], 1095.0).is_err());
        assert!(horizon_labels(&[10.0], &[true], -1.0).is_err());
    }
}
