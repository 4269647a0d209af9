//! Correlation and error metrics plus grouped evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::datakit::{Distortion, StereoSample, Symmetry};
use crate::error::{contract, degenerate, Error, Result};
use crate::imagepipe::load_gray;
use crate::network::NetworkParams;
use crate::nss::{standardize, NssFeatureVector};
use crate::tensor::Real;
use crate::training::{predict_pair, SplitManifest, Subset};

pub const REPORT_HEADER: &str = "run,group,n,plcc,srocc,rmse";
/// Smallest group that gets metrics.
pub const MIN_GROUP: usize = 3;

fn check_pair(x: &[f64], y: &[f64], what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(contract(format!("{what}: lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < MIN_GROUP {
        return Err(contract(format!("{what} needs at least {MIN_GROUP} points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(crate::error::numeric(format!("{what}: non-finite input")));
    }
    Ok(())
}

/// Pearson linear correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, "plcc")?;
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(degenerate("plcc: an input has zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on fractional ranks).
pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, "srocc")?;
    plcc(&fractional_ranks(x), &fractional_ranks(y)).map_err(|_| degenerate("srocc: an input is constant"))
}

/// Root mean squared error over all entries.
pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(contract(format!("rmse: lengths {} and {}", pred.len(), target.len())));
    }
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Four-parameter logistic `β₂ + (β₁ − β₂) / (1 + exp(−(x − β₃)/|β₄|))`
/// fitted to `(pred, target)` by damped Gauss-Newton; returns mapped
/// predictions. Only used when explicitly requested.
pub fn logistic_map(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_pair(pred, target, "logistic_map")?;
    let f = |b: &[f64; 4], x: f64| b[1] + (b[0] - b[1]) / (1.0 + (-(x - b[2]) / b[3].abs().max(1e-12)).exp());
    let (tmin, tmax) = target.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, c), &v| (a.min(v), c.max(v)));
    let n = pred.len() as f64;
    let mean = pred.iter().sum::<f64>() / n;
    let sd = (pred.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-6);
    let mut beta = [tmax, tmin, mean, sd];
    let sse = |b: &[f64; 4]| pred.iter().zip(target).map(|(&x, &y)| (f(b, x) - y).powi(2)).sum::<f64>();
    let mut damping = 1e-3;
    let mut current = sse(&beta);
    for _ in 0..200 {
        let mut jtj = nalgebra::Matrix4::<f64>::zeros();
        let mut jtr = nalgebra::Vector4::<f64>::zeros();
        for (&x, &y) in pred.iter().zip(target) {
            let mut grad = nalgebra::Vector4::zeros();
            for k in 0..4 {
                let h = 1e-6 * beta[k].abs().max(1e-3);
                let mut bp = beta;
                bp[k] += h;
                let mut bm = beta;
                bm[k] -= h;
                grad[k] = (f(&bp, x) - f(&bm, x)) / (2.0 * h);
            }
            jtj += grad * grad.transpose();
            jtr += grad * (y - f(&beta, x));
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj;
            for k in 0..4 {
                a[(k, k)] *= 1.0 + damping;
                a[(k, k)] += 1e-12;
            }
            let Some(step) = a.lu().solve(&jtr) else { break };
            let cand = [beta[0] + step[0], beta[1] + step[1], beta[2] + step[2], beta[3] + step[3]];
            let s = sse(&cand);
            if s.is_finite() && s < current {
                beta = cand;
                damping = (damping / 10.0).max(1e-12);
                improved = current - s > 1e-12 * current.max(1e-12);
                current = s;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok(pred.iter().map(|&x| f(&beta, x)).collect())
}

/// Metrics of one group; `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub run: String,
    pub group: String,
    pub n: usize,
    pub plcc: Option<f64>,
    pub srocc: Option<f64>,
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<GroupMetrics>,
    pub warnings: Vec<String>,
}

/// One scored test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub dmos: f64,
    pub score: f64,
    pub distortion: Distortion,
    pub symmetry: Symmetry,
    /// Mean predicted label (standardized scale) and its target, when known.
    pub nss: Option<(Vec<f64>, Vec<f64>)>,
}

fn group_metrics(run: &str, group: &str, preds: &[&Prediction], warnings: &mut Vec<String>) -> Option<GroupMetrics> {
    if preds.len() < MIN_GROUP {
        warnings.push(format!("run {run}: group {group} has {} samples, skipped", preds.len()));
        return None;
    }
    let (s, d): (Vec<f64>, Vec<f64>) = preds.iter().map(|p| (p.score, p.dmos)).unzip();
    let defined = |r: Result<f64>, what: &str, warnings: &mut Vec<String>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            warnings.push(format!("run {run}: {what} undefined for group {group}: {e}"));
            None
        }
    };
    Some(GroupMetrics {
        run: run.to_string(),
        group: group.to_string(),
        n: preds.len(),
        plcc: defined(plcc(&s, &d), "plcc", warnings),
        srocc: defined(srocc(&s, &d), "srocc", warnings),
        rmse: rmse(&s, &d).ok(),
    })
}

/// Groups: `ALL`, each distortion tag, each symmetry tag, and a
/// `nss-features` RMSE row when label predictions are present.
pub fn report_from_predictions(run: &str, preds: &[Prediction]) -> EvalReport {
    let mut report = EvalReport::default();
    let all: Vec<&Prediction> = preds.iter().collect();
    let mut groups: Vec<(String, Vec<&Prediction>)> = vec![("ALL".into(), all)];
    let mut by_tag: BTreeMap<Distortion, Vec<&Prediction>> = BTreeMap::new();
    let mut by_sym: BTreeMap<Symmetry, Vec<&Prediction>> = BTreeMap::new();
    for p in preds {
        by_tag.entry(p.distortion).or_default().push(p);
        by_sym.entry(p.symmetry).or_default().push(p);
    }
    groups.extend(by_tag.into_iter().map(|(k, v)| (k.tag().to_string(), v)));
    groups.extend(by_sym.into_iter().map(|(k, v)| (k.tag().to_string(), v)));
    for (name, members) in &groups {
        if let Some(row) = group_metrics(run, name, members, &mut report.warnings) {
            report.rows.push(row);
        }
    }
    let labelled: Vec<&(Vec<f64>, Vec<f64>)> = preds.iter().filter_map(|p| p.nss.as_ref()).collect();
    if !labelled.is_empty() {
        let (p, t): (Vec<f64>, Vec<f64>) =
            labelled.iter().flat_map(|(p, t)| p.iter().copied().zip(t.iter().copied())).unzip();
        report.rows.push(GroupMetrics {
            run: run.to_string(),
            group: "nss-features".into(),
            n: labelled.len(),
            plcc: None,
            srocc: None,
            rmse: rmse(&p, &t).ok(),
        });
    }
    report
}

/// Scores the test subset of `split` with `params`.
///
/// `labels` maps sample ids to raw label vectors; when given, the report
/// gains an `nss-features` RMSE row on the standardized scale.
pub fn evaluate_run<T: Real>(
    params: &NetworkParams<T>,
    split: &SplitManifest,
    samples: &[StereoSample],
    labels: Option<&BTreeMap<String, NssFeatureVector>>,
    subset: Subset,
    logistic: bool,
) -> Result<EvalReport> {
    let mut preds = Vec::new();
    for s in samples.iter().filter(|s| split.subset_of(&s.ref_id) == Some(subset)) {
        let (left, right) = (load_gray(&s.left_path)?, load_gray(&s.right_path)?);
        let out = predict_pair(params, &left, &right)?;
        let nss = labels
            .and_then(|m| m.get(&s.id))
            .map(|raw| (out.nss, standardize(raw, &params.standardizer).into_vec()));
        preds.push(Prediction {
            id: s.id.clone(),
            dmos: s.dmos,
            score: out.score,
            distortion: s.distortion,
            symmetry: s.symmetry,
            nss,
        });
    }
    if preds.is_empty() {
        return Err(contract(format!("run {}: no samples in the {subset:?} subset", split.run)));
    }
    if logistic {
        let (s, d): (Vec<f64>, Vec<f64>) = preds.iter().map(|p| (p.score, p.dmos)).unzip();
        if let Ok(mapped) = logistic_map(&s, &d) {
            for (p, m) in preds.iter_mut().zip(mapped) {
                p.score = m;
            }
        }
    }
    Ok(report_from_predictions(&split.run.to_string(), &preds))
}

/// Mean of each metric per group across runs (undefined values are left out
/// of the mean), appended as rows with run `mean`.
pub fn aggregate_runs(reports: &[EvalReport]) -> EvalReport {
    let mut out = EvalReport::default();
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, Vec<&GroupMetrics>> = BTreeMap::new();
    for r in reports {
        out.rows.extend(r.rows.iter().cloned());
        out.warnings.extend(r.warnings.iter().cloned());
        for row in &r.rows {
            if !acc.contains_key(&row.group) {
                order.push(row.group.clone());
            }
            acc.entry(row.group.clone()).or_default().push(row);
        }
    }
    let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    for g in order {
        let rows = &acc[&g];
        out.rows.push(GroupMetrics {
            run: "mean".into(),
            group: g.clone(),
            n: rows.iter().map(|r| r.n).sum::<usize>() / rows.len(),
            plcc: mean(rows.iter().filter_map(|r| r.plcc).collect()),
            srocc: mean(rows.iter().filter_map(|r| r.srocc).collect()),
            rmse: mean(rows.iter().filter_map(|r| r.rmse).collect()),
        });
    }
    out
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{},{}", r.run, r.group, r.n, cell(r.plcc), cell(r.srocc), cell(r.rmse))
                .expect("writing to a String");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == REPORT_HEADER => {}
            _ => return Err(Error::Parse { line: 1, msg: format!("header must be {REPORT_HEADER:?}") }),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields, found {}", f.len())));
            }
            let metric = |s: &str| -> Result<Option<f64>> {
                if s == "NA" {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(format!("bad metric {s:?}")))
                }
            };
            rows.push(GroupMetrics {
                run: f[0].to_string(),
                group: f[1].to_string(),
                n: f[2].parse().map_err(|_| bad(format!("bad count {:?}", f[2])))?,
                plcc: metric(f[3])?,
                srocc: metric(f[4])?,
                rmse: metric(f[5])?,
            });
        }
        Ok(Self { rows, warnings: Vec::new() })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Aligned table for the console.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
        let mut s = format!("{:<6} {:<14} {:>5} {:>8} {:>8} {:>9}\n", "run", "group", "n", "PLCC", "SROCC", "RMSE");
        for r in &self.rows {
            writeln!(
                s,
                "{:<6} {:<14} {:>5} {:>8} {:>8} {:>9}",
                r.run,
                r.group,
                r.n,
                fmt(r.plcc),
                fmt(r.srocc),
                fmt(r.rmse)
            )
            .expect("writing to a String");
        }
        for w in &self.warnings {
            writeln!(s, "warning: {w}").expect("writing to a String");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pearson_fixed_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((plcc(&x, &x.map(|v| 2.0 * v + 1.0)).unwrap() - 1.0).abs() < 1e-12);
        assert!((plcc(&x, &x.map(|v| -v)).unwrap() + 1.0).abs() < 1e-12);
        // means 2 and 2; Σdxdy = 1, Σdx² = Σdy² = 2
        assert!((plcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
        assert!(plcc(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spearman_fixed_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((srocc(&x, &x.map(|v: f64| v.exp())).unwrap() - 1.0).abs() < 1e-12);
        // d = (−2, 1, 1): 1 − 6·6 / (3·8) = −0.5
        assert!((srocc(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap() + 0.5).abs() < 1e-12);
        assert!(matches!(srocc(&[2.0; 4], &x[..4]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ties_use_average_ranks() {
        assert_eq!(fractional_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(fractional_ranks(&[3.0, 1.0, 3.0, 2.0, 3.0]), vec![4.0, 1.0, 4.0, 2.0, 4.0]);
        let (x, y) = ([1.0, 1.0, 2.0], [0.3, 0.1, 0.2]);
        // Pearson on ranks [1.5,1.5,3] vs [3,1,2] computed by hand: Σdxdy = 0.5·... = 0
        let (rx, ry) = ([1.5, 1.5, 3.0], [3.0, 1.0, 2.0]);
        let (mx, my) = (2.0, 2.0);
        let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
        let syy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
        assert!((srocc(&x, &y).unwrap() - sxy / (sxx * syy).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - (12.5f64).sqrt()).abs() < 1e-12);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn pred(id: usize, score: f64, dmos: f64, d: Distortion, s: Symmetry) -> Prediction {
        Prediction { id: format!("s{id}"), dmos, score, distortion: d, symmetry: s, nss: None }
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let tags = [Distortion::SynthBlur, Distortion::SynthAwgn];
        let preds: Vec<_> = (0..12)
            .map(|i| {
                let sym = if i % 3 == 0 { Symmetry::Asymmetric } else { Symmetry::Symmetric };
                pred(i, i as f64, i as f64, tags[i % 2], sym)
            })
            .collect();
        let r = report_from_predictions("1", &preds);
        assert_eq!(r.rows.len(), 5);
        for row in &r.rows {
            assert!((row.plcc.unwrap() - 1.0).abs() < 1e-12, "{}", row.group);
            assert!((row.srocc.unwrap() - 1.0).abs() < 1e-12, "{}", row.group);
            assert_eq!(row.rmse, Some(0.0));
        }
        let constant: Vec<_> = preds.iter().map(|p| Prediction { score: 5.0, ..p.clone() }).collect();
        let r = report_from_predictions("1", &constant);
        assert!(r.rows.iter().all(|row| row.plcc.is_none() && row.srocc.is_none() && row.rmse.unwrap().is_finite()));
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn small_groups_are_skipped_with_warning() {
        let mut preds: Vec<_> = (0..5).map(|i| pred(i, i as f64, i as f64 * 2.0, Distortion::SynthBlur, Symmetry::Symmetric)).collect();
        preds.push(pred(9, 1.0, 3.0, Distortion::SynthQuant, Symmetry::Symmetric));
        let r = report_from_predictions("2", &preds);
        assert!(r.rows.iter().all(|row| row.group != "synth-quant"));
        assert!(r.warnings.iter().any(|w| w.contains("synth-quant")));
    }

    #[test]
    fn group_rows_match_filtered_recomputation() {
        let tags = [Distortion::SynthBlur, Distortion::SynthAwgn, Distortion::SynthQuant];
        let preds: Vec<_> = (0..30)
            .map(|i| pred(i, ((i * 7) % 11) as f64 + 0.1 * i as f64, (i % 13) as f64, tags[i % 3], Symmetry::Symmetric))
            .collect();
        let r = report_from_predictions("1", &preds);
        for tag in tags {
            let (s, d): (Vec<f64>, Vec<f64>) = preds.iter().filter(|p| p.distortion == tag).map(|p| (p.score, p.dmos)).unzip();
            let row = r.rows.iter().find(|row| row.group == tag.tag()).unwrap();
            assert_eq!(row.plcc, Some(plcc(&s, &d).unwrap()));
            assert_eq!(row.srocc, Some(srocc(&s, &d).unwrap()));
            assert_eq!(row.n, 10);
        }
    }

    #[test]
    fn csv_round_trip_and_aggregation() {
        let preds: Vec<_> = (0..6).map(|i| pred(i, (i * i) as f64, i as f64, Distortion::SynthBlur, Symmetry::Symmetric)).collect();
        let a = report_from_predictions("1", &preds);
        let b = report_from_predictions("2", &preds.iter().map(|p| Prediction { score: 5.0, ..p.clone() }).collect::<Vec<_>>());
        let agg = aggregate_runs(&[a.clone(), b]);
        let back = EvalReport::from_csv(&agg.to_csv()).unwrap();
        assert_eq!(back.rows, agg.rows);
        let mean_all = agg.rows.iter().find(|r| r.run == "mean" && r.group == "ALL").unwrap();
        assert_eq!(mean_all.plcc, a.rows[0].plcc);
        assert!(EvalReport::from_csv("run,group\n").is_err());
    }

    #[test]
    fn logistic_mapping_fits_a_sigmoid() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 / 4.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 10.0 + 80.0 / (1.0 + (-(v - 5.0) / 1.5).exp())).collect();
        let m = logistic_map(&x, &y).unwrap();
        assert!(rmse(&m, &y).unwrap() < 1e-3);
    }

    proptest! {
        #[test]
        fn metric_invariances(v in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40),
                              a in 0.01f64..50.0, b in -20.0f64..20.0) {
            let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            if let (Ok(p), Ok(q)) = (plcc(&x, &y), plcc(&y, &x)) {
                prop_assert!((p - q).abs() < 1e-12);
                let scaled: Vec<f64> = x.iter().map(|t| a * t + b).collect();
                prop_assert!((plcc(&scaled, &y).unwrap() - p).abs() < 1e-12);
            }
            if let (Ok(s), Ok(t)) = (srocc(&x, &y), srocc(&y, &x)) {
                prop_assert!((s - t).abs() < 1e-12);
                let cubed: Vec<f64> = x.iter().map(|t| t * t * t + t).collect();
                prop_assert_eq!(srocc(&cubed, &y).unwrap(), s);
            }
            let two_pass = (x.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
            prop_assert!((rmse(&x, &y).unwrap() - two_pass).abs() <= 1e-12 * two_pass.max(1.0));
        }
    }
}
