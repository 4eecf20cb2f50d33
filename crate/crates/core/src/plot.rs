//! Tidy CSV data behind the result figures.
//!
//! | file | columns |
//! |------|---------|
//! | `accuracy_vs_unknown.csv` | variant, unknown_percent, duration, epoch, test_accuracy, ood_test_accuracy |
//! | `dynamics_{variant}.csv` | epoch, train_HighlyKnown, train_MaybeKnown, train_WeaklyKnown, train_Unknown, train_accuracy, dev_accuracy, test_accuracy, n_kn, n_unk |
//! | `fitted_fractions.csv` | variant, stage, epoch, category, n_fitted, n_total, fraction |
//! | `ptrue_curve.csv` | threshold, n_unknown, fraction_unknown, accuracy_on_unknown |
//! | `regression_scatter.csv` | `#` header with the fit, then variant, epoch, frac_kn, frac_unk, accuracy, fitted |
//!
//! Reals are written with 17 significant digits so they parse back to the
//! same `f64`. Missing values are empty fields.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{detect_early_stop, DynamicsSeries, EpochPoint, RegressionTarget};
use crate::ptrue::SweepPoint;
use crate::regression::LinearFit;
use crate::types::KnowledgeCategory;

/// `printf("%.17g", x)`.
pub fn fmt_g17(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let strip = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..17).contains(&exp) {
        strip(format!("{:.*}", (16 - exp) as usize, x))
    } else {
        let m = strip(mantissa.to_string());
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_g17).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Duration {
    Epochs(u32),
    EarlyStop,
}

impl Duration {
    pub fn label(&self) -> String {
        match self {
            Duration::Epochs(n) => n.to_string(),
            Duration::EarlyStop => "early_stop".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "early_stop" | "early-stop" | "es" => Ok(Duration::EarlyStop),
            _ => s.parse().map(Duration::Epochs).map_err(|_| format!("bad duration {s:?}")),
        }
    }

    pub fn default_set() -> Vec<Duration> {
        vec![Duration::Epochs(5), Duration::Epochs(10), Duration::Epochs(20), Duration::Epochs(50), Duration::EarlyStop]
    }

    fn resolve<'a>(&self, series: &'a DynamicsSeries) -> Option<&'a EpochPoint> {
        match self {
            Duration::Epochs(n) => series.point(*n),
            Duration::EarlyStop => detect_early_stop(series).and_then(|e| series.point(e)),
        }
    }
}

fn writer(path: &Path) -> csv::Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path)
}

/// File (a). Durations a series did not reach are skipped.
pub fn write_accuracy_vs_unknown(
    path: &Path,
    series: &[(f64, &DynamicsSeries)],
    durations: &[Duration],
) -> csv::Result<usize> {
    let mut w = writer(path)?;
    w.write_record(["variant", "unknown_percent", "duration", "epoch", "test_accuracy", "ood_test_accuracy"])?;
    let mut rows = 0;
    for d in durations {
        for (pct, s) in series {
            let Some(p) = d.resolve(s) else {
                log::warn!("{}: no epoch for duration {}", s.variant_name, d.label());
                continue;
            };
            w.write_record([
                s.variant_name.clone(),
                fmt_g17(*pct),
                d.label(),
                p.epoch.to_string(),
                opt(p.test_accuracy),
                opt(p.ood_test_accuracy),
            ])?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

/// File (b).
pub fn write_dynamics(path: &Path, series: &DynamicsSeries) -> csv::Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["epoch".to_string()];
    header.extend(KnowledgeCategory::ALL.iter().map(|c| format!("train_{c}")));
    header.extend(["train_accuracy", "dev_accuracy", "test_accuracy", "n_kn", "n_unk"].map(String::from));
    w.write_record(&header)?;
    for p in &series.epochs {
        let mut row = vec![p.epoch.to_string()];
        row.extend(KnowledgeCategory::ALL.iter().map(|c| opt(p.train_accuracy_per_category.get(c).copied())));
        row.extend([
            fmt_g17(p.train_accuracy),
            fmt_g17(p.dev_accuracy),
            opt(p.test_accuracy),
            p.n_kn.to_string(),
            p.n_unk.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DynamicsRow {
    pub epoch: u32,
    #[serde(rename = "train_HighlyKnown")]
    pub train_highly_known: Option<f64>,
    #[serde(rename = "train_MaybeKnown")]
    pub train_maybe_known: Option<f64>,
    #[serde(rename = "train_WeaklyKnown")]
    pub train_weakly_known: Option<f64>,
    #[serde(rename = "train_Unknown")]
    pub train_unknown: Option<f64>,
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub n_kn: usize,
    pub n_unk: usize,
}

impl DynamicsRow {
    pub fn category(&self, c: KnowledgeCategory) -> Option<f64> {
        match c {
            KnowledgeCategory::HighlyKnown => self.train_highly_known,
            KnowledgeCategory::MaybeKnown => self.train_maybe_known,
            KnowledgeCategory::WeaklyKnown => self.train_weakly_known,
            KnowledgeCategory::Unknown => self.train_unknown,
        }
    }
}

pub fn read_dynamics(path: &Path) -> csv::Result<Vec<DynamicsRow>> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

/// File (c): fitted counts per category at the early-stop and final epochs.
pub fn write_fitted_fractions(path: &Path, series: &[&DynamicsSeries]) -> csv::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["variant", "stage", "epoch", "category", "n_fitted", "n_total", "fraction"])?;
    for s in series {
        let stages = [("early_stop", detect_early_stop(s)), ("final", s.epochs.last().map(|p| p.epoch))];
        for (stage, epoch) in stages {
            let Some(p) = epoch.and_then(|e| s.point(e)) else { continue };
            for c in KnowledgeCategory::ALL {
                let total = s.category_sizes.get(&c).copied().unwrap_or(0);
                if total == 0 {
                    continue;
                }
                let fitted = p.fitted_per_category.get(&c).copied().unwrap_or(0);
                w.write_record([
                    s.variant_name.clone(),
                    stage.to_string(),
                    p.epoch.to_string(),
                    c.to_string(),
                    fitted.to_string(),
                    total.to_string(),
                    fmt_g17(fitted as f64 / total as f64),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// File (d).
pub fn write_ptrue_curve(path: &Path, curve: &[SweepPoint]) -> csv::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["threshold", "n_unknown", "fraction_unknown", "accuracy_on_unknown"])?;
    for p in curve {
        w.write_record([
            fmt_g17(p.threshold),
            p.n_unknown.to_string(),
            fmt_g17(p.fraction_unknown),
            opt(p.accuracy_on_unknown),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// File (e). The fit is written as `#` comment lines above the header.
pub fn write_regression_scatter(
    path: &Path,
    fit: &LinearFit,
    series: &[&DynamicsSeries],
    target: RegressionTarget,
) -> csv::Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "# target={}", match target {
        RegressionTarget::Test => "test",
        RegressionTarget::OodTest => "ood_test",
    })?;
    writeln!(
        file,
        "# beta0={} beta_kn={} beta_unk={} r_squared={} n_points={}",
        fmt_g17(fit.beta0),
        fmt_g17(fit.beta_kn),
        fmt_g17(fit.beta_unk),
        fmt_g17(fit.r_squared),
        fit.n_points
    )?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["variant", "epoch", "frac_kn", "frac_unk", "accuracy", "fitted"])?;
    for s in series {
        let d = s.d_size as f64;
        for p in &s.epochs {
            let acc = match target {
                RegressionTarget::Test => p.test_accuracy,
                RegressionTarget::OodTest => p.ood_test_accuracy,
            };
            let Some(acc) = acc else { continue };
            w.write_record([
                s.variant_name.clone(),
                p.epoch.to_string(),
                fmt_g17(p.n_kn as f64 / d),
                fmt_g17(p.n_unk as f64 / d),
                fmt_g17(acc),
                fmt_g17(fit.predict(p.n_kn as f64, p.n_unk as f64, d)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inputs for [`emit_plot_data`]; absent parts are skipped.
#[derive(Default)]
pub struct PlotInputs<'a> {
    pub series: Vec<(f64, &'a DynamicsSeries)>,
    pub durations: Vec<Duration>,
    pub fit: Option<(&'a LinearFit, RegressionTarget)>,
    pub ptrue_curve: Option<&'a [SweepPoint]>,
}

pub fn emit_plot_data(inputs: &PlotInputs<'_>, out_dir: &Path) -> csv::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let all: Vec<&DynamicsSeries> = inputs.series.iter().map(|(_, s)| *s).collect();
    if !all.is_empty() {
        let path = out_dir.join("accuracy_vs_unknown.csv");
        write_accuracy_vs_unknown(&path, &inputs.series, &inputs.durations)?;
        files.push(path);
        for s in &all {
            let path = out_dir.join(format!("dynamics_{}.csv", s.variant_name));
            write_dynamics(&path, s)?;
            files.push(path);
        }
        let path = out_dir.join("fitted_fractions.csv");
        write_fitted_fractions(&path, &all)?;
        files.push(path);
    }
    if let Some((fit, target)) = inputs.fit {
        let path = out_dir.join("regression_scatter.csv");
        write_regression_scatter(&path, fit, &all, target)?;
        files.push(path);
    }
    if let Some(curve) = inputs.ptrue_curve {
        let path = out_dir.join("ptrue_curve.csv");
        write_ptrue_curve(&path, curve)?;
        files.push(path);
    }
    Ok(files)
}
