//! IoU, number-of-clicks (NoC) evaluation and dataset-level reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clicksim::next_click;
use crate::data::{Sample, SkippedSample};
use crate::error::{Error, Result};
use crate::mask::{Click, ImageTensor, Mask};

/// The encode-once / predict-per-click contract evaluated by NoC.
pub trait InteractiveModel {
    /// Per-image state computed once (the cached backbone features).
    type Features;

    fn encode(&self, image: &ImageTensor<f32>) -> Result<Self::Features>;

    /// Next mask from the cached features, all clicks so far and the
    /// previous mask.
    fn predict(&self, features: &Self::Features, clicks: &[Click], prev: &Mask) -> Result<Mask>;
}

/// `|pred ∩ gt| / |pred ∪ gt|`; two empty masks score 1.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    pred.check_same_dims(gt, "iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Outcome of one NoC run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NocOutcome {
    pub clicks: usize,
    pub final_iou: f64,
}

impl NocOutcome {
    /// Hit the cap without reaching the threshold.
    pub fn is_failure(&self, threshold: f64, cap: usize) -> bool {
        self.clicks == cap && self.final_iou < threshold
    }
}

/// Interaction trace for one image: the simulated clicks and the IoU after
/// each of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub clicks: Vec<Click>,
    pub ious: Vec<f64>,
}

impl Trajectory {
    /// Number of clicks until IoU ≥ `threshold`, or the trace length.
    pub fn noc(&self, threshold: f64) -> NocOutcome {
        let idx = self
            .ious
            .iter()
            .position(|&v| v >= threshold)
            .unwrap_or(self.ious.len() - 1);
        NocOutcome {
            clicks: idx + 1,
            final_iou: self.ious[idx],
        }
    }
}

/// Runs the simulated-user loop from the all-zero mask: encode once, then
/// click, predict and score until IoU ≥ `stop_at` or `cap` clicks.
pub fn simulate<M: InteractiveModel>(
    model: &M,
    image: &ImageTensor<f32>,
    gt: &Mask,
    stop_at: f64,
    cap: usize,
) -> Result<Trajectory> {
    if cap == 0 {
        return Err(Error::Contract("click cap must be at least 1".into()));
    }
    if (image.height(), image.width()) != gt.dims() {
        return Err(Error::shape(
            "simulate",
            format!("image {:?} vs mask {:?}", image.dims(), gt.dims()),
        ));
    }
    let features = model.encode(image)?;
    let mut mask = Mask::zeros(gt.height(), gt.width());
    let mut clicks = Vec::with_capacity(cap);
    let mut ious = Vec::with_capacity(cap);
    while clicks.len() < cap {
        let click = match next_click(&mask, gt) {
            Ok(c) => c,
            // exact mask: nothing left to correct
            Err(Error::NoErrorRegion) => break,
            Err(e) => return Err(e),
        };
        clicks.push(click);
        mask = model.predict(&features, &clicks, &mask)?;
        let score = iou(&mask, gt)?;
        ious.push(score);
        if score >= stop_at {
            break;
        }
    }
    if ious.is_empty() {
        return Err(Error::Contract(
            "NoC needs a ground truth that differs from the empty mask".into(),
        ));
    }
    Ok(Trajectory { clicks, ious })
}

/// Clicks needed to reach IoU ≥ `threshold`, capped at `cap`.
pub fn noc<M: InteractiveModel>(
    model: &M,
    image: &ImageTensor<f32>,
    gt: &Mask,
    threshold: f64,
    cap: usize,
) -> Result<NocOutcome> {
    Ok(simulate(model, image, gt, threshold, cap)?.noc(threshold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub click_cap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.85, 0.90, 0.95],
            click_cap: 20,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config("at least one IoU threshold required".into()));
        }
        if self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        if self.thresholds.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("thresholds must be sorted ascending".into()));
        }
        if self.click_cap == 0 {
            return Err(Error::Config("click cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-sample evaluation record (one line of the records file).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub class: String,
    /// NoC per threshold, aligned with `EvalReport::thresholds`.
    pub noc: Vec<usize>,
    /// IoU at the click that ended each threshold's run.
    pub final_iou: Vec<f64>,
    pub ious: Vec<f64>,
    pub clicks: Vec<Click>,
}

/// Aggregate row: one per class plus the overall row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub class: String,
    pub samples: usize,
    pub mean_noc: Vec<f64>,
    pub failures: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub thresholds: Vec<f64>,
    pub click_cap: usize,
    pub samples: Vec<SampleRecord>,
    pub classes: Vec<SummaryRow>,
    pub overall: SummaryRow,
    pub skipped: Vec<SkippedSample>,
}

pub const REPORT_FORMAT_VERSION: u32 = 1;

fn summarize(class: &str, records: &[&SampleRecord], config: &EvalConfig) -> SummaryRow {
    let n = records.len();
    let mut mean_noc = vec![0.0; config.thresholds.len()];
    let mut failures = vec![0; config.thresholds.len()];
    for r in records {
        for (t, &theta) in config.thresholds.iter().enumerate() {
            mean_noc[t] += r.noc[t] as f64;
            let outcome = NocOutcome {
                clicks: r.noc[t],
                final_iou: r.final_iou[t],
            };
            failures[t] += outcome.is_failure(theta, config.click_cap) as usize;
        }
    }
    if n > 0 {
        mean_noc.iter_mut().for_each(|m| *m /= n as f64);
    }
    SummaryRow {
        class: class.to_string(),
        samples: n,
        mean_noc,
        failures,
    }
}

/// Evaluates every sample at every threshold. A single interaction trace
/// per sample (run until the highest threshold or the cap) serves all
/// thresholds, so NoC is monotone in the threshold by construction.
/// Samples that cannot be evaluated are reported as skipped.
pub fn evaluate_dataset<M: InteractiveModel>(
    model: &M,
    samples: &[Sample],
    previously_skipped: &[SkippedSample],
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    if samples.is_empty() && previously_skipped.is_empty() {
        return Err(Error::Contract("evaluation dataset is empty".into()));
    }
    let top = *config.thresholds.last().unwrap();
    let mut records = Vec::with_capacity(samples.len());
    let mut skipped = previously_skipped.to_vec();
    for sample in samples {
        match simulate(model, &sample.image, &sample.mask, top, config.click_cap) {
            Ok(trace) => {
                let outcomes: Vec<NocOutcome> =
                    config.thresholds.iter().map(|&t| trace.noc(t)).collect();
                records.push(SampleRecord {
                    id: sample.id.clone(),
                    class: sample.class_label.clone(),
                    noc: outcomes.iter().map(|o| o.clicks).collect(),
                    final_iou: outcomes.iter().map(|o| o.final_iou).collect(),
                    ious: trace.ious,
                    clicks: trace.clicks,
                });
            }
            Err(e) => skipped.push(SkippedSample {
                id: sample.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let mut by_class: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
    for r in &records {
        by_class.entry(r.class.as_str()).or_default().push(r);
    }
    let classes = by_class
        .iter()
        .map(|(class, rs)| summarize(class, rs, config))
        .collect();
    let all: Vec<&SampleRecord> = records.iter().collect();
    let overall = summarize("overall", &all, config);
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        thresholds: config.thresholds.clone(),
        click_cap: config.click_cap,
        samples: records,
        classes,
        overall,
        skipped,
    })
}

impl EvalReport {
    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<16} {:>7}", "class", "samples");
        for t in &self.thresholds {
            let _ = write!(out, " {:>9}", format!("NoC@{}", (t * 100.0).round()));
        }
        for t in &self.thresholds {
            let _ = write!(out, " {:>9}", format!(">={}@{}", self.click_cap, (t * 100.0).round()));
        }
        out.push('\n');
        for row in self.classes.iter().chain(std::iter::once(&self.overall)) {
            let _ = write!(out, "{:<16} {:>7}", row.class, row.samples);
            for m in &row.mean_noc {
                let _ = write!(out, " {:>9.3}", m);
            }
            for f in &row.failures {
                let _ = write!(out, " {:>9}", f);
            }
            out.push('\n');
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(out, "skipped: {}", self.skipped.len());
        }
        out
    }

    /// Writes `samples.jsonl`, `summary.json` and `summary.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut lines = String::new();
        for r in &self.samples {
            lines.push_str(&serde_json::to_string(r).expect("record serialises"));
            lines.push('\n');
        }
        let write = |name: &str, body: &str| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        write("samples.jsonl", &lines)?;
        let summary = serde_json::json!({
            "format_version": self.format_version,
            "thresholds": self.thresholds,
            "click_cap": self.click_cap,
            "classes": self.classes,
            "overall": self.overall,
            "skipped": self.skipped,
        });
        write(
            "summary.json",
            &serde_json::to_string_pretty(&summary).expect("summary serialises"),
        )?;
        write("summary.txt", &self.table())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, set: &[(usize, usize)]) -> Mask {
        let mut m = Mask::zeros(h, w);
        for &(i, j) in set {
            m.set(i, j, true);
        }
        m
    }

    #[test]
    fn iou_basic_cases() {
        let a = mask(2, 2, &[(0, 0), (0, 1)]);
        let b = mask(2, 2, &[(0, 1), (1, 1)]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&mask(2, 2, &[(0, 0)]), &mask(2, 2, &[(1, 1)])).unwrap(), 0.0);
        assert_eq!(iou(&Mask::zeros(2, 2), &Mask::zeros(2, 2)).unwrap(), 1.0);
        assert!(iou(&Mask::zeros(2, 3), &Mask::zeros(3, 2)).is_err());
    }

    /// Returns the ground truth once the first click arrives.
    struct Oracle(Mask);
    impl InteractiveModel for Oracle {
        type Features = ();
        fn encode(&self, _: &ImageTensor<f32>) -> Result<()> {
            Ok(())
        }
        fn predict(&self, _: &(), _: &[Click], _: &Mask) -> Result<Mask> {
            Ok(self.0.clone())
        }
    }

    struct Blank;
    impl InteractiveModel for Blank {
        type Features = ();
        fn encode(&self, _: &ImageTensor<f32>) -> Result<()> {
            Ok(())
        }
        fn predict(&self, _: &(), _: &[Click], prev: &Mask) -> Result<Mask> {
            Ok(Mask::zeros(prev.height(), prev.width()))
        }
    }

    fn square() -> Mask {
        Mask::from_fn(16, 16, |i, j| (4..10).contains(&i) && (5..12).contains(&j))
    }

    #[test]
    fn oracle_needs_one_click() {
        let gt = square();
        let img = ImageTensor::zeros(16, 16);
        let out = noc(&Oracle(gt.clone()), &img, &gt, 0.9, 20).unwrap();
        assert_eq!(out, NocOutcome { clicks: 1, final_iou: 1.0 });
    }

    #[test]
    fn never_improving_model_hits_the_cap() {
        let gt = square();
        let img = ImageTensor::zeros(16, 16);
        let out = noc(&Blank, &img, &gt, 0.9, 20).unwrap();
        assert_eq!(out.clicks, 20);
        assert!(out.is_failure(0.9, 20));
    }

    #[test]
    fn zero_threshold_needs_one_click() {
        let gt = square();
        let img = ImageTensor::zeros(16, 16);
        assert_eq!(noc(&Blank, &img, &gt, 0.0, 20).unwrap().clicks, 1);
    }

    #[test]
    fn reaching_threshold_at_the_cap_is_not_a_failure() {
        let out = NocOutcome {
            clicks: 20,
            final_iou: 0.95,
        };
        assert!(!out.is_failure(0.95, 20));
    }

    #[test]
    fn report_aggregates_per_class_and_overall() {
        let gt = square();
        let mk = |id: &str, class: &str| Sample {
            image: ImageTensor::zeros(16, 16),
            mask: gt.clone(),
            class_label: class.into(),
            id: id.into(),
        };
        let samples = vec![mk("a", "x"), mk("b", "y"), mk("c", "y")];
        let report = evaluate_dataset(&Blank, &samples, &[], &EvalConfig::default()).unwrap();
        assert_eq!(report.classes.len(), 2);
        assert_eq!(report.overall.samples, 3);
        assert_eq!(report.overall.mean_noc, vec![20.0; 3]);
        assert_eq!(report.overall.failures, vec![3; 3]);
        assert!(report.table().contains("overall"));
    }
}
