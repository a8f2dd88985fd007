//! Synthetic data: the closed-form five-feature linear fixture and
//! spurious-feature bundles with pretrain, finetune, ID-test and OOD-test
//! splits.
//!
//! Bundle columns are laid out as `[pretrain-spurious | finetune-spurious |
//! transferable]`. Every feature is standard normal. Within a split, the
//! label is driven by the split's active groups:
//!
//! | split            | active groups                       |
//! |------------------|-------------------------------------|
//! | pretrain         | pretrain-spurious, transferable     |
//! | finetune, ID     | finetune-spurious, transferable     |
//! | OOD              | transferable                        |
//!
//! Inactive features are drawn independently of the label, so OOD spurious
//! columns carry no label information by construction.
//!
//! Two generative laws are available. Under [`Law::FeatureFirst`] the score
//! `Σ_g strength_g · Σ_{i∈g} x_i / √|g| + noise_std · ε` is computed from
//! the features and the label is its value (regression) or its sign
//! (binary). Under [`Law::LabelFirst`] a balanced label `y ∈ {−1, +1}` is drawn
//! first and each active feature is `strength · y + √(1 − strength²) · ε`,
//! so `strength` is the population correlation between feature and label.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{self, Rng, SeedPath};
use crate::tensor::Tensor;

/// Features `[m, d]` and labels `[m]` (class indices or real values).
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub features: Tensor,
    pub labels: Tensor,
}

impl Split {
    pub fn new(features: Tensor, labels: Tensor) -> Result<Self> {
        if features.ndim() != 2 || labels.shape() != [features.rows()] {
            return Err(Error::Shape {
                op: "split",
                detail: format!("features {:?}, labels {:?}", features.shape(), labels.shape()),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn select(&self, rows: &[usize]) -> Split {
        let labels = rows.iter().map(|&r| self.labels.data()[r]).collect();
        Split { features: self.features.select_rows(rows), labels: Tensor::vector(labels) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    Regression,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Law {
    FeatureFirst,
    LabelFirst,
}

/// What a spurious group holds in a training-distribution split where it
/// does not correlate with the label. The OOD split always holds noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Inactive {
    Noise,
    /// Zero columns, so training on that split cannot move their weights.
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpuriousSpec {
    pub d_spurious_pretrain: usize,
    pub d_spurious_finetune: usize,
    pub d_transfer: usize,
    pub strength_spurious_pretrain: f64,
    pub strength_spurious_finetune: f64,
    pub strength_transfer: f64,
    pub noise_std: f64,
    pub label: LabelKind,
    pub law: Law,
    pub inactive: Inactive,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SpuriousSpec {
    /// One feature per group, binary labels, 2000 rows per split.
    fn default() -> Self {
        Self {
            d_spurious_pretrain: 1,
            d_spurious_finetune: 1,
            d_transfer: 1,
            strength_spurious_pretrain: 0.8,
            strength_spurious_finetune: 0.8,
            strength_transfer: 0.6,
            noise_std: 0.5,
            label: LabelKind::Binary,
            law: Law::FeatureFirst,
            inactive: Inactive::Noise,
            samples: 2000,
            seed: 0,
        }
    }
}

impl SpuriousSpec {
    pub fn dim(&self) -> usize {
        self.d_spurious_pretrain + self.d_spurious_finetune + self.d_transfer
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_transfer == 0 {
            return Err(Error::Config("at least one transferable feature is required".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples per split must be positive".into()));
        }
        for (name, s) in [
            ("spurious_pretrain", self.strength_spurious_pretrain),
            ("spurious_finetune", self.strength_spurious_finetune),
            ("transfer", self.strength_transfer),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!("strength {name} = {s} outside [0, 1]")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise std {} must be finite and nonnegative", self.noise_std)));
        }
        Ok(())
    }

    /// Output width of a model for this label kind.
    pub fn output_dim(&self) -> usize {
        match self.label {
            LabelKind::Regression => 1,
            LabelKind::Binary => 2,
        }
    }

    fn groups(&self, split: SplitKind) -> [(core::ops::Range<usize>, f64); 3] {
        let a = self.d_spurious_pretrain;
        let b = a + self.d_spurious_finetune;
        let c = b + self.d_transfer;
        let active = |on: bool, s: f64| if on { s } else { 0.0 };
        [
            (0..a, active(split == SplitKind::Pretrain, self.strength_spurious_pretrain)),
            (a..b, active(matches!(split, SplitKind::Finetune | SplitKind::IdTest | SplitKind::IdValidation), self.strength_spurious_finetune)),
            (b..c, self.strength_transfer),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Pretrain,
    Finetune,
    IdTest,
    OodTest,
    IdValidation,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Pretrain => "pretrain",
            SplitKind::Finetune => "finetune",
            SplitKind::IdTest => "id_test",
            SplitKind::OodTest => "ood_test",
            SplitKind::IdValidation => "id_validation",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpuriousDatasetBundle {
    pub spec: SpuriousSpec,
    pub pretrain: Split,
    pub finetune: Split,
    pub id_test: Split,
    pub ood_test: Split,
}

impl SpuriousDatasetBundle {
    pub fn splits(&self) -> [(SplitKind, &Split); 4] {
        [
            (SplitKind::Pretrain, &self.pretrain),
            (SplitKind::Finetune, &self.finetune),
            (SplitKind::IdTest, &self.id_test),
            (SplitKind::OodTest, &self.ood_test),
        ]
    }
}

pub fn generate_bundle(spec: &SpuriousSpec) -> Result<SpuriousDatasetBundle> {
    spec.validate()?;
    Ok(SpuriousDatasetBundle {
        spec: spec.clone(),
        pretrain: generate_split(spec, SplitKind::Pretrain)?,
        finetune: generate_split(spec, SplitKind::Finetune)?,
        id_test: generate_split(spec, SplitKind::IdTest)?,
        ood_test: generate_split(spec, SplitKind::OodTest)?,
    })
}

/// One split drawn from its own stream under the spec's seed. The
/// ID-validation split follows the finetune distribution.
pub fn generate_split(spec: &SpuriousSpec, kind: SplitKind) -> Result<Split> {
    spec.validate()?;
    let mut rng = SeedPath::root(spec.seed).child("data").child(kind.name()).rng();
    let (n, d) = (spec.samples, spec.dim());
    let groups = spec.groups(kind);
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row_start = features.len();
        match spec.law {
            Law::FeatureFirst => {
                features.extend((0..d).map(|_| rng::normal(&mut rng)));
                let row = &features[row_start..];
                let mut score = 0.0;
                for (range, s) in &groups {
                    let scale = s / libm::sqrt(range.len().max(1) as f64);
                    score += range.clone().map(|i| scale * row[i]).sum::<f64>();
                }
                score += spec.noise_std * rng::normal(&mut rng);
                labels.push(label_of(spec.label, score));
            }
            Law::LabelFirst => {
                let y = if rng::uniform(&mut rng, 0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
                for (range, s) in &groups {
                    let rest = libm::sqrt(1.0 - s * s);
                    for _ in range.clone() {
                        features.push(s * y + rest * rng::normal(&mut rng));
                    }
                }
                labels.push(match spec.label {
                    LabelKind::Binary => f64::from(y > 0.0),
                    LabelKind::Regression => y,
                });
            }
        }
    }
    if spec.inactive == Inactive::Zero && kind != SplitKind::OodTest {
        for (range, s) in groups.iter().take(2) {
            if *s == 0.0 {
                for row in features.chunks_mut(d) {
                    row[range.clone()].fill(0.0);
                }
            }
        }
    }
    Split::new(Tensor::new(&[n, d], features)?, Tensor::vector(labels))
}

fn label_of(kind: LabelKind, score: f64) -> f64 {
    match kind {
        LabelKind::Regression => score,
        LabelKind::Binary => f64::from(score > 0.0),
    }
}

/// Pearson correlation of column `col` with the labels.
pub fn label_correlation(split: &Split, col: usize) -> f64 {
    let n = split.len() as f64;
    let xs: Vec<f64> = (0..split.len()).map(|r| split.features.row(r)[col]).collect();
    let ys = split.labels.data();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / libm::sqrt(sxx * syy)
}

/// The five-feature linear example: a true model, a pretrained model, a
/// model trained from scratch, the model after finetuning, three finetune
/// points and four test points.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFixture {
    pub w_true: [f64; 5],
    pub w_pretrain: [f64; 5],
    pub w_scratch: [f64; 5],
    pub w_finetune: [f64; 5],
    pub finetune: Vec<([f64; 5], f64)>,
    pub test: Vec<([f64; 5], f64)>,
}

impl LinearFixture {
    pub fn models(&self) -> [(&'static str, [f64; 5]); 3] {
        [("pretrain", self.w_pretrain), ("scratch", self.w_scratch), ("finetune", self.w_finetune)]
    }
}

pub fn linear_fixture() -> LinearFixture {
    let t = 1.0 / 3.0;
    LinearFixture {
        w_true: [0.0, 1.0, 1.0, 1.0, 0.0],
        w_pretrain: [1.0, 1.0, 1.0, 0.0, 0.0],
        w_scratch: [0.0, 0.0, 1.0, 1.0, 1.0],
        w_finetune: [1.0, 1.0, 1.0, 1.0, 1.0],
        finetune: vec![
            ([0.0, 0.0, t, t, t], 1.0),
            ([0.0, 0.0, -0.5, -0.5, 0.0], -1.0),
            ([0.0, 0.0, 0.5, 0.25, 0.25], 1.0),
        ],
        test: vec![
            ([1.0, t, t, t, 1.0], 1.0),
            ([1.0, -t, -t, -t, 1.0], -1.0),
            ([-1.0, t, t, t, -1.0], 1.0),
            ([-1.0, -t, -t, -t, -1.0], -1.0),
        ],
    }
}

/// `w · x`.
pub fn linear_predict(w: &[f64], x: &[f64]) -> Result<f64> {
    if w.len() != 5 || x.len() != 5 {
        return Err(Error::Shape { op: "linear_predict", detail: format!("lengths {} and {}, expected 5", w.len(), x.len()) });
    }
    Ok(w.iter().zip(x).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureRow {
    /// 1-based test point index.
    pub test: usize,
    pub model: &'static str,
    pub point: [f64; 5],
    pub label: f64,
    pub prediction: f64,
    pub l1: f64,
}

/// Prediction and absolute error of each model on each test point, ordered
/// by test point then model.
pub fn fixture_rows(fx: &LinearFixture) -> Vec<FixtureRow> {
    let mut rows = Vec::new();
    for (i, (x, y)) in fx.test.iter().enumerate() {
        for (model, w) in fx.models() {
            let prediction = linear_predict(&w, x).expect("fixture vectors have length 5");
            rows.push(FixtureRow { test: i + 1, model, point: *x, label: *y, prediction, l1: (prediction - y).abs() });
        }
    }
    rows
}

/// Mean absolute error per model, in [`LinearFixture::models`] order.
pub fn fixture_mean_l1(rows: &[FixtureRow]) -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(m, _, _)| *m == r.model) {
            Some(e) => {
                e.1 += r.l1;
                e.2 += 1;
            }
            None => out.push((r.model, r.l1, 1)),
        }
    }
    out.into_iter().map(|(m, s, n)| (m, s / n as f64)).collect()
}

/// Reference predictions and absolute errors for the four test points,
/// as `(test, model, prediction, l1)`.
pub fn fixture_reference() -> Vec<(usize, &'static str, f64, f64)> {
    let (t, f) = (1.0 / 3.0, 5.0 / 3.0);
    let (a, b) = (2.0 / 3.0, 4.0 / 3.0);
    vec![
        (1, "pretrain", f, a),
        (1, "scratch", f, a),
        (1, "finetune", 3.0, 2.0),
        (2, "pretrain", t, b),
        (2, "scratch", t, b),
        (2, "finetune", 1.0, 2.0),
        (3, "pretrain", -t, b),
        (3, "scratch", -t, b),
        (3, "finetune", -1.0, 2.0),
        (4, "pretrain", -f, a),
        (4, "scratch", -f, a),
        (4, "finetune", -3.0, 2.0),
    ]
}

/// First cell where `rows` departs from the reference by more than `tol`.
pub fn fixture_mismatch(rows: &[FixtureRow], tol: f64) -> Option<String> {
    let reference = fixture_reference();
    if rows.len() != reference.len() {
        return Some(format!("expected {} rows, got {}", reference.len(), rows.len()));
    }
    for (r, (test, model, pred, l1)) in rows.iter().zip(&reference) {
        if r.test != *test || r.model != *model {
            return Some(format!("row {test}: expected {model}, got test {} {}", r.test, r.model));
        }
        if (r.prediction - pred).abs() > tol {
            return Some(format!("row {test}, w_{model} prediction: {} != {pred}", r.prediction));
        }
        if (r.l1 - l1).abs() > tol {
            return Some(format!("row {test}, w_{model} l1: {} != {l1}", r.l1));
        }
    }
    None
}

pub(crate) fn shuffle(rng: &mut Rng, v: &mut [usize]) {
    for i in (1..v.len()).rev() {
        let j = rng::below(rng, i + 1);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_matches_reference() {
        let fx = linear_fixture();
        let rows = fixture_rows(&fx);
        assert_eq!(fixture_mismatch(&rows, 1e-12), None);
        let means = fixture_mean_l1(&rows);
        assert_eq!(means, vec![("pretrain", 1.0), ("scratch", 1.0), ("finetune", 2.0)]);
    }

    #[test]
    fn fixture_premises() {
        let fx = linear_fixture();
        for (x, _) in &fx.finetune {
            assert_eq!(x[0], 0.0);
        }
        for (x, y) in &fx.test {
            assert!((linear_predict(&fx.w_true, x).unwrap() - y).abs() < 1e-15);
        }
        assert_eq!(linear_predict(&[0.0; 5], &fx.test[2].0).unwrap(), 0.0);
        assert!(linear_predict(&[1.0; 4], &[1.0; 5]).is_err());
    }

    #[test]
    fn perturbed_finetune_weights_are_caught_on_first_row() {
        let mut fx = linear_fixture();
        fx.w_finetune[0] += 1e-6;
        let msg = fixture_mismatch(&fixture_rows(&fx), 1e-12).unwrap();
        assert!(msg.starts_with("row 1, w_finetune"), "{msg}");
    }

    #[test]
    fn bundle_correlations_follow_roles() {
        for law in [Law::FeatureFirst, Law::LabelFirst] {
            let spec = SpuriousSpec { law, seed: 3, ..SpuriousSpec::default() };
            let b = generate_bundle(&spec).unwrap();
            assert!(label_correlation(&b.pretrain, 0) > 0.5, "{law:?}");
            assert!(label_correlation(&b.ood_test, 0).abs() < 0.05);
            assert!(label_correlation(&b.ood_test, 1).abs() < 0.05);
            assert!(label_correlation(&b.finetune, 1) > 0.5);
            assert!(label_correlation(&b.finetune, 0).abs() < 0.05);
            for (_, s) in b.splits() {
                let frac = s.labels.data().iter().sum::<f64>() / s.len() as f64;
                assert!((0.4..=0.6).contains(&frac));
                assert_eq!(s.dim(), 3);
            }
        }
    }

    #[test]
    fn zero_inactive_groups_are_absent_outside_ood() {
        let spec = SpuriousSpec { inactive: Inactive::Zero, seed: 5, ..SpuriousSpec::default() };
        let b = generate_bundle(&spec).unwrap();
        let col = |s: &Split, c: usize| (0..s.len()).map(|r| s.features.row(r)[c]).collect::<Vec<_>>();
        assert!(col(&b.pretrain, 1).iter().all(|&v| v == 0.0));
        assert!(col(&b.finetune, 0).iter().all(|&v| v == 0.0));
        assert!(col(&b.id_test, 0).iter().all(|&v| v == 0.0));
        assert!(col(&b.ood_test, 0).iter().any(|&v| v != 0.0));
        assert!(col(&b.ood_test, 1).iter().any(|&v| v != 0.0));
        assert!(label_correlation(&b.finetune, 1) > 0.5);
    }

    #[test]
    fn bundles_are_deterministic() {
        let spec = SpuriousSpec { seed: 11, ..SpuriousSpec::default() };
        assert_eq!(generate_bundle(&spec).unwrap(), generate_bundle(&spec).unwrap());
        let other = SpuriousSpec { seed: 12, ..SpuriousSpec::default() };
        assert_ne!(generate_bundle(&spec).unwrap().pretrain, generate_bundle(&other).unwrap().pretrain);
    }

    #[test]
    fn degenerate_spec_rejected() {
        let spec = SpuriousSpec { d_transfer: 0, ..SpuriousSpec::default() };
        assert!(matches!(generate_bundle(&spec), Err(Error::Config(_))));
    }
}
