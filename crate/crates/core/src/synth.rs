//! Seeded synthetic datasets for smoke runs and acceptance tests.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_rows, FeatureDescriptor, FeatureKind, Label, MetadataFile, RawValue, Sample, TabularDataset, TaskType,
};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Two Gaussian classes whose means are 3σ apart.
    Blobs,
    /// Two identically distributed features, only one of which sets the label.
    FeatureIdentity,
    /// Linear target plus Gaussian noise.
    LinearRegression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    /// Labeled pool size (per class for classification).
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            labeled: 100,
            unlabeled: 400,
            test: 200,
            seed: 0,
        }
    }
}

/// Blob class means are this many standard deviations apart.
pub const BLOB_SEPARATION: f64 = 3.0;
/// Noise standard deviation of the regression target after min-max scaling.
pub const REGRESSION_NOISE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub metadata: MetadataFile,
    /// Labeled rows followed by unlabeled rows (no label).
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub struct WrittenDataset {
    pub metadata: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
}

impl SyntheticData {
    pub fn dataset(&self) -> Result<TabularDataset> {
        let (labeled, unlabeled) = self.train.iter().cloned().partition(|s| s.label.is_some());
        TabularDataset::new(self.metadata.metadata(), labeled, unlabeled, self.test.clone())
    }

    /// Writes `metadata.toml`, `train.csv` and `test.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<WrittenDataset> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let out = WrittenDataset {
            metadata: dir.join("metadata.toml"),
            train: dir.join("train.csv"),
            test: dir.join("test.csv"),
        };
        let write = |p: &Path, text: String| std::fs::write(p, text).map_err(|e| Error::io(p, e));
        write(&out.metadata, self.metadata.to_toml())?;
        write(&out.train, write_rows(&self.metadata, &self.train)?)?;
        write(&out.test, write_rows(&self.metadata, &self.test)?)?;
        Ok(out)
    }
}

pub fn generate(kind: SynthKind, options: SynthOptions) -> SyntheticData {
    match kind {
        SynthKind::Blobs => gaussian_blobs(options),
        SynthKind::FeatureIdentity => feature_identity(options),
        SynthKind::LinearRegression => linear_regression(options),
    }
}

fn numerical(name: &str, description: &str) -> FeatureDescriptor {
    FeatureDescriptor {
        name: name.into(),
        description: description.into(),
        kind: FeatureKind::Numerical,
    }
}

/// Rounds to 6 decimals so values survive the CSV round trip unchanged.
fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn classification_rows<F>(options: SynthOptions, tag: &str, mut draw: F) -> (Vec<Sample>, Vec<Sample>)
where
    F: FnMut(&mut rand_chacha::ChaCha8Rng, usize) -> Vec<RawValue>,
{
    let mut r = rng::stream(options.seed, tag, 0);
    let mut labeled_row = |r: &mut rand_chacha::ChaCha8Rng, c: usize, keep_label: bool| Sample {
        values: draw(r, c),
        label: keep_label.then_some(Label::Class(c)),
    };
    let mut train = Vec::new();
    for i in 0..2 * options.labeled {
        train.push(labeled_row(&mut r, i % 2, true));
    }
    for _ in 0..options.unlabeled {
        let c = r.random_range(0..2);
        train.push(labeled_row(&mut r, c, false));
    }
    let test = (0..options.test).map(|i| labeled_row(&mut r, i % 2, true)).collect();
    (train, test)
}

/// Blood-test style blobs: two informative markers (mean shift split
/// evenly so the class means are 3σ apart), one noise marker.
pub fn gaussian_blobs(options: SynthOptions) -> SyntheticData {
    let shift = BLOB_SEPARATION / 2f64.sqrt();
    let (train, test) = classification_rows(options, "synth-blobs", |r, c| {
        let sign = if c == 1 { 0.5 } else { -0.5 };
        let z = |r: &mut rand_chacha::ChaCha8Rng| -> f64 { r.sample(StandardNormal) };
        vec![
            RawValue::Number(round6(50.0 + 10.0 * (sign * shift + z(r)))),
            RawValue::Number(round6(120.0 + 15.0 * (sign * shift + z(r)))),
            RawValue::Number(round6(70.0 + 8.0 * z(r))),
        ]
    });
    SyntheticData {
        metadata: MetadataFile {
            task_description: "Predict whether a patient has the condition from routine measurements".into(),
            task_type: TaskType::Classification,
            label_column: "condition".into(),
            class_names: vec!["absent".into(), "present".into()],
            features: vec![
                numerical("glucose", "fasting blood glucose"),
                numerical("pressure", "systolic blood pressure"),
                numerical("pulse", "resting heart rate"),
            ],
        },
        train,
        test,
    }
}

/// Two i.i.d. standard normal features; the label is the sign of `signal`.
pub fn feature_identity(options: SynthOptions) -> SyntheticData {
    let (train, test) = classification_rows(options, "synth-identity", |r, c| {
        // Rejection-free: draw |signal| and attach the sign of the class.
        let s: f64 = r.sample::<f64, _>(StandardNormal).abs();
        let signal = if c == 1 { s } else { -s };
        let decoy: f64 = r.sample(StandardNormal);
        vec![RawValue::Number(round6(signal)), RawValue::Number(round6(decoy))]
    });
    SyntheticData {
        metadata: MetadataFile {
            task_description: "Predict the outcome from two sensor readings".into(),
            task_type: TaskType::Classification,
            label_column: "outcome".into(),
            class_names: vec!["low".into(), "high".into()],
            features: vec![
                numerical("signal", "reading that determines the outcome"),
                numerical("decoy", "unrelated reading"),
            ],
        },
        train,
        test,
    }
}

/// `y = 2·x1 - x2 + c·ε` with `c` chosen so the noise has standard
/// deviation [`REGRESSION_NOISE`] after min-max scaling over the labeled pool.
pub fn linear_regression(options: SynthOptions) -> SyntheticData {
    let mut r = rng::stream(options.seed, "synth-linear", 0);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let draw = |r: &mut rand_chacha::ChaCha8Rng| {
        let x1: f64 = round6(r.random_range(-1.0..1.0));
        let x2: f64 = round6(r.random_range(-1.0..1.0));
        (x1, x2, 2.0 * x1 - x2, noise.sample(r))
    };
    let pool: Vec<_> = (0..options.labeled).map(|_| draw(&mut r)).collect();
    let unlabeled: Vec<_> = (0..options.unlabeled).map(|_| draw(&mut r)).collect();
    let test: Vec<_> = (0..options.test).map(|_| draw(&mut r)).collect();
    // Fixed point of c = σ·range(signal + c·ε) over the pool.
    let mut c = REGRESSION_NOISE * 6.0;
    for _ in 0..200 {
        let ys = pool.iter().map(|p| p.2 + c * p.3);
        let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
        c = REGRESSION_NOISE * (hi - lo);
    }
    let row = |p: &(f64, f64, f64, f64), labeled: bool| Sample {
        values: vec![RawValue::Number(p.0), RawValue::Number(p.1)],
        label: labeled.then_some(Label::Value(p.2 + c * p.3)),
    };
    let mut train: Vec<Sample> = pool.iter().map(|p| row(p, true)).collect();
    train.extend(unlabeled.iter().map(|p| row(p, false)));
    SyntheticData {
        metadata: MetadataFile {
            task_description: "Predict the yield from two process settings".into(),
            task_type: TaskType::Regression,
            label_column: "yield".into(),
            class_names: vec![],
            features: vec![
                numerical("temperature", "process temperature setting"),
                numerical("pressure", "process pressure setting"),
            ],
        },
        train,
        test: test.iter().map(|p| row(p, true)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, read_rows, CsvOptions};

    #[test]
    fn sizes_and_determinism() {
        let o = SynthOptions::default();
        let d = gaussian_blobs(o).dataset().unwrap();
        assert_eq!(d.labeled.len(), 200);
        assert_eq!(d.unlabeled.len(), 400);
        assert_eq!(d.test.len(), 200);
        assert_eq!(gaussian_blobs(o), gaussian_blobs(o));
        assert_ne!(gaussian_blobs(o), gaussian_blobs(SynthOptions { seed: 1, ..o }));
    }

    #[test]
    fn identity_label_is_sign_of_signal() {
        let d = feature_identity(SynthOptions::default()).dataset().unwrap();
        for s in d.labeled.iter().chain(&d.test) {
            let RawValue::Number(x) = s.values[0] else { panic!() };
            assert_eq!(s.label, Some(Label::Class(usize::from(x > 0.0))));
        }
    }

    #[test]
    fn regression_noise_is_calibrated() {
        let data = linear_regression(SynthOptions {
            labeled: 200,
            ..SynthOptions::default()
        });
        let d = data.dataset().unwrap();
        let range = d.norm_stats.target.unwrap();
        let resid: Vec<f64> = d
            .labeled
            .iter()
            .map(|s| {
                let (RawValue::Number(a), RawValue::Number(b)) = (&s.values[0], &s.values[1]) else { panic!() };
                let Some(Label::Value(y)) = s.label else { panic!() };
                (y - (2.0 * a - b)) / (range.max - range.min)
            })
            .collect();
        let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
        assert!((sd - REGRESSION_NOISE).abs() < 0.01, "{sd}");
    }

    #[test]
    fn written_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [SynthKind::Blobs, SynthKind::FeatureIdentity, SynthKind::LinearRegression] {
            let data = generate(kind, SynthOptions { labeled: 10, unlabeled: 20, test: 5, seed: 3 });
            let sub = dir.path().join(format!("{kind:?}"));
            let paths = data.write(&sub).unwrap();
            let loaded = load_dataset(&paths.train, &paths.metadata).unwrap();
            let expected = data.dataset().unwrap();
            assert_eq!(loaded.labeled, expected.labeled);
            assert_eq!(loaded.unlabeled, expected.unlabeled);
            let test = read_rows(&paths.test, &data.metadata, CsvOptions::default()).unwrap();
            assert_eq!(test, data.test);
        }
    }
}
