//! Source/target benchmark bundles with seeded, disjoint splits.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::scene::{generate_scene, Sample, SceneSpec};
use super::shift::{apply_shift_chain, default_target_shift, DomainShiftSpec};
use crate::error::{Error, Result};

/// Train:val ratio used when only a total count is given.
pub const DEFAULT_SPLIT_RATIO: (usize, usize) = (4, 1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    SourceTrain,
    SourceVal,
    TargetTrain,
    TargetVal,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] = [
        SplitKind::SourceTrain,
        SplitKind::SourceVal,
        SplitKind::TargetTrain,
        SplitKind::TargetVal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::SourceTrain => "source-train",
            SplitKind::SourceVal => "source-val",
            SplitKind::TargetTrain => "target-train",
            SplitKind::TargetVal => "target-val",
        }
    }

    pub fn is_target(self) -> bool {
        matches!(self, SplitKind::TargetTrain | SplitKind::TargetVal)
    }

    fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub scene: SceneSpec,
    pub target_shift: Vec<DomainShiftSpec>,
    /// Samples per domain; split by `split_ratio` unless counts are explicit.
    pub per_domain: usize,
    pub split_ratio: (usize, usize),
    pub n_train: Option<usize>,
    pub n_val: Option<usize>,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            target_shift: default_target_shift(),
            per_domain: 250,
            split_ratio: DEFAULT_SPLIT_RATIO,
            n_train: None,
            n_val: None,
            seed: 7,
        }
    }
}

impl BenchmarkSpec {
    /// `(train, val)` counts per domain.
    pub fn counts(&self) -> Result<(usize, usize)> {
        let (train, val) = match (self.n_train, self.n_val) {
            (Some(t), Some(v)) => (t, v),
            (t, v) => {
                let (a, b) = self.split_ratio;
                if a == 0 || b == 0 {
                    return Err(Error::Config(format!("split ratio {a}:{b} must be positive")));
                }
                let val = self.per_domain * b / (a + b);
                (t.unwrap_or(self.per_domain - val), v.unwrap_or(val))
            }
        };
        if train == 0 || val == 0 {
            return Err(Error::Config(format!("train/val counts must be positive, got {train}/{val}")));
        }
        Ok((train, val))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        for s in &self.target_shift {
            s.validate()?;
        }
        self.counts().map(|_| ())
    }

    /// Scene seed for sample `i` of `split`.
    pub fn sample_seed(&self, split: SplitKind, i: usize) -> u64 {
        splitmix(splitmix(self.seed ^ splitmix(split.index() + 1)) ^ i as u64)
    }

    /// Seed for the stochastic part of the target shift on sample `i`.
    pub fn shift_seed(&self, split: SplitKind, i: usize) -> u64 {
        splitmix(self.sample_seed(split, i) ^ 0x0053_4849_4654)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A target-domain training image; carries no label.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledImage {
    pub id: String,
    pub image: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub source_train: Vec<Sample>,
    pub source_val: Vec<Sample>,
    pub target_train: Vec<UnlabeledImage>,
    pub target_val: Vec<Sample>,
    target_train_masks: Vec<Array2<u8>>,
}

impl Benchmark {
    pub(crate) fn from_parts(
        spec: BenchmarkSpec,
        source_train: Vec<Sample>,
        source_val: Vec<Sample>,
        target_train: Vec<Sample>,
        target_val: Vec<Sample>,
    ) -> Self {
        let (target_train, target_train_masks) = target_train
            .into_iter()
            .map(|s| (UnlabeledImage { id: s.id, image: s.image }, s.mask))
            .unzip();
        Self {
            spec,
            source_train,
            source_val,
            target_train,
            target_val,
            target_train_masks,
        }
    }

    /// Ground truth for the target-train images, for evaluation only; the
    /// adaptation API never takes these.
    pub fn target_train_masks_for_eval(&self) -> &[Array2<u8>] {
        &self.target_train_masks
    }

    /// Every sample of `split` with its mask.
    pub fn labeled(&self, split: SplitKind) -> Vec<Sample> {
        match split {
            SplitKind::SourceTrain => self.source_train.clone(),
            SplitKind::SourceVal => self.source_val.clone(),
            SplitKind::TargetVal => self.target_val.clone(),
            SplitKind::TargetTrain => self
                .target_train
                .iter()
                .zip(&self.target_train_masks)
                .map(|(u, m)| Sample {
                    id: u.id.clone(),
                    image: u.image.clone(),
                    mask: m.clone(),
                })
                .collect(),
        }
    }

    pub fn len(&self, split: SplitKind) -> usize {
        match split {
            SplitKind::SourceTrain => self.source_train.len(),
            SplitKind::SourceVal => self.source_val.len(),
            SplitKind::TargetTrain => self.target_train.len(),
            SplitKind::TargetVal => self.target_val.len(),
        }
    }
}

pub fn sample_id(split: SplitKind, i: usize) -> String {
    format!("{}-{i:04}", split.name())
}

/// Renders one split member, applying the target shift where relevant.
pub fn render_sample(spec: &BenchmarkSpec, split: SplitKind, i: usize) -> Result<Sample> {
    let mut s = generate_scene(&spec.scene, spec.sample_seed(split, i))?;
    if split.is_target() {
        s.image = apply_shift_chain(&s.image, &spec.target_shift, spec.shift_seed(split, i))?
            .mapv(|v| super::scene::quantize(v as f64));
    }
    s.id = sample_id(split, i);
    Ok(s)
}

/// Builds all four splits from `spec.seed`.
pub fn make_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let (train, val) = spec.counts()?;
    let render = |split: SplitKind, n: usize| (0..n).map(|i| render_sample(spec, split, i)).collect::<Result<Vec<_>>>();
    Ok(Benchmark::from_parts(
        spec.clone(),
        render(SplitKind::SourceTrain, train)?,
        render(SplitKind::SourceVal, val)?,
        render(SplitKind::TargetTrain, train)?,
        render(SplitKind::TargetVal, val)?,
    ))
}
