//! Source training, target self-training and the ablation grid.

mod ablation;
mod adapt;
mod config;
mod run_dir;
mod source;

pub use ablation::{ablation_csv, run_ablation_grid, AblationCell, AblationGroup};
pub use adapt::{self_train_adapt, self_train_adapt_with, AdaptationOutcome, EpochRecord, EpochTiming};
pub use config::{AdaptationConfig, Method, RefreshCadence, SourceConfig};
pub use run_dir::{adapt_into_run_dir, RunDir};
pub use source::{history_csv, train_source, SourceEpoch, SourceOutcome};

use ndarray::Array2;

use crate::data::Sample;
use crate::error::Result;
use crate::metrics::{dataset_mean_dice, foreground_classes};
use crate::model::{BnMode, SegModel, Tensor};

/// Batch size used for inference-only passes; running-statistics inference
/// does not depend on it.
const EVAL_BATCH: usize = 16;

/// Packs single-channel images into an `N x 1 x H x W` tensor.
pub fn images_to_tensor(images: &[&Array2<f32>]) -> Tensor<f32> {
    let (h, w) = images.first().map_or((0, 0), |i| i.dim());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        assert_eq!(img.dim(), (h, w), "images in a batch must share a size");
        data.extend(img.iter().copied());
    }
    Tensor::from_vec(images.len(), 1, h, w, data)
}

/// Argmax class maps under running batch-norm statistics.
pub fn predict_masks(model: &SegModel<f32>, images: &[&Array2<f32>]) -> Result<Vec<Array2<u8>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        for p in model.predict(&images_to_tensor(chunk), BnMode::Running)? {
            out.push(p.argmax().mapv(|c| c as u8));
        }
    }
    Ok(out)
}

/// Mean foreground Dice over `samples`.
pub fn evaluate_dice(model: &SegModel<f32>, samples: &[Sample]) -> Result<f64> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_masks(model, &images)?;
    dataset_mean_dice(
        preds.iter().zip(samples.iter().map(|s| &s.mask)),
        &foreground_classes(model.classes()),
    )
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
