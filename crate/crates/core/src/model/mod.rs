//! Segmentation network, parameter snapshots and batch-norm adaptation.

mod bn_adapt;
mod layers;
mod net;
mod optim;
mod snapshot;
mod tensor;

pub use bn_adapt::{adapt_bn_statistics, BnAdaptConfig};
pub use net::{
    forward_softmax, logits_to_probmaps, stacked_grad_to_tensor, BnMode, BnStats, ForwardCache,
    ModelDescriptor, SegModel,
};
pub use optim::{Adam, AdamConfig};
pub use snapshot::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
    SNAPSHOT_MAGIC,
};
pub use tensor::{Real, Tensor};

/// Builds a model from its descriptor.
pub fn build_model(descriptor: ModelDescriptor) -> crate::Result<SegModel<f32>> {
    SegModel::new(descriptor)
}

/// Deep copy of the model's trainable parameters.
pub fn snapshot_parameters<T: Real>(model: &SegModel<T>) -> crate::ParameterSnapshot<T> {
    model.snapshot()
}
