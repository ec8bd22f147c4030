//! Shared fixtures for the benchmarks.

use ahcnn_core::zoo;
use ahcnn_core::{QTensor, StagedModel};

/// ResNet-style model and a batch of random CIFAR-shaped images.
pub fn resnet_fixture(batch: usize, seed: u64) -> (StagedModel, QTensor, Vec<usize>) {
    let model = zoo::random_model(&zoo::resnet_blueprint(10), seed).expect("valid blueprint");
    let (images, labels) = zoo::random_images(model.input_shape(), 10, batch, seed + 1);
    (model, images, labels)
}
