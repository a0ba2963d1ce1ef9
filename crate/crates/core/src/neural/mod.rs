//! A small deterministic feed-forward network engine.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod tensor;

pub use checkpoint::{decode_network, encode_network, load_network, read_tensors, save_network, write_tensors};
pub use gradcheck::{grad_check, GradCheckReport, LossTarget};
pub use layers::Mode;
pub use loss::{loss_euclidean, loss_softmax_xent, LossKind, LossOutput};
pub use network::{Grads, LayerSpec, Network, NetworkSpec, Trace, PATCH_INPUT, WINDOW_INPUT};
pub use optim::{lr_inverse, sgd_step, Hyper};
pub use tensor::Tensor;

use crate::scalar::Scalar;

/// Momentum state for every parameter tensor of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(net: &Network<T>) -> Self {
        Sgd { velocity: net.params().iter().map(|p| vec![T::zero(); p.len()]).collect() }
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Grads<T>, hyper: &Hyper, lr: f64) {
        for ((p, g), v) in net.params_mut().iter_mut().zip(&grads.tensors).zip(&mut self.velocity) {
            sgd_step(p.data_mut(), g.data(), v, hyper, lr);
        }
    }
}
