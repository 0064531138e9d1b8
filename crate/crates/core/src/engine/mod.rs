pub mod eigh;
pub mod kmeans;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod rng;
pub mod tensor;
