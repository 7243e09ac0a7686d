pub mod nnet;
pub mod imaging;
pub mod keypoints;
pub mod augmentation;
pub mod synth;
pub mod embedding;
pub mod identity;
pub mod evalkit;
pub mod cli;
