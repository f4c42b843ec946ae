//! Multi-modal BEV world model: a tokenizer that fuses camera images and
//! lidar sweeps into a compact bird's-eye-view latent and renders both
//! modalities back out of it, plus a latent sequence diffusion model that
//! forecasts future latents from past ones and ego actions.

pub mod checkpoint;
pub mod evalmetrics;
pub mod geometry;
pub mod harness;
pub mod numerics;
pub mod synthworld;
pub mod tokenizer;
pub mod worldmodel;
