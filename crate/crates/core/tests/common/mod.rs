//! Shared helpers and reference implementations for integration tests.
#![allow(dead_code)]

use candle_core::{Device, Shape, Tensor};
use mos_core::model::{BackboneConfig, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tensor<S: Into<Shape>>(data: &[f64], shape: S) -> Tensor {
    Tensor::from_vec(data.to_vec(), shape, &Device::Cpu).unwrap()
}

pub fn random_tensor<S: Into<Shape>>(rng: &mut ChaCha8Rng, shape: S) -> Tensor {
    let shape: Shape = shape.into();
    let data: Vec<f64> = (0..shape.elem_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

pub fn perm_cost(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

pub fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    permutations(cost.len())
        .iter()
        .map(|p| perm_cost(cost, p))
        .fold(f64::INFINITY, f64::min)
}

/// Lexicographically first permutation reaching the exhaustive minimum.
pub fn brute_force_argmin(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let mut best = (f64::INFINITY, Vec::new());
    for p in permutations(cost.len()) {
        let c = perm_cost(cost, &p);
        if c < best.0 {
            best = (c, p);
        }
    }
    best
}

/// A model small enough for exhaustive gradient checks.
pub fn small_model_config(dim: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            dim,
            depth: 1,
            heads: 2,
            patch_size: 8,
            input_size: (16, 16),
            ..BackboneConfig::default()
        },
        num_classes: 4,
        proj_dim: 8,
        proj_hidden: 16,
        sa_hidden: Some(16),
        ..ModelConfig::default()
    }
}
