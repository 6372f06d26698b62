#![allow(dead_code)]

use lipo_amm::checkpoint::{Checkpoint, DType, Tensor};
use lipo_amm::Matrix;
use rand::Rng;

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Sum of `rank` random outer products, scaled by `scale`.
pub fn low_rank(rng: &mut impl Rng, rows: usize, cols: usize, rank: usize, scale: f64) -> Matrix {
    let mut out = Matrix::zeros(rows, cols);
    for _ in 0..rank {
        let u = random_matrix(rng, rows, 1);
        let v = random_matrix(rng, 1, cols);
        out.add_scaled(scale, &u.matmul(&v).unwrap()).unwrap();
    }
    out
}

/// Layer names and shapes of a small MLP.
pub const MLP_LINEAR: [(&str, usize, usize); 4] = [
    ("mlp.0.weight", 16, 8),
    ("mlp.1.weight", 16, 16),
    ("mlp.2.weight", 12, 16),
    ("head.weight", 4, 12),
];

pub fn toy_mlp_base(rng: &mut impl Rng) -> Checkpoint {
    let mut c = Checkpoint::new();
    for (name, r, k) in MLP_LINEAR {
        let m = random_matrix(rng, r, k).scale(0.5);
        c.insert(
            name,
            Tensor::new(DType::F64, vec![r, k], m.into_data()).unwrap(),
        )
        .unwrap();
        let bias = name.replace("weight", "bias");
        let b = (0..r).map(|_| rng.gen_range(-0.1..0.1)).collect();
        c.insert(bias, Tensor::new(DType::F64, vec![r], b).unwrap())
            .unwrap();
    }
    c.insert(
        "norm.weight",
        Tensor::new(DType::F64, vec![8], vec![1.0; 8]).unwrap(),
    )
    .unwrap();
    c
}

/// Base plus a random rank-`rank` update on every linear layer and small noise elsewhere.
pub fn toy_mlp_tuned(base: &Checkpoint, rng: &mut impl Rng, rank: usize) -> Checkpoint {
    let mut c = Checkpoint::new();
    for (name, t) in base.tensors() {
        let values: Vec<f64> = if t.shape().len() == 2 && !name.starts_with("norm") {
            let d = low_rank(rng, t.shape()[0], t.shape()[1], rank, 0.1);
            t.values()
                .iter()
                .zip(d.data())
                .map(|(b, d)| b + d)
                .collect()
        } else {
            t.values()
                .iter()
                .map(|b| b + rng.gen_range(-0.01..0.01))
                .collect()
        };
        c.insert(
            name,
            Tensor::new(t.dtype(), t.shape().to_vec(), values).unwrap(),
        )
        .unwrap();
    }
    c
}

/// Task vector of one linear layer, read straight from the checkpoints.
pub fn layer_delta(base: &Checkpoint, tuned: &Checkpoint, name: &str) -> Matrix {
    let b = base.get(name).unwrap();
    let t = tuned.get(name).unwrap();
    let d = t
        .values()
        .iter()
        .zip(b.values())
        .map(|(t, b)| t - b)
        .collect();
    Matrix::new(b.shape()[0], b.shape()[1], d).unwrap()
}
