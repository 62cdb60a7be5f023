#![allow(dead_code)]

pub mod gradients;
pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpr_core::model::{AblationFlags, DaConfig, ModelConfig};
use vpr_core::tensor::Tensor;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct loop convolution, independent of the im2col kernel.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (ci, h, wd) = x.chw().unwrap();
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for ki in 0..k {
                        for kj in 0..k {
                            let ii = (i * stride + ki) as isize - pad as isize;
                            let jj = (j * stride + kj) as isize - pad as isize;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                continue;
                            }
                            acc += x.data()[(c * h + ii as usize) * wd + jj as usize]
                                * w.data()[((o * ci + c) * k + ki) * k + kj];
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    out
}

pub fn naive_conv_t(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (_, h, wd) = x.chw().unwrap();
    let k = w.shape()[2];
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    Tensor::new(vec![w.shape()[0], ho, wo], naive_conv(x, w, b, stride, pad)).unwrap()
}

/// Small model that keeps every block cheap enough for per-test training.
pub fn small_config(flags: AblationFlags) -> ModelConfig {
    ModelConfig {
        da: DaConfig {
            channels: [4, 4, 8, 8],
            ..DaConfig::default()
        },
        ablation: flags,
        ..ModelConfig::default()
    }
}
