#![allow(dead_code)]

use lkdn_core::autodiff::{Graph, Param};
use lkdn_core::{ConvSpec, NodeId, Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Direct summation over every output tap, written without any of the
/// library's index arithmetic.
pub fn brute_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: &ConvSpec) -> Tensor<f64> {
    let xs = x.shape();
    let out_h = xs.h + 2 * s.padding - s.dilation * (s.kernel_h - 1);
    let out_w = xs.w + 2 * s.padding - s.dilation * (s.kernel_w - 1);
    let cin_g = s.in_channels / s.groups;
    let cout_g = s.out_channels / s.groups;
    Tensor::from_fn(Shape::new(xs.n, s.out_channels, out_h, out_w), |n, o, oy, ox| {
        let g = o / cout_g;
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for ci in 0..cin_g {
            for ky in 0..s.kernel_h {
                for kx in 0..s.kernel_w {
                    let iy = (oy + ky * s.dilation) as isize - s.padding as isize;
                    let ix = (ox + kx * s.dilation) as isize - s.padding as isize;
                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                        continue;
                    }
                    acc += w.at(o, ci, ky, kx) * x.at(n, g * cin_g + ci, iy as usize, ix as usize);
                }
            }
        }
        acc
    })
}

/// Reduces `out` to a scalar through fixed random weights so every output
/// element carries a distinct gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, out: &NodeId, seed: u64) -> lkdn_core::Result<NodeId> {
    let shape = tape.value(out).shape();
    let r = tape.input(random(shape, &mut rng(seed)));
    let prod = tape.mul(out, &r)?;
    tape.sum(&prod)
}

/// Overwrites each parameter with the value its leaf holds on `tape`.
pub fn sync_from_tape(params: Vec<&mut Param<f64>>, tape: &Tape<f64>, ids: &[NodeId]) {
    for (p, id) in params.into_iter().zip(ids) {
        p.value = tape.value(id).clone();
    }
}
