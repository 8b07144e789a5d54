//! Generator building blocks as plain functions over tape variables.
//!
//! Each block takes its parameters as explicit [`Var`]s so it can be driven
//! either by a [`Generator`](crate::generator::Generator) or directly in tests.

#[allow(unused_imports)] // float methods are inherent only when std is linked
use num_traits::Float;

use crate::error::{bail, Result};
use crate::scalar::Scalar;
use crate::stats::RunningStats;
use crate::tape::{BatchMoments, Tape, Var};

/// Tolerance on the L2 norm of identity embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FcVars {
    pub weight: Var,
    pub bias: Var,
}

/// The two FC heads that map an embedding to per-channel scale and shift.
#[derive(Debug, Clone, Copy)]
pub struct AdaInVars {
    pub sigma: FcVars,
    pub mu: FcVars,
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityBlockVars {
    pub adain: AdaInVars,
    pub conv1: ConvVars,
    pub conv2: ConvVars,
}

#[derive(Debug, Clone, Copy)]
pub struct ResidualVars {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderBlockVars {
    pub attention: ConvVars,
    pub conv1: ConvVars,
    pub conv2: ConvVars,
}

/// Which statistics normalize the features inside AdaIN.
#[derive(Debug, Clone, Copy)]
pub enum Stats<'a> {
    /// Statistics of the current batch (training, and the batch inference mode).
    Batch,
    /// Accumulated statistics.
    Running(&'a RunningStats),
}

/// Shared knobs of the residual blocks.
#[derive(Debug, Clone, Copy)]
pub struct BlockOptions {
    pub slope: f64,
    pub eps: f64,
    /// Residual adds and attention fusion; off for the non-fusing ablation.
    pub fuse: bool,
}

pub fn conv<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ConvVars) -> Result<Var> {
    tape.conv2d(x, p.weight, Some(p.bias), p.stride, p.padding)
}

/// Rejects embedding rows whose norm strays from 1.
pub fn check_unit_rows<T: Scalar>(tape: &Tape<T>, f_id: Var) -> Result<()> {
    let [_, e] = *tape.shape(f_id) else {
        bail!(Dimension, "embedding must be [B, E], got {:?}", tape.shape(f_id));
    };
    for (r, row) in tape.value(f_id).data().chunks(e).enumerate() {
        let n = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            bail!(Validation, "embedding row {r} has norm {n}, expected 1");
        }
    }
    Ok(())
}

/// `(f_in − μ)/σ · σ_id + μ_id` with `σ_id`, `μ_id` predicted from `f_id`.
pub fn adain<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    f_id: Var,
    p: &AdaInVars,
    stats: Stats<'_>,
    eps: f64,
) -> Result<(Var, Option<BatchMoments>)> {
    check_unit_rows(tape, f_id)?;
    let (b, c, _, _) = tape.value(x).dims4()?;
    if tape.shape(f_id)[0] != b {
        bail!(Dimension, "adain: {} embeddings for batch of {b}", tape.shape(f_id)[0]);
    }
    let (normed, observed) = match stats {
        Stats::Batch => {
            let (v, m) = tape.normalize_batch(x, eps)?;
            (v, Some(m))
        }
        Stats::Running(r) => {
            if r.channels() != c {
                bail!(Dimension, "adain: running stats for {} channels, features have {c}", r.channels());
            }
            (tape.normalize_fixed(x, &r.mean, &r.var, eps)?, None)
        }
    };
    let sigma = tape.linear(f_id, p.sigma.weight, Some(p.sigma.bias))?;
    let mu = tape.linear(f_id, p.mu.weight, Some(p.mu.bias))?;
    Ok((tape.modulate(normed, sigma, mu)?, observed))
}

/// AdaIN → conv → leaky → conv, plus the block input when fusing.
pub fn identity_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    f_id: Var,
    p: &IdentityBlockVars,
    stats: Stats<'_>,
    opt: BlockOptions,
) -> Result<(Var, Option<BatchMoments>)> {
    let (a, observed) = adain(tape, x, f_id, &p.adain, stats, opt.eps)?;
    let h = conv(tape, a, &p.conv1)?;
    let h = tape.leaky_relu(h, opt.slope)?;
    let h = conv(tape, h, &p.conv2)?;
    let out = if opt.fuse { tape.add(x, h)? } else { h };
    Ok((out, observed))
}

/// conv → leaky → conv, plus the block input when fusing. No normalization.
pub fn attribute_block<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ResidualVars, opt: BlockOptions) -> Result<Var> {
    let h = conv(tape, x, &p.conv1)?;
    let h = tape.leaky_relu(h, opt.slope)?;
    let h = conv(tape, h, &p.conv2)?;
    if opt.fuse {
        tape.add(x, h)
    } else {
        Ok(h)
    }
}

/// `M = sigmoid(conv(x_dec))`, `y = M·x_dec + (1 − M)·x_attr`. Returns `(y, M)`.
pub fn attention_fuse<T: Scalar>(tape: &mut Tape<T>, x_dec: Var, x_attr: Var, attention: &ConvVars) -> Result<(Var, Var)> {
    if tape.shape(x_dec) != tape.shape(x_attr) {
        bail!(Dimension, "fusion: x_dec {:?} vs x_attr {:?}", tape.shape(x_dec), tape.shape(x_attr));
    }
    let logits = conv(tape, x_dec, attention)?;
    let mask = tape.sigmoid(logits)?;
    let y = tape.blend(mask, x_dec, x_attr)?;
    Ok((y, mask))
}

/// Attention fusion, then conv → leaky → conv with a residual add. Without
/// fusion the mask is fixed to one and the residual is dropped.
pub fn decoder_block<T: Scalar>(
    tape: &mut Tape<T>,
    x_dec: Var,
    x_attr: Var,
    p: &DecoderBlockVars,
    opt: BlockOptions,
) -> Result<Var> {
    if tape.shape(x_dec) != tape.shape(x_attr) {
        bail!(Dimension, "decoder block: x_dec {:?} vs x_attr {:?}", tape.shape(x_dec), tape.shape(x_attr));
    }
    let y = if opt.fuse { attention_fuse(tape, x_dec, x_attr, &p.attention)?.0 } else { x_dec };
    let h = conv(tape, y, &p.conv1)?;
    let h = tape.leaky_relu(h, opt.slope)?;
    let h = conv(tape, h, &p.conv2)?;
    if opt.fuse {
        tape.add(y, h)
    } else {
        Ok(h)
    }
}

/// 3×3 conv to three channels followed by tanh.
pub fn to_rgb<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &ConvVars) -> Result<Var> {
    let h = conv(tape, x, p)?;
    tape.tanh(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, weighted_sum, DEFAULT_STEP};
    use crate::stats::channel_stats;
    use crate::tensor::Tensor;
    use crate::testutil::rand_tensor;
    use crate::Error;

    const OPT: BlockOptions = BlockOptions { slope: 0.2, eps: 1e-5, fuse: true };

    fn unit_rows(b: usize, e: usize, seed: u64) -> Tensor<f64> {
        let t = rand_tensor::<f64>(&[b, e], seed);
        let mut out = t.clone();
        for (dst, src) in out.data_mut().chunks_mut(e).zip(t.data().chunks(e)) {
            let n = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            dst.iter_mut().zip(src).for_each(|(d, s)| *d = s / n);
        }
        out
    }

    fn conv_vars(t: &mut Tape<f64>, cin: usize, cout: usize, seed: u64) -> ConvVars {
        ConvVars {
            weight: t.param(rand_tensor::<f64>(&[cout, cin, 3, 3], seed).map(|v| v * 0.3)),
            bias: t.param(rand_tensor(&[cout], seed ^ 9)),
            stride: 1,
            padding: 1,
        }
    }

    fn adain_vars(t: &mut Tape<f64>, e: usize, c: usize, seed: u64) -> AdaInVars {
        let fc = |t: &mut Tape<f64>, s| FcVars { weight: t.param(rand_tensor(&[c, e], s)), bias: t.param(rand_tensor(&[c], s ^ 1)) };
        AdaInVars { sigma: fc(t, seed), mu: fc(t, seed ^ 2) }
    }

    #[test]
    fn adain_output_has_the_predicted_statistics() {
        for (b, seed) in [(1usize, 1u64), (4, 2)] {
            let (c, e) = (5, 16);
            let mut t = Tape::new();
            // Every sample shares one identity, so batch and per-sample stats agree.
            let f = unit_rows(1, e, seed);
            let f = Tensor::stack0(&vec![&f; b]).unwrap();
            let fv = t.constant(f.clone());
            let x = t.constant(rand_tensor::<f64>(&[b, c, 6, 6], seed ^ 3).map(|v| 3.0 * v + 0.7));
            let p = adain_vars(&mut t, e, c, seed ^ 4);
            let (y, moments) = adain(&mut t, x, fv, &p, Stats::Batch, 1e-5).unwrap();
            assert!(moments.is_some());
            let (mean, std) = channel_stats(t.value(y), 0.0).unwrap();
            let sigma = t.linear(fv, p.sigma.weight, Some(p.sigma.bias)).unwrap();
            let mu = t.linear(fv, p.mu.weight, Some(p.mu.bias)).unwrap();
            for ch in 0..c {
                assert!((mean.data()[ch] - t.value(mu).data()[ch]).abs() < 1e-4);
                assert!((std.data()[ch] - t.value(sigma).data()[ch].abs()).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn adain_with_running_stats_uses_them() {
        let (c, e) = (3, 8);
        let mut t = Tape::new();
        let f = t.constant(unit_rows(2, e, 5));
        let x = t.constant(rand_tensor(&[2, c, 4, 4], 6));
        let p = adain_vars(&mut t, e, c, 7);
        let stats = RunningStats { mean: vec![0.0; c], var: vec![1.0 - 1e-5; c] };
        let (y, m) = adain(&mut t, x, f, &p, Stats::Running(&stats), 1e-5).unwrap();
        assert!(m.is_none());
        // Unit statistics leave x unnormalized: y = x·σ + μ.
        let sigma = t.linear(f, p.sigma.weight, Some(p.sigma.bias)).unwrap();
        let mu = t.linear(f, p.mu.weight, Some(p.mu.bias)).unwrap();
        let direct = t.modulate(x, sigma, mu).unwrap();
        assert!(t.value(y).max_abs_diff(t.value(direct)) < 1e-12);
        let wrong = RunningStats::new(c + 1);
        assert!(matches!(adain(&mut t, x, f, &p, Stats::Running(&wrong), 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn adain_rejects_non_unit_embeddings() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::full(&[1, 4], 0.6));
        let x = t.constant(rand_tensor(&[1, 2, 3, 3], 1));
        let p = adain_vars(&mut t, 4, 2, 2);
        assert!(matches!(adain(&mut t, x, f, &p, Stats::Batch, 1e-5), Err(Error::Validation(_))));
    }

    #[test]
    fn saturated_masks_select_one_input() {
        let mut t = Tape::new();
        let xd = t.constant(rand_tensor(&[2, 4, 5, 5], 1));
        let xa = t.constant(rand_tensor(&[2, 4, 5, 5], 2));
        for (bias, expect) in [(20.0, xd), (-20.0, xa)] {
            let att = ConvVars {
                weight: t.constant(Tensor::zeros(&[4, 4, 3, 3])),
                bias: t.constant(Tensor::full(&[4], bias)),
                stride: 1,
                padding: 1,
            };
            let (y, _) = attention_fuse(&mut t, xd, xa, &att).unwrap();
            assert!(t.value(y).max_abs_diff(t.value(expect)) < 1e-6);
        }
    }

    #[test]
    fn equal_inputs_are_a_fixed_point_of_fusion() {
        let mut t = Tape::new();
        let x = t.constant(rand_tensor(&[1, 3, 4, 4], 3));
        let att = conv_vars(&mut t, 3, 3, 4);
        let (y, m) = attention_fuse(&mut t, x, x, &att).unwrap();
        assert!(t.value(y).max_abs_diff(t.value(x)) < 1e-12);
        assert!(t.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn fusion_rejects_mismatched_shapes() {
        let mut t = Tape::new();
        let a = t.constant(rand_tensor(&[1, 3, 4, 4], 3));
        let b = t.constant(rand_tensor(&[1, 3, 2, 2], 3));
        let att = conv_vars(&mut t, 3, 3, 4);
        assert!(matches!(attention_fuse(&mut t, a, b, &att), Err(Error::Dimension(_))));
    }

    #[test]
    fn decoder_without_fusion_ignores_attributes() {
        let mut t = Tape::new();
        let xd = t.constant(rand_tensor(&[1, 2, 4, 4], 5));
        let xa = t.constant(rand_tensor(&[1, 2, 4, 4], 6));
        let xa2 = t.constant(rand_tensor(&[1, 2, 4, 4], 7));
        let p = DecoderBlockVars { attention: conv_vars(&mut t, 2, 2, 8), conv1: conv_vars(&mut t, 2, 2, 9), conv2: conv_vars(&mut t, 2, 2, 10) };
        let opt = BlockOptions { fuse: false, ..OPT };
        let y1 = decoder_block(&mut t, xd, xa, &p, opt).unwrap();
        let y2 = decoder_block(&mut t, xd, xa2, &p, opt).unwrap();
        assert_eq!(t.value(y1), t.value(y2));
        let f1 = decoder_block(&mut t, xd, xa, &p, OPT).unwrap();
        let f2 = decoder_block(&mut t, xd, xa2, &p, OPT).unwrap();
        assert!(t.value(f1).max_abs_diff(t.value(f2)) > 1e-3);
    }

    #[test]
    fn block_gradients() {
        let (c, e) = (3, 6);
        let x = rand_tensor(&[2, c, 4, 4], 11);
        let xa = rand_tensor(&[2, c, 4, 4], 12);
        let f = unit_rows(2, e, 13);
        // Fan-in scaled, as at initialization, to keep curvature moderate.
        let fc = |shape: &[usize], s| rand_tensor::<f64>(shape, s).map(|v| v / (e as f64).sqrt());
        let cw = |shape: &[usize], s| rand_tensor::<f64>(shape, s).map(|v| v / (9.0 * c as f64).sqrt());
        let ws: Vec<Tensor<f64>> = vec![
            fc(&[c, e], 14),
            rand_tensor(&[c], 15),
            fc(&[c, e], 16),
            rand_tensor(&[c], 17),
            cw(&[c, c, 3, 3], 18),
            rand_tensor(&[c], 19),
            cw(&[c, c, 3, 3], 20),
            rand_tensor(&[c], 21),
            cw(&[c, c, 3, 3], 22),
            rand_tensor(&[c], 23),
        ];
        let mut inputs = vec![x, xa];
        inputs.extend(ws);
        let r = check_inputs(&inputs, DEFAULT_STEP, |t, v| {
            let cv = |w: Var, b: Var| ConvVars { weight: w, bias: b, stride: 1, padding: 1 };
            let f = t.constant(f.clone());
            let v: Vec<Var> = [v[0], v[1], f].into_iter().chain(v[2..].iter().copied()).collect();
            let adain = AdaInVars { sigma: FcVars { weight: v[3], bias: v[4] }, mu: FcVars { weight: v[5], bias: v[6] } };
            let idp = IdentityBlockVars { adain, conv1: cv(v[7], v[8]), conv2: cv(v[9], v[10]) };
            let (h, _) = identity_block(t, v[0], v[2], &idp, Stats::Batch, OPT)?;
            let dp = DecoderBlockVars { attention: cv(v[11], v[12]), conv1: cv(v[7], v[8]), conv2: cv(v[9], v[10]) };
            let y = decoder_block(t, h, v[1], &dp, OPT)?;
            let y = to_rgb(t, y, &cv(v[9], v[10]))?;
            weighted_sum(t, y, 3)
        })
        .unwrap();
        assert!(r.max_rel < 1e-4, "{r:?}");
    }
}
