//! Convolution layers with zero or partial-convolution padding.
//!
//! Partial padding treats the padded border as holes: each pre-bias output
//! is multiplied by `(kh·kw) / (window cells that land on the image)`, and
//! the bias is added afterwards. When the holes are exactly the padding this
//! is the same as mask re-weighting, and only needs one kernel.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PaddingMode {
    #[default]
    Zero,
    Partial,
}

impl fmt::Display for PaddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PaddingMode::Zero => "zero",
            PaddingMode::Partial => "partial",
        })
    }
}

impl FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PaddingMode::Zero),
            "partial" => Ok(PaddingMode::Partial),
            other => Err(Error::Config(format!(
                "unknown padding mode {other:?} (expected zero|partial)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
    pub padding_mode: PaddingMode,
}

impl Conv2dSpec {
    /// Square-kernel spec with zero padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            pad,
            padding_mode: PaddingMode::Zero,
        }
    }

    pub fn with_mode(mut self, mode: PaddingMode) -> Self {
        self.padding_mode = mode;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    /// `floor((in + 2·pad − k)/stride) + 1` per axis.
    pub fn output_size(&self, (h, w): (usize, usize)) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if self.in_channels == 0 || self.out_channels == 0 || kh == 0 || kw == 0 || self.stride == 0 {
            return Err(Error::Config(format!("degenerate convolution spec {self:?}")));
        }
        if h == 0 || w == 0 || h + 2 * self.pad < kh || w + 2 * self.pad < kw {
            return Err(Error::shape(
                "conv2d",
                &[&[h, w], &[kh, kw]],
                format!("kernel does not fit the input with padding {}", self.pad),
            ));
        }
        Ok((
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        ))
    }
}

/// Per-output-position partial-convolution ratios, shape `(OH, OW)`.
///
/// Depends only on the input size and the spec, never on pixel values.
pub fn partial_scale_map<T: Scalar>(input_hw: (usize, usize), spec: &Conv2dSpec) -> Result<Tensor<T>> {
    let (oh, ow) = spec.output_size(input_hw)?;
    let (h, w) = input_hw;
    let (kh, kw) = spec.kernel;
    // valid cells along one axis for a window starting at `start` (may be negative)
    let covered = |start: isize, k: usize, len: usize| -> usize {
        let lo = start.max(0);
        let hi = (start + k as isize).min(len as isize);
        (hi - lo).max(0) as usize
    };
    let full = T::of((kh * kw) as f64);
    let mut data = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let rows = covered((oy * spec.stride) as isize - spec.pad as isize, kh, h);
        for ox in 0..ow {
            let cols = covered((ox * spec.stride) as isize - spec.pad as isize, kw, w);
            let valid = rows * cols;
            if valid == 0 {
                return Err(Error::Config(format!(
                    "window at output ({oy}, {ox}) covers no input pixels (pad {} with kernel {:?})",
                    spec.pad, spec.kernel
                )));
            }
            data.push(full / T::of(valid as f64));
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow], data))
}

/// Convolution of an NCHW batch with `weights` (`OC×C×KH×KW`) and an
/// optional per-output-channel `bias`, honoring `spec.padding_mode`.
pub fn conv2d_forward<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    spec: &Conv2dSpec,
    weights: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let in_shape = tape.shape(input).to_vec();
    if in_shape.len() != 4 || in_shape[1] != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            &[&in_shape, &spec.weight_shape()],
            format!("expected NCHW input with {} channels", spec.in_channels),
        ));
    }
    if tape.shape(weights) != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            &[tape.shape(weights), &spec.weight_shape()],
            "weight tensor does not match spec",
        ));
    }
    let hw = (in_shape[2], in_shape[3]);
    spec.output_size(hw)?;

    let mut out = tape.conv2d(input, weights, spec.stride, spec.pad)?;
    if spec.padding_mode == PaddingMode::Partial {
        let ratios = partial_scale_map::<T>(hw, spec)?;
        let (oh, ow) = (ratios.shape()[0], ratios.shape()[1]);
        let ratios = tape.constant(ratios.reshape(vec![1, 1, oh, ow])?);
        out = tape.mul(out, ratios)?;
    }
    if let Some(b) = bias {
        if tape.shape(b) != [spec.out_channels] {
            return Err(Error::shape(
                "conv2d",
                &[tape.shape(b)],
                format!("bias must have {} entries", spec.out_channels),
            ));
        }
        let b = tape.reshape(b, &[1, spec.out_channels, 1, 1])?;
        out = tape.add(out, b)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run(input: &Tensor<f64>, spec: &Conv2dSpec, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let y = conv2d_forward(&mut tape, x, spec, wv, Some(bv)).unwrap();
        tape.value(y).clone()
    }

    fn setup(seed: u64, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = Tensor::from_fn(vec![1, 2, h, w], |_| rng.random_range(-1.0..1.0));
        let weight = Tensor::from_fn(vec![3, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let bias = Tensor::from_fn(vec![3], |_| rng.random_range(-1.0..1.0));
        (input, weight, bias)
    }

    #[test]
    fn interior_unchanged_corner_and_edge_rescaled() {
        let (input, weight, bias) = setup(1, 6, 7);
        let zero = Conv2dSpec::new(2, 3, 3, 1, 1);
        let partial = zero.with_mode(PaddingMode::Partial);
        let z = run(&input, &zero, &weight, &bias);
        let p = run(&input, &partial, &weight, &bias);
        for oc in 0..3 {
            let b = bias.data()[oc];
            let at = |t: &Tensor<f64>, y, x| t.get(&[0, oc, y, x]).unwrap();
            // interior: ratio 1
            assert_eq!(at(&p, 2, 3), at(&z, 2, 3));
            // corner: 4 valid cells of 9
            assert!(((at(&p, 0, 0) - b) - (at(&z, 0, 0) - b) * 9.0 / 4.0).abs() < 1e-12);
            assert!(((at(&p, 5, 6) - b) - (at(&z, 5, 6) - b) * 9.0 / 4.0).abs() < 1e-12);
            // edge: 6 valid cells
            assert!(((at(&p, 0, 3) - b) - (at(&z, 0, 3) - b) * 1.5).abs() < 1e-12);
            assert!(((at(&p, 3, 0) - b) - (at(&z, 3, 0) - b) * 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_zero_modes_agree_bitwise() {
        let (input, weight, bias) = setup(2, 7, 7);
        let zero = Conv2dSpec::new(2, 3, 3, 2, 0);
        let z = run(&input, &zero, &weight, &bias);
        let p = run(&input, &zero.with_mode(PaddingMode::Partial), &weight, &bias);
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&z), bits(&p));
    }

    #[test]
    fn scale_map_examples() {
        let spec = Conv2dSpec::new(1, 1, 3, 1, 0);
        let m = partial_scale_map::<f64>((5, 5), &spec).unwrap();
        assert!(m.data().iter().all(|&r| r == 1.0));

        let spec = Conv2dSpec::new(1, 1, 3, 1, 1);
        let m = partial_scale_map::<f64>((1, 1), &spec).unwrap();
        assert_eq!(m.data(), &[9.0]);
    }

    #[test]
    fn empty_window_is_config_error() {
        // pad 3 with a 3×3 kernel: the first window sits entirely in the border
        let spec = Conv2dSpec::new(1, 1, 3, 1, 3);
        assert!(matches!(partial_scale_map::<f64>((4, 4), &spec), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let spec = Conv2dSpec::new(2, 3, 3, 1, 1);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 4, 5, 5]));
        let w = tape.constant(Tensor::zeros(vec![3, 2, 3, 3]));
        assert!(matches!(
            conv2d_forward(&mut tape, x, &spec, w, None),
            Err(Error::Shape { .. })
        ));
        let x = tape.constant(Tensor::zeros(vec![1, 2, 5, 5]));
        let bad_w = tape.constant(Tensor::zeros(vec![3, 2, 1, 1]));
        assert!(matches!(
            conv2d_forward(&mut tape, x, &spec, bad_w, None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn weight_gradients_in_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mode in [PaddingMode::Zero, PaddingMode::Partial] {
            for _ in 0..3 {
                let spec = Conv2dSpec::new(2, 3, 3, 1, 1).with_mode(mode);
                let input = Tensor::from_fn(vec![2, 2, 5, 5], |_| rng.random_range(-1.0..1.0));
                let weight = Tensor::from_fn(vec![3, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
                let probe = Tensor::from_fn(vec![2, 3, 5, 5], |_| rng.random_range(-1.0..1.0));
                let err = grad_check(
                    |tape, w| {
                        let x = tape.constant(input.clone());
                        let b = tape.constant(Tensor::full(vec![3], 0.3));
                        let y = conv2d_forward(tape, x, &spec, w, Some(b))?;
                        let p = tape.constant(probe.clone());
                        let y = tape.mul(y, p)?;
                        tape.sum(y)
                    },
                    &weight,
                    1e-4,
                )
                .unwrap();
                assert!(err < 1e-4, "{mode}: {err}");
            }
        }
    }

    #[test]
    fn padding_mode_parses() {
        assert_eq!("partial".parse::<PaddingMode>().unwrap(), PaddingMode::Partial);
        assert_eq!(PaddingMode::Zero.to_string(), "zero");
        assert!("same".parse::<PaddingMode>().is_err());
    }
}
