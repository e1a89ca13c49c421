//! A small residual classifier: a 3×3 stem, then three stages of two basic
//! blocks at widths 16/32/64 (stride 2 entering stages two and three),
//! global average pooling and a linear head.
//!
//! Normalization layers are replaced by a learnable per-channel scale and
//! shift with no running statistics, so training and evaluation run the
//! same computation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{conv2d_forward, Conv2dSpec, PaddingMode};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result, TensorMismatch};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const STAGE_WIDTHS: [usize; 3] = [16, 32, 64];
pub const BLOCKS_PER_STAGE: usize = 2;
pub const FEATURE_DIM: usize = 64;
pub const MIN_INPUT_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Affine<P> {
    pub scale: P,
    pub shift: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<P> {
    pub conv1: P,
    pub affine1: Affine<P>,
    pub conv2: P,
    pub affine2: Affine<P>,
    pub projection: Option<Projection<P>>,
}

/// Every learnable slot of the network. `P` is `Tensor<T>` for stored
/// parameters and [`Var`] once they are bound to a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Layers<P> {
    pub stem: P,
    pub stem_affine: Affine<P>,
    pub blocks: Vec<Block<P>>,
    pub classifier_weight: P,
    pub classifier_bias: P,
}

impl<P> Layers<P> {
    /// Visits slots in checkpoint order with their dotted names.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a P)) {
        f("stem.weight".into(), &self.stem);
        f("stem.scale".into(), &self.stem_affine.scale);
        f("stem.shift".into(), &self.stem_affine.shift);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = block_prefix(i);
            f(format!("{p}.conv1.weight"), &b.conv1);
            f(format!("{p}.affine1.scale"), &b.affine1.scale);
            f(format!("{p}.affine1.shift"), &b.affine1.shift);
            f(format!("{p}.conv2.weight"), &b.conv2);
            f(format!("{p}.affine2.scale"), &b.affine2.scale);
            f(format!("{p}.affine2.shift"), &b.affine2.shift);
            if let Some(proj) = &b.projection {
                f(format!("{p}.projection.weight"), &proj.weight);
                f(format!("{p}.projection.bias"), &proj.bias);
            }
        }
        f("classifier.weight".into(), &self.classifier_weight);
        f("classifier.bias".into(), &self.classifier_bias);
    }

    /// Same order as [`Layers::visit`].
    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut P)) {
        f(&mut self.stem);
        f(&mut self.stem_affine.scale);
        f(&mut self.stem_affine.shift);
        for b in &mut self.blocks {
            f(&mut b.conv1);
            f(&mut b.affine1.scale);
            f(&mut b.affine1.shift);
            f(&mut b.conv2);
            f(&mut b.affine2.scale);
            f(&mut b.affine2.shift);
            if let Some(proj) = &mut b.projection {
                f(&mut proj.weight);
                f(&mut proj.bias);
            }
        }
        f(&mut self.classifier_weight);
        f(&mut self.classifier_bias);
    }

    pub fn try_map<Q>(&self, mut f: impl FnMut(&str, &P) -> Result<Q>) -> Result<Layers<Q>> {
        let affine = |prefix: &str, a: &Affine<P>, f: &mut dyn FnMut(&str, &P) -> Result<Q>| -> Result<Affine<Q>> {
            Ok(Affine {
                scale: f(&format!("{prefix}.scale"), &a.scale)?,
                shift: f(&format!("{prefix}.shift"), &a.shift)?,
            })
        };
        let stem = f("stem.weight", &self.stem)?;
        let stem_affine = affine("stem", &self.stem_affine, &mut f)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let p = block_prefix(i);
            let conv1 = f(&format!("{p}.conv1.weight"), &b.conv1)?;
            let affine1 = affine(&format!("{p}.affine1"), &b.affine1, &mut f)?;
            let conv2 = f(&format!("{p}.conv2.weight"), &b.conv2)?;
            let affine2 = affine(&format!("{p}.affine2"), &b.affine2, &mut f)?;
            let projection = match &b.projection {
                Some(proj) => Some(Projection {
                    weight: f(&format!("{p}.projection.weight"), &proj.weight)?,
                    bias: f(&format!("{p}.projection.bias"), &proj.bias)?,
                }),
                None => None,
            };
            blocks.push(Block {
                conv1,
                affine1,
                conv2,
                affine2,
                projection,
            });
        }
        Ok(Layers {
            stem,
            stem_affine,
            blocks,
            classifier_weight: f("classifier.weight", &self.classifier_weight)?,
            classifier_bias: f("classifier.bias", &self.classifier_bias)?,
        })
    }
}

fn block_prefix(i: usize) -> String {
    format!("stage{}.block{}", i / BLOCKS_PER_STAGE + 1, i % BLOCKS_PER_STAGE)
}

/// Shape-determining hyperparameters of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub n_classes: usize,
    pub padding_mode: PaddingMode,
}

impl Architecture {
    pub fn stem_spec(&self) -> Conv2dSpec {
        Conv2dSpec::new(self.in_channels, STAGE_WIDTHS[0], 3, 1, 1).with_mode(self.padding_mode)
    }

    /// (conv1, conv2, projection) specs of block `i`.
    pub fn block_specs(&self, i: usize) -> (Conv2dSpec, Conv2dSpec, Option<Conv2dSpec>) {
        let stage = i / BLOCKS_PER_STAGE;
        let width = STAGE_WIDTHS[stage];
        let first = i.is_multiple_of(BLOCKS_PER_STAGE);
        let (in_w, stride) = if first && stage > 0 {
            (STAGE_WIDTHS[stage - 1], 2)
        } else {
            (width, 1)
        };
        let conv1 = Conv2dSpec::new(in_w, width, 3, stride, 1).with_mode(self.padding_mode);
        let conv2 = Conv2dSpec::new(width, width, 3, 1, 1).with_mode(self.padding_mode);
        let projection = (in_w != width || stride != 1)
            .then(|| Conv2dSpec::new(in_w, width, 1, stride, 0).with_mode(self.padding_mode));
        (conv1, conv2, projection)
    }

    /// Expected shape of every parameter, in checkpoint order.
    pub fn shapes(&self) -> Layers<Vec<usize>> {
        let w = |s: Conv2dSpec| s.weight_shape().to_vec();
        let aff = |c: usize| Affine {
            scale: vec![c],
            shift: vec![c],
        };
        let blocks = (0..STAGE_WIDTHS.len() * BLOCKS_PER_STAGE)
            .map(|i| {
                let (c1, c2, proj) = self.block_specs(i);
                Block {
                    conv1: w(c1),
                    affine1: aff(c1.out_channels),
                    conv2: w(c2),
                    affine2: aff(c2.out_channels),
                    projection: proj.map(|p| Projection {
                        weight: w(p),
                        bias: vec![p.out_channels],
                    }),
                }
            })
            .collect();
        Layers {
            stem: w(self.stem_spec()),
            stem_affine: aff(STAGE_WIDTHS[0]),
            blocks,
            classifier_weight: vec![FEATURE_DIM, self.n_classes],
            classifier_bias: vec![self.n_classes],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniResNetParams<T> {
    pub arch: Architecture,
    pub layers: Layers<Tensor<T>>,
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ResNetOutput {
    /// `N × classes`
    pub logits: Var,
    /// `N × 64`, the pooled features right before the classifier.
    pub penultimate: Var,
    /// Parameter leaves, in checkpoint order.
    pub params: Vec<Var>,
}

impl<T: Scalar> MiniResNetParams<T> {
    /// He-style initialization: conv and classifier weights drawn from
    /// `N(0, 2/fan_in)`. Affine scales start at one except the last scale of
    /// each residual branch, which starts at zero so every block begins as
    /// the identity; shifts and biases start at zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.in_channels == 0 || arch.n_classes == 0 {
            return Err(Error::Config(
                "network needs at least one input channel and one class".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |shape: &[usize]| -> Tensor<T> {
            let fan_in: usize = if shape.len() == 4 {
                shape[1..].iter().product()
            } else {
                shape[0]
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(shape.to_vec(), |_| T::of(normal.sample(&mut rng)))
        };
        let shapes = arch.shapes();
        let mut layers = shapes.try_map(|name, shape| {
            let t = if name.ends_with(".scale") {
                Tensor::ones(shape.clone())
            } else if name.ends_with(".shift") || name.ends_with(".bias") {
                Tensor::zeros(shape.clone())
            } else {
                he(shape)
            };
            Ok(t)
        })?;
        for b in &mut layers.blocks {
            b.affine2.scale = Tensor::zeros(b.affine2.scale.shape().to_vec());
        }
        Ok(MiniResNetParams { arch, layers })
    }

    /// Rebuilds parameters from named tensors, reporting every name whose
    /// shape is missing, unexpected or different.
    pub fn from_named(arch: Architecture, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut found: std::collections::BTreeMap<String, Tensor<T>> = named.into_iter().collect();
        let mut mismatches = Vec::new();
        let layers = arch.shapes().try_map(|name, shape| {
            Ok(match found.remove(name) {
                Some(t) if t.shape() == shape.as_slice() => Some(t),
                Some(t) => {
                    mismatches.push(TensorMismatch {
                        name: name.to_string(),
                        expected: Some(shape.clone()),
                        found: Some(t.shape().to_vec()),
                    });
                    None
                }
                None => {
                    mismatches.push(TensorMismatch {
                        name: name.to_string(),
                        expected: Some(shape.clone()),
                        found: None,
                    });
                    None
                }
            })
        })?;
        for (name, t) in found {
            mismatches.push(TensorMismatch {
                name,
                expected: None,
                found: Some(t.shape().to_vec()),
            });
        }
        if !mismatches.is_empty() {
            return Err(Error::ArchitectureMismatch(mismatches));
        }
        let layers = layers.try_map(|_, t| Ok(t.clone().expect("checked above")))?;
        Ok(MiniResNetParams { arch, layers })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.layers.visit(|name, t| out.push((name, t)));
        out
    }

    /// Calls `f(index, tensor)` for every parameter in checkpoint order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut Tensor<T>)) {
        let mut i = 0;
        self.layers.visit_mut(|t| {
            f(i, t);
            i += 1;
        });
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Switches every convolution between zero and partial padding. The
    /// parameters themselves are untouched.
    pub fn set_padding_mode(&mut self, mode: PaddingMode) {
        self.arch.padding_mode = mode;
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Layers<Var> {
        self.layers
            .try_map(|_, t| Ok(tape.leaf(t.clone())))
            .expect("binding cannot fail")
    }
}

fn affine<T: Scalar>(tape: &mut Tape<T>, x: Var, a: &Affine<Var>) -> Result<Var> {
    let c = tape.shape(a.scale)[0];
    let s = tape.reshape(a.scale, &[1, c, 1, 1])?;
    let b = tape.reshape(a.shift, &[1, c, 1, 1])?;
    let y = tape.mul(x, s)?;
    tape.add(y, b)
}

/// Runs the network on an NCHW batch.
pub fn mini_resnet_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &MiniResNetParams<T>,
    batch: Var,
) -> Result<ResNetOutput> {
    let arch = params.arch;
    let shape = tape.shape(batch).to_vec();
    if shape.len() != 4 || shape[1] != arch.in_channels {
        return Err(Error::shape(
            "mini_resnet_forward",
            &[&shape],
            format!("expected N×{}×H×W input", arch.in_channels),
        ));
    }
    if shape[2] < MIN_INPUT_SIZE || shape[3] < MIN_INPUT_SIZE {
        return Err(Error::shape(
            "mini_resnet_forward",
            &[&shape],
            format!("spatial size must be at least {MIN_INPUT_SIZE}×{MIN_INPUT_SIZE}"),
        ));
    }
    let vars = params.bind(tape);
    forward_layers(tape, arch, &vars, batch)
}

/// [`mini_resnet_forward`] over slots already placed on the tape, so any
/// subset of them can be swapped for other nodes.
pub fn forward_layers<T: Scalar>(
    tape: &mut Tape<T>,
    arch: Architecture,
    vars: &Layers<Var>,
    batch: Var,
) -> Result<ResNetOutput> {
    let n = tape.shape(batch)[0];
    let mut x = conv2d_forward(tape, batch, &arch.stem_spec(), vars.stem, None)?;
    x = affine(tape, x, &vars.stem_affine)?;
    x = tape.relu(x)?;

    for (i, b) in vars.blocks.iter().enumerate() {
        let (c1, c2, proj) = arch.block_specs(i);
        let mut h = conv2d_forward(tape, x, &c1, b.conv1, None)?;
        h = affine(tape, h, &b.affine1)?;
        h = tape.relu(h)?;
        h = conv2d_forward(tape, h, &c2, b.conv2, None)?;
        h = affine(tape, h, &b.affine2)?;
        let skip = match (&b.projection, proj) {
            (Some(p), Some(spec)) => conv2d_forward(tape, x, &spec, p.weight, Some(p.bias))?,
            _ => x,
        };
        let sum = tape.add(h, skip)?;
        x = tape.relu(sum)?;
    }

    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[n, s[1], s[2] * s[3]])?;
    let penultimate = tape.mean_last(flat)?;
    let z = tape.matmul(penultimate, vars.classifier_weight)?;
    let logits = tape.add(z, vars.classifier_bias)?;

    let mut param_vars = Vec::new();
    vars.visit(|_, v| param_vars.push(*v));
    Ok(ResNetOutput {
        logits,
        penultimate,
        params: param_vars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn arch(n_classes: usize) -> Architecture {
        Architecture {
            in_channels: 3,
            n_classes,
            padding_mode: PaddingMode::Zero,
        }
    }

    #[test]
    fn output_shapes_for_one_image() {
        let params = MiniResNetParams::<f64>::init(arch(10), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 3, 32, 32], 0.5));
        let out = mini_resnet_forward(&mut tape, &params, x).unwrap();
        assert_eq!(tape.shape(out.penultimate), &[1, 64]);
        assert_eq!(tape.shape(out.logits), &[1, 10]);
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let params = MiniResNetParams::<f64>::init(arch(3), 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3, 8, 8]));
        let out = mini_resnet_forward(&mut tape, &params, x).unwrap();
        assert!(tape.value(out.logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_images_identical_rows() {
        let params = MiniResNetParams::<f64>::init(arch(3), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img: Vec<f64> = (0..3 * 12 * 12).map(|_| rng.random()).collect();
        let batch = Tensor::new(vec![2, 3, 12, 12], [img.clone(), img].concat()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let out = mini_resnet_forward(&mut tape, &params, x).unwrap();
        let l = tape.value(out.logits);
        assert_eq!(l.row(0), l.row(1));
        let p = tape.value(out.penultimate);
        assert_eq!(p.row(0), p.row(1));
    }

    #[test]
    fn undersized_input_rejected() {
        let params = MiniResNetParams::<f64>::init(arch(3), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 7, 8]));
        assert!(matches!(
            mini_resnet_forward(&mut tape, &params, x),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn padding_swap_keeps_parameter_count() {
        let mut params = MiniResNetParams::<f64>::init(arch(3), 4).unwrap();
        let before = params.parameter_count();
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        params.set_padding_mode(PaddingMode::Partial);
        assert_eq!(params.parameter_count(), before);
        let after: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, after);
    }

    #[test]
    fn skip_paths_match_main_paths() {
        let a = arch(3);
        let mut hw = (32, 32);
        hw = a.stem_spec().output_size(hw).unwrap();
        for i in 0..6 {
            let (c1, c2, proj) = a.block_specs(i);
            let main = c2.output_size(c1.output_size(hw).unwrap()).unwrap();
            let skip = proj.map_or(Ok(hw), |p| p.output_size(hw)).unwrap();
            assert_eq!(main, skip, "block {i}");
            if proj.is_none() {
                assert_eq!(c1.in_channels, c2.out_channels);
            }
            hw = main;
        }
        assert_eq!(hw, (8, 8));
    }

    #[test]
    fn from_named_reports_mismatch() {
        let params = MiniResNetParams::<f64>::init(arch(3), 5).unwrap();
        let named: Vec<(String, Tensor<f64>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let ok = MiniResNetParams::from_named(params.arch, named.clone()).unwrap();
        assert_eq!(ok, params);
        match MiniResNetParams::from_named(arch(10), named) {
            Err(Error::ArchitectureMismatch(items)) => {
                assert!(items.iter().any(|m| m.name == "classifier.weight"
                    && m.expected == Some(vec![64, 10])
                    && m.found == Some(vec![64, 3])));
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = MiniResNetParams::<f64>::init(arch(3), 9).unwrap();
        let b = MiniResNetParams::<f64>::init(arch(3), 9).unwrap();
        let c = MiniResNetParams::<f64>::init(arch(3), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
