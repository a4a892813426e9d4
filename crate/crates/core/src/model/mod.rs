//! The four trainable networks and their forward/backward passes.
//!
//! * `gz`: input features to the 512-dimensional embedding `z`.
//! * `ga`: embedding to attribute probabilities (logistic output).
//! * `c`: joint feature `z ⊕ a` to `K_s + 1` class logits, the last being
//!   the single "unknown" class.
//! * `d`: joint feature to seen/unseen probabilities.
//!
//! Every network is affine → ReLU → affine.

pub mod checkpoint;
pub mod gradcheck;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Rng};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use gradcheck::{grad_check, GradCheckReport};

pub const EMBED_HIDDEN: usize = 1024;
pub const EMBED_DIM: usize = 512;
pub const HEAD_HIDDEN: usize = 256;

/// Layer widths of the four networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub attribute_dim: usize,
    pub known_classes: usize,
    pub embed_hidden: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
}

impl ModelShape {
    pub fn new(input_dim: usize, attribute_dim: usize, known_classes: usize) -> Self {
        ModelShape {
            input_dim,
            attribute_dim,
            known_classes,
            embed_hidden: EMBED_HIDDEN,
            embed_dim: EMBED_DIM,
            head_hidden: HEAD_HIDDEN,
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.embed_dim + self.attribute_dim
    }
}

/// `y = x W + b`, with `W` stored input-major (`in x out`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Array1<f64>,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Dense {
            weight: Matrix::from_shape_fn((fan_in, fan_out), |_| rng.uniform(-bound, bound)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Dense {
            weight: Matrix::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Matrix {
        x.dot(&self.weight) + &self.bias
    }
}

/// Values recorded by a forward pass of a [`TwoLayer`] network.
#[derive(Debug, Clone)]
pub struct LayerTape {
    input: Matrix,
    /// Post-ReLU hidden activations.
    hidden: Matrix,
}

/// affine → ReLU → affine.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayer {
    pub hidden: Dense,
    pub output: Dense,
}

impl TwoLayer {
    fn init(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        TwoLayer {
            hidden: Dense::init(input, hidden, rng),
            output: Dense::init(hidden, output, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        TwoLayer {
            hidden: self.hidden.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim()
    }

    fn check_input(&self, x: ArrayView2<'_, f64>, name: &str) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Contract(format!(
                "{name} expects {} input columns, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Output pre-activations.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Matrix {
        let h = self.hidden.forward(x).mapv_into(relu);
        self.output.forward(h.view())
    }

    pub fn forward_taped(&self, x: ArrayView2<'_, f64>) -> (Matrix, LayerTape) {
        let hidden = self.hidden.forward(x).mapv_into(relu);
        let out = self.output.forward(hidden.view());
        (
            out,
            LayerTape {
                input: x.to_owned(),
                hidden,
            },
        )
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, tape: &LayerTape, d_out: ArrayView2<'_, f64>, grads: &mut TwoLayer) -> Matrix {
        grads.output.weight += &tape.hidden.t().dot(&d_out);
        grads.output.bias += &d_out.sum_axis(Axis(0));
        let mut d_hidden = d_out.dot(&self.output.weight.t());
        ndarray::Zip::from(&mut d_hidden)
            .and(&tape.hidden)
            .for_each(|g, &h| {
                if h <= 0.0 {
                    *g = 0.0;
                }
            });
        grads.hidden.weight += &tape.input.t().dot(&d_hidden);
        grads.hidden.bias += &d_hidden.sum_axis(Axis(0));
        d_hidden.dot(&self.hidden.weight.t())
    }

    fn dense_layers(&self) -> [&Dense; 2] {
        [&self.hidden, &self.output]
    }

    fn dense_layers_mut(&mut self) -> [&mut Dense; 2] {
        [&mut self.hidden, &mut self.output]
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

/// Weights of the four networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub gz: TwoLayer,
    pub ga: TwoLayer,
    pub c: TwoLayer,
    pub d: TwoLayer,
}

/// Uniform fan-in initialisation, zero biases.
pub fn init_params(input_dim: usize, attribute_dim: usize, known_classes: usize, seed: u64) -> ModelParams {
    init_params_with(ModelShape::new(input_dim, attribute_dim, known_classes), seed)
}

pub fn init_params_with(shape: ModelShape, seed: u64) -> ModelParams {
    assert!(
        shape.input_dim > 0 && shape.attribute_dim > 0 && shape.known_classes > 0,
        "model dimensions must be positive: {shape:?}"
    );
    let mut rng = Rng::new(seed);
    let joint = shape.joint_dim();
    ModelParams {
        gz: TwoLayer::init(shape.input_dim, shape.embed_hidden, shape.embed_dim, &mut rng),
        ga: TwoLayer::init(shape.embed_dim, shape.head_hidden, shape.attribute_dim, &mut rng),
        c: TwoLayer::init(joint, shape.head_hidden, shape.known_classes + 1, &mut rng),
        d: TwoLayer::init(joint, shape.head_hidden, 2, &mut rng),
    }
}

impl ModelParams {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.gz.in_dim(),
            attribute_dim: self.ga.out_dim(),
            known_classes: self.c.out_dim() - 1,
            embed_hidden: self.gz.hidden.out_dim(),
            embed_dim: self.gz.out_dim(),
            head_hidden: self.ga.hidden.out_dim(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            gz: self.gz.zeros_like(),
            ga: self.ga.zeros_like(),
            c: self.c.zeros_like(),
            d: self.d.zeros_like(),
        }
    }

    pub fn networks(&self) -> [&TwoLayer; 4] {
        [&self.gz, &self.ga, &self.c, &self.d]
    }

    /// Every weight and bias as a flat slice, in declaration order
    /// (per network: hidden weight, hidden bias, output weight, output bias).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(16);
        for net in self.networks() {
            for layer in net.dense_layers() {
                out.push(layer.weight.as_slice().expect("standard layout"));
                out.push(layer.bias.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(16);
        for net in [&mut self.gz, &mut self.ga, &mut self.c, &mut self.d] {
            for layer in net.dense_layers_mut() {
                out.push(layer.weight.as_slice_mut().expect("standard layout"));
                out.push(layer.bias.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    /// `(rows, cols)` of every tensor from [`ModelParams::tensors`]; biases are
    /// `1 x n`.
    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(16);
        for net in self.networks() {
            for layer in net.dense_layers() {
                out.push(layer.weight.dim());
                out.push((1, layer.bias.len()));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over the little-endian bytes of every tensor.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.tensors() {
            for v in t {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += scale * b;
            }
        }
    }
}

fn check_rows(x: ArrayView2<'_, f64>, cols: usize, name: &str) -> Result<()> {
    if x.ncols() != cols {
        return Err(Error::Contract(format!("{name} expects {cols} columns, got {}", x.ncols())));
    }
    Ok(())
}

pub fn forward_gz(params: &ModelParams, x: ArrayView2<'_, f64>) -> Result<Matrix> {
    params.gz.check_input(x, "G_Z")?;
    Ok(params.gz.forward(x))
}

/// Attribute probabilities in `(0, 1)`.
pub fn forward_ga(params: &ModelParams, z: ArrayView2<'_, f64>) -> Result<Matrix> {
    params.ga.check_input(z, "G_A")?;
    Ok(params.ga.forward(z).mapv_into(logistic))
}

/// Class logits, one row per joint feature row.
pub fn forward_c(params: &ModelParams, joint: ArrayView2<'_, f64>) -> Result<Matrix> {
    check_rows(joint, params.c.in_dim(), "C")?;
    Ok(params.c.forward(joint))
}

/// Seen/unseen probabilities; column 0 is seen, column 1 unseen.
pub fn forward_d(params: &ModelParams, joint: ArrayView2<'_, f64>) -> Result<Matrix> {
    check_rows(joint, params.d.in_dim(), "D")?;
    Ok(softmax_rows(&params.d.forward(joint)))
}

/// Visual embedding followed by an attribute vector.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFeature(pub Array1<f64>);

impl JointFeature {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Splits back into `(z, a)` given the embedding width.
    pub fn split(&self, embed_dim: usize) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
        let v = self.0.view();
        v.split_at(Axis(0), embed_dim)
    }
}

pub fn fuse(z: ArrayView1<'_, f64>, a: ArrayView1<'_, f64>) -> Result<JointFeature> {
    if let Some(v) = a.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("attribute value {v} outside [0, 1]")));
    }
    Ok(JointFeature(ndarray::concatenate![Axis(0), z, a]))
}

/// Role of a sample when forming its joint features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    Source,
    TargetSeen,
    TargetUnseen,
}

/// Where the attribute half of a joint feature comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeOrigin {
    GroundTruth,
    Pseudo,
    Predicted,
}

impl SampleKind {
    /// Attribute origins of the joint features a sample contributes.
    pub fn joint_origins(self) -> &'static [AttributeOrigin] {
        match self {
            SampleKind::Source => &[AttributeOrigin::GroundTruth, AttributeOrigin::Predicted],
            SampleKind::TargetSeen => &[AttributeOrigin::Pseudo, AttributeOrigin::Predicted],
            SampleKind::TargetUnseen => &[AttributeOrigin::Predicted],
        }
    }
}

/// Joint features of one sample: source `{z ⊕ a, z ⊕ â}`, seen target
/// `{z ⊕ ã, z ⊕ â}`, unseen target `{z ⊕ â}`.
pub fn joint_feature_sets(
    kind: SampleKind,
    z: ArrayView1<'_, f64>,
    ground_truth: Option<ArrayView1<'_, f64>>,
    pseudo: Option<ArrayView1<'_, f64>>,
    predicted: ArrayView1<'_, f64>,
) -> Result<Vec<JointFeature>> {
    kind.joint_origins()
        .iter()
        .map(|origin| {
            let a = match origin {
                AttributeOrigin::GroundTruth => ground_truth
                    .ok_or_else(|| Error::Contract("source sample without ground-truth attributes".into()))?,
                AttributeOrigin::Pseudo => {
                    pseudo.ok_or_else(|| Error::Contract("seen target sample without pseudo attributes".into()))?
                }
                AttributeOrigin::Predicted => predicted,
            };
            fuse(z, a)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, Array2};

    fn small_shape() -> ModelShape {
        ModelShape {
            input_dim: 5,
            attribute_dim: 3,
            known_classes: 2,
            embed_hidden: 7,
            embed_dim: 6,
            head_hidden: 4,
        }
    }

    #[test]
    fn paper_shapes() {
        let p = init_params(32, 12, 4, 1);
        assert_eq!(p.gz.hidden.weight.dim(), (32, 1024));
        assert_eq!(p.gz.output.weight.dim(), (1024, 512));
        assert_eq!(p.ga.hidden.weight.dim(), (512, 256));
        assert_eq!(p.ga.output.weight.dim(), (256, 12));
        assert_eq!(p.c.hidden.weight.dim(), (524, 256));
        assert_eq!(p.c.output.weight.dim(), (256, 5));
        assert_eq!(p.d.hidden.weight.dim(), (524, 256));
        assert_eq!(p.d.output.weight.dim(), (256, 2));
        assert_eq!(p.shape(), ModelShape::new(32, 12, 4));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_params_with(small_shape(), 3);
        assert_eq!(a, init_params_with(small_shape(), 3));
        assert_ne!(a, init_params_with(small_shape(), 4));
        for net in a.networks() {
            for layer in net.dense_layers() {
                assert!(layer.bias.iter().all(|&b| b == 0.0));
                let bound = (6.0 / layer.in_dim() as f64).sqrt();
                assert!(layer.weight.iter().all(|w| w.abs() <= bound));
            }
        }
    }

    #[test]
    fn zero_weights_give_neutral_outputs() {
        let p = init_params_with(small_shape(), 0).zeros_like();
        let x = Array2::from_elem((2, 5), 1.5);
        assert!(forward_gz(&p, x.view()).unwrap().iter().all(|&v| v == 0.0));
        let z = Array2::from_elem((2, 6), 0.3);
        assert!(forward_ga(&p, z.view()).unwrap().iter().all(|&v| v == 0.5));
        let f = Array2::from_elem((2, 9), 0.3);
        let c = softmax_rows(&forward_c(&p, f.view()).unwrap());
        assert!(c.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let d = forward_d(&p, f.view()).unwrap();
        assert!(d.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let p = init_params_with(small_shape(), 8);
        let x = Array2::from_shape_fn((3, 5), |(_, j)| j as f64 - 2.0);
        let z = forward_gz(&p, x.view()).unwrap();
        assert_eq!(z.row(0), z.row(1));
        assert_eq!(z.row(1), z.row(2));
    }

    /// Straight-line evaluation of affine → ReLU → affine with explicit loops.
    fn reference_two_layer(net: &TwoLayer, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..net.hidden.out_dim())
            .map(|j| {
                let mut s = net.hidden.bias[j];
                for (i, xi) in x.iter().enumerate() {
                    s += xi * net.hidden.weight[[i, j]];
                }
                s.max(0.0)
            })
            .collect();
        (0..net.output.out_dim())
            .map(|k| {
                let mut s = net.output.bias[k];
                for (j, hj) in h.iter().enumerate() {
                    s += hj * net.output.weight[[j, k]];
                }
                s
            })
            .collect()
    }

    #[test]
    fn forwards_match_reference_evaluation() {
        let mut p = init_params(32, 12, 4, 21);
        let mut rng = Rng::new(2);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += 0.01 * rng.normal();
            }
        }
        let x: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
        let xm = Array2::from_shape_vec((1, 32), x.clone()).unwrap();
        let z = forward_gz(&p, xm.view()).unwrap();
        let z_ref = reference_two_layer(&p.gz, &x);
        for (a, b) in z.iter().zip(&z_ref) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        let a = forward_ga(&p, z.view()).unwrap();
        let a_ref: Vec<f64> = reference_two_layer(&p.ga, &z_ref).into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        for (u, v) in a.iter().zip(&a_ref) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-10);
            assert!(*u > 0.0 && *u < 1.0);
        }
        let f: Vec<f64> = z_ref.iter().chain(a_ref.iter()).copied().collect();
        let fm = Array2::from_shape_vec((1, f.len()), f.clone()).unwrap();
        let c = forward_c(&p, fm.view()).unwrap();
        for (u, v) in c.iter().zip(reference_two_layer(&p.c, &f)) {
            assert_abs_diff_eq!(*u, v, epsilon = 1e-10);
        }
        let d = forward_d(&p, fm.view()).unwrap();
        let dl = reference_two_layer(&p.d, &f);
        let p1 = 1.0 / (1.0 + (dl[0] - dl[1]).exp());
        assert_abs_diff_eq!(d[[0, 1]], p1, epsilon = 1e-10);
        assert_abs_diff_eq!(d.row(0).sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rows_is_shift_invariant() {
        let l = Array2::from_shape_vec((1, 3), vec![0.3, -1.0, 2.0]).unwrap();
        let a = softmax_rows(&l);
        let b = softmax_rows(&(&l + 100.0));
        for (u, v) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn logistic_is_monotone() {
        let xs = [-40.0, -3.0, -0.1, 0.0, 0.1, 3.0, 40.0];
        for w in xs.windows(2) {
            assert!(logistic(w[0]) < logistic(w[1]));
        }
        assert_eq!(logistic(0.0), 0.5);
    }

    #[test]
    fn fuse_concatenates_in_order() {
        let z = Array1::from_elem(512, 1.0);
        let f = fuse(z.view(), arr1(&[0.0, 1.0]).view()).unwrap();
        assert_eq!(f.len(), 514);
        assert_eq!(f.0[512], 0.0);
        assert_eq!(f.0[513], 1.0);
        let (zz, aa) = f.split(512);
        assert_eq!(zz, z.view());
        assert_eq!(aa, arr1(&[0.0, 1.0]).view());

        let f = fuse(Array1::zeros(4).view(), arr1(&[0.25, 0.75]).view()).unwrap();
        assert_eq!(f.0.slice(ndarray::s![4..]), arr1(&[0.25, 0.75]));

        assert!(fuse(z.view(), arr1(&[1.5]).view()).is_err());
    }

    #[test]
    fn joint_set_sizes() {
        let z = arr1(&[0.1, 0.2]);
        let a = arr1(&[1.0, 0.0]);
        let p = arr1(&[0.3, 0.6]);
        let src = joint_feature_sets(SampleKind::Source, z.view(), Some(a.view()), None, p.view()).unwrap();
        assert_eq!(src.len(), 2);
        assert_eq!(src[0].split(2).1, a.view());
        assert_eq!(src[1].split(2).1, p.view());
        let seen = joint_feature_sets(SampleKind::TargetSeen, z.view(), None, Some(a.view()), p.view()).unwrap();
        assert_eq!(seen.len(), 2);
        let unseen = joint_feature_sets(SampleKind::TargetUnseen, z.view(), None, None, p.view()).unwrap();
        assert_eq!(unseen.len(), 1);
        assert!(joint_feature_sets(SampleKind::Source, z.view(), None, None, p.view()).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = init_params_with(small_shape(), 0);
        assert!(forward_gz(&p, Array2::zeros((1, 4)).view()).is_err());
        assert!(forward_ga(&p, Array2::zeros((1, 5)).view()).is_err());
        assert!(forward_c(&p, Array2::zeros((1, 8)).view()).is_err());
    }

    #[test]
    fn forwards_are_bitwise_repeatable() {
        let p = init_params(32, 12, 4, 5);
        let mut rng = Rng::new(1);
        let x = Array2::from_shape_fn((8, 32), |_| rng.normal());
        assert_eq!(forward_gz(&p, x.view()).unwrap(), forward_gz(&p, x.view()).unwrap());
    }
}
