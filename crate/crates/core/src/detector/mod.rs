//! A small stage-structured single-stage detector.
//!
//! The backbone is `S` stages, each a 3x3 stride-2 convolution followed by a
//! leaky ReLU, so every stage halves the spatial size. A 1x1 convolution head
//! on the last stage predicts, for every grid cell and anchor, an objectness
//! logit, four box offsets, and class logits.
//!
//! Tensors are addressed by stable names: `stage{i}.weight`, `stage{i}.bias`
//! for `i` in `1..=S`, and `head.weight`, `head.bias`.

mod conv;
mod decode;
mod loss;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::dataset::Raster;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) use conv::{conv_backward, conv_forward, leaky_relu_backward_inplace, leaky_relu_inplace, ConvGeometry};
pub use decode::{decode_detections, nms, Detection};
pub use loss::{assign_anchors, compute_loss, detection_loss, Gradients, POSITIVE_IOU};

/// Fields per anchor before the class logits: objectness, tx, ty, tw, th.
pub const BOX_FIELDS: usize = 5;
pub const STAGE_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    /// Output channels of each stage; its length is the stage count `S`.
    pub channels: Vec<usize>,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
}

fn default_input_channels() -> usize {
    1
}

impl Default for StageSpec {
    fn default() -> Self {
        StageSpec {
            channels: vec![8, 16, 24, 32, 48],
            input_channels: 1,
        }
    }
}

impl StageSpec {
    pub fn stage_count(&self) -> usize {
        self.channels.len()
    }

    fn in_channels(&self, stage: usize) -> usize {
        if stage == 1 {
            self.input_channels
        } else {
            self.channels[stage - 2]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 stages, got {}",
                self.channels.len()
            )));
        }
        if self.input_channels == 0 || self.channels.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }
}

/// Square anchors, side lengths in pixels, centered on each grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub sizes: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            sizes: vec![8.0, 24.0, 64.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub stages: StageSpec,
    pub anchors: AnchorConfig,
    pub class_count: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            stages: StageSpec::default(),
            anchors: AnchorConfig::default(),
            class_count: 1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.stages.validate()?;
        if self.anchors.sizes.is_empty() || self.anchors.sizes.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("bad anchor sizes {:?}", self.anchors.sizes)));
        }
        if self.class_count == 0 {
            return Err(Error::invalid("class_count must be positive"));
        }
        Ok(())
    }

    pub fn stage_count(&self) -> usize {
        self.stages.stage_count()
    }

    pub fn head_channels(&self) -> usize {
        self.anchors.sizes.len() * (BOX_FIELDS + self.class_count)
    }

    fn stage_geometry(&self, stage: usize) -> ConvGeometry {
        ConvGeometry {
            c_in: self.stages.in_channels(stage),
            c_out: self.stages.channels[stage - 1],
            kernel: STAGE_KERNEL,
            stride: 2,
            pad: 1,
        }
    }

    fn head_geometry(&self) -> ConvGeometry {
        ConvGeometry {
            c_in: *self.stages.channels.last().expect("validated"),
            c_out: self.head_channels(),
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }

    /// Expected `(name, shape)` of every tensor, stages first, head last.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for stage in 1..=self.stage_count() {
            let g = self.stage_geometry(stage);
            out.push((format!("stage{stage}.weight"), vec![g.c_out, g.c_in, g.kernel, g.kernel]));
            out.push((format!("stage{stage}.bias"), vec![g.c_out]));
        }
        let g = self.head_geometry();
        out.push(("head.weight".into(), vec![g.c_out, g.c_in, 1, 1]));
        out.push(("head.bias".into(), vec![g.c_out]));
        out
    }

    /// Side length of the output grid, or an error if `image_size` does not
    /// survive `S` halvings.
    pub fn grid_size(&self, image_size: usize) -> Result<usize> {
        let factor = 1usize << self.stage_count();
        if image_size == 0 || !image_size.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "image size {image_size} is not divisible by 2^{}",
                self.stage_count()
            )));
        }
        Ok(image_size / factor)
    }
}

/// Weights and bias of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn zeros_like(&self) -> Self {
        ConvParams {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bit_eq(&self, other: &ConvParams) -> bool {
        self.weight.bit_eq(&other.weight) && self.bias.bit_eq(&other.bias)
    }

    fn geometry(&self, stride: usize, pad: usize) -> ConvGeometry {
        let s = self.weight.shape();
        ConvGeometry {
            c_in: s[1],
            c_out: s[0],
            kernel: s[2],
            stride,
            pad,
        }
    }
}

/// Applies one backbone stage (3x3 stride-2 convolution + leaky ReLU).
pub(crate) fn run_stage(conv: &ConvParams, input: &Tensor) -> Result<Tensor> {
    check_stage_input(conv, input)?;
    let g = conv.geometry(2, 1);
    let (mut out, _) = conv_forward(input, &conv.weight, &conv.bias, &g);
    leaky_relu_inplace(&mut out);
    Ok(out)
}

fn check_stage_input(conv: &ConvParams, input: &Tensor) -> Result<()> {
    let s = input.shape();
    if s.len() != 3 || s[0] != conv.weight.shape()[1] || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) || s[1] == 0 || s[2] == 0 {
        return Err(Error::invalid(format!(
            "stage expects [{}, even, even] input, got {:?}",
            conv.weight.shape()[1],
            s
        )));
    }
    Ok(())
}

/// Applies the 1x1 head.
pub(crate) fn run_head(head: &ConvParams, config: &DetectorConfig, features: &Tensor, image_size: (usize, usize)) -> Result<RawPredictions> {
    let s = features.shape();
    if s.len() != 3 || s[0] != head.weight.shape()[1] {
        return Err(Error::invalid(format!(
            "head expects [{}, h, w] features, got {:?}",
            head.weight.shape()[1],
            s
        )));
    }
    let (values, _) = conv_forward(features, &head.weight, &head.bias, &head.geometry(1, 0));
    Ok(RawPredictions::new(values, config, image_size))
}

/// Converts an image to the `[1, H, W]` network input (pixels shifted by -0.5).
pub fn image_tensor(image: &Raster) -> Tensor {
    Tensor::from_vec(
        &[1, image.height(), image.width()],
        image.pixels().iter().map(|v| v - 0.5).collect(),
    )
}

/// Head output: one vector of `5 + C` values per (cell, anchor).
#[derive(Debug, Clone, PartialEq)]
pub struct RawPredictions {
    /// `[A * (5 + C), grid_h, grid_w]`.
    pub values: Tensor,
    pub anchor_sizes: Vec<f64>,
    pub class_count: usize,
    /// Pixels per grid cell along x and y.
    pub stride: (f64, f64),
}

impl RawPredictions {
    pub fn new(values: Tensor, config: &DetectorConfig, image_size: (usize, usize)) -> Self {
        let (gh, gw) = (values.shape()[1], values.shape()[2]);
        RawPredictions {
            values,
            anchor_sizes: config.anchors.sizes.clone(),
            class_count: config.class_count,
            stride: (image_size.0 as f64 / gw as f64, image_size.1 as f64 / gh as f64),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len()
    }

    pub fn fields(&self) -> usize {
        BOX_FIELDS + self.class_count
    }

    /// Number of prediction vectors, `grid_h * grid_w * A`.
    pub fn len(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw * self.anchors_per_cell()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Prediction index `i = (gy * grid_w + gx) * A + a`.
    pub fn locate(&self, i: usize) -> (usize, usize, usize) {
        let a_n = self.anchors_per_cell();
        let gw = self.grid().1;
        let cell = i / a_n;
        (cell / gw, cell % gw, i % a_n)
    }

    /// Flat offset of field `f` of prediction `i` within `values`.
    pub fn offset(&self, i: usize, field: usize) -> usize {
        let (gy, gx, a) = self.locate(i);
        let (gh, gw) = self.grid();
        ((a * self.fields() + field) * gh + gy) * gw + gx
    }

    pub fn field(&self, i: usize, field: usize) -> f64 {
        self.values.data()[self.offset(i, field)]
    }

    /// The prediction vector `[obj, tx, ty, tw, th, class...]`.
    pub fn vector(&self, i: usize) -> Vec<f64> {
        (0..self.fields()).map(|f| self.field(i, f)).collect()
    }

    pub fn anchor_box(&self, i: usize) -> BBox {
        let (gy, gx, a) = self.locate(i);
        let size = self.anchor_sizes[a];
        BBox::from_center(
            (gx as f64 + 0.5) * self.stride.0,
            (gy as f64 + 0.5) * self.stride.1,
            size,
            size,
        )
    }
}

/// Full parameter set of a detector plus its freeze mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    config: DetectorConfig,
    pub(crate) stages: Vec<ConvParams>,
    pub(crate) head: ConvParams,
    frozen: BTreeSet<String>,
}

/// Objectness bias at initialization; sigmoid(-4) is about 0.018.
const OBJECTNESS_PRIOR_LOGIT: f64 = -4.0;

impl DetectorParams {
    /// He-normal stage weights, small head weights, zero biases except a
    /// negative objectness prior.
    pub fn init(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(config.stage_count());
        for stage in 1..=config.stage_count() {
            let g = config.stage_geometry(stage);
            let fan_in = (g.c_in * g.kernel * g.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            let n = g.c_out * g.c_in * g.kernel * g.kernel;
            stages.push(ConvParams {
                weight: Tensor::from_vec(
                    &[g.c_out, g.c_in, g.kernel, g.kernel],
                    (0..n).map(|_| normal.sample(&mut rng)).collect(),
                ),
                bias: Tensor::zeros(&[g.c_out]),
            });
        }
        let g = config.head_geometry();
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let weight = Tensor::from_vec(
            &[g.c_out, g.c_in, 1, 1],
            (0..g.c_out * g.c_in).map(|_| normal.sample(&mut rng)).collect(),
        );
        let mut bias = Tensor::zeros(&[g.c_out]);
        let fields = BOX_FIELDS + config.class_count;
        for a in 0..config.anchors.sizes.len() {
            bias.data_mut()[a * fields] = OBJECTNESS_PRIOR_LOGIT;
        }
        Ok(DetectorParams {
            config,
            stages,
            head: ConvParams { weight, bias },
            frozen: BTreeSet::new(),
        })
    }

    /// All-zero parameters.
    pub fn zeros(config: DetectorConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for t in p.tensors_mut().into_iter().map(|(_, t)| t) {
            t.fill(0.0);
        }
        Ok(p)
    }

    pub(crate) fn from_parts(config: DetectorConfig, stages: Vec<ConvParams>, head: ConvParams, frozen: BTreeSet<String>) -> Self {
        DetectorParams {
            config,
            stages,
            head,
            frozen,
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Stage `i` in `1..=S`.
    pub fn stage(&self, i: usize) -> &ConvParams {
        &self.stages[i - 1]
    }

    pub fn head(&self) -> &ConvParams {
        &self.head
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.stages.len() + 2);
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{}.weight", i + 1), &s.weight));
            out.push((format!("stage{}.bias", i + 1), &s.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(2 * self.stages.len() + 2);
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("stage{}.weight", i + 1), &mut s.weight));
            out.push((format!("stage{}.bias", i + 1), &mut s.bias));
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        if self.tensor(name).is_none() {
            return Err(Error::invalid(format!("no tensor named `{name}`")));
        }
        self.frozen.insert(name.to_string());
        Ok(())
    }

    /// Freezes both tensors of stages `1..=upto`.
    pub fn freeze_stages(&mut self, upto: usize) -> Result<()> {
        if upto > self.stage_count() {
            return Err(Error::invalid(format!("cannot freeze {upto} of {} stages", self.stage_count())));
        }
        for i in 1..=upto {
            self.frozen.insert(format!("stage{i}.weight"));
            self.frozen.insert(format!("stage{i}.bias"));
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn count_parameters(&self, trainable_only: bool) -> usize {
        self.tensors()
            .iter()
            .filter(|(n, _)| !(trainable_only && self.is_frozen(n)))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn bit_eq(&self, other: &DetectorParams) -> bool {
        self.config == other.config
            && self.frozen == other.frozen
            && self.tensors().iter().zip(other.tensors()).all(|((n1, a), (n2, b))| *n1 == n2 && a.bit_eq(b))
    }

    /// Applies stages `from+1 ..= to` to `input`, which must be the image
    /// tensor when `from == 0` or the output of stage `from` otherwise.
    pub fn forward_stages(&self, input: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        if from > to || to > self.stage_count() {
            return Err(Error::invalid(format!(
                "stage range ({from}, {to}] invalid for {} stages",
                self.stage_count()
            )));
        }
        let mut x = input.clone();
        for conv in &self.stages[from..to] {
            x = run_stage(conv, &x)?;
        }
        if from == to {
            // Identity, but the input must still be a valid tensor for this point.
            let expected = if from == 0 {
                self.config.stages.input_channels
            } else {
                self.config.stages.channels[from - 1]
            };
            if input.shape().len() != 3 || input.shape()[0] != expected {
                return Err(Error::invalid(format!(
                    "expected {expected} channels at stage {from}, got {:?}",
                    input.shape()
                )));
            }
        }
        Ok(x)
    }

    pub fn detect_head(&self, features: &Tensor, image_size: (usize, usize)) -> Result<RawPredictions> {
        run_head(&self.head, &self.config, features, image_size)
    }

    pub fn predict(&self, image: &Raster) -> Result<RawPredictions> {
        let features = self.forward_stages(&image_tensor(image), 0, self.stage_count())?;
        self.detect_head(&features, (image.width(), image.height()))
    }

    pub fn detect(&self, image: &Raster, score_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        let raw = self.predict(image)?;
        decode_detections(&raw, score_threshold, nms_iou, (image.width(), image.height()))
    }
}

/// Multiply-accumulate count of one forward pass (stages and head, no NMS,
/// biases not counted).
pub fn count_inference_ops(config: &DetectorConfig, image_size: usize) -> Result<u64> {
    config.validate()?;
    config.grid_size(image_size)?;
    let mut side = image_size;
    let mut total = 0u64;
    for stage in 1..=config.stage_count() {
        let g = config.stage_geometry(stage);
        side /= 2;
        total += (side * side * g.c_out * g.c_in * g.kernel * g.kernel) as u64;
    }
    let g = config.head_geometry();
    total += (side * side * g.c_out * g.c_in) as u64;
    Ok(total)
}

/// Closed-form parameter count: `sum(k*k*c_in*c_out + c_out)` over stages plus
/// the head's `c_last * H + H`.
pub fn closed_form_parameter_count(config: &DetectorConfig) -> usize {
    let k = STAGE_KERNEL;
    let stages: usize = (1..=config.stage_count())
        .map(|s| {
            let (ci, co) = (config.stages.in_channels(s), config.stages.channels[s - 1]);
            k * k * ci * co + co
        })
        .sum();
    let last = *config.stages.channels.last().expect("validated");
    stages + last * config.head_channels() + config.head_channels()
}
