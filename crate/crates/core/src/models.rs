//! Encoders, the denoising autoencoder, classifiers and the fusion model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{prefixed, prefixed_mut, Conv2d, ConvTranspose2d, Linear, Parameters, SeBlock};
use crate::tensor::{Tape, Tensor, Var};

/// Shape of a convolutional encoder. Every stage halves the spatial extent
/// with a stride-2 convolution followed by ReLU; features are the spatial
/// mean of the last stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub stage_channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    /// Must equal the last entry of `stage_channels`.
    #[serde(default)]
    pub feature_dim: usize,
}

fn default_kernel() -> usize {
    3
}

fn default_input_channels() -> usize {
    3
}

impl EncoderConfig {
    pub fn new(stage_channels: Vec<usize>, kernel_size: usize, input_channels: usize) -> Self {
        let feature_dim = stage_channels.last().copied().unwrap_or(0);
        EncoderConfig {
            stage_channels,
            kernel_size,
            input_channels,
            feature_dim,
        }
    }

    /// Wider default used for the supervised backbone.
    pub fn wide() -> Self {
        Self::new(vec![32, 64, 64], 3, 3)
    }

    /// Narrower default used for the self-supervised backbone.
    pub fn narrow() -> Self {
        Self::new(vec![16, 32, 32], 3, 3)
    }

    /// Fills `feature_dim` from the stages when left at zero.
    pub fn normalized(mut self) -> Self {
        if self.feature_dim == 0 {
            self.feature_dim = self.stage_channels.last().copied().unwrap_or(0);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::invalid(
                "encoder needs at least one stage of positive width",
            ));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid(format!(
                "encoder kernel_size {} must be odd",
                self.kernel_size
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::invalid("input_channels must be positive"));
        }
        if Some(&self.feature_dim) != self.stage_channels.last() {
            return Err(Error::invalid(format!(
                "feature_dim {} differs from last stage width {:?}",
                self.feature_dim,
                self.stage_channels.last()
            )));
        }
        Ok(())
    }

    /// Spatial extent after every stage, starting with `input`.
    pub fn spatial_sizes(&self, input: usize) -> Vec<usize> {
        let pad = self.kernel_size / 2;
        let mut sizes = vec![input];
        let mut s = input;
        for _ in &self.stage_channels {
            s = (s + 2 * pad).saturating_sub(self.kernel_size) / 2 + 1;
            sizes.push(s);
        }
        sizes
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    pub stages: Vec<Conv2d>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let config = config.normalized();
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stage_channels.len());
        let mut prev = config.input_channels;
        for &c in &config.stage_channels {
            stages.push(Conv2d::new(
                prev,
                c,
                config.kernel_size,
                2,
                config.kernel_size / 2,
                rng,
            ));
            prev = c;
        }
        Ok(Encoder { config, stages })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Activations of the last stage, `[N, feature_dim, h, w]`.
    pub fn feature_map(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.stages {
            h = conv.forward(tape, h)?;
            h = tape.relu(h);
        }
        Ok(h)
    }

    /// Globally pooled features, `[N, feature_dim]`.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.feature_map(tape, x)?;
        tape.global_avg_pool(h)
    }

    fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.params_mut() {
            t.set_requires_grad(trainable);
        }
    }
}

impl Parameters for Encoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| prefixed(&format!("stages.{i}"), s.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.stages
            .iter_mut()
            .enumerate()
            .flat_map(|(i, s)| prefixed_mut(&format!("stages.{i}"), s.params_mut()))
            .collect()
    }
}

/// Encoder plus a mirrored stack of transposed convolutions ending in a
/// sigmoid, reconstructing an image of the input's size.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub encoder: Encoder,
    pub decoder: Vec<ConvTranspose2d>,
    image_size: usize,
}

impl Autoencoder {
    pub fn new(config: EncoderConfig, image_size: usize, rng: &mut impl Rng) -> Result<Self> {
        let encoder = Encoder::new(config, rng)?;
        let cfg = encoder.config().clone();
        let mut decoder = Vec::with_capacity(cfg.stage_channels.len());
        for i in (0..cfg.stage_channels.len()).rev() {
            let out = if i == 0 {
                cfg.input_channels
            } else {
                cfg.stage_channels[i - 1]
            };
            decoder.push(ConvTranspose2d::new(
                cfg.stage_channels[i],
                out,
                4,
                2,
                1,
                rng,
            ));
        }
        Self::from_parts(encoder, decoder, image_size)
    }

    pub fn from_parts(
        encoder: Encoder,
        decoder: Vec<ConvTranspose2d>,
        image_size: usize,
    ) -> Result<Self> {
        let sizes = encoder.config().spatial_sizes(image_size);
        let mut s = *sizes.last().expect("at least the input size");
        let mut ch = encoder.feature_dim();
        for layer in &decoder {
            if layer.in_channels() != ch {
                return Err(Error::Model(format!(
                    "decoder layer expects {} channels, encoder provides {ch}",
                    layer.in_channels()
                )));
            }
            s = layer
                .output_size(s)
                .ok_or_else(|| Error::Model("decoder collapses spatial size".into()))?;
            ch = layer.out_channels();
        }
        if s != image_size || ch != encoder.config().input_channels {
            return Err(Error::Model(format!(
                "decoder output {ch}x{s}x{s} does not match input {}x{image_size}x{image_size}",
                encoder.config().input_channels
            )));
        }
        Ok(Autoencoder {
            encoder,
            decoder,
            image_size,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Reconstruction in `(0, 1)` with the input's shape.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[2] != self.image_size || s[3] != self.image_size {
            return Err(Error::ShapeMismatch {
                op: "autoencoder_forward",
                lhs: s.to_vec(),
                rhs: vec![self.image_size, self.image_size],
            });
        }
        let mut h = self.encoder.feature_map(tape, x)?;
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            h = layer.forward(tape, h)?;
            h = if i == last {
                tape.sigmoid(h)
            } else {
                tape.relu(h)
            };
        }
        Ok(h)
    }

    /// Drops the decoder.
    pub fn into_encoder(self) -> Encoder {
        self.encoder
    }
}

impl Parameters for Autoencoder {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("encoder", self.encoder.params());
        for (i, l) in self.decoder.iter().enumerate() {
            v.extend(prefixed(&format!("decoder.{i}"), l.params()));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("encoder", self.encoder.params_mut());
        for (i, l) in self.decoder.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("decoder.{i}"), l.params_mut()));
        }
        v
    }
}

/// Anything that maps an image batch to class logits.
pub trait Classify {
    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var>;
    fn num_classes(&self) -> usize;
    fn input_channels(&self) -> usize;
}

/// Backbone encoder with a linear head.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub backbone: Encoder,
    pub head: Linear,
    frozen: bool,
}

impl ClassifierModel {
    pub fn new(config: EncoderConfig, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let backbone = Encoder::new(config, rng)?;
        Self::with_backbone(backbone, num_classes, rng)
    }

    /// Attaches a freshly initialised head to an existing encoder.
    pub fn with_backbone(
        backbone: Encoder,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("classifier needs at least one class"));
        }
        let head = Linear::new(backbone.feature_dim(), num_classes, rng);
        Self::from_parts(backbone, head)
    }

    pub fn from_parts(backbone: Encoder, head: Linear) -> Result<Self> {
        if head.in_dim() != backbone.feature_dim() {
            return Err(Error::Model(format!(
                "head input {} does not match backbone feature dim {}",
                head.in_dim(),
                backbone.feature_dim()
            )));
        }
        Ok(ClassifierModel {
            backbone,
            head,
            frozen: false,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every parameter non-trainable. There is no way back.
    pub fn freeze(&mut self) {
        self.backbone.set_trainable(false);
        self.head.weight.set_requires_grad(false);
        self.head.bias.set_requires_grad(false);
        self.frozen = true;
    }

    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.backbone.features(tape, x)
    }
}

impl Classify for ClassifierModel {
    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let f = self.features(tape, x)?;
        self.head.forward(tape, f)
    }

    fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    fn input_channels(&self) -> usize {
        self.backbone.config().input_channels
    }
}

impl Parameters for ClassifierModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("backbone", self.backbone.params());
        v.extend(prefixed("head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("backbone", self.backbone.params_mut());
        v.extend(prefixed_mut("head", self.head.params_mut()));
        v
    }
}

/// Starting point of the fusion head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionInit {
    /// He-initialised attention and classifier.
    Random,
    /// See [`FusionModel::ensemble_init`].
    #[default]
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub se_ratio: usize,
    pub init: FusionInit,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            se_ratio: 4,
            init: FusionInit::Ensemble,
        }
    }
}

impl FusionConfig {
    pub fn build(
        &self,
        b1: ClassifierModel,
        b2: ClassifierModel,
        rng: &mut impl Rng,
    ) -> Result<FusionModel> {
        match self.init {
            FusionInit::Random => FusionModel::new(b1, b2, self.se_ratio, rng),
            FusionInit::Ensemble => FusionModel::ensemble_init(b1, b2, self.se_ratio, rng),
        }
    }
}

/// Two frozen backbones whose pooled features are concatenated (`b1` first),
/// gated by a squeeze-and-excite block and classified linearly.
#[derive(Debug, Clone)]
pub struct FusionModel {
    b1: ClassifierModel,
    b2: ClassifierModel,
    pub attention: SeBlock,
    pub classifier: Linear,
}

/// Intermediate values of a fusion forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FusionTrace {
    pub concat: Var,
    pub weights: Var,
    pub attended: Var,
    pub logits: Var,
}

impl FusionModel {
    pub fn new(
        b1: ClassifierModel,
        b2: ClassifierModel,
        se_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dim = b1.feature_dim() + b2.feature_dim();
        let attention = SeBlock::new(dim, se_ratio, rng)?;
        let classifier = Linear::new(dim, b1.num_classes(), rng);
        Self::from_parts(b1, b2, attention, classifier)
    }

    /// Starts from the backbones' own heads: the excitation layer is zeroed
    /// so every gate is 1/2, and the classifier is `[W1 | W2]` with bias
    /// `(c1 + c2) / 2`, making the initial logits the mean of both backbones'
    /// logits.
    pub fn ensemble_init(
        b1: ClassifierModel,
        b2: ClassifierModel,
        se_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (d1, d2) = (b1.feature_dim(), b2.feature_dim());
        let k = b1.num_classes();
        if b2.num_classes() != k {
            return Err(Error::Model(format!(
                "backbones predict {k} and {} classes",
                b2.num_classes()
            )));
        }
        let dim = d1 + d2;
        let hidden = crate::nn::bottleneck(dim, se_ratio)?;
        let attention = SeBlock::from_parts(
            Linear::new(dim, hidden, rng),
            Linear::zeros(hidden, dim),
            se_ratio,
        )?;
        let (w1, w2) = (b1.head.weight.data(), b2.head.weight.data());
        let mut weight = Vec::with_capacity(k * dim);
        for c in 0..k {
            weight.extend_from_slice(&w1[c * d1..(c + 1) * d1]);
            weight.extend_from_slice(&w2[c * d2..(c + 1) * d2]);
        }
        let bias: Vec<f64> = b1
            .head
            .bias
            .data()
            .iter()
            .zip(b2.head.bias.data())
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let classifier = Linear::from_parts(
            Tensor::new(vec![k, dim], weight)?.with_requires_grad(true),
            Tensor::new(vec![k], bias)?.with_requires_grad(true),
        )?;
        Self::from_parts(b1, b2, attention, classifier)
    }

    pub fn from_parts(
        b1: ClassifierModel,
        b2: ClassifierModel,
        attention: SeBlock,
        classifier: Linear,
    ) -> Result<Self> {
        if !b1.is_frozen() || !b2.is_frozen() {
            return Err(Error::Model("fusion backbones must be frozen".into()));
        }
        let dim = b1.feature_dim() + b2.feature_dim();
        if attention.dim() != dim || classifier.in_dim() != dim {
            return Err(Error::Model(format!(
                "attention width {} / classifier input {} do not match concatenated features {dim}",
                attention.dim(),
                classifier.in_dim()
            )));
        }
        if b1.input_channels() != b2.input_channels() {
            return Err(Error::Model("backbones disagree on input channels".into()));
        }
        Ok(FusionModel {
            b1,
            b2,
            attention,
            classifier,
        })
    }

    pub fn b1(&self) -> &ClassifierModel {
        &self.b1
    }

    pub fn b2(&self) -> &ClassifierModel {
        &self.b2
    }

    pub fn fused_dim(&self) -> usize {
        self.attention.dim()
    }

    pub fn trace(&self, tape: &mut Tape, x: Var) -> Result<FusionTrace> {
        let f1 = self.b1.features(tape, x)?;
        let f2 = self.b2.features(tape, x)?;
        let concat = tape.concat_cols(&[f1, f2])?;
        let se = self.attention.forward(tape, concat)?;
        let logits = self.classifier.forward(tape, se.attended)?;
        Ok(FusionTrace {
            concat,
            weights: se.weights,
            attended: se.attended,
            logits,
        })
    }

    /// Parameters updated during fusion training.
    pub fn head_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("attention", self.attention.params_mut());
        v.extend(prefixed_mut("classifier", self.classifier.params_mut()));
        v
    }

    pub fn head_param_count(&self) -> usize {
        self.attention.param_count() + self.classifier.param_count()
    }
}

impl Classify for FusionModel {
    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.trace(tape, x)?.logits)
    }

    fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    fn input_channels(&self) -> usize {
        self.b1.input_channels()
    }
}

impl Parameters for FusionModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("b1", self.b1.params());
        v.extend(prefixed("b2", self.b2.params()));
        v.extend(prefixed("attention", self.attention.params()));
        v.extend(prefixed("classifier", self.classifier.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("b1", self.b1.params_mut());
        v.extend(prefixed_mut("b2", self.b2.params_mut()));
        v.extend(prefixed_mut("attention", self.attention.params_mut()));
        v.extend(prefixed_mut("classifier", self.classifier.params_mut()));
        v
    }
}

/// Any model the pipeline produces.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum AnyModel {
    Autoencoder(Autoencoder),
    Classifier(ClassifierModel),
    Fusion(FusionModel),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Autoencoder(_) => "autoencoder",
            AnyModel::Classifier(_) => "classifier",
            AnyModel::Fusion(_) => "fusion",
        }
    }

    pub fn as_classifier(&self) -> Option<&dyn Classify> {
        match self {
            AnyModel::Autoencoder(_) => None,
            AnyModel::Classifier(m) => Some(m),
            AnyModel::Fusion(m) => Some(m),
        }
    }

    /// Forward pass: reconstruction for autoencoders, logits otherwise.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            AnyModel::Autoencoder(m) => m.forward(tape, x),
            AnyModel::Classifier(m) => m.logits(tape, x),
            AnyModel::Fusion(m) => m.logits(tape, x),
        }
    }
}

impl Parameters for AnyModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            AnyModel::Autoencoder(m) => m.params(),
            AnyModel::Classifier(m) => m.params(),
            AnyModel::Fusion(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            AnyModel::Autoencoder(m) => m.params_mut(),
            AnyModel::Classifier(m) => m.params_mut(),
            AnyModel::Fusion(m) => m.params_mut(),
        }
    }
}

impl From<Autoencoder> for AnyModel {
    fn from(m: Autoencoder) -> Self {
        AnyModel::Autoencoder(m)
    }
}

impl From<ClassifierModel> for AnyModel {
    fn from(m: ClassifierModel) -> Self {
        AnyModel::Classifier(m)
    }
}

impl From<FusionModel> for AnyModel {
    fn from(m: FusionModel) -> Self {
        AnyModel::Fusion(m)
    }
}
