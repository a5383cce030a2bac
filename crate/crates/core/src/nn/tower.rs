use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Builder, Layer, Mode, Network};
use super::params::{ParamSet, Weights};
use crate::error::{Error, Result};
use crate::method::Method;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderFamily {
    /// Three 3×3 conv blocks, 2×2 pooling after the first two, global average pool.
    TinyConv,
    /// Pool to 8×8, flatten, two hidden dense layers.
    TinyMlp,
    /// Flatten only.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub family: EncoderFamily,
    pub width_mult: f64,
    /// Side length of the global views; fixes the identity encoder's width.
    pub input_size: usize,
}

impl EncoderConfig {
    /// Representation dimension R.
    pub fn output_dim(&self) -> usize {
        match self.family {
            EncoderFamily::Identity => self.input_size * self.input_size * 3,
            _ => ((128.0 * self.width_mult).round() as usize).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult > 0.0) || self.input_size == 0 {
            return Err(Error::config("encoder width_mult and input_size must be positive"));
        }
        if self.family == EncoderFamily::TinyMlp && !self.input_size.is_multiple_of(8) {
            return Err(Error::config("tiny-mlp encoder needs input_size divisible by 8"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    BatchNorm,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    fn layer(self) -> Layer {
        match self {
            Activation::Relu => Layer::Relu,
            Activation::Gelu => Layer::Gelu,
        }
    }
}

/// Dense stack; hidden layers get normalization and activation, the last one
/// gets normalization only when `final_norm` is set. An empty `dims` is the
/// identity projector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorSpec {
    pub dims: Vec<usize>,
    pub normalization: Normalization,
    pub activation: Activation,
    pub final_norm: bool,
    pub prototypes: Option<usize>,
}

impl ProjectorSpec {
    pub fn identity() -> Self {
        ProjectorSpec {
            dims: vec![],
            normalization: Normalization::None,
            activation: Activation::Relu,
            final_norm: false,
            prototypes: None,
        }
    }

    /// Embedding dimension I for a given input width.
    pub fn output_dim(&self, input: usize) -> usize {
        self.prototypes.or(self.dims.last().copied()).unwrap_or(input)
    }
}

/// Two dense layers mapping I → hidden → I; the last layer carries a bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub hidden: usize,
    pub normalization: Normalization,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorSpec,
    pub predictor: Option<PredictorSpec>,
}

impl TowerConfig {
    pub fn representation_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.projector.output_dim(self.representation_dim())
    }
}

fn scaled(width: usize, divisor: usize) -> usize {
    (width / divisor).max(8)
}

/// Projector architecture of a method with every width divided by `scale` (floor 8).
pub fn build_projector(method: Method, scale: usize) -> Result<ProjectorSpec> {
    if scale == 0 {
        return Err(Error::config("projector width divisor must be at least 1"));
    }
    let dims = |ws: &[usize]| ws.iter().map(|&w| scaled(w, scale)).collect::<Vec<_>>();
    let spec = match method {
        Method::SimClr => ProjectorSpec {
            dims: dims(&[4096, 256]),
            normalization: Normalization::BatchNorm,
            activation: Activation::Relu,
            final_norm: true,
            prototypes: None,
        },
        Method::Byol | Method::MocoV2 => ProjectorSpec {
            dims: dims(&[4096, 256]),
            normalization: Normalization::BatchNorm,
            activation: Activation::Relu,
            final_norm: false,
            prototypes: None,
        },
        Method::Swav => ProjectorSpec {
            dims: dims(&[2048, 128]),
            normalization: Normalization::BatchNorm,
            activation: Activation::Relu,
            final_norm: false,
            prototypes: Some(scaled(3000, scale)),
        },
        Method::Dino => ProjectorSpec {
            dims: dims(&[2048, 2048, 256]),
            normalization: Normalization::None,
            activation: Activation::Gelu,
            final_norm: false,
            prototypes: Some(scaled(4096, scale)),
        },
        Method::MocoV3 => ProjectorSpec {
            dims: dims(&[4096, 4096, 256]),
            normalization: Normalization::BatchNorm,
            activation: Activation::Relu,
            final_norm: true,
            prototypes: None,
        },
    };
    Ok(spec)
}

/// Predictor of a method at the given width divisor, or `None` when it trains without one.
pub fn build_predictor(method: Method, scale: usize) -> Option<PredictorSpec> {
    match method {
        Method::Byol | Method::MocoV2 | Method::MocoV3 => Some(PredictorSpec {
            hidden: scaled(4096, scale),
            normalization: Normalization::BatchNorm,
            activation: Activation::Relu,
        }),
        Method::SimClr | Method::Swav | Method::Dino => None,
    }
}

/// Predictor used when one is switched on for a method that trains without one.
pub fn ablation_predictor(method: Method, scale: usize) -> PredictorSpec {
    match method {
        Method::Dino => PredictorSpec {
            hidden: scaled(2048, scale),
            normalization: Normalization::None,
            activation: Activation::Gelu,
        },
        _ => PredictorSpec { hidden: scaled(4096, scale), normalization: Normalization::BatchNorm, activation: Activation::Relu },
    }
}

/// Encoder followed by projector, sharing one [`Weights`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tower {
    pub config: TowerConfig,
    pub encoder: Network,
    pub projector: Network,
}

#[derive(Clone, Copy, Debug)]
pub struct TowerOutput {
    /// Encoder output r, shape [M, R].
    pub representation: Var,
    /// Projector output z, shape [M, I].
    pub embedding: Var,
}

impl Tower {
    /// Build the tower and draw its initial weights from `seed`.
    pub fn build(config: &TowerConfig, seed: u64) -> Result<(Tower, Weights)> {
        config.encoder.validate()?;
        let mut weights = Weights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut b = Builder { weights: &mut weights, rng: &mut rng, layers: vec![], prefix: "encoder".into() };
        build_encoder(&mut b, &config.encoder);
        let encoder = b.finish();

        let mut b = Builder { weights: &mut weights, rng: &mut rng, layers: vec![], prefix: "projector".into() };
        build_projector_layers(&mut b, &config.projector, config.encoder.output_dim())?;
        let projector = b.finish();

        Ok((Tower { config: config.clone(), encoder, projector }, weights))
    }

    /// Embed a batch of NHWC images.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], buffers: &mut ParamSet, x: Var, mode: Mode) -> Result<TowerOutput> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::dim(format!("tower expects [M, H, W, 3] images, got {shape:?}")));
        }
        let representation = self.encode(tape, vars, buffers, x, mode)?;
        let embedding = self.projector.forward(tape, vars, buffers, representation, mode)?;
        Ok(TowerOutput { representation, embedding })
    }

    pub fn encode(&self, tape: &mut Tape, vars: &[Var], buffers: &mut ParamSet, x: Var, mode: Mode) -> Result<Var> {
        let r = self.encoder.forward(tape, vars, buffers, x, mode)?;
        let width = tape.shape(r)[1];
        if width != self.config.representation_dim() {
            return Err(Error::dim(format!(
                "encoder produced width {width}, expected {}",
                self.config.representation_dim()
            )));
        }
        Ok(r)
    }
}

fn build_encoder(b: &mut Builder<'_>, cfg: &EncoderConfig) {
    let r = cfg.output_dim();
    match cfg.family {
        EncoderFamily::TinyConv => {
            let c1 = (r / 8).max(4);
            let c2 = (r / 4).max(4);
            b.conv(3, c1, 3);
            b.batch_norm(c1);
            b.push(Layer::Relu);
            b.push(Layer::AvgPool2);
            b.conv(c1, c2, 3);
            b.batch_norm(c2);
            b.push(Layer::Relu);
            b.push(Layer::AvgPool2);
            b.conv(c2, r, 3);
            b.batch_norm(r);
            b.push(Layer::Relu);
            b.push(Layer::GlobalAvgPool);
        }
        EncoderFamily::TinyMlp => {
            b.push(Layer::AdaptivePool(8));
            b.push(Layer::Flatten);
            b.dense(8 * 8 * 3, r, true);
            b.push(Layer::Relu);
            b.dense(r, r, true);
            b.push(Layer::Relu);
        }
        EncoderFamily::Identity => b.push(Layer::Flatten),
    }
}

fn build_projector_layers(b: &mut Builder<'_>, spec: &ProjectorSpec, input: usize) -> Result<()> {
    if spec.dims.contains(&0) || spec.prototypes == Some(0) {
        return Err(Error::config("projector widths must be positive"));
    }
    let last = spec.dims.len().saturating_sub(1);
    let mut width = input;
    for (i, &out) in spec.dims.iter().enumerate() {
        let hidden = i < last;
        let norm = spec.normalization == Normalization::BatchNorm && (hidden || spec.final_norm);
        b.dense(width, out, !norm);
        if norm {
            b.batch_norm(out);
        }
        if hidden {
            b.push(spec.activation.layer());
        }
        width = out;
    }
    if let Some(count) = spec.prototypes {
        b.push(Layer::L2Normalize);
        b.weight_norm_dense(width, count);
    }
    Ok(())
}

/// Maps left-tower embeddings to predictions; identity when disabled.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictor {
    pub network: Network,
}

impl Predictor {
    pub fn build(spec: Option<&PredictorSpec>, dim: usize, seed: u64) -> Result<(Predictor, Weights)> {
        let mut weights = Weights::default();
        let Some(spec) = spec else {
            return Ok((Predictor::default(), weights));
        };
        if spec.hidden == 0 || dim == 0 {
            return Err(Error::config("predictor widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { weights: &mut weights, rng: &mut rng, layers: vec![], prefix: "predictor".into() };
        let norm = spec.normalization == Normalization::BatchNorm;
        b.dense(dim, spec.hidden, !norm);
        if norm {
            b.batch_norm(spec.hidden);
        }
        b.push(spec.activation.layer());
        b.dense(spec.hidden, dim, true);
        Ok((Predictor { network: b.finish() }, weights))
    }

    pub fn is_identity(&self) -> bool {
        self.network.is_identity()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], buffers: &mut ParamSet, z: Var, mode: Mode) -> Result<Var> {
        self.network.forward(tape, vars, buffers, z, mode)
    }
}
