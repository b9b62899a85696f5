//! The network zoo: GAN, DCGAN-1, DCGAN-2, WGAN and RGAN generator and
//! discriminator stacks, plus discriminator-only builds.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::nn::{Activation, LayerSpec, Network};
use crate::optim::{OptimizerKind, WGAN_CLIP};
use crate::rng::Rng;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointHeader, DataInfo, NetworkHeader, ParamHeader,
};

/// Noise width for the dense and convolutional generators.
pub const NOISE_DIM: usize = 100;
/// Per-step noise width of the recurrent generator.
pub const RGAN_NOISE_DIM: usize = 5;
pub const RGAN_HIDDEN: usize = 100;
pub const DROPOUT_RATE: f64 = 0.2;
/// Default SGD step for the Wasserstein critic. Gradients reaching a
/// critic clipped to ±0.01 are tiny, so the step is large.
pub const WGAN_SGD_LR: f64 = 10.0;
/// Default SGD step for the recurrent discriminator.
pub const RGAN_SGD_LR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Gan,
    Dcgan1,
    Dcgan2,
    Wgan,
    Rgan,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Gan,
        Variant::Dcgan1,
        Variant::Dcgan2,
        Variant::Wgan,
        Variant::Rgan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gan => "gan",
            Variant::Dcgan1 => "dcgan1",
            Variant::Dcgan2 => "dcgan2",
            Variant::Wgan => "wgan",
            Variant::Rgan => "rgan",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Gan => "GAN",
            Variant::Dcgan1 => "DCGAN-1",
            Variant::Dcgan2 => "DCGAN-2",
            Variant::Wgan => "WGAN",
            Variant::Rgan => "RGAN",
        }
    }

    /// Whether the discriminator emits probabilities.
    pub fn probabilistic(self) -> bool {
        self != Variant::Wgan
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A variant name as accepted on the command line, e.g. `dcgan2` or
/// `gan-disc`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantChoice {
    pub variant: Variant,
    pub disc_only: bool,
}

impl FromStr for VariantChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (base, disc_only) = match lower.strip_suffix("-disc") {
            Some(b) => (b, true),
            None => (lower.as_str(), false),
        };
        let variant = Variant::ALL
            .into_iter()
            .find(|v| v.name() == base)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))?;
        if disc_only && variant == Variant::Wgan {
            return Err(Error::invalid(
                "wgan has no discriminator-only form: its critic does not output probabilities",
            ));
        }
        Ok(VariantChoice { variant, disc_only })
    }
}

impl fmt::Display for VariantChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}",
            self.variant.name(),
            if self.disc_only { "-disc" } else { "" }
        )
    }
}

/// Architecture and optimizer choice for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Timesteps per sequence, padding included.
    pub seq_len: usize,
    pub dims: usize,
    pub disc_only: bool,
    pub g_opt: OptimizerKind,
    pub d_opt: OptimizerKind,
    /// Critic clipping constant, set for WGAN only.
    pub clip: Option<f64>,
}

impl ModelSpec {
    /// Defaults: Adam everywhere except SGD for the Wasserstein critic and
    /// the recurrent discriminator.
    pub fn new(variant: Variant, seq_len: usize, dims: usize) -> Self {
        let d_opt = match variant {
            Variant::Wgan => OptimizerKind::sgd(WGAN_SGD_LR),
            Variant::Rgan => OptimizerKind::sgd(RGAN_SGD_LR),
            _ => OptimizerKind::adam(),
        };
        ModelSpec {
            variant,
            seq_len,
            dims,
            disc_only: false,
            g_opt: OptimizerKind::adam(),
            d_opt,
            clip: (variant == Variant::Wgan).then_some(WGAN_CLIP),
        }
    }

    pub fn from_choice(choice: VariantChoice, seq_len: usize, dims: usize) -> Self {
        ModelSpec {
            disc_only: choice.disc_only,
            ..Self::new(choice.variant, seq_len, dims)
        }
    }

    pub fn choice(&self) -> VariantChoice {
        VariantChoice {
            variant: self.variant,
            disc_only: self.disc_only,
        }
    }

    /// Per-sample noise shape fed to the generator.
    pub fn noise_shape(&self) -> Vec<usize> {
        match self.variant {
            Variant::Rgan => vec![self.seq_len, RGAN_NOISE_DIM],
            _ => vec![NOISE_DIM],
        }
    }

    /// Length of the feature map the convolutional generators start from:
    /// two 2x upsamplings must reach at least `seq_len`.
    pub fn base_len(&self) -> usize {
        self.seq_len.div_ceil(4)
    }

    pub fn generator_layers(&self) -> Vec<LayerSpec> {
        use LayerSpec as L;
        let (m, d) = (self.seq_len, self.dims);
        let l = self.base_len();
        let relu = || L::Activation(Activation::Relu);
        let lr = || L::Activation(Activation::leaky());
        let th = || L::Activation(Activation::Tanh);
        let dense = |units| L::Dense { units };
        let conv = |filters| L::Conv1d {
            filters,
            kernel: 5,
            stride: 1,
        };
        let up = || L::Upsample { factor: 2 };
        let map = || L::Reshape { shape: vec![l, d] };
        let mut layers = match self.variant {
            Variant::Gan => vec![
                dense(50),
                lr(),
                dense(100),
                lr(),
                dense(200),
                lr(),
                dense(m * d),
                th(),
                L::Reshape { shape: vec![m, d] },
            ],
            Variant::Dcgan1 => vec![
                dense(100),
                L::BatchNorm,
                relu(),
                dense(l * d),
                L::BatchNorm,
                relu(),
                map(),
                conv(40),
                L::BatchNorm,
                relu(),
                up(),
                conv(20),
                L::BatchNorm,
                relu(),
                up(),
                conv(d),
                th(),
            ],
            Variant::Dcgan2 => vec![
                dense(100),
                L::BatchNorm,
                lr(),
                dense(l * d),
                lr(),
                map(),
                conv(40),
                lr(),
                up(),
                conv(20),
                th(),
                up(),
                conv(d),
                th(),
            ],
            Variant::Wgan => vec![
                dense(100),
                lr(),
                dense(l * d),
                lr(),
                map(),
                conv(40),
                lr(),
                up(),
                conv(20),
                lr(),
                up(),
                conv(d),
                th(),
            ],
            Variant::Rgan => vec![
                L::Lstm {
                    hidden: RGAN_HIDDEN,
                },
                dense(d),
                th(),
            ],
        };
        if matches!(
            self.variant,
            Variant::Dcgan1 | Variant::Dcgan2 | Variant::Wgan
        ) && 4 * l != m
        {
            layers.push(L::CenterCrop { len: m });
        }
        layers
    }

    pub fn discriminator_layers(&self) -> Vec<LayerSpec> {
        use LayerSpec as L;
        let lr = || L::Activation(Activation::leaky());
        let drop = || L::Dropout { rate: DROPOUT_RATE };
        let dense = |units| L::Dense { units };
        let conv = |filters, stride| L::Conv1d {
            filters,
            kernel: 5,
            stride,
        };
        let mut layers = match self.variant {
            Variant::Gan => vec![
                L::Flatten,
                dense(100),
                lr(),
                drop(),
                dense(50),
                lr(),
                drop(),
            ],
            Variant::Dcgan1 => vec![
                conv(20, 2),
                lr(),
                drop(),
                conv(40, 1),
                L::BatchNorm,
                lr(),
                drop(),
                conv(80, 1),
                L::BatchNorm,
                lr(),
                drop(),
                L::Flatten,
            ],
            Variant::Dcgan2 | Variant::Wgan => vec![
                conv(10, 2),
                lr(),
                drop(),
                conv(20, 1),
                lr(),
                drop(),
                conv(40, 1),
                lr(),
                drop(),
                L::Flatten,
                dense(50),
                lr(),
                drop(),
            ],
            Variant::Rgan => vec![
                L::Lstm {
                    hidden: RGAN_HIDDEN,
                },
                L::LastStep,
            ],
        };
        layers.push(dense(1));
        layers.push(L::Activation(match self.variant {
            Variant::Wgan => Activation::Linear,
            _ => Activation::Sigmoid,
        }));
        layers
    }
}

/// Instantiated networks for one [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub generator: Option<Network>,
    pub discriminator: Network,
}

impl Model {
    /// Resolves both stacks and draws initial parameters from `rng`.
    pub fn build(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        if spec.seq_len < 4 || spec.dims == 0 {
            return Err(Error::invalid(format!(
                "sequences of {} x {} are too small for the zoo",
                spec.seq_len, spec.dims
            )));
        }
        let generator = if spec.disc_only {
            None
        } else {
            let g = Network::new(&spec.noise_shape(), &spec.generator_layers(), rng)?;
            if g.output_shape() != [spec.seq_len, spec.dims] {
                return Err(Error::ShapeMismatch {
                    op: "generator output",
                    left: g.output_shape().to_vec(),
                    right: vec![spec.seq_len, spec.dims],
                });
            }
            Some(g)
        };
        let discriminator = Network::new(
            &[spec.seq_len, spec.dims],
            &spec.discriminator_layers(),
            rng,
        )?;
        Ok(Model {
            spec: spec.clone(),
            generator,
            discriminator,
        })
    }

    pub fn generator_mut(&mut self) -> Result<&mut Network> {
        self.generator
            .as_mut()
            .ok_or_else(|| Error::invalid("discriminator-only model has no generator"))
    }

    /// Trainable scalar counts of (generator, discriminator).
    pub fn parameter_counts(&self) -> (Option<usize>, usize) {
        (
            self.generator
                .as_ref()
                .map(|g| g.params().trainable_count()),
            self.discriminator.params().trainable_count(),
        )
    }

    /// Eval-mode samples `[batch, seq_len, dims]` for noise `z`.
    pub fn generate(&mut self, z: &Tensor) -> Result<Tensor> {
        self.generator_mut()?.predict(z)
    }

    /// Eval-mode per-sample scores for `x` of shape `[batch, seq_len, dims]`.
    pub fn discriminate(&mut self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.discriminator.predict(x)?.into_data())
    }
}

/// Standard-normal noise of shape `[batch, ..noise_shape]`.
pub fn sample_noise(spec: &ModelSpec, batch: usize, rng: &mut Rng) -> Result<Tensor> {
    if batch == 0 {
        return Err(Error::invalid("noise batch must be at least 1"));
    }
    let mut shape = vec![batch];
    shape.extend(spec.noise_shape());
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape, data)
}
