//! Named parameter tensors and their initialisation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{bilinear_upsample_weights, ConvSpec, Graph, Scalar, Shape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±gain * sqrt(6 / fan_in)`.
    He {
        fan_in: usize,
        gain: f64,
    },
    Zero,
    /// Bilinear upsampling kernel for a transposed convolution.
    Bilinear {
        factor: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

impl ParamSpec {
    /// Multiplies the bound of a He initialiser; other rules are unchanged.
    pub fn with_gain(mut self, g: f64) -> Self {
        if let Init::He { gain, .. } = &mut self.init {
            *gain *= g;
        }
        self
    }
}

/// Weight and bias specs for a convolution named `prefix`.
pub fn conv_param_specs(prefix: &str, spec: &ConvSpec) -> [ParamSpec; 2] {
    let ws = spec.weight_shape();
    [
        ParamSpec {
            name: format!("{prefix}.weight"),
            shape: ws,
            init: Init::He {
                fan_in: ws.c * ws.h * ws.w,
                gain: 1.0,
            },
        },
        ParamSpec {
            name: format!("{prefix}.bias"),
            shape: Shape::new(spec.out_channels, 1, 1, 1),
            init: Init::Zero,
        },
    ]
}

/// Weight and bias specs for a `channels -> channels` transposed convolution
/// initialised to bilinear upsampling.
pub fn upsample_param_specs(prefix: &str, channels: usize, factor: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{prefix}.weight"),
            shape: Shape::new(channels, channels, 2 * factor, 2 * factor),
            init: Init::Bilinear { factor },
        },
        ParamSpec {
            name: format!("{prefix}.bias"),
            shape: Shape::new(channels, 1, 1, 1),
            init: Init::Zero,
        },
    ]
}

/// Named tensor collection, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }

    /// Draws every tensor from its init rule with a seeded generator.
    /// Tensors are filled in spec order, so the result depends only on
    /// `specs` and `seed`.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Self::new();
        for spec in specs {
            let t = match spec.init {
                Init::He { fan_in, gain } => {
                    let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(spec.shape, |_| T::lit(rng.gen_range(-bound..bound)))?
                }
                Init::Zero => Tensor::zeros(spec.shape)?,
                Init::Bilinear { factor } => {
                    let t = bilinear_upsample_weights(spec.shape.c, factor)?;
                    if t.shape() != spec.shape {
                        return Err(Error::shape(
                            "initialize",
                            "bilinear kernel",
                            spec.shape.len(),
                            t.shape().len(),
                        ));
                    }
                    t
                }
            };
            out.insert(spec.name.clone(), t)?;
        }
        Ok(out)
    }

    /// Every tensor zero, including upsampling kernels.
    pub fn zeros(specs: &[ParamSpec]) -> Result<Self> {
        let mut out = Self::new();
        for spec in specs {
            out.insert(spec.name.clone(), Tensor::zeros(spec.shape)?)?;
        }
        Ok(out)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid("params", format!("duplicate tensor name {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(|t| t.data().len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that the collection holds exactly the tensors in `specs`.
    pub fn check(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape {
                return Err(Error::invalid(
                    "params",
                    format!("tensor {} has shape {}, expected {}", spec.name, t.shape(), spec.shape),
                ));
            }
        }
        if self.tensors.len() != specs.len() {
            let extra = self
                .tensors
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::invalid("params", format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

/// Graph handles for a parameter collection.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Adds every tensor of `params` as a leaf; `trainable` decides which
    /// ones receive gradients.
    pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable(name))))
            .collect();
        ParamVars { vars }
    }

    pub fn from_map(vars: BTreeMap<String, Var>) -> Self {
        ParamVars { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// `(weight, bias)` of a convolution named `prefix`.
    pub fn conv(&self, prefix: &str) -> Result<(Var, Var)> {
        Ok((
            self.get(&format!("{prefix}.weight"))?,
            self.get(&format!("{prefix}.bias"))?,
        ))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
