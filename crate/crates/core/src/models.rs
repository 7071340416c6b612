//! The four feature-extraction block families and the shared regression
//! head, plus single and ensemble predictors built from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{structure, Error, Result};
use crate::nn::{LayerSpec, Network, Tensor};
use crate::psr::{render_image, PsrImage};

pub const MAX_DEPTH: usize = 5;
const INFER_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "MLP")]
    Mlp,
    BasicCnn,
    ComplexCnn,
    DeepCnn,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Mlp, Family::BasicCnn, Family::ComplexCnn, Family::DeepCnn];

    pub fn label(self) -> &'static str {
        match self {
            Family::Mlp => "MLP",
            Family::BasicCnn => "Basic CNN",
            Family::ComplexCnn => "Complex CNN",
            Family::DeepCnn => "Deep CNN",
        }
    }
}

/// Architecture of one model: block family, number of blocks, and the side
/// of the square input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub depth: usize,
    #[serde(default = "default_grid")]
    pub grid_n: usize,
}

fn default_grid() -> usize {
    32
}

impl ModelSpec {
    pub fn new(family: Family, depth: usize) -> Self {
        ModelSpec {
            family,
            depth,
            grid_n: default_grid(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_DEPTH).contains(&self.depth) {
            return Err(Error::Config(format!("depth must be 1..={MAX_DEPTH}, got {}", self.depth)));
        }
        if self.grid_n < 2 {
            return Err(Error::Config("grid_n must be at least 2".into()));
        }
        Ok(())
    }

    /// Report name, e.g. `MLP5` or `Complex CNN3`.
    pub fn name(&self) -> String {
        format!("{}{}", self.family.label(), self.depth)
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![1, self.grid_n, self.grid_n]
    }

    /// Full layer list: feature blocks `1..=depth` then the regression head.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        if self.family == Family::Mlp {
            out.push(LayerSpec::Flatten);
        }
        for n in 1..=self.depth {
            out.extend(match self.family {
                Family::Mlp => mlp_block(),
                Family::BasicCnn => basic_cnn_block(n),
                Family::ComplexCnn => complex_cnn_block(n),
                Family::DeepCnn => deep_cnn_block(n),
            });
        }
        if self.family != Family::Mlp {
            out.push(LayerSpec::Flatten);
        }
        out.extend(regression_block());
        out
    }

    pub fn build(&self, seed: u64) -> Result<Network<f32>> {
        self.validate()?;
        Network::build(&self.input_shape(), &self.layers(), seed)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    /// Accepts `MLP5`, `ComplexCNN3`, `Complex CNN3`, `deep_cnn2`, ...
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        let digits = key.trim_start_matches(|c: char| c.is_ascii_alphabetic());
        let prefix = &key[..key.len() - digits.len()];
        let family = match prefix {
            "mlp" => Family::Mlp,
            "basiccnn" | "cnn" => Family::BasicCnn,
            "complexcnn" => Family::ComplexCnn,
            "deepcnn" => Family::DeepCnn,
            _ => return Err(Error::Config(format!("unknown model family in {s:?}"))),
        };
        let depth = digits
            .parse()
            .map_err(|_| Error::Config(format!("missing block count in {s:?}")))?;
        let spec = ModelSpec::new(family, depth);
        spec.validate()?;
        Ok(spec)
    }
}

fn conv_bn_relu(filters: usize, kernel: usize, stride: usize) -> [LayerSpec; 3] {
    [
        LayerSpec::Conv2d { filters, kernel, stride },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
    ]
}

pub fn regression_block() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense { units: 256 },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::Dense { units: 64 },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::Dense { units: 1 },
    ]
}

pub fn mlp_block() -> Vec<LayerSpec> {
    vec![LayerSpec::Dense { units: 1024 }, LayerSpec::BatchNorm, LayerSpec::Relu]
}

pub fn basic_cnn_block(n: usize) -> Vec<LayerSpec> {
    let mut v = conv_bn_relu(1 << (n + 4), 7 - n, 1).to_vec();
    v.push(LayerSpec::MaxPool2d { size: 2, stride: 2 });
    v
}

pub fn complex_cnn_block(n: usize) -> Vec<LayerSpec> {
    let ch = 1 << (n + 2);
    let mut v = vec![LayerSpec::SkipSave { slot: 0 }];
    v.extend(conv_bn_relu(ch, 6 - n, 1));
    v.extend(conv_bn_relu(ch, 6 - n, 1));
    v.push(LayerSpec::SkipAdd { slot: 0, project: n == 1 });
    v.extend(conv_bn_relu(ch * 2, 7 - n, 2));
    v
}

pub fn deep_cnn_block(n: usize) -> Vec<LayerSpec> {
    let ch = 1 << (n + 2);
    let mut v = vec![LayerSpec::SkipSave { slot: 0 }];
    v.extend(conv_bn_relu(ch, 6 - n, 1));
    v.extend(conv_bn_relu(ch, 6 - n, 1));
    v.push(LayerSpec::SkipAdd { slot: 0, project: n == 1 });
    v.push(LayerSpec::SkipSave { slot: 1 });
    v.extend(conv_bn_relu(ch, 6 - n, 1));
    v.extend(conv_bn_relu(ch, 6 - n, 1));
    v.push(LayerSpec::SkipAdd { slot: 1, project: false });
    v.extend(conv_bn_relu(ch * 2, 7 - n, 2));
    v
}

/// Network input for one image: the max-normalized rendering as `f32`.
pub fn image_pixels(img: &PsrImage) -> Vec<f32> {
    render_image(img).into_iter().map(|v| v as f32).collect()
}

/// A trained single network.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub net: Network<f32>,
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        Ok(Model {
            spec,
            net: spec.build(seed)?,
        })
    }

    /// Predictions for a stack of `grid_n * grid_n` pixel rows.
    pub fn predict_pixels(&self, pixels: &[Vec<f32>]) -> Result<Vec<f64>> {
        let g = self.spec.grid_n;
        let mut out = Vec::with_capacity(pixels.len());
        for chunk in pixels.chunks(INFER_BATCH) {
            let mut data = Vec::with_capacity(chunk.len() * g * g);
            for p in chunk {
                if p.len() != g * g {
                    return Err(structure(
                        "input",
                        format!("image of {} pixels does not fit a {g}x{g} model", p.len()),
                    ));
                }
                data.extend_from_slice(p);
            }
            let y = self.net.forward_infer(&Tensor::new(vec![chunk.len(), 1, g, g], data))?;
            out.extend(y.data().iter().map(|&v| v as f64));
        }
        Ok(out)
    }

    pub fn predict_images(&self, images: &[PsrImage]) -> Result<Vec<f64>> {
        for img in images {
            self.check_grid(img)?;
        }
        self.predict_pixels(&images.iter().map(image_pixels).collect::<Vec<_>>())
    }

    /// Signed T:R ratio for one image.
    pub fn predict_tr_ratio(&self, image: &PsrImage) -> Result<f64> {
        Ok(self.predict_images(std::slice::from_ref(image))?[0])
    }

    fn check_grid(&self, img: &PsrImage) -> Result<()> {
        if img.grid_n != self.spec.grid_n {
            return Err(structure(
                "input",
                format!("{}x{0} image given to a model expecting {}x{1}", img.grid_n, self.spec.grid_n),
            ));
        }
        Ok(())
    }
}

/// Either one network or an ensemble whose prediction is the mean of its
/// members.
#[derive(Debug, Clone)]
pub enum Predictor {
    Single(Model),
    Ensemble(Vec<Model>),
}

impl Predictor {
    pub fn spec(&self) -> ModelSpec {
        match self {
            Predictor::Single(m) => m.spec,
            Predictor::Ensemble(ms) => ms[0].spec,
        }
    }

    pub fn members(&self) -> &[Model] {
        match self {
            Predictor::Single(m) => std::slice::from_ref(m),
            Predictor::Ensemble(ms) => ms,
        }
    }

    /// `MLP5` or `MLP5 Ensemble`.
    pub fn name(&self) -> String {
        match self {
            Predictor::Single(m) => m.spec.name(),
            Predictor::Ensemble(ms) => format!("{} Ensemble", ms[0].spec.name()),
        }
    }

    pub fn predict_pixels(&self, pixels: &[Vec<f32>]) -> Result<Vec<f64>> {
        let members = self.members();
        let mut sum = vec![0.0; pixels.len()];
        for m in members {
            for (s, p) in sum.iter_mut().zip(m.predict_pixels(pixels)?) {
                *s += p;
            }
        }
        Ok(sum.into_iter().map(|s| s / members.len() as f64).collect())
    }

    pub fn predict_images(&self, images: &[PsrImage]) -> Result<Vec<f64>> {
        for img in images {
            self.members()[0].check_grid(img)?;
        }
        self.predict_pixels(&images.iter().map(image_pixels).collect::<Vec<_>>())
    }

    pub fn predict_tr_ratio(&self, image: &PsrImage) -> Result<f64> {
        Ok(self.predict_images(std::slice::from_ref(image))?[0])
    }
}
