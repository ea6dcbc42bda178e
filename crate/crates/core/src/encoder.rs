//! Small convolutional backbone producing a dense feature map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, conv_out_extent, Graph, Tensor, Var, Window};

/// Single-channel image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width || height == 0 || width == 0 {
            return shape_err(format!(
                "image {height}x{width} with {} pixels",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.clone())
            .expect("image dimensions checked at construction")
    }
}

/// `C x H x W` activations in channel-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Borrowed rectangular window of a feature map.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMapView<'a> {
    pub map: &'a FeatureMap,
    pub window: Window,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width || channels * height * width == 0 {
            return shape_err(format!(
                "feature map {channels}x{height}x{width} with {} values",
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            s => shape_err(format!("expected [C,H,W], got {s:?}")),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("feature map dimensions checked at construction")
    }

    pub fn view(&self) -> FeatureMapView<'_> {
        FeatureMapView {
            map: self,
            window: Window::full(self.height, self.width),
        }
    }

    pub fn window(&self, window: Window) -> FeatureMapView<'_> {
        FeatureMapView { map: self, window }
    }

    /// Physically copied sub-map.
    pub fn crop(&self, w: Window) -> Result<FeatureMap> {
        if w.bottom > self.height || w.right > self.width || w.area() == 0 {
            return shape_err(format!("crop {w:?} outside {}x{}", self.height, self.width));
        }
        let mut data = Vec::with_capacity(self.channels * w.area());
        for c in 0..self.channels {
            for y in w.top..w.bottom {
                let base = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[base + w.left..base + w.right]);
            }
        }
        FeatureMap::new(self.channels, w.height(), w.width(), data)
    }

    /// Spatial columns (one `C`-vector per position) in row-major order.
    pub fn columns(&self) -> Vec<Vec<f64>> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|p| (0..self.channels).map(|c| self.data[c * plane + p]).collect())
            .collect()
    }
}

/// Architecture of the conv stack. Every layer is 3x3 with padding 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub stride: usize,
    /// Freeze every layer except the last one.
    pub freeze_all_but_last: bool,
}

impl Default for LayerSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: vec![8, 16, 16],
            stride: 2,
            freeze_all_but_last: true,
        }
    }
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::Parameter("encoder needs at least 2 layers".into()));
        }
        if self.stride == 0 || self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Parameter("zero stride or channel count".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        self.channels.iter().fold((height, width), |(h, w), _| {
            (conv_out_extent(h, self.stride), conv_out_extent(w, self.stride))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[O, C, 3, 3]`
    pub weight: Tensor,
    /// `[O]`
    pub bias: Tensor,
    pub stride: usize,
    pub frozen: bool,
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<ConvLayer>,
}

/// He-uniform kernels, zero biases. The same seed always yields the same
/// parameters, which is what lets every generation restart from an
/// identical point.
pub fn init_encoder(seed: u64, spec: &LayerSpec) -> Result<EncoderParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.channels.len();
    let mut c_in = spec.in_channels;
    let mut layers = Vec::with_capacity(n);
    for (i, &c_out) in spec.channels.iter().enumerate() {
        let fan_in = (c_in * 9) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight: Vec<f64> = (0..c_out * c_in * 9)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        layers.push(ConvLayer {
            weight: Tensor::new(vec![c_out, c_in, 3, 3], weight)?,
            bias: Tensor::zeros(vec![c_out]),
            stride: spec.stride,
            frozen: spec.freeze_all_but_last && i + 1 < n,
            relu: i + 1 < n,
        });
        c_in = c_out;
    }
    Ok(EncoderParams { layers })
}

/// Graph handles for each layer's kernel and bias.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub layers: Vec<(Var, Var)>,
}

impl EncoderVars {
    /// Frozen layers enter the graph as constants.
    pub fn register(g: &mut Graph, params: &EncoderParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| {
                if l.frozen {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                } else {
                    (g.param(l.weight.clone()), g.param(l.bias.clone()))
                }
            })
            .collect();
        Self { layers }
    }
}

impl EncoderParams {
    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.bias.len()).unwrap_or(0)
    }

    /// Number of leading frozen layers.
    pub fn frozen_prefix(&self) -> usize {
        self.layers.iter().take_while(|l| l.frozen).count()
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        let c_in = self.layers[0].weight.shape()[1];
        if c_in != 1 {
            return shape_err(format!("encoder expects {c_in} channels, images have 1"));
        }
        let (h, w) = self.layers.iter().fold((image.height, image.width), |(h, w), l| {
            (conv_out_extent(h, l.stride), conv_out_extent(w, l.stride))
        });
        if h < 2 || w < 2 {
            return shape_err(format!(
                "{}x{} image shrinks to {h}x{w} through the stride stack",
                image.height, image.width
            ));
        }
        Ok(())
    }

    /// Runs layers `[start, end)` on a `[C,H,W]` activation.
    pub fn run_layers(&self, input: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let mut cur = input.clone();
        for l in &self.layers[start..end] {
            let s = cur.shape();
            let (out, ho, wo) = tensor::conv2d_forward(
                cur.data(),
                (s[0], s[1], s[2]),
                l.weight.data(),
                l.bias.data(),
                l.stride,
            );
            let mut out = out;
            if l.relu {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cur = Tensor::new(vec![l.bias.len(), ho, wo], out)?;
        }
        Ok(cur)
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureMap> {
        self.check_input(image)?;
        let out = self.run_layers(&image.to_tensor(), 0, self.layers.len())?;
        FeatureMap::from_tensor(&out)
    }

    /// Activations after the frozen prefix; constant for the lifetime of
    /// the initialization seed.
    pub fn encode_prefix(&self, image: &Image) -> Result<Tensor> {
        self.check_input(image)?;
        self.run_layers(&image.to_tensor(), 0, self.frozen_prefix())
    }

    /// Records layers `[start, ..)` on the graph starting from `input`.
    pub fn forward_var(&self, g: &mut Graph, input: Var, start: usize, vars: &EncoderVars) -> Result<Var> {
        let mut cur = input;
        for (l, (w, b)) in self.layers.iter().zip(&vars.layers).skip(start) {
            cur = g.conv2d(cur, *w, *b, l.stride)?;
            if l.relu {
                cur = g.relu(cur);
            }
        }
        Ok(cur)
    }
}
