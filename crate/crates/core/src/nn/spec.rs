use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        filter_size: usize,
        stride: usize,
        dilation: usize,
    },
    FullyConnected {
        out_dim: usize,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
}

impl LayerSpec {
    pub fn conv(filters: usize, filter_size: usize, stride: usize) -> Self {
        LayerSpec::Conv {
            filters,
            filter_size,
            stride,
            dilation: 1,
        }
    }

    pub fn dilated(filters: usize, filter_size: usize, dilation: usize) -> Self {
        LayerSpec::Conv {
            filters,
            filter_size,
            stride: 1,
            dilation,
        }
    }

    pub fn fc(out_dim: usize) -> Self {
        LayerSpec::FullyConnected { out_dim }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. }
        )
    }
}

/// Activation applied to the last parameterized layer; every other
/// parameterized layer uses ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Abs,
    Sigmoid,
}

impl Head {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Head::Abs => z.abs(),
            Head::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum NetForm {
    /// Fixed square input.
    Patch { input_side: usize },
    /// Fully convolutional; `sample_layer` is where the output stride is set.
    Global { sample_layer: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub form: NetForm,
    pub layers: Vec<LayerSpec>,
    pub head: Head,
    /// Rescale each input to zero mean and unit variance before layer 0.
    #[serde(default)]
    pub standardize: bool,
}

/// Channel count, height and width of an activation.
pub type Shape3 = (usize, usize, usize);

/// Weight and bias element counts of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamShape {
    pub weight: usize,
    pub bias: usize,
}

pub fn build_estimator_spec() -> NetSpec {
    NetSpec {
        form: NetForm::Patch { input_side: 512 },
        layers: vec![
            LayerSpec::conv(4, 8, 8),
            LayerSpec::conv(8, 4, 4),
            LayerSpec::conv(8, 4, 4),
            LayerSpec::Flatten,
            LayerSpec::fc(1024),
            LayerSpec::fc(512),
            LayerSpec::fc(10),
            LayerSpec::fc(1),
        ],
        head: Head::Abs,
        standardize: false,
    }
}

pub fn build_discriminator_spec() -> NetSpec {
    NetSpec {
        form: NetForm::Patch { input_side: 512 },
        layers: vec![
            LayerSpec::conv(1, 8, 8),
            LayerSpec::conv(1, 8, 8),
            LayerSpec::Flatten,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::fc(10),
            LayerSpec::fc(1),
        ],
        head: Head::Sigmoid,
        standardize: true,
    }
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.iter().all(|l| !l.has_params()) {
            return Err(Error::Shape("network has no parameterized layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            match *l {
                LayerSpec::Conv {
                    filters,
                    filter_size,
                    stride,
                    dilation,
                } => {
                    if filters == 0 || filter_size == 0 || stride == 0 || dilation == 0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: conv sizes must be positive"
                        )));
                    }
                }
                LayerSpec::FullyConnected { out_dim: 0 } => {
                    return Err(Error::Shape(format!(
                        "layer {i}: fully connected width must be positive"
                    )));
                }
                LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                    return Err(Error::Shape(format!(
                        "layer {i}: dropout rate {rate} outside [0, 1)"
                    )));
                }
                _ => {}
            }
        }
        if self.standardize && !self.layers[0].has_params() {
            return Err(Error::Shape(
                "input standardization needs a parameterized first layer".into(),
            ));
        }
        if let NetForm::Global { sample_layer } = self.form {
            if !matches!(self.layers.get(sample_layer), Some(LayerSpec::Conv { .. })) {
                return Err(Error::Shape(format!(
                    "sample layer {sample_layer} is not a conv layer"
                )));
            }
        }
        Ok(())
    }

    /// Output shape of every layer for the given input.
    pub fn walk(&self, input: Shape3) -> Result<Vec<Shape3>> {
        let mut shape = input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let (c, h, w) = shape;
            shape = match *l {
                LayerSpec::Conv {
                    filters,
                    filter_size,
                    stride,
                    dilation,
                } => {
                    let reach = dilation * (filter_size - 1) + 1;
                    if h < reach || w < reach {
                        return Err(Error::Shape(format!(
                            "layer {i}: {h}x{w} input smaller than reach {reach}"
                        )));
                    }
                    (filters, (h - reach) / stride + 1, (w - reach) / stride + 1)
                }
                LayerSpec::FullyConnected { out_dim } => {
                    if h != 1 || w != 1 {
                        return Err(Error::Shape(format!(
                            "layer {i}: fully connected needs a flat input, got {c}x{h}x{w}"
                        )));
                    }
                    (out_dim, 1, 1)
                }
                LayerSpec::Flatten => (c * h * w, 1, 1),
                LayerSpec::Dropout { .. } => shape,
            };
            out.push(shape);
        }
        Ok(out)
    }

    pub fn input_shape(&self) -> Option<Shape3> {
        match self.form {
            NetForm::Patch { input_side } => Some((1, input_side, input_side)),
            NetForm::Global { .. } => None,
        }
    }

    /// Parameter shapes for an input of the given shape.
    pub fn param_shapes(&self, input: Shape3) -> Result<Vec<ParamShape>> {
        let outs = self.walk(input)?;
        let mut prev = input;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (l, &o) in self.layers.iter().zip(&outs) {
            shapes.push(match *l {
                LayerSpec::Conv {
                    filters,
                    filter_size,
                    ..
                } => ParamShape {
                    weight: filters * prev.0 * filter_size * filter_size,
                    bias: filters,
                },
                LayerSpec::FullyConnected { out_dim } => ParamShape {
                    weight: out_dim * prev.0,
                    bias: out_dim,
                },
                _ => ParamShape { weight: 0, bias: 0 },
            });
            prev = o;
        }
        Ok(shapes)
    }

    /// Channels entering each layer. Global networks take one channel and
    /// any spatial size, so a minimal spatial input is walked.
    pub fn in_channels(&self) -> Result<Vec<usize>> {
        let input = self
            .input_shape()
            .unwrap_or((1, self.min_side(), self.min_side()));
        let outs = self.walk(input)?;
        Ok(std::iter::once(1)
            .chain(outs.iter().map(|s| s.0))
            .take(self.layers.len())
            .collect())
    }

    /// Smallest input side that every layer can consume.
    pub fn min_side(&self) -> usize {
        let mut side = 1usize;
        for l in self.layers.iter().rev() {
            if let LayerSpec::Conv {
                filter_size,
                stride,
                dilation,
                ..
            } = *l
            {
                side = (side - 1) * stride + dilation * (filter_size - 1) + 1;
            }
        }
        side
    }

    pub fn param_count(&self) -> Result<usize> {
        let input = self
            .input_shape()
            .unwrap_or((1, self.min_side(), self.min_side()));
        Ok(self
            .param_shapes(input)?
            .iter()
            .map(|p| p.weight + p.bias)
            .sum())
    }

    pub fn last_param_layer(&self) -> usize {
        self.layers
            .iter()
            .rposition(|l| l.has_params())
            .expect("validated spec has a parameterized layer")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent shape oracle: sum layer parameter counts by hand-rolled
    /// arithmetic on the documented configuration.
    fn estimator_count_oracle() -> usize {
        let mut c = 1usize;
        let mut side = 512usize;
        let mut total = 0;
        for (f, k, s) in [(4, 8, 8), (8, 4, 4), (8, 4, 4)] {
            total += f * c * k * k + f;
            c = f;
            side = (side - k) / s + 1;
        }
        let mut width = c * side * side;
        for n in [1024, 512, 10, 1] {
            total += n * width + n;
            width = n;
        }
        total
    }

    #[test]
    fn estimator_trace_and_parameter_count() {
        let spec = build_estimator_spec();
        let shapes = spec.walk((1, 512, 512)).unwrap();
        assert_eq!(shapes[0], (4, 64, 64));
        assert_eq!(shapes[1], (8, 16, 16));
        assert_eq!(shapes[2], (8, 4, 4));
        assert_eq!(shapes[3], (128, 1, 1));
        assert_eq!(estimator_count_oracle(), 663_849);
        assert_eq!(spec.param_count().unwrap(), 663_849);
    }

    #[test]
    fn discriminator_trace_and_parameter_count() {
        let spec = build_discriminator_spec();
        let shapes = spec.walk((1, 512, 512)).unwrap();
        assert_eq!(shapes[0], (1, 64, 64));
        assert_eq!(shapes[1], (1, 8, 8));
        assert_eq!(shapes[2], (64, 1, 1));
        assert_eq!(spec.param_count().unwrap(), 791);
    }

    #[test]
    fn specs_round_trip_through_json() {
        for spec in [build_estimator_spec(), build_discriminator_spec()] {
            let text = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<NetSpec>(&text).unwrap(), spec);
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut s = build_estimator_spec();
        s.layers[0] = LayerSpec::conv(4, 8, 0);
        assert!(s.validate().is_err());
        let mut s = build_discriminator_spec();
        s.layers[3] = LayerSpec::Dropout { rate: 1.0 };
        assert!(s.validate().is_err());
        let s = build_estimator_spec();
        assert!(s.walk((1, 100, 100)).is_err());
    }
}
