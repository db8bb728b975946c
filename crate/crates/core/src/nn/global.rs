//! Fully convolutional form of a patch network: strided layers become
//! dilated stride-1 convolutions, and flatten plus the first dense layer
//! becomes one dilated convolution covering the whole patch.

use super::net::NetworkWeights;
use super::spec::{LayerSpec, NetForm, NetSpec};
use crate::error::{Error, Result};
use crate::image::{GrayImage, Grid};

pub fn to_global(weights: &NetworkWeights) -> Result<NetworkWeights> {
    let spec = &weights.spec;
    let NetForm::Patch { input_side } = spec.form else {
        return Err(Error::Conversion(
            "network is already fully convolutional".into(),
        ));
    };
    if spec.standardize {
        return Err(Error::Conversion(
            "per-patch input standardization has no dense form".into(),
        ));
    }
    let shapes = spec
        .walk((1, input_side, input_side))
        .map_err(|e| Error::Conversion(e.to_string()))?;
    let mut layers = Vec::new();
    let mut params = Vec::new();
    let mut sample_layer = None;
    let mut cum_stride = 1usize;
    let mut pending_flatten: Option<(usize, usize, usize)> = None;
    let mut prev_shape = (1, input_side, input_side);
    for (i, layer) in spec.layers.iter().enumerate() {
        let p = weights.params[i].clone();
        match *layer {
            LayerSpec::Conv {
                filters,
                filter_size,
                stride,
                dilation,
            } => {
                if pending_flatten.is_some() || sample_layer.is_some() {
                    return Err(Error::Conversion(format!(
                        "layer {i}: conv after the dense stage"
                    )));
                }
                layers.push(LayerSpec::dilated(
                    filters,
                    filter_size,
                    dilation * cum_stride,
                ));
                params.push(p);
                cum_stride *= stride;
            }
            LayerSpec::Flatten => {
                if prev_shape.1 != prev_shape.2 {
                    return Err(Error::Conversion(format!(
                        "layer {i}: non-square feature map {prev_shape:?}"
                    )));
                }
                pending_flatten = Some(prev_shape);
            }
            LayerSpec::FullyConnected { out_dim } => match pending_flatten.take() {
                // (c, y, x) flatten order equals the (filters, c, ky, kx) weight layout
                Some((_, side, _)) => {
                    sample_layer = Some(layers.len());
                    layers.push(LayerSpec::dilated(out_dim, side, cum_stride));
                    params.push(p);
                }
                None if sample_layer.is_some() => {
                    layers.push(LayerSpec::dilated(out_dim, 1, 1));
                    params.push(p);
                }
                None => {
                    return Err(Error::Conversion(format!(
                        "layer {i}: dense layer before flatten"
                    )))
                }
            },
            LayerSpec::Dropout { .. } => {}
        }
        prev_shape = shapes[i];
    }
    let sample_layer = sample_layer
        .ok_or_else(|| Error::Conversion("no flatten + dense stage to convert".into()))?;
    let global = NetSpec {
        form: NetForm::Global { sample_layer },
        layers,
        head: spec.head,
        standardize: false,
    };
    global
        .validate()
        .map_err(|e| Error::Conversion(e.to_string()))?;
    let mut out = NetworkWeights {
        spec: global,
        params,
        seed: weights.seed,
        metadata: serde_json::Value::Null,
    };
    // shape check: the relaid parameters must fit the converted spec
    let expect = NetworkWeights::zeros(&out.spec)?;
    for (a, b) in out.params.iter().zip(&expect.params) {
        if a.weight.len() != b.weight.len() || a.bias.len() != b.bias.len() {
            return Err(Error::Conversion(
                "parameter count changed during conversion".into(),
            ));
        }
    }
    out.metadata =
        serde_json::json!({ "converted_from_patch_side": input_side, "source": weights.metadata });
    Ok(out)
}

/// Evaluates the global network on an image; entry `(y, x)` corresponds
/// to the patch whose top-left corner is `(x * stride_out, y * stride_out)`.
pub fn global_forward(
    weights: &NetworkWeights,
    image: &GrayImage,
    stride_out: usize,
) -> Result<Grid<f64>> {
    let NetForm::Global { sample_layer } = weights.spec.form else {
        return Err(Error::Shape(
            "global forward needs a converted network".into(),
        ));
    };
    if stride_out == 0 {
        return Err(Error::Domain("output stride must be >= 1".into()));
    }
    let side = weights.spec.min_side();
    if image.width() < side || image.height() < side {
        return Err(Error::Shape(format!(
            "image {}x{} smaller than the {side}x{side} receptive field",
            image.width(),
            image.height()
        )));
    }
    let mut strided = weights.clone();
    if let LayerSpec::Conv { stride, .. } = &mut strided.spec.layers[sample_layer] {
        *stride = stride_out;
    }
    let out = strided.run_image(image)?;
    Grid::from_vec(out.h, out.w, out.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::{build_discriminator_spec, build_estimator_spec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn converted_layers_follow_the_conversion_table() {
        let w = NetworkWeights::init(&build_estimator_spec(), 1).unwrap();
        let g = to_global(&w).unwrap();
        assert_eq!(
            g.spec.layers,
            vec![
                LayerSpec::dilated(4, 8, 1),
                LayerSpec::dilated(8, 4, 8),
                LayerSpec::dilated(8, 4, 32),
                LayerSpec::dilated(1024, 4, 128),
                LayerSpec::dilated(512, 1, 1),
                LayerSpec::dilated(10, 1, 1),
                LayerSpec::dilated(1, 1, 1),
            ]
        );
        assert_eq!(g.spec.form, NetForm::Global { sample_layer: 3 });
        assert_eq!(g.spec.min_side(), 512);
        assert_eq!(g.params[3].weight.len(), 1024 * 8 * 4 * 4);
        assert_eq!(g.param_count(), w.param_count());
    }

    #[test]
    fn double_conversion_is_rejected() {
        let w = NetworkWeights::init(&build_estimator_spec(), 1).unwrap();
        let g = to_global(&w).unwrap();
        assert!(matches!(to_global(&g), Err(Error::Conversion(_))));
    }

    #[test]
    fn discriminator_layers_convert_too() {
        let standardized = NetworkWeights::init(&build_discriminator_spec(), 1).unwrap();
        assert!(matches!(
            to_global(&standardized),
            Err(Error::Conversion(_))
        ));
        let spec = NetSpec {
            standardize: false,
            ..build_discriminator_spec()
        };
        let w = NetworkWeights::init(&spec, 1).unwrap();
        let g = to_global(&w).unwrap();
        let img = GrayImage::from_fn(512, 512, |x, y| ((x * 7 + y * 3) % 13) as f64 / 12.0);
        let a = w.forward(&img).unwrap();
        let b = global_forward(&g, &img, 1).unwrap();
        assert_eq!(b.shape(), (1, 1));
        assert!((a - *b.get(0, 0)).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn strided_grid_matches_patch_forwards() {
        let w = NetworkWeights::init(&build_estimator_spec(), 21).unwrap();
        let g = to_global(&w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = GrayImage::from_fn(520, 520, |_, _| rng.random::<f64>());
        let map = global_forward(&g, &img, 4).unwrap();
        assert_eq!(map.shape(), (3, 3));
        for gy in 0..3 {
            for gx in 0..3 {
                let p = img.crop(gx * 4, gy * 4, 512, 512).unwrap();
                let expect = w.forward(&p).unwrap();
                let got = *map.get(gy, gx);
                assert!(
                    (got - expect).abs() <= 1e-5 * expect.abs().max(1e-9),
                    "({gx},{gy}) {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn constant_image_gives_constant_map() {
        let w = NetworkWeights::init(&build_estimator_spec(), 2).unwrap();
        let g = to_global(&w).unwrap();
        let map = global_forward(&g, &GrayImage::filled(544, 530, 0.4), 8).unwrap();
        let v0 = *map.get(0, 0);
        assert!(map
            .iter()
            .all(|v| (v - v0).abs() <= 1e-12 * v0.abs().max(1.0)));
        assert!(matches!(
            global_forward(&g, &GrayImage::filled(511, 600, 0.4), 1),
            Err(Error::Shape(_))
        ));
    }
}
