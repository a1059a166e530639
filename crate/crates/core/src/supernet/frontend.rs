//! Frozen strided-convolution downsampler. Runs outside the autodiff tape, so
//! its weights can never receive gradients.

use crate::error::{config_err, Result};
use crate::numerics::{gelu_scalar, Real, Tensor};
use crate::supernet::params::ParamSet;
use crate::supernet::space::FrontendSpec;

/// Raw samples to `[frames, channels]` features, `frames = ceil(len / total_stride)`.
pub fn run_frontend(spec: &FrontendSpec, params: &ParamSet, samples: &[Real]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(config_err("frontend input is empty"));
    }
    let get = |name: String| {
        params
            .get(&name)
            .ok_or_else(|| config_err(format!("missing frontend tensor `{name}`")))
    };
    let mut x = samples.to_vec();
    let mut len = samples.len();
    let mut cin = 1;
    for (i, layer) in spec.layers.iter().enumerate() {
        let w = get(format!("frontend.{i}.weight"))?;
        let b = if spec.bias {
            Some(get(format!("frontend.{i}.bias"))?)
        } else {
            None
        };
        let (cout, k, s) = (layer.channels, layer.kernel, layer.stride);
        if w.shape() != [cout, cin, k] {
            return Err(config_err(format!(
                "frontend layer {i} weight is {:?}, expected [{cout}, {cin}, {k}]",
                w.shape()
            )));
        }
        let out_len = len.div_ceil(s);
        let pad_total = ((out_len - 1) * s + k).saturating_sub(len);
        let pad_left = pad_total / 2;
        let mut y = vec![0.0 as Real; out_len * cout];
        let wd = w.data();
        for tau in 0..out_len {
            for o in 0..cout {
                let mut acc = b.map(|b| b.data()[o] as f64).unwrap_or(0.0);
                for j in 0..k {
                    let pos = tau * s + j;
                    if pos < pad_left || pos - pad_left >= len {
                        continue;
                    }
                    let src = (pos - pad_left) * cin;
                    for c in 0..cin {
                        acc += wd[(o * cin + c) * k + j] as f64 * x[src + c] as f64;
                    }
                }
                y[tau * cout + o] = acc as Real;
            }
        }
        if i == 0 && spec.first_layer_norm {
            let gain = get("frontend.norm.gain".into())?.data();
            let bias = get("frontend.norm.bias".into())?.data();
            for o in 0..cout {
                let mean =
                    (0..out_len).map(|t| y[t * cout + o] as f64).sum::<f64>() / out_len as f64;
                let var = (0..out_len)
                    .map(|t| (y[t * cout + o] as f64 - mean).powi(2))
                    .sum::<f64>()
                    / out_len as f64;
                let rs = 1.0 / (var + 1e-5).sqrt();
                for t in 0..out_len {
                    let v = (y[t * cout + o] as f64 - mean) * rs;
                    y[t * cout + o] = (v * gain[o] as f64 + bias[o] as f64) as Real;
                }
            }
        }
        y.iter_mut().for_each(|v| *v = gelu_scalar(*v));
        x = y;
        len = out_len;
        cin = cout;
    }
    Tensor::new(vec![len, cin], x)
}
