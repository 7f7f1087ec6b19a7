use serde::{Deserialize, Serialize};

use super::{dense_stack, init_dense_stack, normal_tensor, Activation, MlpSpec, ParamSet};
use crate::rng::Rng;
use crate::tensor::{NodeId, Padding, Real, Result, Tape, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    None,
    Max2,
}

/// How the final feature map is turned into a vector for the dense head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Flatten,
    SpatialMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: Pool,
}

impl ConvLayerSpec {
    pub fn new(filters: usize, kernel: usize, stride: usize, pool: Pool) -> Self {
        Self {
            filters,
            kernel,
            stride,
            pool,
        }
    }
}

/// Convolutional compressor: conv stack, readout, dense head to `n_outputs`
/// learned summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub conv_layers: Vec<ConvLayerSpec>,
    pub activation: Activation,
    pub readout: Readout,
    pub head: MlpSpec,
    pub n_outputs: usize,
}

impl CnnSpec {
    /// Three 3×3 conv layers (32, 64, 128 filters) each followed by 2×2 max
    /// pooling, flattened into a 128-unit dense layer, ReLU throughout.
    pub fn cm21_paper(n_outputs: usize) -> Self {
        Self::cm21_with_filters(&[32, 64, 128], 128, n_outputs)
    }

    pub fn cm21_with_filters(filters: &[usize], dense: usize, n_outputs: usize) -> Self {
        Self {
            conv_layers: filters
                .iter()
                .map(|&f| ConvLayerSpec::new(f, 3, 1, Pool::Max2))
                .collect(),
            activation: Activation::Relu,
            readout: Readout::Flatten,
            head: MlpSpec::new(vec![dense], Activation::Relu),
            n_outputs,
        }
    }

    /// 3×3 embedding into `embed` filters followed by stride-2 convolutions,
    /// spatial mean pooling and a dense head; smooth_leaky throughout.
    pub fn strided(embed: usize, down: &[usize], dense: usize, n_outputs: usize) -> Self {
        let mut conv_layers = vec![ConvLayerSpec::new(embed, 3, 1, Pool::None)];
        conv_layers.extend(down.iter().map(|&f| ConvLayerSpec::new(f, 3, 2, Pool::None)));
        Self {
            conv_layers,
            activation: Activation::SmoothLeaky,
            readout: Readout::SpatialMean,
            head: MlpSpec::new(vec![dense], Activation::SmoothLeaky),
            n_outputs,
        }
    }

    /// The large separately trained comparator: 16-filter embedding, stride-2
    /// filters (32, 64, 128), spatial mean pool, dense head.
    pub fn wl_large_paper(n_outputs: usize) -> Self {
        Self::strided(16, &[32, 64, 128], 128, n_outputs)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.n_outputs == 0 {
            return Err("CNN needs at least one output".into());
        }
        if self.conv_layers.is_empty() {
            return Err("CNN needs at least one conv layer".into());
        }
        for l in &self.conv_layers {
            if l.filters == 0 || l.stride == 0 || l.kernel % 2 == 0 {
                return Err(format!("invalid conv layer {l:?}"));
            }
        }
        self.head.validate()
    }

    /// Spatial size and channels after the conv stack for an `(h, w, c)` input.
    pub fn feature_shape(&self, h: usize, w: usize, c: usize) -> (usize, usize, usize) {
        let (mut h, mut w, mut c) = (h, w, c);
        for l in &self.conv_layers {
            h = h.div_ceil(l.stride);
            w = w.div_ceil(l.stride);
            if l.pool == Pool::Max2 {
                h /= 2;
                w /= 2;
            }
            c = l.filters;
        }
        (h, w, c)
    }

    pub fn readout_width(&self, h: usize, w: usize, c: usize) -> usize {
        let (fh, fw, fc) = self.feature_shape(h, w, c);
        match self.readout {
            Readout::Flatten => fh * fw * fc,
            Readout::SpatialMean => fc,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cnn<T: Real = f32> {
    pub spec: CnnSpec,
    /// Input `(H, W, C)`.
    pub input: (usize, usize, usize),
    pub params: ParamSet<T>,
}

impl<T: Real> Cnn<T> {
    pub fn new(spec: CnnSpec, input: (usize, usize, usize), rng: &mut Rng) -> Self {
        let mut params = ParamSet::default();
        let mut cin = input.2;
        for (i, l) in spec.conv_layers.iter().enumerate() {
            let fan_in = l.kernel * l.kernel * cin;
            let std = (spec.activation_gain() / fan_in as f64).sqrt();
            params.push(
                format!("conv{i}.w"),
                normal_tensor(rng, &[l.kernel, l.kernel, cin, l.filters], std),
            );
            params.push(format!("conv{i}.b"), Tensor::zeros(&[l.filters]));
            cin = l.filters;
        }
        let width = spec.readout_width(input.0, input.1, input.2);
        init_dense_stack(
            &mut params,
            "head",
            width,
            &spec.head.hidden,
            spec.n_outputs,
            spec.head.activation,
            rng,
        );
        Self {
            spec,
            input,
            params,
        }
    }

    /// Learned summaries `(B, n_outputs)` for fields `x: (B, H, W, C)`.
    pub fn forward(&self, tape: &mut Tape<T>, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let s = tape.shape(x).to_vec();
        let (h, w, c) = self.input;
        if s.len() != 4 || s[1..] != [h, w, c] {
            return Err(TensorError::ShapeMismatch {
                op: "cnn",
                shapes: vec![s, vec![h, w, c]],
            });
        }
        let batch = s[0];
        let mut cur = x;
        for (i, l) in self.spec.conv_layers.iter().enumerate() {
            cur = tape.conv2d(cur, ids[2 * i], l.stride, Padding::Same)?;
            cur = tape.add(cur, ids[2 * i + 1])?;
            cur = self.spec.activation.apply(tape, cur)?;
            if l.pool == Pool::Max2 {
                cur = tape.maxpool2d(cur, 2)?;
            }
        }
        cur = match self.spec.readout {
            Readout::Flatten => {
                let width = tape.value(cur).len() / batch;
                tape.reshape(cur, &[batch, width])?
            }
            Readout::SpatialMean => tape.meanpool_spatial(cur)?,
        };
        let n_conv = 2 * self.spec.conv_layers.len();
        dense_stack(tape, &ids[n_conv..], cur, self.spec.head.activation)
    }

    pub fn cast<U: Real>(&self) -> Cnn<U> {
        Cnn {
            spec: self.spec.clone(),
            input: self.input,
            params: self.params.cast(),
        }
    }

    /// Evaluates the frozen network in batches; returns `(N, n_outputs)` rows.
    pub fn summarize(&self, fields: &Tensor<T>, batch: usize) -> Result<Vec<Vec<f64>>> {
        let n = fields.shape()[0];
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let mut tape = Tape::new();
            let ids = self.params.bind_frozen(&mut tape);
            let x = tape.constant(fields.rows(start, end));
            let y = self.forward(&mut tape, &ids, x)?;
            let v = tape.value(y);
            out.extend(v.data().chunks(self.spec.n_outputs).map(|r| {
                r.iter().map(|x| x.as_f64()).collect::<Vec<_>>()
            }));
            start = end;
        }
        Ok(out)
    }
}

impl CnnSpec {
    fn activation_gain(&self) -> f64 {
        match self.activation {
            Activation::Relu | Activation::SmoothLeaky => 2.0,
            Activation::Tanh => 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Hand count: conv weights k·k·cin·f + f biases per layer, then dense layers.
    #[test]
    fn cm21_paper_parameter_count() {
        let spec = CnnSpec::cm21_paper(2);
        let cnn: Cnn<f32> = Cnn::new(spec, (64, 64, 1), &mut rng::rng(0, &[]));
        let conv = (9 * 32 + 32) + (9 * 32 * 64 + 64) + (9 * 64 * 128 + 128);
        let flat = 8 * 8 * 128;
        let dense = (flat * 128 + 128) + (128 * 2 + 2);
        assert_eq!(cnn.params.num_scalars(), conv + dense);
        assert_eq!(conv + dense, 1_141_634);
    }

    #[test]
    fn wl_large_shapes() {
        let spec = CnnSpec::wl_large_paper(3);
        assert_eq!(spec.feature_shape(128, 128, 4), (16, 16, 128));
        assert_eq!(spec.readout_width(64, 64, 4), 128);
        let cnn: Cnn<f32> = Cnn::new(spec, (32, 32, 4), &mut rng::rng(0, &[]));
        let conv = (9 * 4 * 16 + 16) + (9 * 16 * 32 + 32) + (9 * 32 * 64 + 64) + (9 * 64 * 128 + 128);
        let dense = (128 * 128 + 128) + (128 * 3 + 3);
        assert_eq!(cnn.params.num_scalars(), conv + dense);
    }

    #[test]
    fn forward_shape_and_validation() {
        let spec = CnnSpec::cm21_with_filters(&[4, 8], 16, 2);
        assert!(spec.validate().is_ok());
        let cnn: Cnn<f32> = Cnn::new(spec, (16, 16, 1), &mut rng::rng(3, &[]));
        let mut tape = Tape::new();
        let ids = cnn.params.bind(&mut tape);
        let x = tape.constant(Tensor::full(&[3, 16, 16, 1], 0.2));
        let y = cnn.forward(&mut tape, &ids, x).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        let bad = tape.constant(Tensor::full(&[3, 8, 8, 1], 0.2));
        assert!(cnn.forward(&mut tape, &ids, bad).is_err());

        let mut no_out = CnnSpec::cm21_with_filters(&[4], 16, 1);
        no_out.n_outputs = 0;
        assert!(no_out.validate().is_err());
    }
}
