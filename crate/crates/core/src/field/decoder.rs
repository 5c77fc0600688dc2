use rand::Rng;

/// Number of sinusoidal frequencies in the view-direction encoding.
pub const DIRECTION_FREQUENCIES: usize = 4;
/// Width of the encoded view direction: the raw direction plus sin/cos per frequency.
pub const DIRECTION_ENCODING_WIDTH: usize = 3 + 6 * DIRECTION_FREQUENCIES;

/// Fully connected layer, `y = W x + b` with `W` stored row-major (outputs × inputs).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn random(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs);
        for w in &mut layer.weights {
            *w = rng.random_range(-limit..=limit);
        }
        layer
    }

    fn forward(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inputs);
        for (o, out) in y.iter_mut().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            *out = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients into `grad` and, if requested, writes `∂L/∂x`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense, dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &mut grad.weights[o * self.inputs..(o + 1) * self.inputs];
            for (r, v) in row.iter_mut().zip(x) {
                *r += g * v;
            }
        }
        if let Some(dx) = dx {
            dx.fill(0.0);
            for (o, &g) in dy.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                for (d, w) in dx.iter_mut().zip(row) {
                    *d += g * w;
                }
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Two tiny perceptrons: density from the first half of the feature, color from
/// the second half concatenated with the encoded view direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub feature_dim: usize,
    pub density_hidden: Dense,
    pub density_out: Dense,
    pub color_hidden: Dense,
    pub color_out: Dense,
}

/// Intermediate values of one decode, kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct DecodeCache {
    density_pre: Vec<f64>,
    density_act: Vec<f64>,
    color_in: Vec<f64>,
    color_pre: Vec<f64>,
    color_act: Vec<f64>,
    raw_density: f64,
    rgb: [f64; 3],
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `[d, sin(2ᵏπd), cos(2ᵏπd)]` for k = 0..4.
pub fn encode_direction(dir: &[f64; 3], out: &mut [f64]) {
    out[..3].copy_from_slice(dir);
    for k in 0..DIRECTION_FREQUENCIES {
        let scale = std::f64::consts::PI * (1u32 << k) as f64;
        for a in 0..3 {
            let (s, c) = (scale * dir[a]).sin_cos();
            out[3 + 6 * k + a] = s;
            out[3 + 6 * k + 3 + a] = c;
        }
    }
}

impl Decoder {
    pub fn density_width(feature_dim: usize) -> usize {
        feature_dim / 2
    }

    pub fn zeros(feature_dim: usize, hidden: usize) -> Self {
        let d = Self::density_width(feature_dim);
        Self {
            feature_dim,
            density_hidden: Dense::zeros(d, hidden),
            density_out: Dense::zeros(hidden, 1),
            color_hidden: Dense::zeros(feature_dim - d + DIRECTION_ENCODING_WIDTH, hidden),
            color_out: Dense::zeros(hidden, 3),
        }
    }

    pub fn random(feature_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let d = Self::density_width(feature_dim);
        Self {
            feature_dim,
            density_hidden: Dense::random(d, hidden, rng),
            density_out: Dense::random(hidden, 1, rng),
            color_hidden: Dense::random(feature_dim - d + DIRECTION_ENCODING_WIDTH, hidden, rng),
            color_out: Dense::random(hidden, 3, rng),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.density_hidden.outputs
    }

    pub fn layers(&self) -> [&Dense; 4] {
        [&self.density_hidden, &self.density_out, &self.color_hidden, &self.color_out]
    }

    pub fn layers_mut(&mut self) -> [&mut Dense; 4] {
        [
            &mut self.density_hidden,
            &mut self.density_out,
            &mut self.color_hidden,
            &mut self.color_out,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|l| l.parameter_count()).sum()
    }

    /// Density (softplus) and color (sigmoid) for a feature seen along `dir`.
    pub fn decode(&self, feature: &[f64], dir: &[f64; 3]) -> (f64, [f64; 3]) {
        let mut cache = DecodeCache::default();
        self.decode_cached(feature, dir, &mut cache)
    }

    pub fn decode_cached(&self, feature: &[f64], dir: &[f64; 3], cache: &mut DecodeCache) -> (f64, [f64; 3]) {
        let h = self.hidden_width();
        let d = Self::density_width(self.feature_dim);
        cache.density_pre.resize(h, 0.0);
        cache.density_act.resize(h, 0.0);
        cache.color_pre.resize(h, 0.0);
        cache.color_act.resize(h, 0.0);
        cache.color_in.resize(self.color_hidden.inputs, 0.0);

        self.density_hidden.forward(&feature[..d], &mut cache.density_pre);
        for (a, &p) in cache.density_act.iter_mut().zip(&cache.density_pre) {
            *a = p.max(0.0);
        }
        let mut raw = [0.0];
        self.density_out.forward(&cache.density_act, &mut raw);
        cache.raw_density = raw[0];

        cache.color_in[..self.feature_dim - d].copy_from_slice(&feature[d..]);
        encode_direction(dir, &mut cache.color_in[self.feature_dim - d..]);
        self.color_hidden.forward(&cache.color_in, &mut cache.color_pre);
        for (a, &p) in cache.color_act.iter_mut().zip(&cache.color_pre) {
            *a = p.max(0.0);
        }
        let mut raw_rgb = [0.0; 3];
        self.color_out.forward(&cache.color_act, &mut raw_rgb);
        cache.rgb = raw_rgb.map(sigmoid);
        (softplus(cache.raw_density), cache.rgb)
    }

    /// Backpropagates `∂L/∂σ` and `∂L/∂rgb` through a cached decode, accumulating
    /// parameter gradients into `grad` and writing `∂L/∂feature` into `dfeature`.
    pub fn backward(
        &self,
        feature: &[f64],
        cache: &DecodeCache,
        d_density: f64,
        d_rgb: &[f64; 3],
        grad: &mut Decoder,
        dfeature: &mut [f64],
    ) {
        let h = self.hidden_width();
        let d = Self::density_width(self.feature_dim);
        let mut dh = vec![0.0; h];

        let d_raw = [d_density * sigmoid(cache.raw_density)];
        self.density_out
            .backward(&cache.density_act, &d_raw, &mut grad.density_out, Some(&mut dh));
        for (g, &p) in dh.iter_mut().zip(&cache.density_pre) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        self.density_hidden
            .backward(&feature[..d], &dh, &mut grad.density_hidden, Some(&mut dfeature[..d]));

        let d_raw_rgb: Vec<f64> = (0..3).map(|c| d_rgb[c] * cache.rgb[c] * (1.0 - cache.rgb[c])).collect();
        self.color_out
            .backward(&cache.color_act, &d_raw_rgb, &mut grad.color_out, Some(&mut dh));
        for (g, &p) in dh.iter_mut().zip(&cache.color_pre) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        let mut dcolor_in = vec![0.0; self.color_hidden.inputs];
        self.color_hidden
            .backward(&cache.color_in, &dh, &mut grad.color_hidden, Some(&mut dcolor_in));
        dfeature[d..].copy_from_slice(&dcolor_in[..self.feature_dim - d]);
    }
}
