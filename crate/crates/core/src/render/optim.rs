use crate::field::{FieldGradients, HexPlaneField, ParamKind};

/// Adaptive-moment optimizer over every block of a [`HexPlaneField`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Zero moments shaped like `field`.
    pub fn new(field: &HexPlaneField, beta1: f64, beta2: f64) -> Self {
        let shapes: Vec<usize> = FieldGradients::zeros_like(field).slices().iter().map(|s| s.len()).collect();
        Self {
            beta1,
            beta2,
            epsilon: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update with separate step sizes for grid and decoder blocks.
    pub fn update(&mut self, field: &mut HexPlaneField, grads: &FieldGradients, lr_grid: f64, lr_decoder: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (((kind, params), g), (m, v)) in field
            .parameters_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let lr = match kind {
                ParamKind::Grid => lr_grid,
                ParamKind::Decoder => lr_decoder,
            };
            for i in 0..params.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Bounds, Resolution};

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut field = HexPlaneField::new(
            Bounds {
                min: [0.0; 4],
                max: [1.0; 4],
            },
            Resolution {
                spatial: [2; 3],
                temporal: 2,
            },
            [1; 3],
            2,
            2,
            0,
        )
        .unwrap();
        let before = field.clone();
        let mut g = FieldGradients::zeros_like(&field);
        g.planes[0][0] = 3.0;
        g.vectors[1][1] = -0.01;
        g.decoder.color_out.bias[2] = 5.0;
        let mut adam = Adam::new(&field, 0.9, 0.99);
        adam.update(&mut field, &g, 0.02, 0.001);
        assert!((before.planes[0].data[0] - field.planes[0].data[0] - 0.02).abs() < 1e-9);
        assert!((field.vectors[1][1] - before.vectors[1][1] - 0.02).abs() < 1e-6);
        assert!((before.decoder.color_out.bias[2] - field.decoder.color_out.bias[2] - 0.001).abs() < 1e-9);
        assert_eq!(field.planes[2], before.planes[2]);
        assert_eq!(adam.steps(), 1);
    }
}
