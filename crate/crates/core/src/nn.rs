//! Dense layers and the few activation helpers the heads share.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Fully connected layer, weight stored row-major as `[outputs, inputs]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Weights drawn from `N(0, std^2)`, biases zero.
    pub fn gaussian<R: Rng + ?Sized>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("init std must be finite and non-negative");
        let weight = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        Self {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs, self.outputs)
    }

    /// `out = W x + b`
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inputs);
        debug_assert_eq!(out.len(), self.outputs);
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = dot(row, x) + b;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.outputs];
        self.forward_into(x, &mut out);
        out
    }

    /// Accumulate parameter gradients into `grad` and, if requested, the
    /// input gradient into `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear, dx: Option<&mut [f64]>) {
        for ((g_row, gb), &d) in grad
            .weight
            .chunks_exact_mut(self.inputs)
            .zip(grad.bias.iter_mut())
            .zip(dy)
        {
            if d == 0.0 {
                continue;
            }
            *gb += d;
            axpy(d, x, g_row);
        }
        if let Some(dx) = dx {
            for (row, &d) in self.weight.chunks_exact(self.inputs).zip(dy) {
                if d != 0.0 {
                    axpy(d, row, dx);
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &Linear) {
        debug_assert_eq!((self.inputs, self.outputs), (other.inputs, other.outputs));
        for (d, s) in self.weight.iter_mut().zip(&other.weight) {
            *d += s;
        }
        for (d, s) in self.bias.iter_mut().zip(&other.bias) {
            *d += s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zero the entries of `grad` whose pre-activation was not positive.
pub fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Probability of the second class of a two-way softmax.
pub fn two_way_softmax(background: f64, object: f64) -> f64 {
    let d = object - background;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut layer = Linear::gaussian(5, 3, 0.5, &mut rng);
        layer.bias = vec![0.1, -0.2, 0.3];
        let x = [0.3, -1.0, 0.7, 0.2, 0.5];
        let coef = [1.0, -2.0, 0.5];
        let loss = |l: &Linear, x: &[f64]| dot(&l.forward(x), &coef);
        let mut grad = layer.zeros_like();
        let mut dx = vec![0.0; 5];
        layer.backward(&x, &coef, &mut grad, Some(&mut dx));
        let eps = 1e-6;
        for i in 0..layer.weight.len() {
            let mut p = layer.clone();
            p.weight[i] += eps;
            let mut m = layer.clone();
            m.weight[i] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
            assert!((fd - grad.weight[i]).abs() < 1e-8);
        }
        for i in 0..5 {
            let mut xp = x;
            xp[i] += eps;
            let mut xm = x;
            xm[i] -= eps;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
        assert_eq!(grad.bias, coef.to_vec());
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, -0.5]);
        let b = softmax(&[101.0, 102.0, 99.5]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((two_way_softmax(0.3, 0.3) - 0.5).abs() == 0.0);
        assert!((two_way_softmax(-800.0, 800.0) - 1.0).abs() < 1e-15);
    }
}
