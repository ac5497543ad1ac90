use rand_distr::{Distribution, Normal};

use super::tensor::Real;
use crate::seeds;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

/// Named, ordered parameter tensors of one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F> {
    params: Vec<Param<F>>,
}

pub type ParamId = usize;

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<F>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param shape");
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        self.params.len() - 1
    }

    /// Scaled-Gaussian init with standard deviation `gain / sqrt(fan_in)`.
    pub fn push_gaussian(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, gain: f64, seed: u64) -> ParamId {
        let n: usize = shape.iter().product();
        let std = gain / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut rng = seeds::rng(&[seed, self.params.len() as u64]);
        let data = (0..n).map(|_| F::of(normal.sample(&mut rng))).collect();
        self.push(name, shape, data)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.params[id].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.params[id].data
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads<F> {
        Grads {
            tensors: self.params.iter().map(|p| vec![F::zero(); p.data.len()]).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| G::of(v.f64())).collect(),
                })
                .collect(),
        }
    }

    /// True if every tensor matches `other` in name and shape.
    pub fn same_layout<G>(&self, other: &ParamSet<G>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<F> {
    pub tensors: Vec<Vec<F>>,
}

impl<F: Real> Grads<F> {
    pub fn scale(&mut self, s: F) {
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn add(&mut self, other: &Grads<F>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.f64().abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|v| *v == F::zero())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamSet<F>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let z = params.zeros_like().tensors;
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: z.clone(),
            v: z,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &Grads<F>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(t));
        let c2 = F::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (F::of(self.lr), F::of(self.eps));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (F::one() - b1) * gi;
                v[i] = b2 * v[i] + (F::one() - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamSet::<f64>::new();
        ps.push("w", vec![2], vec![1.0, -1.0]);
        let mut opt = Adam::new(&ps, 0.1, 0.5, 0.999);
        let g = Grads {
            tensors: vec![vec![3.0, -0.5]],
        };
        opt.step(&mut ps, &g);
        assert!((ps.get(0)[0] - 0.9).abs() < 1e-6);
        assert!((ps.get(0)[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        ps.push("w", vec![1], vec![5.0]);
        let mut opt = Adam::new(&ps, 0.05, 0.5, 0.999);
        for _ in 0..2000 {
            let w = ps.get(0)[0];
            opt.step(&mut ps, &Grads { tensors: vec![vec![2.0 * (w - 2.0)]] });
        }
        assert!((ps.get(0)[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn gaussian_init_is_seeded() {
        let mut a = ParamSet::<f32>::new();
        let mut b = ParamSet::<f32>::new();
        a.push_gaussian("w", vec![4, 4], 16, 1.0, 9);
        b.push_gaussian("w", vec![4, 4], 16, 1.0, 9);
        assert_eq!(a, b);
        assert!(a.get(0).iter().any(|&v| v != 0.0));
    }
}
