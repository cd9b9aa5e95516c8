//! Attention-based MIL: per-instance scores `e_i = wᵀ tanh(V h_i)`, softmax
//! attention `a`, pooled embedding `z = Σ a_i h_i`, logits `U z + b`.
//!
//! The pooled embedding is a weighted sum over rows with weights that depend
//! only on each row's own content, so the logits are invariant to the order of
//! the rows and the attention weights permute with them.

use rand::Rng;

use super::{cross_entropy, softmax_in_place, uniform_init};
use crate::error::{Error, Result};
use crate::matrix::BagMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct AmilModel {
    dim: usize,
    width: usize,
    classes: usize,
    // [V (width×dim) | w (width) | U (classes×dim) | b (classes)]
    params: Vec<f64>,
}

impl AmilModel {
    pub fn num_params(dim: usize, width: usize, classes: usize) -> usize {
        width * dim + width + classes * dim + classes
    }

    pub fn zeros(dim: usize, width: usize, classes: usize) -> Result<Self> {
        if dim == 0 || width == 0 || classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "AMIL needs dim >= 1, width >= 1, classes >= 2 (got {dim}, {width}, {classes})"
            )));
        }
        Ok(Self {
            dim,
            width,
            classes,
            params: vec![0.0; Self::num_params(dim, width, classes)],
        })
    }

    /// Uniform `±1/√fan_in` attention weights and a zero classifier head, so
    /// the head's first steps follow the class means instead of a random
    /// initial orientation.
    pub fn init(dim: usize, width: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut m = Self::zeros(dim, width, classes)?;
        let (vd, wd) = (dim as f64, width as f64);
        uniform_init(m.v_mut(), vd, rng);
        uniform_init(m.w_mut(), wd, rng);
        Ok(m)
    }

    pub fn from_params(dim: usize, width: usize, classes: usize, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(dim, width, classes)?;
        if params.len() != m.params.len() {
            return Err(Error::ShapeMismatch {
                rows: 1,
                cols: m.params.len(),
                actual: params.len(),
            });
        }
        m.params = params;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offsets(&self) -> [usize; 4] {
        let v = 0;
        let w = v + self.width * self.dim;
        let u = w + self.width;
        let b = u + self.classes * self.dim;
        [v, w, u, b]
    }

    /// Attention projection, `width × dim`.
    pub fn v(&self) -> &[f64] {
        let [v, w, ..] = self.offsets();
        &self.params[v..w]
    }

    /// Attention vector, length `width`.
    pub fn w(&self) -> &[f64] {
        let [_, w, u, _] = self.offsets();
        &self.params[w..u]
    }

    /// Classifier weights, `classes × dim`.
    pub fn u(&self) -> &[f64] {
        let [.., u, b] = self.offsets();
        &self.params[u..b]
    }

    pub fn b(&self) -> &[f64] {
        let [.., b] = self.offsets();
        &self.params[b..]
    }

    pub fn v_mut(&mut self) -> &mut [f64] {
        let [v, w, ..] = self.offsets();
        &mut self.params[v..w]
    }

    pub fn w_mut(&mut self) -> &mut [f64] {
        let [_, w, u, _] = self.offsets();
        &mut self.params[w..u]
    }

    pub fn u_mut(&mut self) -> &mut [f64] {
        let [.., u, b] = self.offsets();
        &mut self.params[u..b]
    }

    pub fn b_mut(&mut self) -> &mut [f64] {
        let [.., b] = self.offsets();
        &mut self.params[b..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmilOutput {
    pub logits: Vec<f64>,
    pub attention: Vec<f64>,
}

struct Forward {
    hidden: Vec<f64>, // tanh(V h_i), rows × width
    attention: Vec<f64>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

fn forward(model: &AmilModel, bag: &BagMatrix) -> Result<Forward> {
    if bag.cols() != model.dim {
        return Err(Error::DimMismatch {
            context: "bag given to AMIL".into(),
            expected: model.dim,
            found: bag.cols(),
        });
    }
    let (l, d) = (model.width, model.dim);
    let (v, w, u, b) = (model.v(), model.w(), model.u(), model.b());
    let mut hidden = Vec::with_capacity(bag.rows() * l);
    let mut scores = Vec::with_capacity(bag.rows());
    for h in bag.iter_rows() {
        let mut e = 0.0;
        for j in 0..l {
            let pre: f64 = v[j * d..(j + 1) * d]
                .iter()
                .zip(h)
                .map(|(a, b)| a * b)
                .sum();
            let t = pre.tanh();
            hidden.push(t);
            e += w[j] * t;
        }
        scores.push(e);
    }
    softmax_in_place(&mut scores);
    let attention = scores;
    let mut pooled = vec![0.0; d];
    for (a, h) in attention.iter().zip(bag.iter_rows()) {
        for (z, x) in pooled.iter_mut().zip(h) {
            *z += a * x;
        }
    }
    let logits = (0..model.classes)
        .map(|c| {
            b[c] + u[c * d..(c + 1) * d]
                .iter()
                .zip(&pooled)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .collect();
    Ok(Forward {
        hidden,
        attention,
        pooled,
        logits,
    })
}

pub fn amil_forward(model: &AmilModel, bag: &BagMatrix) -> Result<AmilOutput> {
    let f = forward(model, bag)?;
    Ok(AmilOutput {
        logits: f.logits,
        attention: f.attention,
    })
}

/// Cross-entropy loss against `target` (a probability vector, possibly soft)
/// and its exact gradient, laid out like [`AmilModel::params`].
pub fn amil_backward(
    model: &AmilModel,
    bag: &BagMatrix,
    target: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if target.len() != model.classes {
        return Err(Error::DimMismatch {
            context: "AMIL target".into(),
            expected: model.classes,
            found: target.len(),
        });
    }
    let f = forward(model, bag)?;
    let (l, d, c) = (model.width, model.dim, model.classes);
    let (loss, g_logits) = cross_entropy(&f.logits, target);

    let mut grad = vec![0.0; model.params.len()];
    let [o_v, o_w, o_u, o_b] = model.offsets();

    grad[o_b..].copy_from_slice(&g_logits);
    let mut g_pooled = vec![0.0; d];
    for k in 0..c {
        let u_row = &model.u()[k * d..(k + 1) * d];
        let g_row = &mut grad[o_u + k * d..o_u + (k + 1) * d];
        for j in 0..d {
            g_row[j] = g_logits[k] * f.pooled[j];
            g_pooled[j] += g_logits[k] * u_row[j];
        }
    }

    // z = Σ a_i h_i  ⇒  ∂L/∂a_i = g_z · h_i, then back through the softmax.
    let g_attn: Vec<f64> = bag
        .iter_rows()
        .map(|h| h.iter().zip(&g_pooled).map(|(a, b)| a * b).sum())
        .collect();
    let mean_g: f64 = f.attention.iter().zip(&g_attn).map(|(a, g)| a * g).sum();

    let w = model.w();
    for (i, h) in bag.iter_rows().enumerate() {
        let g_score = f.attention[i] * (g_attn[i] - mean_g);
        if g_score == 0.0 {
            continue;
        }
        let t = &f.hidden[i * l..(i + 1) * l];
        for j in 0..l {
            grad[o_w + j] += g_score * t[j];
            let g_pre = g_score * w[j] * (1.0 - t[j] * t[j]);
            for (g, x) in grad[o_v + j * d..o_v + (j + 1) * d].iter_mut().zip(h) {
                *g += g_pre * x;
            }
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn init_bounds_attention_and_zeroes_head() {
        let m = AmilModel::init(4, 9, 3, &mut seed::rng(5)).unwrap();
        assert!(m.v().iter().all(|v| v.abs() <= 0.5) && m.v().iter().any(|v| *v != 0.0));
        assert!(m.w().iter().all(|v| v.abs() <= 1.0 / 3.0) && m.w().iter().any(|v| *v != 0.0));
        assert!(m.u().iter().chain(m.b()).all(|v| *v == 0.0));
    }

    #[test]
    fn single_instance_gets_all_attention() {
        let m = AmilModel::init(3, 4, 2, &mut seed::rng(0)).unwrap();
        let bag = BagMatrix::from_rows(&[[0.5, -1.0, 2.0]]).unwrap();
        let out = amil_forward(&m, &bag).unwrap();
        assert_eq!(out.attention, vec![1.0]);
        let f = forward(&m, &bag).unwrap();
        assert_eq!(f.pooled, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn identical_rows_get_uniform_attention() {
        let m = AmilModel::init(2, 5, 3, &mut seed::rng(1)).unwrap();
        let bag = BagMatrix::from_rows(&[[1.0, 2.0]; 4]).unwrap();
        let f = forward(&m, &bag).unwrap();
        assert!(f.attention.iter().all(|&a| a == 0.25));
        assert!(f
            .pooled
            .iter()
            .zip([1.0, 2.0])
            .all(|(z, h)| (z - h).abs() < 1e-15));
    }

    #[test]
    fn hand_computed_example() {
        // dim = L = 1, V = w = U = 1, b = 0, rows {0, 2}.
        let m = AmilModel::from_params(1, 1, 2, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let bag = BagMatrix::from_rows(&[[0.0], [2.0]]).unwrap();
        let out = amil_forward(&m, &bag).unwrap();
        // e = {0, tanh 2}; a = softmax(e); z = 2·a₂; logit₀ = z.
        let e1 = 2.0f64.tanh();
        let a1 = 1.0 / (1.0 + (-e1).exp());
        assert!((e1 - 0.96403).abs() < 1e-4);
        assert!((out.attention[0] - (1.0 - a1)).abs() < 1e-12);
        assert!((out.attention[1] - a1).abs() < 1e-12);
        assert!((out.logits[0] - 2.0 * a1).abs() < 1e-12);
        // Four-digit hand values: a ≈ {0.2760, 0.7240}, z ≈ 1.4479.
        assert!((out.attention[1] - 0.7240).abs() < 1e-4);
        assert!((out.logits[0] - 1.4479).abs() < 1e-4);
        assert_eq!(out.logits[1], 0.0);
    }

    #[test]
    fn dim_mismatch() {
        let m = AmilModel::zeros(3, 2, 2).unwrap();
        let bag = BagMatrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(
            amil_forward(&m, &bag),
            Err(Error::DimMismatch { .. })
        ));
        assert!(AmilModel::zeros(3, 2, 1).is_err());
    }

    #[test]
    fn bias_gradient_is_probability_minus_target() {
        let m = AmilModel::init(3, 4, 3, &mut seed::rng(2)).unwrap();
        let bag = BagMatrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]]).unwrap();
        let target = [0.2, 0.0, 0.8];
        let (_, g) = amil_backward(&m, &bag, &target).unwrap();
        let mut p = amil_forward(&m, &bag).unwrap().logits;
        softmax_in_place(&mut p);
        let gb = &g[g.len() - 3..];
        for c in 0..3 {
            assert!((gb[c] - (p[c] - target[c])).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_correct_logits_have_vanishing_gradient() {
        let mut m = AmilModel::init(2, 3, 2, &mut seed::rng(4)).unwrap();
        m.u_mut().iter_mut().for_each(|u| *u = 0.0);
        m.b_mut().copy_from_slice(&[50.0, -50.0]);
        let bag = BagMatrix::from_rows(&[[0.3, -0.2], [0.1, 0.9]]).unwrap();
        let (loss, g) = amil_backward(&m, &bag, &[1.0, 0.0]).unwrap();
        assert!(loss < 1e-40);
        assert!(g.iter().all(|v| v.abs() < 1e-40), "{g:?}");
    }
}
