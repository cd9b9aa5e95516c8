//! One-hidden-layer perceptron over the flattened bag (rows concatenated in
//! their stored order). Unlike AMIL this depends on row order, which is why
//! bags are canonicalised before they reach it.

use rand::Rng;

use super::{cross_entropy, uniform_init};
use crate::error::{Error, Result};
use crate::matrix::BagMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    rows: usize,
    dim: usize,
    hidden: usize,
    classes: usize,
    // [W1 (hidden×input) | b1 (hidden) | W2 (classes×hidden) | b2 (classes)]
    params: Vec<f64>,
}

impl MlpModel {
    pub fn num_params(input: usize, hidden: usize, classes: usize) -> usize {
        hidden * input + hidden + classes * hidden + classes
    }

    /// `rows × dim` is the bag shape the model accepts.
    pub fn zeros(rows: usize, dim: usize, hidden: usize, classes: usize) -> Result<Self> {
        if rows == 0 || dim == 0 || hidden == 0 || classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "MLP needs rows, dim, hidden >= 1 and classes >= 2 (got {rows}, {dim}, {hidden}, {classes})"
            )));
        }
        Ok(Self {
            rows,
            dim,
            hidden,
            classes,
            params: vec![0.0; Self::num_params(rows * dim, hidden, classes)],
        })
    }

    pub fn init(
        rows: usize,
        dim: usize,
        hidden: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut m = Self::zeros(rows, dim, hidden, classes)?;
        let (fan1, fan2) = ((rows * dim) as f64, hidden as f64);
        let [o1, ob1, o2, ob2] = m.offsets();
        uniform_init(&mut m.params[o1..ob1], fan1, rng);
        uniform_init(&mut m.params[ob1..o2], fan1, rng);
        uniform_init(&mut m.params[o2..ob2], fan2, rng);
        uniform_init(&mut m.params[ob2..], fan2, rng);
        Ok(m)
    }

    pub fn from_params(
        rows: usize,
        dim: usize,
        hidden: usize,
        classes: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut m = Self::zeros(rows, dim, hidden, classes)?;
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

    pub fn input_size(&self) -> usize {
        self.rows * self.dim
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
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
        let w1 = 0;
        let b1 = w1 + self.hidden * self.input_size();
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.classes * self.hidden;
        [w1, b1, w2, b2]
    }

    pub fn w1(&self) -> &[f64] {
        let [a, b, ..] = self.offsets();
        &self.params[a..b]
    }

    pub fn b1(&self) -> &[f64] {
        let [_, a, b, _] = self.offsets();
        &self.params[a..b]
    }

    pub fn w2(&self) -> &[f64] {
        let [.., a, b] = self.offsets();
        &self.params[a..b]
    }

    pub fn b2(&self) -> &[f64] {
        let [.., b] = self.offsets();
        &self.params[b..]
    }

    fn check(&self, bag: &BagMatrix) -> Result<()> {
        if bag.rows() * bag.cols() != self.input_size() || bag.cols() != self.dim {
            return Err(Error::DimMismatch {
                context: format!("bag {}x{} given to MLP", bag.rows(), bag.cols()),
                expected: self.input_size(),
                found: bag.rows() * bag.cols(),
            });
        }
        Ok(())
    }
}

fn hidden_layer(model: &MlpModel, x: &[f64]) -> Vec<f64> {
    let n = model.input_size();
    let (w1, b1) = (model.w1(), model.b1());
    (0..model.hidden)
        .map(|j| {
            let pre = b1[j]
                + w1[j * n..(j + 1) * n]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            pre.max(0.0)
        })
        .collect()
}

fn output_layer(model: &MlpModel, h: &[f64]) -> Vec<f64> {
    let (w2, b2) = (model.w2(), model.b2());
    (0..model.classes)
        .map(|c| {
            b2[c]
                + w2[c * model.hidden..(c + 1) * model.hidden]
                    .iter()
                    .zip(h)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect()
}

/// Affine → ReLU → affine over the flattened bag.
pub fn mlp_forward(model: &MlpModel, bag: &BagMatrix) -> Result<Vec<f64>> {
    model.check(bag)?;
    Ok(output_layer(model, &hidden_layer(model, bag.data())))
}

/// Cross-entropy loss and its gradient, laid out like [`MlpModel::params`].
pub fn mlp_backward(model: &MlpModel, bag: &BagMatrix, target: &[f64]) -> Result<(f64, Vec<f64>)> {
    model.check(bag)?;
    if target.len() != model.classes {
        return Err(Error::DimMismatch {
            context: "MLP target".into(),
            expected: model.classes,
            found: target.len(),
        });
    }
    let x = bag.data();
    let h = hidden_layer(model, x);
    let logits = output_layer(model, &h);
    let (loss, g_out) = cross_entropy(&logits, target);

    let n = model.input_size();
    let hd = model.hidden;
    let [o_w1, o_b1, o_w2, o_b2] = model.offsets();
    let mut grad = vec![0.0; model.params.len()];
    grad[o_b2..].copy_from_slice(&g_out);
    let mut g_h = vec![0.0; hd];
    let w2 = model.w2();
    for c in 0..model.classes {
        for j in 0..hd {
            grad[o_w2 + c * hd + j] = g_out[c] * h[j];
            g_h[j] += g_out[c] * w2[c * hd + j];
        }
    }
    for j in 0..hd {
        // ReLU passes gradient only where the unit was active.
        if h[j] <= 0.0 {
            continue;
        }
        grad[o_b1 + j] = g_h[j];
        for (g, xi) in grad[o_w1 + j * n..o_w1 + (j + 1) * n].iter_mut().zip(x) {
            *g = g_h[j] * xi;
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn zero_weights_return_bias() {
        let mut m = MlpModel::zeros(2, 3, 4, 2).unwrap();
        let [.., b2] = m.offsets();
        m.params_mut()[b2..].copy_from_slice(&[0.7, -1.5]);
        let bag = BagMatrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(mlp_forward(&m, &bag).unwrap(), vec![0.7, -1.5]);
    }

    #[test]
    fn single_path_reproduces_a_coordinate() {
        // Hidden unit 0 reads input 4; output 1 reads hidden unit 0.
        let mut m = MlpModel::zeros(2, 3, 2, 2).unwrap();
        let [o_w1, _, o_w2, _] = m.offsets();
        m.params_mut()[o_w1 + 4] = 1.0;
        m.params_mut()[o_w2 + 2] = 1.0;
        let bag = BagMatrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(mlp_forward(&m, &bag).unwrap(), vec![0.0, 5.0]);
    }

    #[test]
    fn rejects_wrong_shape() {
        let m = MlpModel::init(2, 3, 4, 2, &mut seed::rng(0)).unwrap();
        let bag = BagMatrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(mlp_forward(&m, &bag).is_err());
    }

    #[test]
    fn row_order_matters() {
        let m = MlpModel::init(2, 2, 8, 2, &mut seed::rng(3)).unwrap();
        let bag = BagMatrix::from_rows(&[[1.0, 0.0], [0.0, 3.0]]).unwrap();
        let swapped = bag.permute_rows(&[1, 0]);
        assert_ne!(
            mlp_forward(&m, &bag).unwrap(),
            mlp_forward(&m, &swapped).unwrap()
        );
    }
}
