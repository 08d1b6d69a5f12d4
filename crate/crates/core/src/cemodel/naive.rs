use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::Label;

/// Two-logit affine model over the single naive logP feature:
/// `logits = w * x + b` with `w, b` in R^2, four parameters in total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaiveModel {
    pub w: [f64; 2],
    pub b: [f64; 2],
}

const ITERATIONS: usize = 5000;
const LR: f64 = 1.0;

impl NaiveModel {
    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn logits(&self, x: f64) -> [f64; 2] {
        [self.w[0] * x + self.b[0], self.w[1] * x + self.b[1]]
    }

    pub fn prob_good(&self, x: f64) -> f64 {
        nn::softmax(&self.logits(x))[Label::Good.index()]
    }

    pub fn predict(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.prob_good(x)).collect()
    }
}

/// Full-batch gradient descent on the cross-entropy, in standardized
/// coordinates; the fitted map is folded back onto the raw feature.
pub fn naive_model_fit(xs: &[f64], labels: &[Label]) -> Result<NaiveModel> {
    if xs.len() != labels.len() {
        return Err(Error::shape("one label per sample required"));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("at least two samples required"));
    }
    let good = labels.iter().filter(|l| l.is_good()).count();
    if good == 0 || good == labels.len() {
        return Err(Error::invalid("single-class training data"));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite naive feature"));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 1e-12 { sd } else { 1.0 };
    let zs: Vec<f64> = xs.iter().map(|x| (x - mean) / sd).collect();
    let mut w = [0.0f64; 2];
    let mut b = [0.0f64; 2];
    for _ in 0..ITERATIONS {
        let mut gw = [0.0; 2];
        let mut gb = [0.0; 2];
        for (z, l) in zs.iter().zip(labels) {
            let p = nn::softmax(&[w[0] * z + b[0], w[1] * z + b[1]]);
            for c in 0..2 {
                let d = p[c] - if l.index() == c { 1.0 } else { 0.0 };
                gw[c] += d * z / n;
                gb[c] += d / n;
            }
        }
        for c in 0..2 {
            w[c] -= LR * gw[c];
            b[c] -= LR * gb[c];
        }
    }
    Ok(NaiveModel { w: [w[0] / sd, w[1] / sd], b: [b[0] - w[0] * mean / sd, b[1] - w[1] * mean / sd] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Good as G, NeedsWork as N};

    #[test]
    fn four_parameters() {
        let m = naive_model_fit(&[-1.0, -0.2], &[N, G]).unwrap();
        assert_eq!(m.param_count(), 4);
    }

    #[test]
    fn separable_data_is_fit_exactly() {
        let xs = [-3.0, -2.5, -2.0, -0.5, -0.3, -0.1];
        let ls = [N, N, N, G, G, G];
        let m = naive_model_fit(&xs, &ls).unwrap();
        let acc = xs.iter().zip(&ls).filter(|(x, l)| (m.prob_good(**x) > 0.5) == l.is_good()).count();
        assert_eq!(acc, xs.len());
    }

    #[test]
    fn label_swap_mirrors_probabilities() {
        let xs = [-2.0, -1.5, -1.0, -0.7, -0.2, -0.9, -1.1];
        let ls = [N, G, N, G, G, N, G];
        let swapped: Vec<Label> = ls.iter().map(|l| l.flip()).collect();
        let a = naive_model_fit(&xs, &ls).unwrap();
        let b = naive_model_fit(&xs, &swapped).unwrap();
        for x in [-3.0, -1.0, 0.0] {
            assert!((a.prob_good(x) - (1.0 - b.prob_good(x))).abs() < 1e-9);
        }
        let da = a.w[0] - a.w[1];
        let db = b.w[0] - b.w[1];
        assert!((da + db).abs() < 1e-9);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(naive_model_fit(&[-1.0, -2.0], &[G, G]).is_err());
        assert!(naive_model_fit(&[-1.0], &[G]).is_err());
    }
}
