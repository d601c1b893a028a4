//! Comparative loss, template loss and multi-kernel MMD.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{Graph, Var};
use crate::config::defaults;
use crate::error::{Error, Result};
use crate::similarity::{Embedding, SimilarityMatrix};
use crate::tensor::Tensor;

/// Positive-pair weight: fixed, or `#negative / #positive` per batch clamped to `[1, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Alpha {
    #[default]
    Auto,
    Fixed(f64),
}

impl Alpha {
    pub fn resolve(self, positives: usize, negatives: usize) -> f64 {
        match self {
            Alpha::Fixed(a) => a,
            Alpha::Auto if positives == 0 => defaults::ALPHA_AUTO_MIN,
            Alpha::Auto => (negatives as f64 / positives as f64).clamp(defaults::ALPHA_AUTO_MIN, defaults::ALPHA_AUTO_MAX),
        }
    }
}

impl FromStr for Alpha {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Alpha::Auto);
        }
        match s.parse::<f64>() {
            Ok(a) if a > 0.0 && a.is_finite() => Ok(Alpha::Fixed(a)),
            _ => Err(Error::config("alpha", format!("expected `auto` or a positive number, got `{s}`"))),
        }
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::Auto => f.write_str("auto"),
            Alpha::Fixed(a) => write!(f, "{a}"),
        }
    }
}

impl Serialize for Alpha {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Alpha::Auto => s.serialize_str("auto"),
            Alpha::Fixed(a) => s.serialize_f64(*a),
        }
    }
}

impl<'de> Deserialize<'de> for Alpha {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Str(String),
        }
        let raw = Raw::deserialize(d)?;
        let text = match raw {
            Raw::Num(v) => v.to_string(),
            Raw::Int(v) => v.to_string(),
            Raw::Str(s) => s,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: Alpha,
    pub mmd_weight: f64,
    pub kernel_count: usize,
    /// Kernel mixture weights; uniform when absent.
    pub beta: Option<Vec<f64>>,
    /// Fixed kernel bandwidths; when absent they are `median * 2^i` over the batch.
    pub bandwidths: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: Alpha::Auto,
            mmd_weight: defaults::MMD_WEIGHT,
            kernel_count: defaults::MMD_KERNELS,
            beta: None,
            bandwidths: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if let Alpha::Fixed(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config("loss.alpha", "must be positive"));
            }
        }
        if !(self.mmd_weight >= 0.0 && self.mmd_weight.is_finite()) {
            return Err(Error::config("loss.mmd_weight", "must be finite and non-negative"));
        }
        if self.kernel_count == 0 {
            return Err(Error::config("loss.kernel_count", "must be at least 1"));
        }
        if let Some(beta) = &self.beta {
            if beta.len() != self.kernel_count {
                return Err(Error::config("loss.beta", "needs one weight per kernel"));
            }
            if beta.iter().any(|&b| !(b >= 0.0)) || (beta.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::config("loss.beta", "weights must be non-negative and sum to 1"));
            }
        }
        if let Some(bw) = &self.bandwidths {
            if bw.len() != self.kernel_count {
                return Err(Error::config("loss.bandwidths", "needs one bandwidth per kernel"));
            }
            if bw.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
                return Err(Error::config("loss.bandwidths", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn beta(&self) -> Vec<f64> {
        self.beta
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.kernel_count as f64; self.kernel_count])
    }

    /// Exponents `i` of the `median * 2^i` bandwidth ladder, centred on zero.
    pub fn ladder(&self) -> Vec<f64> {
        let mid = (self.kernel_count as f64 - 1.0) / 2.0;
        (0..self.kernel_count).map(|j| j as f64 - mid).collect()
    }
}

/// Same-label indicator masks and the resolved alpha.
fn pair_masks(labels_q: &[usize], labels_k: &[usize], alpha: Alpha) -> (Tensor, Tensor) {
    let (b1, b2) = (labels_q.len(), labels_k.len());
    let mut pos = vec![0.0; b1 * b2];
    let mut neg = vec![0.0; b1 * b2];
    let mut np = 0;
    for (i, a) in labels_q.iter().enumerate() {
        for (j, b) in labels_k.iter().enumerate() {
            if a == b {
                pos[i * b2 + j] = 1.0;
                np += 1;
            } else {
                neg[i * b2 + j] = 1.0;
            }
        }
    }
    let a = alpha.resolve(np, b1 * b2 - np);
    pos.iter_mut().for_each(|v| *v *= a);
    (
        Tensor::new(&[b1, b2], pos).expect("sized"),
        Tensor::new(&[b1, b2], neg).expect("sized"),
    )
}

/// `sum_ij alpha * [same](1 - S_ij)^2 + [diff] S_ij^2`.
pub fn comparative_loss_graph(g: &mut Graph, s: Var, labels_q: &[usize], labels_k: &[usize], alpha: Alpha) -> Result<Var> {
    let shape = g.shape(s);
    if shape != [labels_q.len(), labels_k.len()] {
        return Err(Error::dim(format!(
            "similarity {:?} vs {} query and {} key labels",
            shape,
            labels_q.len(),
            labels_k.len()
        )));
    }
    let (pos, neg) = pair_masks(labels_q, labels_k, alpha);
    let (pos, neg) = (g.constant(pos), g.constant(neg));
    let miss = g.affine(s, -1.0, 1.0);
    let miss2 = g.square(miss);
    let pos_term = g.mul(miss2, pos)?;
    let s2 = g.square(s);
    let neg_term = g.mul(s2, neg)?;
    let both = g.add(pos_term, neg_term)?;
    Ok(g.sum(both))
}

/// Comparative loss against class templates: column `j` is class `j`.
pub fn template_loss_graph(g: &mut Graph, s: Var, labels: &[usize], alpha: Alpha) -> Result<Var> {
    let n = *g.shape(s).get(1).unwrap_or(&0);
    if let Some(&label) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::LabelOutOfRange { label, classes: n });
    }
    let classes: Vec<usize> = (0..n).collect();
    comparative_loss_graph(g, s, labels, &classes, alpha)
}

pub fn comparative_loss(s: &SimilarityMatrix, labels_q: &[usize], labels_k: &[usize], alpha: Alpha) -> Result<f64> {
    let mut g = Graph::new();
    let sv = g.constant(s.tensor().clone());
    let l = comparative_loss_graph(&mut g, sv, labels_q, labels_k, alpha)?;
    Ok(g.value(l).item())
}

pub fn template_loss(s: &SimilarityMatrix, labels: &[usize], alpha: Alpha) -> Result<f64> {
    let mut g = Graph::new();
    let sv = g.constant(s.tensor().clone());
    let l = template_loss_graph(&mut g, sv, labels, alpha)?;
    Ok(g.value(l).item())
}

/// Multi-kernel MMD between two embedding sets (biased estimator).
///
/// Each kernel is `exp(-||x - y||^2 / (2 sigma^2))`. Without fixed bandwidths,
/// `sigma_i = median * 2^i` where the median is over all pairwise distances of
/// the pooled set; the median stays on the graph so gradients are exact.
pub fn mk_mmd_graph(g: &mut Graph, xs: Var, xt: Var, cfg: &LossConfig) -> Result<Var> {
    let (ss, st) = (g.shape(xs).to_vec(), g.shape(xt).to_vec());
    if ss.len() != 2 || st.len() != 2 || ss[1] != st[1] {
        return Err(Error::dim(format!("embedding sets {:?} and {:?} differ in width", ss, st)));
    }
    if ss[0] == 0 || st[0] == 0 {
        return Err(Error::Precondition("MK-MMD needs two non-empty sets".into()));
    }
    let dss = g.sq_dist(xs, xs)?;
    let dtt = g.sq_dist(xt, xt)?;
    let dst = g.sq_dist(xs, xt)?;
    let beta = cfg.beta();
    // coefficient c_i in exp(-c_i * d^2), as graph scalars
    let coeffs: Vec<Var> = match &cfg.bandwidths {
        Some(bw) => bw
            .iter()
            .map(|&b| {
                let b = b.max(defaults::MMD_BANDWIDTH_FLOOR);
                g.constant(Tensor::scalar(1.0 / (2.0 * b * b)))
            })
            .collect(),
        None => {
            let med = median_distance(g, xs, xt)?;
            let med2 = g.square(med);
            cfg.ladder()
                .into_iter()
                .map(|i| {
                    let s2 = g.scale(med2, 2.0 * 4f64.powf(i));
                    g.recip(s2)
                })
                .collect()
        }
    };
    let mut total: Option<Var> = None;
    for (c, b) in coeffs.into_iter().zip(beta) {
        let kernel_mean = |g: &mut Graph, d: Var| -> Result<Var> {
            let e = g.mul_scalar(d, c)?;
            let e = g.scale(e, -1.0);
            let k = g.exp(e);
            Ok(g.mean(k))
        };
        let a = kernel_mean(g, dss)?;
        let bb = kernel_mean(g, dtt)?;
        let x = kernel_mean(g, dst)?;
        let ab = g.add(a, bb)?;
        let x2 = g.scale(x, 2.0);
        let mmd = g.sub(ab, x2)?;
        let term = g.scale(mmd, b);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one kernel"))
}

/// Median pairwise distance of the pooled set, floored. Selected through
/// constant masks so it remains differentiable in the embeddings.
fn median_distance(g: &mut Graph, xs: Var, xt: Var) -> Result<Var> {
    let u = g.concat_rows(&[xs, xt])?;
    let duu = g.sq_dist(u, u)?;
    let n = g.shape(u)[0];
    let values = g.value(duu).data().to_vec();
    let mut pairs: Vec<usize> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| i * n + j))
        .collect();
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::scalar(defaults::MMD_BANDWIDTH_FLOOR)));
    }
    pairs.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let m = pairs.len();
    let picks: Vec<usize> = if m % 2 == 1 {
        vec![pairs[m / 2]]
    } else {
        vec![pairs[m / 2 - 1], pairs[m / 2]]
    };
    let median_value = picks.iter().map(|&p| values[p].sqrt()).sum::<f64>() / picks.len() as f64;
    if median_value < defaults::MMD_BANDWIDTH_FLOOR || picks.iter().any(|&p| values[p] == 0.0) {
        return Ok(g.constant(Tensor::scalar(median_value.max(defaults::MMD_BANDWIDTH_FLOOR))));
    }
    let mut acc: Option<Var> = None;
    for &p in &picks {
        let mut mask = vec![0.0; n * n];
        mask[p] = 1.0;
        let mv = g.constant(Tensor::new(&[n, n], mask)?);
        let sel = g.mul(duu, mv)?;
        let d2 = g.sum(sel);
        let d = g.sqrt(d2);
        acc = Some(match acc {
            Some(a) => g.add(a, d)?,
            None => d,
        });
    }
    Ok(g.scale(acc.expect("one or two picks"), 1.0 / picks.len() as f64))
}

pub fn mk_mmd(emb_s: &Embedding, emb_t: &Embedding, cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(emb_s.tensor().clone());
    let b = g.constant(emb_t.tensor().clone());
    let l = mk_mmd_graph(&mut g, a, b, cfg)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sm(rows: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn comparative_oracles() {
        let one = Alpha::Fixed(1.0);
        assert_eq!(comparative_loss(&sm(&[vec![1.0]]), &[0], &[0], one).unwrap(), 0.0);
        assert_eq!(comparative_loss(&sm(&[vec![0.0]]), &[0], &[1], one).unwrap(), 0.0);
        let half = sm(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(comparative_loss(&half, &[0, 1], &[0, 1], one).unwrap(), 1.0);
    }

    #[test]
    fn template_oracles() {
        let one = Alpha::Fixed(1.0);
        assert_eq!(template_loss(&sm(&[vec![1.0, 0.0]]), &[0], one).unwrap(), 0.0);
        assert_eq!(template_loss(&sm(&[vec![0.0, 1.0]]), &[0], one).unwrap(), 2.0);
        assert_eq!(template_loss(&sm(&[vec![0.5, 0.5]]), &[0], Alpha::Fixed(2.0)).unwrap(), 0.75);
        assert!(matches!(
            template_loss(&sm(&[vec![0.5, 0.5]]), &[2], one),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn label_shape_mismatch() {
        assert!(matches!(
            comparative_loss(&sm(&[vec![0.5, 0.5]]), &[0], &[0], Alpha::Auto),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn auto_alpha_balances_and_clamps() {
        assert_eq!(Alpha::Auto.resolve(2, 6), 3.0);
        assert_eq!(Alpha::Auto.resolve(4, 2), 1.0);
        assert_eq!(Alpha::Auto.resolve(1, 1000), 100.0);
        assert_eq!(Alpha::Auto.resolve(0, 5), 1.0);
    }

    #[test]
    fn alpha_parses_and_serializes() {
        assert_eq!("auto".parse::<Alpha>().unwrap(), Alpha::Auto);
        assert_eq!("2.5".parse::<Alpha>().unwrap(), Alpha::Fixed(2.5));
        assert!("-1".parse::<Alpha>().is_err());
        let c = LossConfig {
            alpha: Alpha::Fixed(3.0),
            ..Default::default()
        };
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<LossConfig>(&text).unwrap(), c);
        assert_eq!(toml::from_str::<LossConfig>("alpha = 4").unwrap().alpha, Alpha::Fixed(4.0));
        assert_eq!(toml::from_str::<LossConfig>("alpha = \"auto\"").unwrap().alpha, Alpha::Auto);
    }

    #[test]
    fn beta_must_sum_to_one() {
        let bad = LossConfig {
            kernel_count: 2,
            beta: Some(vec![0.7, 0.7]),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mmd_single_kernel_oracle() {
        let cfg = LossConfig {
            kernel_count: 1,
            bandwidths: Some(vec![1.0]),
            ..Default::default()
        };
        let s = Embedding::from_rows(&[vec![0.0]]).unwrap();
        let t = Embedding::from_rows(&[vec![1.0]]).unwrap();
        let v = mk_mmd(&s, &t, &cfg).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-15);
        assert!((v - 0.78694).abs() < 1e-5);
        let two = LossConfig {
            kernel_count: 2,
            bandwidths: Some(vec![1.0, 2.0]),
            beta: Some(vec![0.5, 0.5]),
            ..Default::default()
        };
        let other = LossConfig {
            bandwidths: Some(vec![2.0]),
            ..cfg.clone()
        };
        let avg = 0.5 * (v + mk_mmd(&s, &t, &other).unwrap());
        assert!((mk_mmd(&s, &t, &two).unwrap() - avg).abs() < 1e-15);
    }

    #[test]
    fn mmd_identical_and_degenerate_sets() {
        let a = Embedding::from_rows(&[vec![0.3, 1.0], vec![-2.0, 0.5], vec![1.0, 1.0]]).unwrap();
        assert!(mk_mmd(&a, &a, &LossConfig::default()).unwrap().abs() < 1e-7);
        let z = Embedding::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(mk_mmd(&z, &z, &LossConfig::default()).unwrap(), 0.0);
        let empty = Embedding::new(Tensor::zeros(&[0, 2])).unwrap();
        assert!(matches!(mk_mmd(&empty, &a, &LossConfig::default()), Err(Error::Precondition(_))));
    }
}
