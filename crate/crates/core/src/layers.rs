//! Convolution and residual building blocks shared by the encoder and Weight-Net.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{he_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Conv {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), he_normal(&[cout, cin, k, k], cin * k * k, gain, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        g.channel_bias(y, b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Block {
    conv1: Conv,
    conv2: Conv,
    proj: Option<Conv>,
}

impl Block {
    pub(crate) fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1.0, rng);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 0.5, rng);
        let proj = (stride != 1 || cin != cout)
            .then(|| Conv::new(store, &format!("{name}.proj"), cin, cout, 1, stride, 1.0, rng));
        Block { conv1, conv2, proj }
    }

    pub(crate) fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(g, store, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }
}
