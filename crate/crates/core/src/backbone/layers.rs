//! Affine layers, feed-forward stacks, multi-head cross-attention and the positive
//! transform used for every predicted standard deviation.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamLayout, ParamVars};
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    /// Identity; useful for tests and linear probes.
    Linear,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Linear => x,
        }
    }
}

/// Architecture knobs shared by every network in a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden_dim: usize,
    /// Affine layers per encoder stack.
    pub depth: usize,
    /// Affine layers in the decoder stack.
    pub decoder_depth: usize,
    pub n_heads: usize,
    pub activation: Activation,
    pub sigma_floor: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden_dim: 128,
            depth: 4,
            decoder_depth: 3,
            n_heads: 8,
            activation: Activation::Relu,
            sigma_floor: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.depth < 1 || self.decoder_depth < 1 {
            return Err(Error::Config("network depth must be at least 1".into()));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor < 1.0) {
            return Err(Error::Config(format!(
                "sigma_floor {} must lie in (0, 1)",
                self.sigma_floor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = layout.declare(
            format!("{name}.weight"),
            d_in,
            d_out,
            Init::FanInUniform { fan_in: d_in },
        );
        let bias = bias.then(|| {
            layout.declare(
                format!("{name}.bias"),
                1,
                d_out,
                Init::FanInUniform { fan_in: d_in },
            )
        });
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn apply<T: Real>(&self, g: &Graph<T>, p: &ParamVars, x: Var) -> Var {
        let y = g.matmul(x, p[self.weight]);
        match self.bias {
            Some(b) => g.add_row(y, p[b]),
            None => y,
        }
    }
}

/// `depth` affine layers with the activation between consecutive layers (not after the
/// last one).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        depth: usize,
        activation: Activation,
    ) -> Self {
        assert!(depth >= 1, "mlp depth must be at least 1");
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let a = if i == 0 { d_in } else { d_hidden };
            let b = if i + 1 == depth { d_out } else { d_hidden };
            layers.push(Linear::new(layout, &format!("{name}.{i}"), a, b, true));
        }
        Mlp { layers, activation }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("nonempty").d_out
    }

    pub fn apply<T: Real>(&self, g: &Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.d_in() {
            return Err(Error::Shape(format!(
                "mlp expects {} input columns, got {cols}",
                self.d_in()
            )));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, p, h);
            if i + 1 < self.layers.len() {
                h = self.activation.apply(g, h);
            }
        }
        Ok(h)
    }
}

/// Multi-head cross-attention: queries, keys and values are projected to `dim`, attended
/// per head, concatenated and passed through an output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        d_query: usize,
        d_key: usize,
        d_value: usize,
        dim: usize,
        n_heads: usize,
    ) -> Self {
        assert!(
            n_heads > 0 && dim % n_heads == 0,
            "dim must split evenly across heads"
        );
        MultiHeadAttention {
            query: Linear::new(layout, &format!("{name}.q"), d_query, dim, false),
            key: Linear::new(layout, &format!("{name}.k"), d_key, dim, false),
            value: Linear::new(layout, &format!("{name}.v"), d_value, dim, false),
            output: Linear::new(layout, &format!("{name}.o"), dim, dim, true),
            n_heads,
            dim,
        }
    }

    /// `queries` is `[groups * m, d_query]`; `keys`/`values` are `[groups * n, _]`.
    pub fn apply<T: Real>(
        &self,
        g: &Graph<T>,
        p: &ParamVars,
        queries: Var,
        keys: Var,
        values: Var,
        groups: usize,
    ) -> Result<Var> {
        let (kr, _) = g.shape(keys);
        if kr == 0 || groups == 0 || kr % groups != 0 {
            return Err(Error::Shape(
                "cross-attention needs a nonempty key set per group".into(),
            ));
        }
        let (qr, _) = g.shape(queries);
        if qr % groups != 0 || g.shape(values).0 != kr {
            return Err(Error::Shape(
                "cross-attention row counts do not split into groups".into(),
            ));
        }
        let q = self.query.apply(g, p, queries);
        let k = self.key.apply(g, p, keys);
        let v = self.value.apply(g, p, values);
        let o = g.attention(q, k, v, groups, self.n_heads);
        Ok(self.output.apply(g, p, o))
    }
}

/// `floor + (1 - floor) * softplus(raw)`.
pub fn positive_transform<T: Real>(g: &Graph<T>, raw: Var, floor: f64) -> Var {
    let sp = g.softplus(raw);
    let scaled = g.scale(sp, 1.0 - floor);
    g.offset(scaled, floor)
}

/// Scalar form of [`positive_transform`].
pub fn positive_transform_value(raw: f64, floor: f64) -> f64 {
    let softplus = raw.max(0.0) + (-raw.abs()).exp().ln_1p();
    floor + (1.0 - floor) * softplus
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ParamStore, Tensor};

    #[test]
    fn positive_transform_closed_form() {
        let v = positive_transform_value(0.0, 0.1);
        assert!((v - (0.1 + 0.9 * std::f64::consts::LN_2)).abs() < 1e-15);
        assert!((v - 0.7238).abs() < 1e-4);
        assert_eq!(positive_transform_value(-1e6, 0.1), 0.1);
        assert!(positive_transform_value(-40.0, 0.1) - 0.1 < 1e-16);
    }

    #[test]
    fn positive_transform_no_nan_on_wide_range() {
        let g = Graph::<f64>::new();
        let raw: Vec<f64> = (0..=200).map(|i| -1e6 + i as f64 * 1e4).collect();
        let x = g.constant(Tensor::from_vec(1, raw.len(), raw).unwrap());
        let s = positive_transform(&g, x, 0.1);
        assert!(g.value(s).data().iter().all(|v| v.is_finite() && *v >= 0.1));
    }

    #[test]
    fn zero_weight_mlp_outputs_bias() {
        let mut layout = ParamLayout::new();
        let mlp = Mlp::new(&mut layout, "m", 3, 5, 2, 3, Activation::Relu);
        let mut store: ParamStore<f64> = layout.init(&mut rand::rng());
        for layer in &mlp.layers {
            store
                .get_mut(layer.weight)
                .data_mut()
                .iter_mut()
                .for_each(|w| *w = 0.0);
        }
        let last = mlp.layers.last().unwrap().bias.unwrap();
        *store.get_mut(last) = Tensor::from_vec(1, 2, vec![0.25, -1.5]).unwrap();
        let g = Graph::new();
        let p = store.register(&g);
        let x = g.constant(Tensor::from_fn(4, 3, |r, c| (r * 3 + c) as f64 - 5.0));
        let y = mlp.apply(&g, &p, x).unwrap();
        for r in 0..4 {
            assert_eq!(g.value(y).row(r), &[0.25, -1.5]);
        }
    }

    #[test]
    fn identity_linear_mlp_is_identity() {
        let mut layout = ParamLayout::new();
        let mlp = Mlp::new(&mut layout, "m", 3, 3, 3, 1, Activation::Linear);
        let mut store: ParamStore<f64> = layout.init(&mut rand::rng());
        *store.get_mut(mlp.layers[0].weight) =
            Tensor::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 });
        *store.get_mut(mlp.layers[0].bias.unwrap()) = Tensor::zeros(1, 3);
        let g = Graph::new();
        let p = store.register(&g);
        let input = Tensor::from_fn(5, 3, |r, c| (r as f64).sin() + c as f64);
        let x = g.constant(input.clone());
        let y = mlp.apply(&g, &p, x).unwrap();
        assert_eq!(*g.value(y), input);
    }

    #[test]
    fn mlp_rejects_wrong_width() {
        let mut layout = ParamLayout::new();
        let mlp = Mlp::new(&mut layout, "m", 3, 4, 1, 2, Activation::Relu);
        let store: ParamStore<f64> = layout.init(&mut rand::rng());
        let g = Graph::new();
        let p = store.register(&g);
        let x = g.constant(Tensor::zeros(2, 4));
        assert!(matches!(mlp.apply(&g, &p, x), Err(Error::Shape(_))));
    }

    #[test]
    fn backbone_config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let bad = BackboneConfig {
            hidden_dim: 30,
            n_heads: 8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig {
            depth: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
