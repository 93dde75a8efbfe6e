//! Parameterized building blocks. Each layer only remembers the names of its
//! parameters; values live in a [`ParamStore`] and are bound per forward pass
//! through a [`Ctx`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{init, ParamStore};
use crate::tensor::{Real, Tensor};

/// A graph paired with the parameter values it reads.
pub struct Ctx<'g, T: Real> {
    pub graph: &'g Graph<T>,
    pub params: &'g ParamStore<T>,
}

impl<T: Real> Clone for Ctx<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Ctx<'_, T> {}

impl<'g, T: Real> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, params: &'g ParamStore<T>) -> Self {
        Self { graph, params }
    }

    pub fn param(&self, name: &str) -> Var<'g, T> {
        self.graph.param(self.params, name)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(value)
    }
}

fn add<T: Real>(store: &mut ParamStore<T>, name: String, value: Tensor<T>) -> String {
    store
        .insert(name.clone(), value)
        .unwrap_or_else(|e| panic!("{e}"));
    name
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = add(
            store,
            format!("{name}.weight"),
            init::fan_in_uniform(&[in_dim, out_dim], in_dim, rng),
        );
        let bias = bias.then(|| {
            add(
                store,
                format!("{name}.bias"),
                init::fan_in_uniform(&[out_dim], in_dim, rng),
            )
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Same layout with all parameters zero.
    pub fn zeroed<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = add(store, format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let bias = bias.then(|| add(store, format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn forward<'g, T: Real>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = cx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| cx.param(b));
        x.linear(&w, b.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    pub stride: usize,
    pub pad: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = add(
            store,
            format!("{name}.weight"),
            init::fan_in_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let bias = Some(add(
            store,
            format!("{name}.bias"),
            init::fan_in_uniform(&[out_ch], fan_in, rng),
        ));
        Self {
            weight,
            bias,
            stride,
            pad,
            in_ch,
            out_ch,
        }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_ch, out_ch, 3, 1, 1, rng)
    }

    pub fn zeroed<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        pad: usize,
    ) -> Self {
        let weight = add(
            store,
            format!("{name}.weight"),
            Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
        );
        let bias = Some(add(store, format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            stride: 1,
            pad,
            in_ch,
            out_ch,
        }
    }

    pub fn forward<'g, T: Real>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let w = cx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| cx.param(b));
        x.conv2d(&w, b.as_ref(), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: String,
    beta: String,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, groups: usize, channels: usize) -> Self {
        assert!(channels % groups == 0, "{name}: {channels} channels, {groups} groups");
        Self {
            gamma: add(store, format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: add(store, format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward<'g, T: Real>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.group_norm(self.groups, &cx.param(&self.gamma), &cx.param(&self.beta), 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: add(store, format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: add(store, format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'g, T: Real>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.layer_norm(&cx.param(&self.gamma), &cx.param(&self.beta), 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: String,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        count: usize,
        dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            table: add(store, format!("{name}.table"), init::normal(&[count, dim], std, rng)),
            count,
            dim,
        }
    }

    pub fn table_name(&self) -> &str {
        &self.table
    }

    pub fn forward<'g, T: Real>(&self, cx: &Ctx<'g, T>, ids: &[usize]) -> Var<'g, T> {
        cx.param(&self.table).embedding(ids)
    }
}
