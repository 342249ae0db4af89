//! Parameterised building blocks on top of [`Graph`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

/// A parameter store bound for one forward pass, either trainable or frozen.
#[derive(Clone, Copy)]
pub struct Bound<'a, T> {
    pub store: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<'a, T: Real> Bound<'a, T> {
    pub fn trainable(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: false }
    }

    pub fn var(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        if self.trainable {
            g.param(self.store, id)
        } else {
            g.frozen(self.store, id)
        }
    }
}

/// Fully connected layer, weights `[out, in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` initialisation.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let w = store.add_uniform(&format!("{name}.weight"), &[out_features, in_features], bound, rng);
        let b = bias.then(|| store.add_uniform(&format!("{name}.bias"), &[out_features], bound, rng));
        Self { w, b, in_features, out_features }
    }

    /// Zero-initialised layer (used for output heads that should start silent).
    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, in_features: usize, out_features: usize) -> Self {
        let w = store.add_const(&format!("{name}.weight"), &[out_features, in_features], 0.0);
        let b = Some(store.add_const(&format!("{name}.bias"), &[out_features], 0.0));
        Self { w, b, in_features, out_features }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var) -> Var {
        let w = p.var(g, self.w);
        let b = self.b.map(|b| p.var(g, b));
        g.linear(x, w, b)
    }
}

/// Square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let w = store.add_uniform(&format!("{name}.weight"), &[cout, cin, kernel, kernel], bound, rng);
        let b = store.add_uniform(&format!("{name}.bias"), &[cout], bound, rng);
        Self { w, b, stride, pad }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, 3, 1, 1, rng)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var) -> Var {
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "channels must divide into groups");
        let gamma = store.add_const(&format!("{name}.gamma"), &[channels], 1.0);
        let beta = store.add_const(&format!("{name}.beta"), &[channels], 0.0);
        Self { gamma, beta, groups }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var) -> Var {
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}
