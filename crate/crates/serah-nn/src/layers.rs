//! Thin layer wrappers: each owns parameter handles and knows how to
//! splice itself into a session graph.

use rand::Rng;

use crate::graph::Var;
use crate::init;
use crate::params::{ParamId, ParamSet, Session};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        let w = ps.add(format!("{name}.weight"), init::fan_in_uniform(rng, &[out_c, in_c, k, k], fan_in));
        let b = ps.add(format!("{name}.bias"), init::zeros(&[out_c]));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.w);
        let b = s.param(self.b);
        s.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    /// Uses the largest group count <= `groups` that divides `channels`.
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, groups: usize) -> Self {
        let groups = (1..=groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
        let gamma = ps.add(format!("{name}.gamma"), init::ones(&[channels]));
        let beta = ps.add(format!("{name}.beta"), init::zeros(&[channels]));
        GroupNorm { gamma, beta, groups, eps: 1e-5 }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        s.graph.group_norm(x, gamma, beta, self.groups, self.eps)
    }
}

/// conv -> group norm -> relu, the building block of the spatial
/// encoders and decoders.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        gn_groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv = Conv2d::new(ps, &format!("{name}.conv"), in_c, out_c, k, stride, k / 2, rng);
        let norm = GroupNorm::new(ps, &format!("{name}.norm"), out_c, gn_groups);
        ConvBlock { conv, norm }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let y = self.conv.forward(s, x);
        let y = self.norm.forward(s, y);
        s.graph.relu(y)
    }
}

/// Counts the scalars held by a set of parameter ids.
pub fn count_scalars(ps: &ParamSet, ids: &[ParamId]) -> usize {
    ids.iter().map(|id| ps.value(*id).len()).sum()
}
