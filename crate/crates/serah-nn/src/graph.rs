//! Dynamic computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so walking indices backwards
//! is a valid reverse topological order. Values are computed eagerly on
//! insertion; `backward` fills gradients for every node that needs them.

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix4, Ix5, IxDyn};

use crate::ops;
use crate::ops_seq;

pub type Arr = ArrayD<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, eps: f64 },
    PixelShuffle { x: Var, r: usize },
    UpsampleNearest { x: Var, r: usize },
    SoftmaxAxis { x: Var, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape { x: Var },
    AddTimeChan { x: Var, enc: Var },
    AttnScores { keys: Var, q: Var },
    AttnCollapse { x: Var, attn: Var },
    SmoothL1 { pred: Var, target: Var, beta: f64 },
}

struct Node {
    value: Arr,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        *a.iter().next().unwrap()
    }

    fn push(&mut self, value: Arr, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Arr, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.any_needs(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let value = self.value(a) * f;
        let ng = self.any_needs(&[a]);
        self.push(value, Op::Scale(a, f), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.any_needs(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let xv = self.value(a);
        let mut value = xv.clone();
        ops::relu_forward(
            xv.as_slice().expect("standard layout"),
            value.as_slice_mut().unwrap(),
        );
        let ng = self.any_needs(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("conv input 4-D");
        let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("conv weight 4-D");
        let bv = b.map(|bb| {
            self.value(bb)
                .view()
                .into_dimensionality::<Ix1>()
                .expect("conv bias 1-D")
        });
        let value = ops::conv2d_forward(&xv, &wv, bv.as_ref(), stride, pad).into_dyn();
        let mut parents = vec![x, w];
        if let Some(bb) = b {
            parents.push(bb);
        }
        let ng = self.any_needs(&parents);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("gn input 4-D");
        let gv = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.value(beta).view().into_dimensionality::<Ix1>().unwrap();
        let value = ops::group_norm_forward(&xv, &gv, &bv, groups, eps).into_dyn();
        let ng = self.any_needs(&[x, gamma, beta]);
        self.push(value, Op::GroupNorm { x, gamma, beta, groups, eps }, ng)
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("ps input 4-D");
        let value = ops::pixel_shuffle_forward(&xv, r).into_dyn();
        let ng = self.any_needs(&[x]);
        self.push(value, Op::PixelShuffle { x, r }, ng)
    }

    pub fn upsample_nearest(&mut self, x: Var, r: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("upsample input 4-D");
        let value = ops::upsample_nearest_forward(&xv, r).into_dyn();
        let ng = self.any_needs(&[x]);
        self.push(value, Op::UpsampleNearest { x, r }, ng)
    }

    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Var {
        let value = ops_seq::softmax_axis_forward(&self.value(x).view(), axis);
        let ng = self.any_needs(&[x]);
        self.push(value, Op::SoftmaxAxis { x, axis }, ng)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of zero inputs");
        let views: Vec<_> = xs.iter().map(|v| self.value(*v).view()).collect();
        // ndarray::concatenate may return a non-standard memory order;
        // node values are kept in standard layout throughout.
        let cat = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let value = cat.as_standard_layout().to_owned();
        let ng = self.any_needs(xs);
        self.push(value, Op::Concat { xs: xs.to_vec(), axis }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .view()
            .to_shape(IxDyn(shape))
            .expect("reshape: incompatible size")
            .to_owned();
        let ng = self.any_needs(&[x]);
        self.push(value, Op::Reshape { x }, ng)
    }

    pub fn add_time_chan(&mut self, x: Var, enc: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix5>().expect("frames 5-D");
        let ev = self
            .value(enc)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("encoding 3-D (B,T,C)");
        let value = ops_seq::add_time_chan_forward(&xv, &ev).into_dyn();
        let ng = self.any_needs(&[x, enc]);
        self.push(value, Op::AddTimeChan { x, enc }, ng)
    }

    pub fn attn_scores(&mut self, keys: Var, q: Var) -> Var {
        let kv = self.value(keys).view().into_dimensionality::<Ix5>().expect("keys 5-D");
        let qv = self.value(q).view().into_dimensionality::<Ix2>().expect("query 2-D");
        let value = ops_seq::attn_scores_forward(&kv, &qv).into_dyn();
        let ng = self.any_needs(&[keys, q]);
        self.push(value, Op::AttnScores { keys, q }, ng)
    }

    pub fn attn_collapse(&mut self, x: Var, attn: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix5>().expect("frames 5-D");
        let av = self.value(attn).view().into_dimensionality::<Ix5>().expect("attn 5-D");
        let value = ops_seq::attn_collapse_forward(&xv, &av).into_dyn();
        let ng = self.any_needs(&[x, attn]);
        self.push(value, Op::AttnCollapse { x, attn }, ng)
    }

    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: f64) -> Var {
        let value = ops_seq::smooth_l1_value(&self.value(pred).view(), &self.value(target).view(), beta);
        let ng = self.any_needs(&[pred, target]);
        self.push(
            ndarray::arr0(value).into_dyn(),
            Op::SmoothL1 { pred, target, beta },
            ng,
        )
    }

    /// Reverse pass from `loss` (any node; gradient seeded with ones).
    /// Returns per-node gradients; only leaves keep theirs (intermediate
    /// gradients are dropped as soon as they have been consumed).
    pub fn backward(&self, loss: Var) -> Vec<Option<Arr>> {
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep: consumed by the caller
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::Scale(a, f) => {
                    self.acc(&mut grads, *a, g * *f);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    self.acc(&mut grads, *a, da);
                    self.acc(&mut grads, *b, db);
                }
                Op::Relu(a) => {
                    let xv = self.value(*a);
                    let mut dx = g.clone();
                    ops::relu_backward(
                        xv.as_slice().unwrap(),
                        g.as_slice().unwrap(),
                        dx.as_slice_mut().unwrap(),
                    );
                    self.acc(&mut grads, *a, dx);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xv = self.value(*x).view().into_dimensionality::<Ix4>().unwrap();
                    let wv = self.value(*w).view().into_dimensionality::<Ix4>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let need_dx = self.nodes[x.0].needs_grad;
                    let cg = ops::conv2d_backward(&xv, &wv, &gv, *stride, *pad, need_dx);
                    if let Some(dx) = cg.dx {
                        self.acc(&mut grads, *x, dx.into_dyn());
                    }
                    self.acc(&mut grads, *w, cg.dw.into_dyn());
                    if let Some(bb) = b {
                        self.acc(&mut grads, *bb, cg.db.into_dyn());
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, eps } => {
                    let xv = self.value(*x).view().into_dimensionality::<Ix4>().unwrap();
                    let gav = self.value(*gamma).view().into_dimensionality::<Ix1>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let gg = ops::group_norm_backward(&xv, &gav, &gv, *groups, *eps);
                    self.acc(&mut grads, *x, gg.dx.into_dyn());
                    self.acc(&mut grads, *gamma, gg.dgamma.into_dyn());
                    self.acc(&mut grads, *beta, gg.dbeta.into_dyn());
                }
                Op::PixelShuffle { x, r } => {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    self.acc(&mut grads, *x, ops::pixel_shuffle_backward(&gv, *r).into_dyn());
                }
                Op::UpsampleNearest { x, r } => {
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    self.acc(&mut grads, *x, ops::upsample_nearest_backward(&gv, *r).into_dyn());
                }
                Op::SoftmaxAxis { x, axis } => {
                    let yv = self.nodes[i].value.view();
                    let dx = ops_seq::softmax_axis_backward(&yv, &g.view(), *axis);
                    self.acc(&mut grads, *x, dx);
                }
                Op::Concat { xs, axis } => {
                    let mut offset = 0;
                    for xv in xs {
                        let len = self.value(*xv).len_of(Axis(*axis));
                        let part = g
                            .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                            .to_owned();
                        self.acc(&mut grads, *xv, part);
                        offset += len;
                    }
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    let dx = g.view().to_shape(IxDyn(&shape)).unwrap().to_owned();
                    self.acc(&mut grads, *x, dx);
                }
                Op::AddTimeChan { x, enc } => {
                    if self.nodes[enc.0].needs_grad {
                        let gv = g.view().into_dimensionality::<Ix5>().unwrap();
                        let denc = ops_seq::add_time_chan_backward_enc(&gv);
                        self.acc(&mut grads, *enc, denc.into_dyn());
                    }
                    self.acc(&mut grads, *x, g);
                }
                Op::AttnScores { keys, q } => {
                    let kv = self.value(*keys).view().into_dimensionality::<Ix5>().unwrap();
                    let qv = self.value(*q).view().into_dimensionality::<Ix2>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix5>().unwrap();
                    let (dkeys, dq) = ops_seq::attn_scores_backward(&kv, &qv, &gv);
                    self.acc(&mut grads, *keys, dkeys.into_dyn());
                    self.acc(&mut grads, *q, dq.into_dyn());
                }
                Op::AttnCollapse { x, attn } => {
                    let xv = self.value(*x).view().into_dimensionality::<Ix5>().unwrap();
                    let av = self.value(*attn).view().into_dimensionality::<Ix5>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                    let (dx, dattn) = ops_seq::attn_collapse_backward(&xv, &av, &gv);
                    self.acc(&mut grads, *x, dx.into_dyn());
                    self.acc(&mut grads, *attn, dattn.into_dyn());
                }
                Op::SmoothL1 { pred, target, beta } => {
                    let gscale = *g.iter().next().unwrap();
                    let pv = self.value(*pred).view();
                    let tv = self.value(*target).view();
                    let dpred = ops_seq::smooth_l1_grad(&pv, &tv, *beta, gscale);
                    self.acc(&mut grads, *pred, dpred);
                    // target is treated as a constant
                }
            }
        }
        grads
    }

    fn acc(&self, grads: &mut [Option<Arr>], v: Var, delta: Arr) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(a) => *a += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}
