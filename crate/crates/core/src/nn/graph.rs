//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Forward evaluation happens eagerly as nodes are added; [`Graph::backward`]
//! walks the tape in reverse and accumulates parameter gradients.

use super::params::{ParamId, ParamStore};
use super::{conv, kernels};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        k: usize,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        stats: Vec<(f32, f32)>,
    },
    Silu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    /// `x + v` with `v: [n|1, c, 1, 1]` broadcast over space (and batch).
    AddChannel {
        x: NodeId,
        v: NodeId,
    },
    /// `x * (1 + scale) + shift`, per item and channel.
    Film {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    AvgPool2(NodeId),
    Upsample2(NodeId),
    Concat(NodeId, NodeId),
    /// Slice of channels `[start, start + len)`.
    Channels {
        x: NodeId,
        start: usize,
    },
    /// Broadcast a `[1, ...]` tensor to `n` items.
    Repeat(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// `None` for parameter nodes, which read straight from the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Forward tape bound to one parameter store.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    track: bool,
}

impl<'p> Graph<'p> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            track: true,
        }
    }

    /// A graph whose parameters never receive gradients (frozen networks).
    pub fn frozen(store: &'p ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = self.track && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            value: Some(value),
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.param_nodes[id.0] {
            return node;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: self.track,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(node);
        node
    }

    pub fn conv(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>, k: usize) -> NodeId {
        let w = self.param(w);
        let b = b.map(|b| self.param(b));
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), k);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Op::Conv { x, w, b, k }, out, &inputs)
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
    ) -> NodeId {
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let (out, stats) =
            kernels::group_norm(self.value(x), self.value(gamma), self.value(beta), groups);
        self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            out,
            &[x, gamma, beta],
        )
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        kernels::map_inplace(out.data_mut(), |v| v * kernels::sigmoid(v));
        self.push(Op::Silu(x), out, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        kernels::map_inplace(out.data_mut(), kernels::sigmoid);
        self.push(Op::Sigmoid(x), out, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out, &[a, b])
    }

    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let vv = self.value(v);
        let hw = out.plane_len();
        let c = out.channels();
        let broadcast = vv.batch() == 1;
        for n in 0..out.batch() {
            let row = if broadcast { 0 } else { n };
            for (ch, plane) in out.item_mut(n).chunks_mut(hw).enumerate() {
                let add = vv.data()[row * c + ch];
                for p in plane {
                    *p += add;
                }
            }
        }
        self.push(Op::AddChannel { x, v }, out, &[x, v])
    }

    pub fn film(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let (s, b) = (self.value(scale), self.value(shift));
        let hw = out.plane_len();
        let c = out.channels();
        for n in 0..out.batch() {
            for (ch, plane) in out.item_mut(n).chunks_mut(hw).enumerate() {
                let mul = 1.0 + s.data()[n * c + ch];
                let add = b.data()[n * c + ch];
                for p in plane {
                    *p = *p * mul + add;
                }
            }
        }
        self.push(Op::Film { x, scale, shift }, out, &[x, scale, shift])
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let out = kernels::avg_pool2(self.value(x));
        self.push(Op::AvgPool2(x), out, &[x])
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let out = kernels::upsample2(self.value(x));
        self.push(Op::Upsample2(x), out, &[x])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = va.shape();
        let cb = vb.channels();
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(va.item(i));
            data.extend_from_slice(vb.item(i));
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data).expect("concat shape");
        self.push(Op::Concat(a, b), out, &[a, b])
    }

    pub fn channels(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x);
        let [n, _, h, w] = v.shape();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            data.extend_from_slice(&v.item(i)[start * hw..(start + len) * hw]);
        }
        let out = Tensor::from_vec([n, len, h, w], data).expect("slice shape");
        self.push(Op::Channels { x, start }, out, &[x])
    }

    pub fn repeat(&mut self, x: NodeId, n: usize) -> NodeId {
        let v = self.value(x);
        let [_, c, h, w] = v.shape();
        let mut data = Vec::with_capacity(n * v.len());
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec([n, c, h, w], data).expect("repeat shape");
        self.push(Op::Repeat(x), out, &[x])
    }

    /// Back-propagate `seeds` (node, d loss / d node) and return one gradient
    /// tensor per parameter in the bound store.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>) -> Vec<Tensor> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            debug_assert_eq!(g.shape(), self.value(id).shape());
            accumulate(&mut grads, id, g);
        }
        let mut param_grads = self.store.zeros_like();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Param(p) => param_grads[p.0].add_assign(&g),
                Op::Conv { x, w, b, k } => {
                    let need_dx = self.nodes[x.0].requires_grad;
                    let (dx, dw, db) = conv::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *k,
                        need_dx,
                        b.is_some(),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => {
                    let (dx, dg, db) = kernels::group_norm_backward(
                        self.value(*x),
                        self.value(*gamma),
                        stats,
                        *groups,
                        &g,
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::Silu(x) => {
                    let mut dx = g;
                    kernels::zip_inplace(dx.data_mut(), self.value(*x).data(), |d, v| {
                        let s = kernels::sigmoid(v);
                        d * s * (1.0 + v * (1.0 - s))
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().expect("sigmoid value");
                    let mut dx = g;
                    kernels::zip_inplace(dx.data_mut(), y.data(), |d, s| d * s * (1.0 - s));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddChannel { x, v } => {
                    let vshape = self.value(*v).shape();
                    let dv = reduce_channels(&g, vshape);
                    accumulate(&mut grads, *v, dv);
                    accumulate(&mut grads, *x, g);
                }
                Op::Film { x, scale, shift } => {
                    let xv = self.value(*x);
                    let sv = self.value(*scale);
                    let c = xv.channels();
                    let hw = xv.plane_len();
                    let mut dscale = Tensor::zeros(sv.shape());
                    let mut dshift = Tensor::zeros(sv.shape());
                    let mut dx = g;
                    for n in 0..xv.batch() {
                        let xi = xv.item(n);
                        for ch in 0..c {
                            let off = ch * hw;
                            let mut ds = 0.0f32;
                            let mut db = 0.0f32;
                            let mul = 1.0 + sv.data()[n * c + ch];
                            for (d, &xx) in dx.item_mut(n)[off..off + hw]
                                .iter_mut()
                                .zip(&xi[off..off + hw])
                            {
                                ds += *d * xx;
                                db += *d;
                                *d *= mul;
                            }
                            dscale.data_mut()[n * c + ch] = ds;
                            dshift.data_mut()[n * c + ch] = db;
                        }
                    }
                    accumulate(&mut grads, *scale, dscale);
                    accumulate(&mut grads, *shift, dshift);
                    accumulate(&mut grads, *x, dx);
                }
                Op::AvgPool2(x) => {
                    let dx = kernels::avg_pool2_backward(&g, self.value(*x).shape());
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2(x) => {
                    let dx = kernels::upsample2_backward(&g, self.value(*x).shape());
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).channels();
                    let cb = self.value(*b).channels();
                    let [n, _, h, w] = g.shape();
                    let hw = h * w;
                    let mut da = Vec::with_capacity(n * ca * hw);
                    let mut db = Vec::with_capacity(n * cb * hw);
                    for i in 0..n {
                        let item = g.item(i);
                        da.extend_from_slice(&item[..ca * hw]);
                        db.extend_from_slice(&item[ca * hw..]);
                    }
                    let da = Tensor::from_vec([n, ca, h, w], da).expect("concat grad");
                    let db = Tensor::from_vec([n, cb, h, w], db).expect("concat grad");
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Channels { x, start } => {
                    let shape = self.value(*x).shape();
                    let hw = shape[2] * shape[3];
                    let len = g.channels();
                    let mut dx = Tensor::zeros(shape);
                    for i in 0..shape[0] {
                        dx.item_mut(i)[start * hw..(start + len) * hw].copy_from_slice(g.item(i));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Repeat(x) => {
                    let shape = self.value(*x).shape();
                    let mut dx = Tensor::zeros(shape);
                    for i in 0..g.batch() {
                        for (d, s) in dx.data_mut().iter_mut().zip(g.item(i)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        param_grads
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sum `g: [n, c, h, w]` over space, and over batch when `target` has one item.
fn reduce_channels(g: &Tensor, target: [usize; 4]) -> Tensor {
    let mut out = Tensor::zeros(target);
    let hw = g.plane_len();
    let c = g.channels();
    for n in 0..g.batch() {
        let row = if target[0] == 1 { 0 } else { n };
        for (ch, plane) in g.item(n).chunks(hw).enumerate() {
            out.data_mut()[row * c + ch] += plane.iter().sum::<f32>();
        }
    }
    out
}
