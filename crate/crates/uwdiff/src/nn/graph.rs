//! Minimal reverse-mode autodiff on `f64` ndarrays.
//!
//! A [`Graph`] is a tape of nodes built during a forward pass; `backward`
//! walks it in reverse and accumulates gradients for leaf variables. All ops
//! are single-threaded and deterministic, which keeps training runs and
//! finite-difference gradient checks reproducible bit for bit.

use ndarray::{Array2, Array4, ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};
use std::cell::RefCell;

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[Node]) -> Vec<ArrayD<f64>>>;

pub(crate) struct Node {
    pub(crate) value: ArrayD<f64>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Per-leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn bcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn bcast_to(x: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if x.shape() == shape {
        return x.clone();
    }
    x.broadcast(IxDyn(shape))
        .expect("broadcast failed")
        .to_owned()
}

/// Sum `g` down to `shape` (inverse of broadcasting).
fn reduce_to_shape(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[i] > 1 {
            out = out.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let needs_grad = if backward.is_some() {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        } else {
            false
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { backward } else { None },
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf that participates in gradient computation.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: true,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf excluded from gradient computation.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: vec![],
            backward: None,
            needs_grad: false,
        });
        Var(nodes.len() - 1)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn scalar_leaf(&self, v: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.len(), 1, "expected scalar node");
        *val.iter().next().unwrap()
    }

    fn with_values<R>(&self, f: impl FnOnce(&[Node]) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes)
    }

    /// Reverse pass from a scalar root. Returns gradients for leaves only.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), 1.0));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            if let Some(bf) = &nodes[id].backward {
                let g = grads[id].take().unwrap();
                let pgrads = bf(&g, &nodes);
                debug_assert_eq!(pgrads.len(), nodes[id].parents.len());
                for (&pid, pg) in nodes[id].parents.iter().zip(pgrads) {
                    if !nodes[pid].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(
                        pg.shape(),
                        nodes[pid].value.shape(),
                        "gradient shape mismatch for parent {pid}"
                    );
                    match &mut grads[pid] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            // Non-leaf grads are no longer needed once propagated.
        }
        Gradients { grads }
    }

    // ---- elementwise binary ----------------------------------------------

    fn binary(
        &self,
        a: Var,
        b: Var,
        fwd: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
        bwd: impl Fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>)
            + 'static,
    ) -> Var {
        let (value, sa, sb) = self.with_values(|nodes| {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let shape = bcast_shape(av.shape(), bv.shape());
            let ax = bcast_to(av, &shape);
            let bx = bcast_to(bv, &shape);
            (fwd(&ax, &bx), av.shape().to_vec(), bv.shape().to_vec())
        });
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g, nodes| {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let ax = bcast_to(av, g.shape());
                let bx = bcast_to(bv, g.shape());
                let (da, db) = bwd(g, &ax, &bx);
                vec![reduce_to_shape(&da, &sa), reduce_to_shape(&db, &sb)]
            })),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, |g, _, _| (g.clone(), -g))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x / y,
            |g, x, y| (g / y, -(g * x) / (y * y)),
        )
    }

    // ---- elementwise unary -----------------------------------------------

    fn unary(
        &self,
        a: Var,
        fwd: impl Fn(&ArrayD<f64>) -> ArrayD<f64>,
        // maps (upstream grad, input value) -> input grad
        bwd: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64> + 'static,
    ) -> Var {
        let value = self.with_values(|nodes| fwd(&nodes[a.0].value));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, nodes| vec![bwd(g, &nodes[a.0].value)])),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, |g, _| -g)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x * c, move |g, _| g * c)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x + c, |g, _| g.clone())
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(f64::sqrt),
            |g, x| g / &(x.mapv(f64::sqrt) * 2.0),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::exp), |g, x| g * &x.mapv(f64::exp))
    }

    /// Elementwise absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(f64::abs),
            |g, x| g * &x.mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }),
        )
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::ln), |g, x| g / x)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(sigmoid_f),
            |g, x| {
                let y = x.mapv(sigmoid_f);
                g * &(&y * &(1.0 - &y))
            },
        )
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(|v| v * sigmoid_f(v)),
            |g, x| {
                let d = x.mapv(|v| {
                    let s = sigmoid_f(v);
                    s + v * s * (1.0 - s)
                });
                g * &d
            },
        )
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let (value, shape) = self.with_values(|nodes| {
            let v = &nodes[a.0].value;
            (
                ArrayD::from_elem(IxDyn(&[1]), v.sum()),
                v.shape().to_vec(),
            )
        });
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _| {
                vec![ArrayD::from_elem(IxDyn(&shape), g[[0]])]
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.with_values(|nodes| nodes[a.0].value.len());
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum along one axis, keeping the axis with length 1.
    pub fn sum_axis_keep(&self, a: Var, axis: usize) -> Var {
        let value = self.with_values(|nodes| {
            nodes[a.0]
                .value
                .sum_axis(Axis(axis))
                .insert_axis(Axis(axis))
        });
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, nodes| {
                vec![bcast_to(g, nodes[a.0].value.shape())]
            })),
        )
    }

    pub fn mean_axis_keep(&self, a: Var, axis: usize) -> Var {
        let n = self.with_values(|nodes| nodes[a.0].value.shape()[axis]);
        let s = self.sum_axis_keep(a, axis);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over several axes (keepdims).
    pub fn mean_axes_keep(&self, a: Var, axes: &[usize]) -> Var {
        let mut out = a;
        for &ax in axes {
            out = self.mean_axis_keep(out, ax);
        }
        out
    }

    // ---- shape ops -------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = self.with_values(|nodes| {
            let v = &nodes[a.0].value;
            assert_eq!(
                v.len(),
                shape.iter().product::<usize>(),
                "reshape size mismatch {:?} -> {:?}",
                v.shape(),
                shape
            );
            v.to_shape(IxDyn(shape)).unwrap().to_owned()
        });
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, nodes| {
                let src = nodes[a.0].value.shape().to_vec();
                vec![g.to_shape(IxDyn(&src)).unwrap().to_owned()]
            })),
        )
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let axes_v = axes.to_vec();
        let value = self.with_values(|nodes| {
            nodes[a.0]
                .value
                .view()
                .permuted_axes(IxDyn(&axes_v))
                .as_standard_layout()
                .to_owned()
        });
        let mut inv = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _| {
                vec![g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        let value = self.with_values(|nodes| {
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch")
        });
        let part_ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let parents = part_ids.clone();
        self.push(
            value,
            parents,
            Some(Box::new(move |g, nodes| {
                let mut out = Vec::with_capacity(part_ids.len());
                let mut start = 0usize;
                for &pid in &part_ids {
                    let len = nodes[pid].value.shape()[axis];
                    out.push(
                        g.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                            .to_owned(),
                    );
                    start += len;
                }
                out
            })),
        )
    }

    pub fn slice_axis(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.with_values(|nodes| {
            nodes[a.0]
                .value
                .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                .to_owned()
        });
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, nodes| {
                let mut dx = ArrayD::zeros(nodes[a.0].value.raw_dim());
                dx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![dx]
            })),
        )
    }

    /// Cyclic shift along the last two axes of an NCHW tensor.
    pub fn roll2d(&self, a: Var, dy: isize, dx: isize) -> Var {
        fn roll(v: &ArrayD<f64>, dy: isize, dx: isize) -> ArrayD<f64> {
            let sh = v.shape().to_vec();
            let (h, w) = (sh[sh.len() - 2] as isize, sh[sh.len() - 1] as isize);
            let mut out = ArrayD::zeros(v.raw_dim());
            let v4 = v.view().into_dimensionality::<Ix4>().unwrap();
            let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
            let (n, c) = (sh[0], sh[1]);
            for ni in 0..n {
                for ci in 0..c {
                    for y in 0..h {
                        let sy = ((y - dy).rem_euclid(h)) as usize;
                        for x in 0..w {
                            let sx = ((x - dx).rem_euclid(w)) as usize;
                            o4[[ni, ci, y as usize, x as usize]] = v4[[ni, ci, sy, sx]];
                        }
                    }
                }
            }
            out
        }
        let value = self.with_values(|nodes| roll(&nodes[a.0].value, dy, dx));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _| vec![roll(g, -dy, -dx)])),
        )
    }

    /// Index reversal on the last two axes modulo size: `y[i,j] = x[-i mod H, -j mod W]`.
    /// Maps a frequency bin to its conjugate partner; it is its own inverse.
    pub fn freq_reverse(&self, a: Var) -> Var {
        fn rev(v: &ArrayD<f64>) -> ArrayD<f64> {
            let sh = v.shape().to_vec();
            let nd = sh.len();
            let (h, w) = (sh[nd - 2], sh[nd - 1]);
            let v4 = v.view().into_dimensionality::<Ix4>().unwrap();
            let mut out = Array4::<f64>::zeros((sh[0], sh[1], h, w));
            for n in 0..sh[0] {
                for c in 0..sh[1] {
                    for i in 0..h {
                        let si = (h - i) % h;
                        for j in 0..w {
                            let sj = (w - j) % w;
                            out[[n, c, i, j]] = v4[[n, c, si, sj]];
                        }
                    }
                }
            }
            out.into_dyn()
        }
        let value = self.with_values(|nodes| rev(&nodes[a.0].value));
        self.push(value, vec![a.0], Some(Box::new(move |g, _| vec![rev(g)])))
    }

    /// `[N,C,H*r,W*r] -> [N,C*r*r,H,W]`, block (dy,dx) goes to channel `c*r*r + dy*r + dx`.
    pub fn space_to_depth(&self, a: Var, r: usize) -> Var {
        let value = self.with_values(|nodes| space_to_depth_arr(&nodes[a.0].value, r));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _| vec![depth_to_space_arr(g, r)])),
        )
    }

    /// Inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&self, a: Var, r: usize) -> Var {
        let value = self.with_values(|nodes| depth_to_space_arr(&nodes[a.0].value, r));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, _| vec![space_to_depth_arr(g, r)])),
        )
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.with_values(|nodes| {
            let av = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let bv = nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
            av.dot(&bv).into_dyn()
        });
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g, nodes| {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                vec![gv.dot(&bv.t()).into_dyn(), av.t().dot(&gv).into_dyn()]
            })),
        )
    }

    /// `[B,M,K] x [B,K,N] -> [B,M,N]`.
    pub fn batch_matmul(&self, a: Var, b: Var) -> Var {
        fn bmm(a: &ArrayD<f64>, b: &ArrayD<f64>, transpose_a: bool, transpose_b: bool) -> ArrayD<f64> {
            let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
            let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
            let bs = a3.shape()[0];
            let (m, n) = (
                if transpose_a { a3.shape()[2] } else { a3.shape()[1] },
                if transpose_b { b3.shape()[1] } else { b3.shape()[2] },
            );
            let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
            for i in 0..bs {
                let ai = a3.index_axis(Axis(0), i);
                let bi = b3.index_axis(Axis(0), i);
                let prod = match (transpose_a, transpose_b) {
                    (false, false) => ai.dot(&bi),
                    (true, false) => ai.t().dot(&bi),
                    (false, true) => ai.dot(&bi.t()),
                    (true, true) => ai.t().dot(&bi.t()),
                };
                out.index_axis_mut(Axis(0), i).assign(&prod);
            }
            out.into_dyn()
        }
        let value = self.with_values(|nodes| {
            bmm(&nodes[a.0].value, &nodes[b.0].value, false, false)
        });
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g, nodes| {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                vec![bmm(g, bv, false, true), bmm(av, g, true, false)]
            })),
        )
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&self, a: Var) -> Var {
        fn softmax(x: &ArrayD<f64>) -> ArrayD<f64> {
            let mut out = x.clone();
            let last = out.ndim() - 1;
            for mut row in out.lanes_mut(Axis(last)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - m).exp());
                let s: f64 = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            out
        }
        let value = self.with_values(|nodes| softmax(&nodes[a.0].value));
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, nodes| {
                let y = softmax(&nodes[a.0].value);
                let last = y.ndim() - 1;
                let mut dx = g * &y;
                // dx = y * (g - sum(g*y, last))
                let dot = dx.sum_axis(Axis(last)).insert_axis(Axis(last));
                dx = &y * &(g - &bcast_to(&dot, g.shape()));
                vec![dx]
            })),
        )
    }

    /// `table[R,C]` gathered by row indices -> `[L,C]`.
    pub fn gather_rows(&self, table: Var, idx: Vec<usize>) -> Var {
        let value = self.with_values(|nodes| {
            let t = nodes[table.0]
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap();
            let c = t.shape()[1];
            let mut out = Array2::<f64>::zeros((idx.len(), c));
            for (i, &r) in idx.iter().enumerate() {
                out.row_mut(i).assign(&t.row(r));
            }
            out.into_dyn()
        });
        let idx_b = idx.clone();
        self.push(
            value,
            vec![table.0],
            Some(Box::new(move |g, nodes| {
                let tshape = nodes[table.0].value.shape().to_vec();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dt = Array2::<f64>::zeros((tshape[0], tshape[1]));
                for (i, &r) in idx_b.iter().enumerate() {
                    let mut row = dt.row_mut(r);
                    row += &g2.row(i);
                }
                vec![dt.into_dyn()]
            })),
        )
    }

    // ---- convolutions ----------------------------------------------------

    /// 2D convolution, x `[N,Cin,H,W]`, w `[Cout,Cin,kh,kw]`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let value = self.with_values(|nodes| {
            conv2d_forward(&nodes[x.0].value, &nodes[w.0].value, stride, pad)
        });
        self.push(
            value,
            vec![x.0, w.0],
            Some(Box::new(move |g, nodes| {
                let (dx, dw) =
                    conv2d_backward(g, &nodes[x.0].value, &nodes[w.0].value, stride, pad);
                vec![dx, dw]
            })),
        )
    }

    /// Depthwise 2D convolution, x `[N,C,H,W]`, w `[C,kh,kw]`.
    pub fn depthwise_conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let value = self.with_values(|nodes| {
            dwconv_forward(&nodes[x.0].value, &nodes[w.0].value, stride, pad)
        });
        self.push(
            value,
            vec![x.0, w.0],
            Some(Box::new(move |g, nodes| {
                let (dx, dw) =
                    dwconv_backward(g, &nodes[x.0].value, &nodes[w.0].value, stride, pad);
                vec![dx, dw]
            })),
        )
    }

    // ---- escape hatch ----------------------------------------------------

    /// Custom op with user-provided forward value and backward rule.
    /// `backward(upstream, parent_values)` returns one grad per parent.
    pub fn custom(
        &self,
        parents: &[Var],
        value: ArrayD<f64>,
        backward: impl Fn(&ArrayD<f64>, &[&ArrayD<f64>]) -> Vec<ArrayD<f64>> + 'static,
    ) -> Var {
        let ids: Vec<usize> = parents.iter().map(|p| p.0).collect();
        let ids_b = ids.clone();
        self.push(
            value,
            ids,
            Some(Box::new(move |g, nodes| {
                let vals: Vec<&ArrayD<f64>> = ids_b.iter().map(|&i| &nodes[i].value).collect();
                backward(g, &vals)
            })),
        )
    }
}

fn sigmoid_f(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn space_to_depth_arr(v: &ArrayD<f64>, r: usize) -> ArrayD<f64> {
    let v4 = v.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = (v4.shape()[0], v4.shape()[1], v4.shape()[2], v4.shape()[3]);
    assert!(h % r == 0 && w % r == 0, "space_to_depth: size not divisible");
    let (ho, wo) = (h / r, w / r);
    let mut out = Array4::<f64>::zeros((n, c * r * r, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let co = ci * r * r + dy * r + dx;
                    for y in 0..ho {
                        for x in 0..wo {
                            out[[ni, co, y, x]] = v4[[ni, ci, y * r + dy, x * r + dx]];
                        }
                    }
                }
            }
        }
    }
    out.into_dyn()
}

fn depth_to_space_arr(v: &ArrayD<f64>, r: usize) -> ArrayD<f64> {
    let v4 = v.view().into_dimensionality::<Ix4>().unwrap();
    let (n, cr, h, w) = (v4.shape()[0], v4.shape()[1], v4.shape()[2], v4.shape()[3]);
    assert!(cr % (r * r) == 0, "depth_to_space: channels not divisible");
    let c = cr / (r * r);
    let mut out = Array4::<f64>::zeros((n, c, h * r, w * r));
    for ni in 0..n {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let cs = ci * r * r + dy * r + dx;
                    for y in 0..h {
                        for x in 0..w {
                            out[[ni, ci, y * r + dy, x * r + dx]] = v4[[ni, cs, y, x]];
                        }
                    }
                }
            }
        }
    }
    out.into_dyn()
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn im2col(x: &ArrayD<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad));
    let mut cols = Array2::<f64>::zeros((c * kh * kw, n * ho * wo));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ci * kh * kw + ky * kw + kx;
                let mut r = cols.row_mut(row);
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            let col = (ni * ho + oy) * wo + ox;
                            r[col] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w
                            {
                                x4[[ni, ci, iy as usize, ix as usize]]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
    cols
}

fn conv2d_forward(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
    let (n, _c, h, wi) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (cout, cin, kh, kw) = (w4.shape()[0], w4.shape()[1], w4.shape()[2], w4.shape()[3]);
    assert_eq!(cin, x4.shape()[1], "conv2d channel mismatch");
    let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(wi, kw, stride, pad));
    let cols = im2col(x, kh, kw, stride, pad);
    let w_mat = w4.to_shape((cout, cin * kh * kw)).unwrap();
    let out_mat = w_mat.dot(&cols); // [Cout, N*Ho*Wo]
    let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
    for co in 0..cout {
        let row = out_mat.row(co);
        for ni in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[[ni, co, oy, ox]] = row[(ni * ho + oy) * wo + ox];
                }
            }
        }
    }
    out.into_dyn()
}

fn conv2d_backward(
    g: &ArrayD<f64>,
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, wi) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (cout, _cin, kh, kw) = (w4.shape()[0], w4.shape()[1], w4.shape()[2], w4.shape()[3]);
    let (ho, wo) = (g4.shape()[2], g4.shape()[3]);

    let mut g_mat = Array2::<f64>::zeros((cout, n * ho * wo));
    for co in 0..cout {
        let mut row = g_mat.row_mut(co);
        for ni in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    row[(ni * ho + oy) * wo + ox] = g4[[ni, co, oy, ox]];
                }
            }
        }
    }

    let cols = im2col(x, kh, kw, stride, pad);
    let dw_mat = g_mat.dot(&cols.t()); // [Cout, C*kh*kw]
    let dw = dw_mat
        .to_shape((cout, c, kh, kw))
        .unwrap()
        .to_owned()
        .into_dyn();

    let w_mat = w4.to_shape((cout, c * kh * kw)).unwrap();
    let dcols = w_mat.t().dot(&g_mat); // [C*kh*kw, N*Ho*Wo]
    let mut dx = Array4::<f64>::zeros((n, c, h, wi));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = dcols.row(ci * kh * kw + ky * kw + kx);
                for ni in 0..n {
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= wi {
                                continue;
                            }
                            dx[[ni, ci, iy as usize, ix as usize]] +=
                                row[(ni * ho + oy) * wo + ox];
                        }
                    }
                }
            }
        }
    }
    (dx.into_dyn(), dw)
}

fn dwconv_forward(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let w3 = w.view().into_dimensionality::<Ix3>().unwrap();
    let (n, c, h, wi) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (kh, kw) = (w3.shape()[1], w3.shape()[2]);
    assert_eq!(w3.shape()[0], c, "depthwise channel mismatch");
    let (ho, wo) = (conv_out(h, kh, stride, pad), conv_out(wi, kw, stride, pad));
    let mut out = Array4::<f64>::zeros((n, c, ho, wo));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= wi {
                                continue;
                            }
                            acc += w3[[ci, ky, kx]] * x4[[ni, ci, iy as usize, ix as usize]];
                        }
                    }
                    out[[ni, ci, oy, ox]] = acc;
                }
            }
        }
    }
    out.into_dyn()
}

fn dwconv_backward(
    g: &ArrayD<f64>,
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let w3 = w.view().into_dimensionality::<Ix3>().unwrap();
    let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, wi) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (kh, kw) = (w3.shape()[1], w3.shape()[2]);
    let (ho, wo) = (g4.shape()[2], g4.shape()[3]);
    let mut dx = Array4::<f64>::zeros((n, c, h, wi));
    let mut dw = ndarray::Array3::<f64>::zeros((c, kh, kw));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = g4[[ni, ci, oy, ox]];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= wi {
                                continue;
                            }
                            dx[[ni, ci, iy as usize, ix as usize]] += go * w3[[ci, ky, kx]];
                            dw[[ci, ky, kx]] += go * x4[[ni, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    (dx.into_dyn(), dw.into_dyn())
}
