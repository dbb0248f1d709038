//! Differentiable tensor operations recorded on a [`Graph`].
//!
//! Binary arithmetic follows numpy-style broadcasting (shapes aligned on the
//! right, size-1 axes stretched); backward reduces gradients back to each
//! operand's shape. Shape violations panic: callers validate user input
//! before reaching the tape.

use super::{Graph, TensorD, Var};
use crate::linalg;
use ndarray::linalg::general_mat_mul;
use ndarray::{
    Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView3, ArrayViewMut3, Axis, Ix1, Ix2, Ix4,
    IxDyn, Slice, Zip,
};

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let ad = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let bd = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        assert!(
            ad == bd || ad == 1 || bd == 1,
            "incompatible broadcast: {a:?} vs {b:?}"
        );
        out[i] = ad.max(bd);
    }
    out
}

fn broadcast_zip(a: &TensorD, b: &TensorD, f: impl Fn(f64, f64) -> f64) -> TensorD {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Sum `grad` down to `shape` (inverse of broadcasting).
fn reduce_to(grad: &TensorD, shape: &[usize]) -> TensorD {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.to_owned();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn standard(t: &TensorD) -> TensorD {
    t.as_standard_layout().into_owned()
}

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

pub fn add<'g>(a: &Var<'g>, b: &Var<'g>) -> Var<'g> {
    let out = broadcast_zip(a.value(), b.value(), |x, y| x + y);
    let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
    a.graph().push_op(out, &[a, b], || {
        Box::new(move |g| vec![reduce_to(g, &ash), reduce_to(g, &bsh)])
    })
}

pub fn sub<'g>(a: &Var<'g>, b: &Var<'g>) -> Var<'g> {
    let out = broadcast_zip(a.value(), b.value(), |x, y| x - y);
    let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
    a.graph().push_op(out, &[a, b], || {
        Box::new(move |g| {
            let db = reduce_to(g, &bsh).mapv(|v| -v);
            vec![reduce_to(g, &ash), db]
        })
    })
}

pub fn mul<'g>(a: &Var<'g>, b: &Var<'g>) -> Var<'g> {
    let out = broadcast_zip(a.value(), b.value(), |x, y| x * y);
    let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
    let (av, bv) = (a.value_rc(), b.value_rc());
    a.graph().push_op(out, &[a, b], || {
        Box::new(move |g| {
            let da = broadcast_zip(g, &bv, |x, y| x * y);
            let db = broadcast_zip(g, &av, |x, y| x * y);
            vec![reduce_to(&da, &ash), reduce_to(&db, &bsh)]
        })
    })
}

pub fn div<'g>(a: &Var<'g>, b: &Var<'g>) -> Var<'g> {
    let out = broadcast_zip(a.value(), b.value(), |x, y| x / y);
    let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
    let (av, bv) = (a.value_rc(), b.value_rc());
    a.graph().push_op(out, &[a, b], || {
        Box::new(move |g| {
            let da = broadcast_zip(g, &bv, |x, y| x / y);
            let num = broadcast_zip(g, &av, |x, y| x * y);
            let db = broadcast_zip(&num, &bv, |x, y| -x / (y * y));
            vec![reduce_to(&da, &ash), reduce_to(&db, &bsh)]
        })
    })
}

pub fn neg<'g>(a: &Var<'g>) -> Var<'g> {
    scale(a, -1.0)
}

pub fn scale<'g>(a: &Var<'g>, c: f64) -> Var<'g> {
    let out = a.value().mapv(|x| x * c);
    a.graph()
        .push_op(out, &[a], || Box::new(move |g| vec![g.mapv(|v| v * c)]))
}

pub fn add_scalar<'g>(a: &Var<'g>, c: f64) -> Var<'g> {
    let out = a.value().mapv(|x| x + c);
    a.graph()
        .push_op(out, &[a], || Box::new(move |g| vec![g.clone()]))
}

/// `x^p` elementwise; caller guarantees a domain where this is smooth.
pub fn pow_scalar<'g>(a: &Var<'g>, p: f64) -> Var<'g> {
    let out = a.value().mapv(|x| x.powf(p));
    let av = a.value_rc();
    a.graph().push_op(out, &[a], || {
        Box::new(move |g| {
            let mut d = av.mapv(|x| p * x.powf(p - 1.0));
            d *= g;
            vec![d]
        })
    })
}

pub fn exp<'g>(a: &Var<'g>) -> Var<'g> {
    let out = a.value().mapv(f64::exp);
    let o = std::rc::Rc::new(out.clone());
    a.graph().push_op(out, &[a], || {
        Box::new(move |g| {
            let mut d = (*o).clone();
            d *= g;
            vec![d]
        })
    })
}

pub fn ln<'g>(a: &Var<'g>) -> Var<'g> {
    let out = a.value().mapv(f64::ln);
    let av = a.value_rc();
    a.graph().push_op(out, &[a], || {
        Box::new(move |g| {
            let mut d = av.mapv(|x| 1.0 / x);
            d *= g;
            vec![d]
        })
    })
}

pub fn relu<'g>(a: &Var<'g>) -> Var<'g> {
    let out = a.value().mapv(|x| x.max(0.0));
    let av = a.value_rc();
    a.graph().push_op(out, &[a], || {
        Box::new(move |g| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*av).for_each(|dv, &x| {
                if x <= 0.0 {
                    *dv = 0.0;
                }
            });
            vec![d]
        })
    })
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid<'g>(a: &Var<'g>) -> Var<'g> {
    let out = a.value().mapv(sigmoid_scalar);
    let o = std::rc::Rc::new(out.clone());
    a.graph().push_op(out, &[a], || {
        Box::new(move |g| {
            let mut d = o.mapv(|s| s * (1.0 - s));
            d *= g;
            vec![d]
        })
    })
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<'g>(a: &Var<'g>) -> Var<'g> {
    let out = a.value().mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
    let av = a.value_rc();
    a.graph().push_op(out, &[a], || {
        Box::new(move |g| {
            let mut d = av.mapv(sigmoid_scalar);
            d *= g;
            vec![d]
        })
    })
}

/// Elementwise max of two same-shape tensors; ties send the gradient to `a`.
pub fn maximum<'g>(a: &Var<'g>, b: &Var<'g>) -> Var<'g> {
    assert_eq!(a.shape(), b.shape(), "maximum: shape mismatch");
    let out = broadcast_zip(a.value(), b.value(), f64::max);
    let (av, bv) = (a.value_rc(), b.value_rc());
    a.graph().push_op(out, &[a, b], || {
        Box::new(move |g| {
            let mut da = g.clone();
            let mut db = g.clone();
            Zip::from(&mut da)
                .and(&mut db)
                .and(&*av)
                .and(&*bv)
                .for_each(|x, y, &p, &q| {
                    if p >= q {
                        *y = 0.0;
                    } else {
                        *x = 0.0;
                    }
                });
            vec![da, db]
        })
    })
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

pub fn reshape<'g>(a: &Var<'g>, shape: &[usize]) -> Var<'g> {
    let out = standard(a.value())
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch");
    let ash = a.shape().to_vec();
    a.graph().push_op(out, &[a], || {
        Box::new(move |g| {
            vec![standard(g)
                .into_shape_with_order(IxDyn(&ash))
                .expect("reshape backward")]
        })
    })
}

pub fn transpose2<'g>(a: &Var<'g>) -> Var<'g> {
    assert_eq!(a.shape().len(), 2, "transpose2: 2-D only");
    let out = standard(&a.value().t().to_owned().into_dyn());
    a.graph().push_op(out, &[a], || {
        Box::new(move |g| vec![standard(&g.t().to_owned())])
    })
}

/// Rows `start..end` along axis 0.
pub fn slice0<'g>(a: &Var<'g>, start: usize, end: usize) -> Var<'g> {
    assert!(start <= end && end <= a.shape()[0], "slice0 out of range");
    let out = a
        .value()
        .slice_axis(Axis(0), Slice::from(start..end))
        .to_owned();
    let ash = a.shape().to_vec();
    a.graph().push_op(out, &[a], || {
        Box::new(move |g| {
            let mut d = ArrayD::zeros(IxDyn(&ash));
            d.slice_axis_mut(Axis(0), Slice::from(start..end))
                .assign(g);
            vec![d]
        })
    })
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

fn reduce_forward(a: &TensorD, axes: &[usize], keepdim: bool) -> (TensorD, usize) {
    let mut sorted: Vec<usize> = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let count: usize = sorted.iter().map(|&ax| a.shape()[ax]).product();
    let mut out = a.to_owned();
    for &ax in sorted.iter().rev() {
        out = out.sum_axis(Axis(ax));
    }
    if keepdim {
        for &ax in sorted.iter() {
            out = out.insert_axis(Axis(ax));
        }
    }
    (out, count)
}

fn reduce_backward(g: &TensorD, ash: &[usize], axes: &[usize], keepdim: bool) -> TensorD {
    let mut sorted: Vec<usize> = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut gk = g.to_owned();
    if !keepdim {
        for &ax in sorted.iter() {
            gk = gk.insert_axis(Axis(ax));
        }
    }
    gk.broadcast(IxDyn(ash)).expect("reduce backward").to_owned()
}

pub fn sum_over<'g>(a: &Var<'g>, axes: &[usize], keepdim: bool) -> Var<'g> {
    let (out, _) = reduce_forward(a.value(), axes, keepdim);
    let ash = a.shape().to_vec();
    let axes = axes.to_vec();
    a.graph().push_op(out, &[a], || {
        Box::new(move |g| vec![reduce_backward(g, &ash, &axes, keepdim)])
    })
}

pub fn mean_over<'g>(a: &Var<'g>, axes: &[usize], keepdim: bool) -> Var<'g> {
    let (sum, count) = reduce_forward(a.value(), axes, keepdim);
    let out = sum.mapv(|v| v / count as f64);
    let ash = a.shape().to_vec();
    let axes = axes.to_vec();
    a.graph().push_op(out, &[a], || {
        Box::new(move |g| {
            let mut d = reduce_backward(g, &ash, &axes, keepdim);
            d.mapv_inplace(|v| v / count as f64);
            vec![d]
        })
    })
}

/// Mean over groups of `k` consecutive rows: `(g*k, rest..) -> (g, rest..)`.
pub fn group_mean<'g>(a: &Var<'g>, groups: usize) -> Var<'g> {
    let ash = a.shape().to_vec();
    assert!(groups > 0 && ash[0] % groups == 0, "group_mean: bad grouping");
    let k = ash[0] / groups;
    let mut mid = vec![groups, k];
    mid.extend_from_slice(&ash[1..]);
    let grouped = standard(a.value())
        .into_shape_with_order(IxDyn(&mid))
        .unwrap();
    let out = grouped.mean_axis(Axis(1)).unwrap();
    a.graph().push_op(out, &[a], || {
        Box::new(move |g| {
            let gk = g.to_owned().insert_axis(Axis(1));
            let mut d = gk
                .broadcast(IxDyn(&mid))
                .expect("group_mean backward")
                .to_owned();
            d.mapv_inplace(|v| v / k as f64);
            vec![d.into_shape_with_order(IxDyn(&ash)).unwrap()]
        })
    })
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

fn view2(t: &TensorD) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected 2-D")
}

pub fn matmul<'g>(a: &Var<'g>, b: &Var<'g>) -> Var<'g> {
    let av = view2(a.value());
    let bv = view2(b.value());
    assert_eq!(av.ncols(), bv.nrows(), "matmul: inner dim mismatch");
    let out = av.dot(&bv).into_dyn();
    let (ar, br) = (a.value_rc(), b.value_rc());
    a.graph().push_op(out, &[a, b], || {
        Box::new(move |g| {
            let g2_std = standard(g);
            let g2 = view2(&g2_std);
            let da = g2.dot(&view2(&br).t()).into_dyn();
            let db = view2(&ar).t().dot(&g2).into_dyn();
            vec![da, db]
        })
    })
}

/// Pairwise squared Euclidean distances between rows: `(n,d),(m,d) -> (n,m)`.
pub fn pairwise_sqdist<'g>(a: &Var<'g>, b: &Var<'g>) -> Var<'g> {
    let out = linalg::pairwise_sqdist(view2(a.value()), view2(b.value())).into_dyn();
    let (ar, br) = (a.value_rc(), b.value_rc());
    a.graph().push_op(out, &[a, b], || {
        Box::new(move |g| {
            let g_std = standard(g);
            let g2 = view2(&g_std);
            let av = view2(&ar);
            let bv = view2(&br);
            let row_sums = g2.sum_axis(Axis(1)); // (n,)
            let col_sums = g2.sum_axis(Axis(0)); // (m,)
            // d/da_ik = sum_j 2 g_ij (a_ik - b_jk)
            let mut da = av.to_owned();
            for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                row *= 2.0 * row_sums[i];
            }
            da = da - 2.0 * g2.dot(&bv);
            let mut db = bv.to_owned();
            for (j, mut row) in db.rows_mut().into_iter().enumerate() {
                row *= 2.0 * col_sums[j];
            }
            db = db - 2.0 * g2.t().dot(&av);
            vec![da.into_dyn(), db.into_dyn()]
        })
    })
}

/// Closed-form label propagation `F = (I - alpha S)^{-1} Y` with gradient
/// flow into `S` only (`Y` is a constant label matrix).
///
/// Panics if the system is singular; callers enforce `alpha` in (0,1), which
/// together with a symmetrically normalized `S` guarantees invertibility.
pub fn solve_propagation<'g>(s: &Var<'g>, y: &Array2<f64>, alpha: f64) -> Var<'g> {
    let sv = view2(s.value());
    let n = sv.nrows();
    assert_eq!(n, sv.ncols(), "solve_propagation: S must be square");
    assert_eq!(n, y.nrows(), "solve_propagation: Y row mismatch");
    let mut a_mat = sv.to_owned() * (-alpha);
    for i in 0..n {
        a_mat[[i, i]] += 1.0;
    }
    let f = linalg::solve(&a_mat, y).expect("singular propagation system; require alpha < 1");
    let f_keep = f.clone();
    let out = f.into_dyn();
    s.graph().push_op(out, &[s], || {
        let a_t = a_mat.t().to_owned();
        Box::new(move |g| {
            let g_std = standard(g);
            let g2 = view2(&g_std).to_owned();
            let gsol = linalg::solve(&a_t, &g2).expect("singular propagation system (transpose)");
            let ds = alpha * gsol.dot(&f_keep.t());
            vec![ds.into_dyn()]
        })
    })
}

// ---------------------------------------------------------------------------
// softmax / loss
// ---------------------------------------------------------------------------

/// Softmax along one axis.
pub fn softmax_axis<'g>(a: &Var<'g>, axis: usize) -> Var<'g> {
    let mut out = a.value().to_owned();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lane.mapv_inplace(|v| (v - m).exp());
        let s: f64 = lane.sum();
        lane.mapv_inplace(|v| v / s);
    }
    let p = std::rc::Rc::new(out.clone());
    a.graph().push_op(out, &[a], || {
        Box::new(move |g| {
            let mut d = g.clone();
            d *= &*p;
            let inner = d.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            let mut correction = p.to_owned();
            correction *= &inner.broadcast(p.raw_dim()).unwrap().to_owned();
            d -= &correction;
            vec![d]
        })
    })
}

/// Mean soft-label cross entropy: `-(1/T) sum_i sum_c y_ic log softmax(s_i)_c`.
pub fn soft_cross_entropy<'g>(scores: &Var<'g>, targets: &Array2<f64>) -> Var<'g> {
    let sv = view2(scores.value());
    let (t, n) = (sv.nrows(), sv.ncols());
    assert_eq!((t, n), (targets.nrows(), targets.ncols()), "target shape");
    let mut probs = Array2::zeros((t, n));
    let mut total = 0.0;
    for i in 0..t {
        let row = sv.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..n {
            let e = (row[j] - m).exp();
            probs[[i, j]] = e;
            z += e;
        }
        let lse = m + z.ln();
        for j in 0..n {
            probs[[i, j]] /= z;
            total += targets[[i, j]] * (lse - row[j]);
        }
    }
    let out = ndarray::arr0(total / t as f64).into_dyn();
    let y = targets.clone();
    scores.graph().push_op(out, &[scores], || {
        Box::new(move |g| {
            let u = *g.iter().next().unwrap();
            let mut d = probs.clone();
            d -= &y;
            d.mapv_inplace(|v| v * u / t as f64);
            vec![d.into_dyn()]
        })
    })
}

// ---------------------------------------------------------------------------
// convolution / pooling / batch norm
// ---------------------------------------------------------------------------

fn view4(t: &TensorD) -> ndarray::ArrayView4<'_, f64> {
    t.view().into_dimensionality::<Ix4>().expect("expected 4-D")
}

fn im2col_into(
    img: &ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    col: &mut Array2<f64>,
) {
    let (cin, h, w) = img.dim();
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (c * kh + ki) * kw + kj;
                let mut row = col.row_mut(r);
                for oh in 0..ho {
                    let ih = oh + ki;
                    let in_h = ih >= ph && ih - ph < h;
                    for ow in 0..wo {
                        let iw = ow + kj;
                        let v = if in_h && iw >= pw && iw - pw < w {
                            img[[c, ih - ph, iw - pw]]
                        } else {
                            0.0
                        };
                        row[oh * wo + ow] = v;
                    }
                }
            }
        }
    }
}

fn col2im_acc(
    dcol: &Array2<f64>,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
    dimg: &mut ArrayViewMut3<'_, f64>,
) {
    let (cin, h, w) = dimg.dim();
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (c * kh + ki) * kw + kj;
                let row = dcol.row(r);
                for oh in 0..ho {
                    let ih = oh + ki;
                    if ih < ph || ih - ph >= h {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = ow + kj;
                        if iw < pw || iw - pw >= w {
                            continue;
                        }
                        dimg[[c, ih - ph, iw - pw]] += row[oh * wo + ow];
                    }
                }
            }
        }
    }
}

/// 2-D convolution, stride 1, zero padding `(ph, pw)`, with bias.
///
/// `x`: (B, Cin, H, W); `w`: (Cout, Cin, kh, kw); `b`: (Cout,).
pub fn conv2d<'g>(x: &Var<'g>, w: &Var<'g>, b: &Var<'g>, pad: (usize, usize)) -> Var<'g> {
    let xv = view4(x.value());
    let wv = view4(w.value());
    let bv = b
        .value()
        .view()
        .into_dimensionality::<Ix1>()
        .expect("conv2d: bias must be 1-D");
    let (bsz, cin, h, wid) = xv.dim();
    let (cout, cin2, kh, kw) = wv.dim();
    assert_eq!(cin, cin2, "conv2d: channel mismatch");
    assert_eq!(cout, bv.len(), "conv2d: bias length");
    let (ph, pw) = pad;
    assert!(
        h + 2 * ph + 1 > kh && wid + 2 * pw + 1 > kw,
        "conv2d: input {h}x{wid} too small for kernel {kh}x{kw} with padding {ph},{pw}"
    );
    let ho = h + 2 * ph - kh + 1;
    let wo = wid + 2 * pw - kw + 1;

    let w2 = standard(w.value())
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap();
    let mut col = Array2::zeros((cin * kh * kw, ho * wo));
    let mut out3 = Array3::zeros((bsz, cout, ho * wo));
    for bi in 0..bsz {
        im2col_into(&xv.index_axis(Axis(0), bi), kh, kw, ph, pw, ho, wo, &mut col);
        let mut o2 = out3.index_axis_mut(Axis(0), bi);
        general_mat_mul(1.0, &w2, &col, 0.0, &mut o2);
        for c in 0..cout {
            let bias = bv[c];
            o2.row_mut(c).mapv_inplace(|v| v + bias);
        }
    }
    let out = out3
        .into_shape_with_order((bsz, cout, ho, wo))
        .unwrap()
        .into_dyn();

    let xr = x.value_rc();
    x.graph().push_op(out, &[x, w, b], || {
        Box::new(move |g| {
            let g_std = standard(g);
            let g4 = view4(&g_std);
            let xv = view4(&xr);
            let mut dw2 = Array2::zeros((cout, cin * kh * kw));
            let mut dx = ArrayD::zeros(IxDyn(&[bsz, cin, h, wid]));
            let mut col = Array2::zeros((cin * kh * kw, ho * wo));
            let mut dcol = Array2::zeros((cin * kh * kw, ho * wo));
            let mut db = Array1::zeros(cout);
            for bi in 0..bsz {
                im2col_into(&xv.index_axis(Axis(0), bi), kh, kw, ph, pw, ho, wo, &mut col);
                let g2 = g4
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((cout, ho * wo))
                    .unwrap();
                general_mat_mul(1.0, &g2, &col.t(), 1.0, &mut dw2);
                general_mat_mul(1.0, &w2.t(), &g2, 0.0, &mut dcol);
                let mut dx4 = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                let mut dimg = dx4.index_axis_mut(Axis(0), bi);
                col2im_acc(&dcol, kh, kw, ph, pw, ho, wo, &mut dimg);
                for c in 0..cout {
                    db[c] += g2.row(c).sum();
                }
            }
            let dw = dw2
                .into_shape_with_order((cout, cin, kh, kw))
                .unwrap()
                .into_dyn();
            vec![dx, dw, db.into_dyn()]
        })
    })
}

/// Max pooling with window = stride = `(ph, pw)`; trailing rows/cols that do
/// not fill a window are dropped (floor semantics).
pub fn maxpool2d<'g>(x: &Var<'g>, pool: (usize, usize)) -> Var<'g> {
    let xv = view4(x.value());
    let (bsz, ch, h, w) = xv.dim();
    let (ph, pw) = pool;
    assert!(ph > 0 && pw > 0, "maxpool2d: zero pool size");
    let ho = h / ph;
    let wo = w / pw;
    assert!(ho > 0 && wo > 0, "maxpool2d: input {h}x{w} smaller than pool");
    let mut out = ArrayD::zeros(IxDyn(&[bsz, ch, ho, wo]));
    let mut idx = vec![0usize; bsz * ch * ho * wo];
    {
        let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
        let mut flat = 0usize;
        for bi in 0..bsz {
            for c in 0..ch {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0usize;
                        for di in 0..ph {
                            for dj in 0..pw {
                                let (ih, iw) = (oh * ph + di, ow * pw + dj);
                                let v = xv[[bi, c, ih, iw]];
                                if v > best {
                                    best = v;
                                    best_at = ih * w + iw;
                                }
                            }
                        }
                        o4[[bi, c, oh, ow]] = best;
                        idx[flat] = best_at;
                        flat += 1;
                    }
                }
            }
        }
    }
    x.graph().push_op(out, &[x], || {
        Box::new(move |g| {
            let g_std = standard(g);
            let gs = g_std.as_slice().unwrap();
            let mut dx = ArrayD::zeros(IxDyn(&[bsz, ch, h, w]));
            {
                let dxs = dx.as_slice_mut().unwrap();
                for (flat, &src) in idx.iter().enumerate() {
                    let img = flat / (ho * wo);
                    dxs[img * h * w + src] += gs[flat];
                }
            }
            vec![dx]
        })
    })
}

/// Batch-norm execution mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics (training).
    Train,
    /// Normalize by the provided running statistics (inference).
    Eval,
}

/// 2-D batch normalization over (B, H, W) per channel.
///
/// In train mode, returns the batch mean and unbiased variance so the caller
/// can update running statistics; in eval mode normalizes with `running`.
pub fn batchnorm2d<'g>(
    x: &Var<'g>,
    gamma: &Var<'g>,
    beta: &Var<'g>,
    running: (&Array1<f64>, &Array1<f64>),
    eps: f64,
    mode: BnMode,
) -> (Var<'g>, Option<(Array1<f64>, Array1<f64>)>) {
    let xv = view4(x.value());
    let (bsz, ch, h, w) = xv.dim();
    let gv = gamma.value();
    let bv = beta.value();
    assert_eq!(gv.len(), ch, "batchnorm2d: gamma length");
    assert_eq!(bv.len(), ch, "batchnorm2d: beta length");
    let m = (bsz * h * w) as f64;

    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = Array1::zeros(ch);
            let mut var = Array1::zeros(ch);
            for c in 0..ch {
                let lane = xv.index_axis(Axis(1), c);
                let mu = lane.sum() / m;
                let v = lane.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / m;
                mean[c] = mu;
                var[c] = v;
            }
            (mean, var)
        }
        BnMode::Eval => (running.0.clone(), running.1.clone()),
    };
    let inv_std: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());

    let mut out = ArrayD::zeros(IxDyn(&[bsz, ch, h, w]));
    {
        let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
        for c in 0..ch {
            let (mu, inv) = (mean[c], inv_std[c]);
            let (ga, be) = (gv[IxDyn(&[c])], bv[IxDyn(&[c])]);
            let lane = xv.index_axis(Axis(1), c);
            let mut olane = o4.index_axis_mut(Axis(1), c);
            Zip::from(&mut olane)
                .and(&lane)
                .for_each(|o, &x| *o = (x - mu) * inv * ga + be);
        }
    }

    let stats = match mode {
        BnMode::Train => {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            Some((mean.clone(), var.mapv(|v| v * unbias)))
        }
        BnMode::Eval => None,
    };

    let xr = x.value_rc();
    let gr = gamma.value_rc();
    let out_var = x.graph().push_op(out, &[x, gamma, beta], || {
        Box::new(move |g| {
            let g_std = standard(g);
            let g4 = view4(&g_std);
            let xv = view4(&xr);
            let mut dx = ArrayD::zeros(IxDyn(&[bsz, ch, h, w]));
            let mut dgamma = Array1::zeros(ch);
            let mut dbeta = Array1::zeros(ch);
            let mut dx4 = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
            for c in 0..ch {
                let (mu, inv) = (mean[c], inv_std[c]);
                let ga = gr[IxDyn(&[c])];
                let glane = g4.index_axis(Axis(1), c);
                let xlane = xv.index_axis(Axis(1), c);
                let gsum = glane.sum();
                let mut gx = 0.0;
                Zip::from(&glane).and(&xlane).for_each(|&gg, &xx| {
                    gx += gg * (xx - mu) * inv;
                });
                dgamma[c] = gx;
                dbeta[c] = gsum;
                let mut dlane = dx4.index_axis_mut(Axis(1), c);
                match mode {
                    BnMode::Train => {
                        let (gmean, gxmean) = (gsum / m, gx / m);
                        Zip::from(&mut dlane).and(&glane).and(&xlane).for_each(
                            |d, &gg, &xx| {
                                let xh = (xx - mu) * inv;
                                *d = ga * inv * (gg - gmean - xh * gxmean);
                            },
                        );
                    }
                    BnMode::Eval => {
                        Zip::from(&mut dlane)
                            .and(&glane)
                            .for_each(|d, &gg| *d = ga * inv * gg);
                    }
                }
            }
            vec![dx, dgamma.into_dyn(), dbeta.into_dyn()]
        })
    });
    (out_var, stats)
}

// ---------------------------------------------------------------------------
// gradient checking (test support)
// ---------------------------------------------------------------------------

/// Central finite-difference check of `build` (a scalar-valued function of
/// `inputs`) against the tape's analytic gradients. Used by op unit tests and
/// by the acceptance suite.
pub fn finite_difference_check(
    build: &dyn Fn(&Graph, &[TensorD]) -> f64,
    grad_of: &dyn Fn(&Graph, &[TensorD]) -> (f64, Vec<TensorD>),
    inputs: &[TensorD],
    eps: f64,
) -> f64 {
    let g = Graph::new();
    let (_, analytic) = grad_of(&g, inputs);
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for flat in 0..t.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            {
                let p = plus[ti].as_slice_mut().unwrap();
                p[flat] += eps;
                let m = minus[ti].as_slice_mut().unwrap();
                m[flat] -= eps;
            }
            let fp = build(&Graph::new(), &plus);
            let fm = build(&Graph::new(), &minus);
            let numeric = (fp - fm) / (2.0 * eps);
            let got = analytic[ti].as_slice().unwrap()[flat];
            let denom = numeric.abs().max(got.abs()).max(1e-8);
            worst = worst.max((numeric - got).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr0, ArrayD};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut impl Rng) -> TensorD {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Check a Var-level expression against finite differences over all
    /// leaf inputs; asserts the worst relative error is below `tol`.
    fn check<F>(f: F, inputs: Vec<TensorD>, tol: f64)
    where
        F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
    {
        let forward = |g: &Graph, ins: &[TensorD]| -> f64 {
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
            f(g, &vars).scalar()
        };
        let with_grads = |g: &Graph, ins: &[TensorD]| -> (f64, Vec<TensorD>) {
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
            let out = f(g, &vars);
            let grads = g.backward(&out);
            let gs = vars
                .iter()
                .map(|v| {
                    grads
                        .get(v)
                        .cloned()
                        .unwrap_or_else(|| ArrayD::zeros(IxDyn(v.shape())))
                })
                .collect();
            (out.scalar(), gs)
        };
        let worst = finite_difference_check(&forward, &with_grads, &inputs, 1e-5);
        assert!(worst < tol, "gradient mismatch: worst rel err {worst}");
    }

    fn sum_to_scalar<'g>(v: &Var<'g>) -> Var<'g> {
        let axes: Vec<usize> = (0..v.shape().len()).collect();
        sum_over(v, &axes, false)
    }

    #[test]
    fn add_mul_sub_div_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[1, 4], &mut rng).mapv(|v| v + 2.5); // keep away from 0 for div
        check(
            |_, vs| sum_to_scalar(&add(&vs[0], &vs[1])),
            vec![a.clone(), b.clone()],
            1e-6,
        );
        check(
            |_, vs| sum_to_scalar(&mul(&vs[0], &vs[1])),
            vec![a.clone(), b.clone()],
            1e-6,
        );
        check(
            |_, vs| sum_to_scalar(&sub(&vs[0], &vs[1])),
            vec![a.clone(), b.clone()],
            1e-6,
        );
        check(
            |_, vs| sum_to_scalar(&div(&vs[0], &vs[1])),
            vec![a, b],
            1e-5,
        );
    }

    #[test]
    fn unary_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[4, 3], &mut rng).mapv(|v| v + 3.0); // positive for ln/pow
        check(|_, vs| sum_to_scalar(&ln(&vs[0])), vec![x.clone()], 1e-5);
        check(|_, vs| sum_to_scalar(&exp(&vs[0])), vec![x.clone()], 1e-5);
        check(
            |_, vs| sum_to_scalar(&pow_scalar(&vs[0], -0.5)),
            vec![x.clone()],
            1e-5,
        );
        let y = randn(&[5, 2], &mut rng).mapv(|v| v + 0.3); // away from relu kink
        check(|_, vs| sum_to_scalar(&relu(&vs[0])), vec![y.clone()], 1e-5);
        check(|_, vs| sum_to_scalar(&sigmoid(&vs[0])), vec![y.clone()], 1e-5);
        check(|_, vs| sum_to_scalar(&softplus(&vs[0])), vec![y], 1e-5);
    }

    #[test]
    fn matmul_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[4, 2], &mut rng);
        check(
            |_, vs| sum_to_scalar(&matmul(&vs[0], &vs[1])),
            vec![a.clone(), b],
            1e-6,
        );
        check(
            |_, vs| sum_to_scalar(&mean_over(&vs[0], &[1], true)),
            vec![a.clone()],
            1e-6,
        );
        check(
            |_, vs| sum_to_scalar(&transpose2(&vs[0])),
            vec![a.clone()],
            1e-6,
        );
        check(|_, vs| sum_to_scalar(&slice0(&vs[0], 1, 3)), vec![a], 1e-6);
        let c = randn(&[6, 2], &mut rng);
        check(|_, vs| sum_to_scalar(&group_mean(&vs[0], 3)), vec![c], 1e-6);
    }

    #[test]
    fn maximum_and_reshape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&[3, 3], &mut rng);
        let b = randn(&[3, 3], &mut rng);
        check(
            |_, vs| sum_to_scalar(&maximum(&vs[0], &vs[1])),
            vec![a.clone(), b],
            1e-5,
        );
        check(|_, vs| sum_to_scalar(&reshape(&vs[0], &[9])), vec![a], 1e-6);
    }

    #[test]
    fn softmax_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = randn(&[4, 5], &mut rng);
        check(
            |_, vs| {
                let p = softmax_axis(&vs[0], 1);
                let lp = ln(&p);
                sum_to_scalar(&mul(&lp, &lp))
            },
            vec![s.clone()],
            1e-5,
        );
        let mut y = Array2::zeros((4, 5));
        for i in 0..4 {
            y[[i, i % 5]] = 1.0;
        }
        check(
            |_, vs| soft_cross_entropy(&vs[0], &y),
            vec![s.clone()],
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_known_values() {
        let g = Graph::new();
        // uniform scores over 5 classes -> ln 5
        let s = g.leaf(ArrayD::zeros(IxDyn(&[1, 5])));
        let mut y = Array2::zeros((1, 5));
        y[[0, 2]] = 1.0;
        let l = soft_cross_entropy(&s, &y);
        assert!((l.scalar() - 5.0f64.ln()).abs() < 1e-12);
        // scores (2, 0), one-hot on class 0 -> ln(1 + e^-2)
        let s2 = g.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![2.0, 0.0]).unwrap(),
        );
        let mut y2 = Array2::zeros((1, 2));
        y2[[0, 0]] = 1.0;
        let l2 = soft_cross_entropy(&s2, &y2);
        assert!((l2.scalar() - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn pairwise_sqdist_gradient_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[2, 4], &mut rng);
        check(
            |_, vs| sum_to_scalar(&mul(&pairwise_sqdist(&vs[0], &vs[1]), &pairwise_sqdist(&vs[0], &vs[1]))),
            vec![a.clone(), b],
            1e-5,
        );
        // self-distance shares one parent twice
        check(
            |_, vs| sum_to_scalar(&exp(&scale(&pairwise_sqdist(&vs[0], &vs[0]), -0.5))),
            vec![a],
            1e-5,
        );
    }

    #[test]
    fn solve_propagation_gradient_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // small symmetric "affinity" with spectral radius < 1
        let raw = randn(&[4, 4], &mut rng).mapv(|v| v.abs() * 0.1);
        let y = Array2::from_shape_fn((4, 2), |(i, j)| ((i + j) % 2) as f64);
        let yc = y.clone();
        check(
            move |_, vs| {
                let sym = scale(&add(&vs[0], &transpose2(&vs[0])), 0.5);
                let f = solve_propagation(&sym, &yc, 0.9);
                sum_to_scalar(&mul(&f, &f))
            },
            vec![raw],
            1e-5,
        );
        // alpha = 0 -> F = Y
        let g = Graph::new();
        let s = g.leaf(ArrayD::from_shape_fn(IxDyn(&[3, 3]), |_| 0.4));
        let y0 = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64);
        let f = solve_propagation(&s, &y0, 0.0);
        assert_eq!(view2(f.value()).to_owned(), y0);
    }

    #[test]
    fn conv2d_gradients_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&[2, 2, 5, 6], &mut rng);
        let w = randn(&[3, 2, 3, 3], &mut rng);
        let b = randn(&[3], &mut rng);
        {
            let g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let bv = g.leaf(b.clone());
            let out = conv2d(&xv, &wv, &bv, (1, 1));
            assert_eq!(out.shape(), &[2, 3, 5, 6]);
        }
        check(
            |_, vs| sum_to_scalar(&mul(&conv2d(&vs[0], &vs[1], &vs[2], (1, 1)), &conv2d(&vs[0], &vs[1], &vs[2], (1, 1)))),
            vec![x, w, b],
            1e-5,
        );
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        // 1x1x3x3 input, 1x1x2x2 kernel, no padding: hand-checkable
        let g = Graph::new();
        let x = g.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 3, 3]), (1..=9).map(f64::from).collect())
                .unwrap(),
        );
        let w = g.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.0));
        let b = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 0.5));
        let out = conv2d(&x, &w, &b, (0, 0));
        // windows: [1,2,4,5]=12, [2,3,5,6]=16, [4,5,7,8]=24, [5,6,8,9]=28; +bias
        let o = out.value();
        assert_eq!(o.shape(), &[1, 1, 2, 2]);
        assert_eq!(o[IxDyn(&[0, 0, 0, 0])], 12.5);
        assert_eq!(o[IxDyn(&[0, 0, 0, 1])], 16.5);
        assert_eq!(o[IxDyn(&[0, 0, 1, 0])], 24.5);
        assert_eq!(o[IxDyn(&[0, 0, 1, 1])], 28.5);
    }

    #[test]
    fn maxpool_gradients_and_floor_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&[2, 3, 5, 7], &mut rng);
        {
            let g = Graph::new();
            let xv = g.leaf(x.clone());
            let out = maxpool2d(&xv, (2, 2));
            assert_eq!(out.shape(), &[2, 3, 2, 3]); // floor(5/2), floor(7/2)
        }
        check(
            |_, vs| sum_to_scalar(&mul(&maxpool2d(&vs[0], (2, 2)), &maxpool2d(&vs[0], (2, 2)))),
            vec![x],
            1e-5,
        );
    }

    #[test]
    fn batchnorm_train_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&[3, 2, 4, 4], &mut rng);
        let gamma = randn(&[2], &mut rng).mapv(|v| v + 2.0);
        let beta = randn(&[2], &mut rng);
        let rmean = Array1::zeros(2);
        let rvar = Array1::ones(2);
        check(
            move |_, vs| {
                let (y, _) =
                    batchnorm2d(&vs[0], &vs[1], &vs[2], (&rmean, &rvar), 1e-5, BnMode::Train);
                sum_to_scalar(&mul(&y, &y))
            },
            vec![x, gamma, beta],
            2e-5,
        );
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let g = Graph::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 3.0));
        let gamma = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 2.0));
        let beta = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let rmean = Array1::from_elem(1, 1.0);
        let rvar = Array1::from_elem(1, 4.0);
        let (y, stats) = batchnorm2d(&x, &gamma, &beta, (&rmean, &rvar), 0.0, BnMode::Eval);
        assert!(stats.is_none());
        // (3-1)/2 * 2 + 1 = 3
        assert!((y.value()[IxDyn(&[0, 0, 0, 0])] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Graph::new();
        let x = g.leaf(randn(&[4, 3, 5, 5], &mut rng));
        let gamma = g.leaf(ArrayD::ones(IxDyn(&[3])));
        let beta = g.leaf(ArrayD::zeros(IxDyn(&[3])));
        let rm = Array1::zeros(3);
        let rv = Array1::ones(3);
        let (y, stats) = batchnorm2d(&x, &gamma, &beta, (&rm, &rv), 1e-8, BnMode::Train);
        let (bm, bv) = stats.unwrap();
        assert_eq!(bm.len(), 3);
        assert!(bv.iter().all(|&v| v > 0.0));
        for c in 0..3 {
            let lane = view4(y.value()).index_axis(Axis(1), c).to_owned();
            let m = lane.mean().unwrap();
            let v = lane.mapv(|u| (u - m) * (u - m)).mean().unwrap();
            assert!(m.abs() < 1e-10, "channel mean {m}");
            assert!((v - 1.0).abs() < 1e-6, "channel var {v}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = Graph::new();
        let x = g.leaf(randn(&[2, 6, 3, 3], &mut rng).mapv(|v| v * 10.0));
        let p = softmax_axis(&x, 1);
        let sums = p.value().sum_axis(Axis(1));
        for &s in sums.iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_helper_flags_bad_gradient() {
        // A deliberately wrong gradient must be caught.
        let forward = |_: &Graph, ins: &[TensorD]| ins[0][[0]] * ins[0][[0]];
        let bad = |_: &Graph, ins: &[TensorD]| {
            (
                ins[0][[0]] * ins[0][[0]],
                vec![ArrayD::from_elem(IxDyn(&[1]), 1.0)], // should be 2x
            )
        };
        let x = ArrayD::from_elem(IxDyn(&[1]), 3.0);
        let worst = finite_difference_check(&forward, &bad, &[x], 1e-5);
        assert!(worst > 0.5);
    }

    #[test]
    fn scalar_root_required_for_backward() {
        let g = Graph::new();
        let x = g.leaf(arr0(1.0).into_dyn());
        let y = add_scalar(&x, 1.0);
        let grads = g.backward(&y);
        assert_eq!(grads.get(&x).unwrap()[[]], 1.0);
    }
}
