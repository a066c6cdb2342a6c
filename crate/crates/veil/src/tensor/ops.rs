//! Elementwise, matrix, and reduction operations with their backward rules.
//!
//! Binary elementwise ops broadcast under trailing-dimension alignment and
//! panic on incompatible shapes (the message names both shapes); gradients of
//! broadcast operands are summed back to the operand's shape. Subgradients at
//! kinks (`abs`, `relu` at 0, ties in `max`) are 0 for the kink itself, and
//! ties route to the first maximum in flat order.

use crate::scalar::Scalar;
use crate::tensor::shape::{broadcast_shapes, numel, BroadcastZip};
use crate::tensor::tape::{self, grad_enabled};
use crate::tensor::Tensor;

/// Sum `t` down to `target` (the reverse of broadcasting `target` up to
/// `t.shape()`).
pub(crate) fn reduce_to_shape<S: Scalar>(t: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    if t.shape() == target {
        return t.clone();
    }
    let mut out = vec![S::zero(); numel(target)];
    t.with_data(|data| {
        for (tgt_off, t_off) in BroadcastZip::new(t.shape(), target, t.shape()) {
            out[tgt_off] = out[tgt_off] + data[t_off];
        }
    });
    Tensor::from_vec(target.to_vec(), out)
}

/// Repeat `t` up to `target` shape (must be broadcast-compatible).
fn expand_to_shape<S: Scalar>(t: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    if t.shape() == target {
        return t.clone();
    }
    let mut out = vec![S::zero(); numel(target)];
    t.with_data(|data| {
        for (t_off, out_off) in BroadcastZip::new(target, t.shape(), target) {
            out[out_off] = data[t_off];
        }
    });
    Tensor::from_vec(target.to_vec(), out)
}

fn record_if_needed<S: Scalar>(
    out: &Tensor<S>,
    inputs: Vec<Tensor<S>>,
    back: impl Fn(&Tensor<S>) -> Vec<Tensor<S>> + 'static,
) {
    if out.requires_grad() {
        tape::record(out, inputs, back);
    }
}

fn broadcast_map<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Tensor<S> {
    let out_shape = match broadcast_shapes(op, a.shape(), b.shape()) {
        Ok(s) => s,
        Err(e) => panic!("{e}"),
    };
    let mut out = Vec::with_capacity(numel(&out_shape));
    a.with_data(|ad| {
        b.with_data(|bd| {
            for (ao, bo) in BroadcastZip::new(&out_shape, a.shape(), b.shape()) {
                out.push(f(ad[ao], bd[bo]));
            }
        })
    });
    let rg = grad_enabled() && (a.requires_grad() || b.requires_grad());
    Tensor::op_output(out_shape, out, rg)
}

fn unary_map<S: Scalar>(a: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    let out = a.with_data(|d| d.iter().map(|&x| f(x)).collect());
    let rg = grad_enabled() && a.requires_grad();
    Tensor::op_output(a.shape().to_vec(), out, rg)
}

pub(crate) fn add_impl<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let out = broadcast_map("add", a, b, |x, y| x + y);
    let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
    record_if_needed(&out, vec![a.clone(), b.clone()], move |g| {
        vec![reduce_to_shape(g, &ash), reduce_to_shape(g, &bsh)]
    });
    out
}

pub(crate) fn sub_impl<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let out = broadcast_map("sub", a, b, |x, y| x - y);
    let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
    record_if_needed(&out, vec![a.clone(), b.clone()], move |g| {
        vec![reduce_to_shape(g, &ash), reduce_to_shape(&g.neg(), &bsh)]
    });
    out
}

pub(crate) fn mul_impl<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let out = broadcast_map("mul", a, b, |x, y| x * y);
    let (ac, bc) = (a.clone(), b.clone());
    record_if_needed(&out, vec![a.clone(), b.clone()], move |g| {
        vec![
            reduce_to_shape(&mul_impl(g, &bc), ac.shape()),
            reduce_to_shape(&mul_impl(g, &ac), bc.shape()),
        ]
    });
    out
}

/// Division records no special cases: 0/0 and x/0 propagate NaN/inf through
/// forward values and gradients alike.
pub(crate) fn div_impl<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let out = broadcast_map("div", a, b, |x, y| x / y);
    let (ac, bc) = (a.clone(), b.clone());
    record_if_needed(&out, vec![a.clone(), b.clone()], move |g| {
        let ga = reduce_to_shape(&div_impl(g, &bc), ac.shape());
        let gb = reduce_to_shape(
            &div_impl(&mul_impl(g, &ac).neg(), &mul_impl(&bc, &bc)),
            bc.shape(),
        );
        vec![ga, gb]
    });
    out
}

impl<S: Scalar> Tensor<S> {
    pub fn neg(&self) -> Tensor<S> {
        let out = unary_map(self, |x| -x);
        record_if_needed(&out, vec![self.clone()], move |g| vec![g.neg()]);
        out
    }

    pub fn exp(&self) -> Tensor<S> {
        let out = unary_map(self, |x| x.exp());
        let oc = out.clone();
        record_if_needed(&out, vec![self.clone()], move |g| vec![mul_impl(g, &oc)]);
        out
    }

    /// Natural logarithm.
    pub fn ln(&self) -> Tensor<S> {
        let out = unary_map(self, |x| x.ln());
        let ac = self.clone();
        record_if_needed(&out, vec![self.clone()], move |g| vec![div_impl(g, &ac)]);
        out
    }

    pub fn sqrt(&self) -> Tensor<S> {
        let out = unary_map(self, |x| x.sqrt());
        let oc = out.clone();
        record_if_needed(&out, vec![self.clone()], move |g| {
            let half = Tensor::scalar(S::from_f64(0.5));
            vec![div_impl(&mul_impl(g, &half), &oc)]
        });
        out
    }

    /// |x|; subgradient 0 at x = 0.
    pub fn abs(&self) -> Tensor<S> {
        let out = unary_map(self, |x| x.abs());
        let ac = self.clone();
        record_if_needed(&out, vec![self.clone()], move |g| {
            let sign = unary_map(&ac, |x| {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            });
            vec![mul_impl(g, &sign)]
        });
        out
    }

    /// max(x, 0); subgradient 0 at x = 0.
    pub fn relu(&self) -> Tensor<S> {
        let out = unary_map(self, |x| if x > S::zero() { x } else { S::zero() });
        let ac = self.clone();
        record_if_needed(&out, vec![self.clone()], move |g| {
            let mask = unary_map(&ac, |x| if x > S::zero() { S::one() } else { S::zero() });
            vec![mul_impl(g, &mask)]
        });
        out
    }

    pub fn add_scalar(&self, v: S) -> Tensor<S> {
        let out = unary_map(self, |x| x + v);
        record_if_needed(&out, vec![self.clone()], move |g| vec![g.clone()]);
        out
    }

    pub fn mul_scalar(&self, v: S) -> Tensor<S> {
        let out = unary_map(self, |x| x * v);
        record_if_needed(&out, vec![self.clone()], move |g| vec![g.mul_scalar(v)]);
        out
    }

    pub fn div_scalar(&self, v: S) -> Tensor<S> {
        let out = unary_map(self, |x| x / v);
        record_if_needed(&out, vec![self.clone()], move |g| vec![g.div_scalar(v)]);
        out
    }

    /// Rank-2 matrix product.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Tensor<S> {
        assert!(
            self.rank() == 2 && rhs.rank() == 2 && self.shape()[1] == rhs.shape()[0],
            "matmul: shape mismatch {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = rhs.shape()[1];
        let mut out = vec![S::zero(); m * n];
        self.with_data(|ad| {
            rhs.with_data(|bd| {
                for i in 0..m {
                    for p in 0..k {
                        let a_ip = ad[i * k + p];
                        for j in 0..n {
                            out[i * n + j] = out[i * n + j] + a_ip * bd[p * n + j];
                        }
                    }
                }
            })
        });
        let rg = grad_enabled() && (self.requires_grad() || rhs.requires_grad());
        let out = Tensor::op_output(vec![m, n], out, rg);
        let (ac, bc) = (self.clone(), rhs.clone());
        record_if_needed(&out, vec![self.clone(), rhs.clone()], move |g| {
            vec![g.matmul(&bc.t()), ac.t().matmul(g)]
        });
        out
    }

    /// Rank-2 transpose.
    pub fn t(&self) -> Tensor<S> {
        assert!(self.rank() == 2, "t(): tensor of shape {:?} is not rank 2", self.shape());
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        self.with_data(|d| {
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = d[i * n + j];
                }
            }
        });
        let rg = grad_enabled() && self.requires_grad();
        let out = Tensor::op_output(vec![n, m], out, rg);
        record_if_needed(&out, vec![self.clone()], move |g| vec![g.t()]);
        out
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Tensor<S> {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            self.len(),
            "reshape: {:?} incompatible with {:?}",
            self.shape(),
            shape
        );
        let rg = grad_enabled() && self.requires_grad();
        let out = Tensor::op_output(shape, self.to_vec(), rg);
        let orig = self.shape().to_vec();
        record_if_needed(&out, vec![self.clone()], move |g| vec![g.reshape(orig.clone())]);
        out
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let all: Vec<usize> = (0..self.rank()).collect();
        self.reduce_axes(&all, false, Reduce::Sum)
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let all: Vec<usize> = (0..self.rank()).collect();
        self.reduce_axes(&all, false, Reduce::Mean)
    }

    pub fn max_all(&self) -> Tensor<S> {
        let all: Vec<usize> = (0..self.rank()).collect();
        self.reduce_axes(&all, false, Reduce::Max)
    }

    /// Sum over `axes`; the reduced axes are removed from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor<S> {
        self.reduce_axes(axes, false, Reduce::Sum)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Tensor<S> {
        self.reduce_axes(axes, false, Reduce::Mean)
    }

    pub fn max_axes(&self, axes: &[usize]) -> Tensor<S> {
        self.reduce_axes(axes, false, Reduce::Max)
    }

    pub(crate) fn sum_keepdim(&self, axes: &[usize]) -> Tensor<S> {
        self.reduce_axes(axes, true, Reduce::Sum)
    }

    pub(crate) fn max_keepdim(&self, axes: &[usize]) -> Tensor<S> {
        self.reduce_axes(axes, true, Reduce::Max)
    }

    fn reduce_axes(&self, axes: &[usize], keepdim: bool, kind: Reduce) -> Tensor<S> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        for &ax in axes {
            assert!(
                ax < rank && !seen[ax],
                "reduce: invalid axis {ax} for rank {rank}"
            );
            seen[ax] = true;
        }
        // virtual shape keeps reduced axes as size-1 dims
        let virt: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .map(|(i, &d)| if seen[i] { 1 } else { d })
            .collect();
        let removed: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !seen[*i])
            .map(|(_, &d)| d)
            .collect();
        let out_len = numel(&virt);
        let count = S::from_f64((self.len() / out_len.max(1)) as f64);

        let mut acc = vec![S::zero(); out_len];
        let mut argmax: Vec<usize> = Vec::new();
        let mut seen_any = vec![false; out_len];
        if matches!(kind, Reduce::Max) {
            argmax = vec![0; out_len];
        }
        self.with_data(|d| {
            for (v_off, a_off) in BroadcastZip::new(self.shape(), &virt, self.shape()) {
                match kind {
                    Reduce::Sum | Reduce::Mean => acc[v_off] = acc[v_off] + d[a_off],
                    Reduce::Max => {
                        // strict comparison: first maximum in flat order wins
                        if !seen_any[v_off] || d[a_off] > acc[v_off] {
                            acc[v_off] = d[a_off];
                            argmax[v_off] = a_off;
                            seen_any[v_off] = true;
                        }
                    }
                }
            }
        });
        if matches!(kind, Reduce::Mean) {
            for v in acc.iter_mut() {
                *v = *v / count;
            }
        }

        let out_shape = if keepdim { virt.clone() } else { removed };
        let rg = grad_enabled() && self.requires_grad();
        let out = Tensor::op_output(out_shape, acc, rg);

        let in_shape = self.shape().to_vec();
        let in_len = self.len();
        record_if_needed(&out, vec![self.clone()], move |g| {
            let g_virt = g.reshape(virt.clone());
            let gin = match kind {
                Reduce::Sum => expand_to_shape(&g_virt, &in_shape),
                Reduce::Mean => expand_to_shape(&g_virt, &in_shape).div_scalar(count),
                Reduce::Max => {
                    let mut data = vec![S::zero(); in_len];
                    g_virt.with_data(|gd| {
                        for (v_off, &a_off) in argmax.iter().enumerate() {
                            data[a_off] = data[a_off] + gd[v_off];
                        }
                    });
                    Tensor::from_vec(in_shape.clone(), data)
                }
            };
            vec![gin]
        });
        out
    }

    /// Select along the last axis: `self` has shape (..., K), `index` has the
    /// batch shape (...) and holds integral class indices already validated by
    /// the caller. Gradients scatter back into the selected slots.
    pub(crate) fn gather_last(&self, index: &Tensor<S>) -> Tensor<S> {
        assert!(self.rank() >= 1, "gather_last on rank-0 tensor");
        let k = self.shape()[self.rank() - 1];
        let batch: Vec<usize> = self.shape()[..self.rank() - 1].to_vec();
        assert_eq!(
            index.shape(),
            &batch[..],
            "gather_last: index shape {:?} does not match batch shape {:?}",
            index.shape(),
            batch
        );
        let idx: Vec<usize> = index.with_data(|d| {
            d.iter()
                .map(|v| {
                    let i = v.into_f64();
                    debug_assert!(i >= 0.0 && (i as usize) < k && i.fract() == 0.0);
                    i as usize
                })
                .collect()
        });
        let out_data: Vec<S> =
            self.with_data(|d| idx.iter().enumerate().map(|(row, &i)| d[row * k + i]).collect());
        let rg = grad_enabled() && self.requires_grad();
        let out = Tensor::op_output(batch, out_data, rg);
        let in_shape = self.shape().to_vec();
        let in_len = self.len();
        record_if_needed(&out, vec![self.clone()], move |g| {
            let mut data = vec![S::zero(); in_len];
            g.with_data(|gd| {
                for (row, &i) in idx.iter().enumerate() {
                    data[row * k + i] = gd[row];
                }
            });
            vec![Tensor::from_vec(in_shape.clone(), data)]
        });
        out
    }
}

enum Reduce {
    Sum,
    Mean,
    Max,
}

macro_rules! impl_binary_op {
    ($trait:ident, $method:ident, $impl_fn:path) => {
        impl<S: Scalar> std::ops::$trait<&Tensor<S>> for &Tensor<S> {
            type Output = Tensor<S>;
            fn $method(self, rhs: &Tensor<S>) -> Tensor<S> {
                $impl_fn(self, rhs)
            }
        }

        impl<S: Scalar> std::ops::$trait<Tensor<S>> for &Tensor<S> {
            type Output = Tensor<S>;
            fn $method(self, rhs: Tensor<S>) -> Tensor<S> {
                $impl_fn(self, &rhs)
            }
        }

        impl<S: Scalar> std::ops::$trait<&Tensor<S>> for Tensor<S> {
            type Output = Tensor<S>;
            fn $method(self, rhs: &Tensor<S>) -> Tensor<S> {
                $impl_fn(&self, rhs)
            }
        }

        impl<S: Scalar> std::ops::$trait<Tensor<S>> for Tensor<S> {
            type Output = Tensor<S>;
            fn $method(self, rhs: Tensor<S>) -> Tensor<S> {
                $impl_fn(&self, &rhs)
            }
        }
    };
}

impl_binary_op!(Add, add, add_impl);
impl_binary_op!(Sub, sub, sub_impl);
impl_binary_op!(Mul, mul, mul_impl);
impl_binary_op!(Div, div, div_impl);

macro_rules! impl_scalar_op {
    ($trait:ident, $method:ident, $tensor_method:ident) => {
        impl<S: Scalar> std::ops::$trait<S> for &Tensor<S> {
            type Output = Tensor<S>;
            fn $method(self, rhs: S) -> Tensor<S> {
                self.$tensor_method(rhs)
            }
        }

        impl<S: Scalar> std::ops::$trait<S> for Tensor<S> {
            type Output = Tensor<S>;
            fn $method(self, rhs: S) -> Tensor<S> {
                self.$tensor_method(rhs)
            }
        }
    };
}

impl_scalar_op!(Add, add, add_scalar);
impl_scalar_op!(Mul, mul, mul_scalar);
impl_scalar_op!(Div, div, div_scalar);

impl<S: Scalar> std::ops::Sub<S> for &Tensor<S> {
    type Output = Tensor<S>;
    fn sub(self, rhs: S) -> Tensor<S> {
        self.add_scalar(-rhs)
    }
}

impl<S: Scalar> std::ops::Sub<S> for Tensor<S> {
    type Output = Tensor<S>;
    fn sub(self, rhs: S) -> Tensor<S> {
        self.add_scalar(-rhs)
    }
}

impl<S: Scalar> std::ops::Neg for &Tensor<S> {
    type Output = Tensor<S>;
    fn neg(self) -> Tensor<S> {
        Tensor::neg(self)
    }
}

impl<S: Scalar> std::ops::Neg for Tensor<S> {
    type Output = Tensor<S>;
    fn neg(self) -> Tensor<S> {
        Tensor::neg(&self)
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::tape;
    use crate::tensor::Tensor;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec())
    }

    fn var(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::variable(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn broadcast_add_row_vector() {
        // (2,3) + (3,)
        let a = t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t64(&[3], &[10., 20., 30.]);
        let c = &a + &b;
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_vec(), vec![11., 22., 33., 14., 25., 36.]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn incompatible_broadcast_panics() {
        let a = t64(&[2, 3], &[0.; 6]);
        let b = t64(&[2], &[0.; 2]);
        let _ = &a + &b;
    }

    #[test]
    fn broadcast_grad_sums_over_expanded_dims() {
        tape::clear::<f64>();
        let a = var(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = var(&[3], &[1., 1., 1.]);
        let loss = (&a * &b).sum_all();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.; 6]);
        // each b element participates in two products
        assert_eq!(b.grad().unwrap(), vec![1. + 4., 2. + 5., 3. + 6.]);
    }

    #[test]
    fn backward_twice_doubles_grads() {
        tape::clear::<f64>();
        let x = var(&[], &[2.0]);
        let y = x.mul_scalar(3.0);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn grad_accumulates_across_reuse() {
        tape::clear::<f64>();
        // y = x*x + x  =>  dy/dx = 2x + 1
        let x = var(&[], &[3.0]);
        let y = &(&x * &x) + &x;
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn no_grad_scope_detaches() {
        tape::clear::<f64>();
        let x = var(&[], &[2.0]);
        let y = tape::no_grad(|| x.mul_scalar(3.0));
        assert!(!y.requires_grad());
        assert!(y.backward().is_err());
    }

    #[test]
    fn relu_and_abs_subgradients_at_zero() {
        tape::clear::<f64>();
        let x = var(&[3], &[-1.0, 0.0, 2.0]);
        let y = x.relu().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);

        let z = var(&[3], &[-1.0, 0.0, 2.0]);
        let w = z.abs().sum_all();
        w.backward().unwrap();
        assert_eq!(z.grad().unwrap(), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_spreads_gradient() {
        tape::clear::<f64>();
        let x = var(&[4], &[1., 2., 3., 4.]);
        x.mean_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn max_ties_route_to_first_flat_index() {
        tape::clear::<f64>();
        let x = var(&[4], &[1.0, 7.0, 7.0, 3.0]);
        x.max_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_axes_reduces_correct_axis() {
        let x = t64(&[2, 3], &[1., 5., 2., 4., 0., 9.]);
        let m0 = x.max_axes(&[0]);
        assert_eq!(m0.shape(), &[3]);
        assert_eq!(m0.to_vec(), vec![4., 5., 9.]);
        let m1 = x.max_axes(&[1]);
        assert_eq!(m1.to_vec(), vec![5., 9.]);
    }

    #[test]
    fn matmul_values_and_grads() {
        tape::clear::<f64>();
        let a = var(&[2, 2], &[1., 2., 3., 4.]);
        let b = var(&[2, 1], &[5., 6.]);
        let c = a.matmul(&b);
        assert_eq!(c.to_vec(), vec![17., 39.]);
        c.sum_all().backward().unwrap();
        // dL/da = 1 * b^T rows
        assert_eq!(a.grad().unwrap(), vec![5., 6., 5., 6.]);
        assert_eq!(b.grad().unwrap(), vec![1. + 3., 2. + 4.]);
    }

    #[test]
    fn division_propagates_nonfinite() {
        let a = t64(&[2], &[1.0, 0.0]);
        let b = t64(&[2], &[0.0, 0.0]);
        let c = &a / &b;
        let v = c.to_vec();
        assert!(v[0].is_infinite());
        assert!(v[1].is_nan());
    }

    #[test]
    fn reshape_round_trip_preserves_order() {
        tape::clear::<f64>();
        let x = var(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let y = x.reshape(vec![3, 2]);
        assert_eq!(y.to_vec(), vec![1., 2., 3., 4., 5., 6.]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.; 6]);
    }

    #[test]
    fn gather_last_selects_and_scatters() {
        tape::clear::<f64>();
        let logits = var(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let idx = t64(&[2], &[2.0, 0.0]);
        let picked = logits.gather_last(&idx);
        assert_eq!(picked.to_vec(), vec![3.0, 4.0]);
        picked.sum_all().backward().unwrap();
        assert_eq!(logits.grad().unwrap(), vec![0., 0., 1., 1., 0., 0.]);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            tape::clear::<f64>();
            let x = var(&[3], &[0.3, -1.2, 2.7]);
            let y = var(&[3], &[1.1, 0.4, -0.6]);
            let loss = (&(&x * &y).exp() + &x.abs()).sum_all();
            loss.backward().unwrap();
            (x.grad().unwrap(), y.grad().unwrap())
        };
        let (gx1, gy1) = run();
        let (gx2, gy2) = run();
        for (a, b) in gx1.iter().zip(&gx2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in gy1.iter().zip(&gy2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_instantiation_works() {
        tape::clear::<f32>();
        let x: Tensor<f32> = Tensor::variable(vec![2], vec![1.0, 2.0]);
        let y = (&x * &x).sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }
}
