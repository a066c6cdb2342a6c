//! 2-D convolution and max pooling over (N, C, H, W) tensors.
//!
//! Convolution is the cross-correlation form with stride 1 and no padding.
//! Pooling windows are non-overlapping (stride = window); ties inside a
//! window route the gradient to the first maximum in flat scan order.

use crate::scalar::Scalar;
use crate::tensor::tape::{self, grad_enabled};
use crate::tensor::Tensor;

impl<S: Scalar> Tensor<S> {
    /// Convolve (N, C, H, W) input with an (O, C, KH, KW) kernel and optional
    /// (O,) bias; output is (N, O, H-KH+1, W-KW+1).
    pub fn conv2d(&self, kernel: &Tensor<S>, bias: Option<&Tensor<S>>) -> Tensor<S> {
        assert!(
            self.rank() == 4 && kernel.rank() == 4 && self.shape()[1] == kernel.shape()[1],
            "conv2d: shape mismatch {:?} vs {:?}",
            self.shape(),
            kernel.shape()
        );
        let (n, c, h, w) = dims4(self.shape());
        let (o, _, kh, kw) = dims4(kernel.shape());
        assert!(
            kh <= h && kw <= w,
            "conv2d: kernel {:?} larger than input {:?}",
            kernel.shape(),
            self.shape()
        );
        if let Some(b) = bias {
            assert_eq!(
                b.shape(),
                &[o],
                "conv2d: bias shape {:?} does not match {o} output channels",
                b.shape()
            );
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);

        let mut out = vec![S::zero(); n * o * oh * ow];
        self.with_data(|x| {
            kernel.with_data(|k| {
                for in_ in 0..n {
                    for oc in 0..o {
                        for i in 0..oh {
                            for j in 0..ow {
                                let mut acc = S::zero();
                                for ic in 0..c {
                                    for di in 0..kh {
                                        for dj in 0..kw {
                                            let xv = x[((in_ * c + ic) * h + i + di) * w + j + dj];
                                            let kv = k[((oc * c + ic) * kh + di) * kw + dj];
                                            acc = acc + xv * kv;
                                        }
                                    }
                                }
                                out[((in_ * o + oc) * oh + i) * ow + j] = acc;
                            }
                        }
                    }
                }
            })
        });
        if let Some(b) = bias {
            b.with_data(|bd| {
                for in_ in 0..n {
                    for oc in 0..o {
                        for p in 0..oh * ow {
                            let off = ((in_ * o + oc) * oh * ow) + p;
                            out[off] = out[off] + bd[oc];
                        }
                    }
                }
            });
        }

        let rg = grad_enabled()
            && (self.requires_grad()
                || kernel.requires_grad()
                || bias.map(|b| b.requires_grad()).unwrap_or(false));
        let out = Tensor::op_output(vec![n, o, oh, ow], out, rg);

        let mut inputs = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let (xc, kc) = (self.clone(), kernel.clone());
        let has_bias = bias.is_some();
        tape_record_if(&out, inputs, move |g| {
            let mut gx = vec![S::zero(); n * c * h * w];
            let mut gk = vec![S::zero(); o * c * kh * kw];
            let mut gb = vec![S::zero(); o];
            g.with_data(|gd| {
                xc.with_data(|x| {
                    kc.with_data(|k| {
                        for in_ in 0..n {
                            for oc in 0..o {
                                for i in 0..oh {
                                    for j in 0..ow {
                                        let gv = gd[((in_ * o + oc) * oh + i) * ow + j];
                                        gb[oc] = gb[oc] + gv;
                                        for ic in 0..c {
                                            for di in 0..kh {
                                                for dj in 0..kw {
                                                    let x_off =
                                                        ((in_ * c + ic) * h + i + di) * w + j + dj;
                                                    let k_off =
                                                        ((oc * c + ic) * kh + di) * kw + dj;
                                                    gx[x_off] = gx[x_off] + gv * k[k_off];
                                                    gk[k_off] = gk[k_off] + gv * x[x_off];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    })
                })
            });
            let mut grads = vec![
                Tensor::from_vec(vec![n, c, h, w], gx),
                Tensor::from_vec(vec![o, c, kh, kw], gk),
            ];
            if has_bias {
                grads.push(Tensor::from_vec(vec![o], gb));
            }
            grads
        });
        out
    }

    /// Non-overlapping max pooling with a k x k window over (N, C, H, W).
    /// H and W must be divisible by k.
    pub fn max_pool2d(&self, k: usize) -> Tensor<S> {
        assert!(self.rank() == 4, "max_pool2d: input rank {:?}", self.shape());
        assert!(k > 0, "max_pool2d: zero window");
        let (n, c, h, w) = dims4(self.shape());
        assert!(
            h % k == 0 && w % k == 0,
            "max_pool2d: input {h}x{w} not divisible by window {k}"
        );
        let (oh, ow) = (h / k, w / k);

        let mut out = vec![S::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        self.with_data(|x| {
            for nc in 0..n * c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = S::neg_infinity();
                        let mut best_off = 0;
                        for di in 0..k {
                            for dj in 0..k {
                                let off = (nc * h + i * k + di) * w + j * k + dj;
                                if x[off] > best {
                                    best = x[off];
                                    best_off = off;
                                }
                            }
                        }
                        let o_off = (nc * oh + i) * ow + j;
                        out[o_off] = best;
                        argmax[o_off] = best_off;
                    }
                }
            }
        });

        let rg = grad_enabled() && self.requires_grad();
        let out = Tensor::op_output(vec![n, c, oh, ow], out, rg);
        let in_shape = self.shape().to_vec();
        let in_len = self.len();
        tape_record_if(&out, vec![self.clone()], move |g| {
            let mut gx = vec![S::zero(); in_len];
            g.with_data(|gd| {
                for (o_off, &a_off) in argmax.iter().enumerate() {
                    gx[a_off] = gx[a_off] + gd[o_off];
                }
            });
            vec![Tensor::from_vec(in_shape.clone(), gx)]
        });
        out
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn tape_record_if<S: Scalar>(
    out: &Tensor<S>,
    inputs: Vec<Tensor<S>>,
    back: impl Fn(&Tensor<S>) -> Vec<Tensor<S>> + 'static,
) {
    if out.requires_grad() {
        tape::record(out, inputs, back);
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::tape;
    use crate::tensor::Tensor;

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]);
        let k = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]);
        let y = x.conv2d(&k, None);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![1., 2., 3., 4.]);
    }

    #[test]
    fn conv_known_values_with_bias() {
        // 3x3 input, 2x2 averaging-style kernel, bias 10
        let x = Tensor::from_vec(
            vec![1, 1, 3, 3],
            vec![1., 2., 3., 4., 5., 6., 7., 8., 9.],
        );
        let k = Tensor::from_vec(vec![1, 1, 2, 2], vec![1., 1., 1., 1.]);
        let b = Tensor::from_vec(vec![1], vec![10.0]);
        let y = x.conv2d(&k, Some(&b));
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![22., 26., 34., 38.]);
    }

    #[test]
    fn conv_grads_accumulate_channels() {
        tape::clear::<f64>();
        let x = Tensor::variable(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]);
        let k = Tensor::variable(vec![1, 1, 2, 2], vec![0.5, -0.5, 1.0, 2.0]);
        let b = Tensor::variable(vec![1], vec![0.0]);
        let y = x.conv2d(&k, Some(&b));
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.5, -0.5, 1.0, 2.0]);
        assert_eq!(k.grad().unwrap(), vec![1., 2., 3., 4.]);
        assert_eq!(b.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn pool_takes_window_max_and_routes_first_tie() {
        tape::clear::<f64>();
        let x = Tensor::variable(
            vec![1, 1, 2, 4],
            vec![5., 5., 1., 2., 3., 0., 2., 2.],
        );
        let y = x.max_pool2d(2);
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.to_vec(), vec![5., 2.]);
        y.sum_all().backward().unwrap();
        // ties (two 5s, three 2s) go to the earliest flat offset in each window
        assert_eq!(x.grad().unwrap(), vec![1., 0., 0., 1., 0., 0., 0., 0.]);
    }

    #[test]
    #[should_panic(expected = "not divisible")]
    fn pool_requires_divisible_extent() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 3, 4]);
        let _ = x.max_pool2d(2);
    }
}
