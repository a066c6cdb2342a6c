//! Shape arithmetic: row-major strides and trailing-dimension broadcasting.

use crate::error::{Error, Result};

/// Row-major strides; a rank-0 tensor has no strides and one element.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Broadcast shape of two operands under trailing-dimension alignment:
/// missing dimensions count as 1, and each aligned pair must be equal or
/// contain a 1.
pub fn broadcast_shapes(op: &'static str, left: &[usize], right: &[usize]) -> Result<Vec<usize>> {
    let rank = left.len().max(right.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let l = dim_from_end(left, rank - 1 - i);
        let r = dim_from_end(right, rank - 1 - i);
        out[i] = if l == r || r == 1 {
            l
        } else if l == 1 {
            r
        } else {
            return Err(Error::ShapeMismatch {
                op,
                left: left.to_vec(),
                right: right.to_vec(),
            });
        };
    }
    Ok(out)
}

fn dim_from_end(shape: &[usize], back: usize) -> usize {
    if back < shape.len() {
        shape[shape.len() - 1 - back]
    } else {
        1
    }
}

/// Strides for reading a tensor of `shape` as if it had `out_shape`:
/// broadcast dimensions get stride 0 so the same element repeats.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut out = vec![0; rank];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 && out_shape[offset + i] != 1 {
            0
        } else {
            strides[i]
        };
    }
    out
}

/// Walks every flat index of `shape` yielding the corresponding offsets for
/// two broadcast operands. An odometer over the output shape; O(1) amortized
/// per step.
pub struct BroadcastZip {
    shape: Vec<usize>,
    idx: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    a_off: usize,
    b_off: usize,
    remaining: usize,
}

impl BroadcastZip {
    pub fn new(out_shape: &[usize], a_shape: &[usize], b_shape: &[usize]) -> Self {
        BroadcastZip {
            idx: vec![0; out_shape.len()],
            a_strides: broadcast_strides(a_shape, out_shape),
            b_strides: broadcast_strides(b_shape, out_shape),
            a_off: 0,
            b_off: 0,
            remaining: numel(out_shape),
            shape: out_shape.to_vec(),
        }
    }
}

impl Iterator for BroadcastZip {
    /// (a_offset, b_offset)
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let item = (self.a_off, self.b_off);
        // advance odometer from the innermost dimension
        for d in (0..self.shape.len()).rev() {
            self.idx[d] += 1;
            self.a_off += self.a_strides[d];
            self.b_off += self.b_strides[d];
            if self.idx[d] < self.shape[d] {
                break;
            }
            self.a_off -= self.a_strides[d] * self.shape[d];
            self.b_off -= self.b_strides[d] * self.shape[d];
            self.idx[d] = 0;
        }
        Some(item)
    }
}
