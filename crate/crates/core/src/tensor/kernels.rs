//! Index arithmetic shared by tensor values and tape ops.

use crate::error::{Error, Result};

/// Neumaier-compensated sum, so scalar losses carry an error of about one
/// rounding regardless of the number of terms.
pub(crate) fn compensated_sum<T: num_traits::Float>(values: impl IntoIterator<Item = T>) -> T {
    let (mut sum, mut carry) = (T::zero(), T::zero());
    for v in values {
        let t = sum + v;
        carry = carry + if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn check_permutation(shape: &[usize], axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() {
        return Err(Error::shape(
            "permute",
            format!("axes {axes:?} do not match rank of {shape:?}"),
        ));
    }
    for &a in axes {
        if a >= shape.len() || seen[a] {
            return Err(Error::shape("permute", format!("invalid axes {axes:?}")));
        }
        seen[a] = true;
    }
    Ok(())
}

/// Calls `f(out_offset, in_offset)` for every element of the permuted view.
fn for_each_permuted(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for out in 0..total {
        f(out, src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn permute<T: Copy + Default>(
    shape: &[usize],
    data: &[T],
    axes: &[usize],
) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let rank = shape.len();
    // trailing axes left in place are copied as contiguous runs
    let kept = (0..rank).rev().take_while(|&d| axes[d] == d).count();
    let lead = rank - kept;
    let run: usize = shape[lead..].iter().product();
    if kept == rank || run == 0 {
        return (out_shape, data.to_vec());
    }
    let mut out = Vec::with_capacity(data.len());
    if run == 1 {
        for_each_permuted(shape, axes, |_, i| out.push(data[i]));
    } else {
        let lead_shape: Vec<usize> = shape[..lead].to_vec();
        for_each_permuted(&lead_shape, &axes[..lead], |_, i| {
            out.extend_from_slice(&data[i * run..(i + 1) * run]);
        });
    }
    (out_shape, out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Length of `part` when it broadcasts against `full` by repetition alone:
/// its leading axes are 1 and the remaining axes equal those of `full`.
pub(crate) fn suffix_broadcast(full: &[usize], part: &[usize]) -> Option<usize> {
    if full.len() != part.len() {
        return None;
    }
    let first = part.iter().position(|&p| p != 1).unwrap_or(part.len());
    (part[first..] == full[first..]).then(|| part.iter().product())
}

/// For every element of a tensor of shape `full`, the offset of the element
/// of `part` it reads when `part` (same rank, each dim 1 or equal) is
/// broadcast against it.
pub(crate) fn broadcast_map(full: &[usize], part: &[usize]) -> Result<Vec<usize>> {
    if full.len() != part.len()
        || full.iter().zip(part).any(|(&f, &p)| p != 1 && p != f)
    {
        return Err(Error::shape(
            "add_broadcast",
            format!("{part:?} does not broadcast to {full:?}"),
        ));
    }
    let part_strides = strides(part);
    let step: Vec<usize> = part
        .iter()
        .zip(&part_strides)
        .map(|(&p, &s)| if p == 1 { 0 } else { s })
        .collect();
    let total: usize = full.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; full.len()];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for d in (0..full.len()).rev() {
            idx[d] += 1;
            src += step[d];
            if idx[d] < full[d] {
                break;
            }
            src -= step[d] * full[d];
            idx[d] = 0;
        }
    }
    Ok(map)
}

/// Source offset for every output element of a torus roll of `axes` by
/// `shift`: `out[.., (i + shift) mod n, ..] = x[.., i, ..]`.
pub(crate) fn roll_sources(shape: &[usize], axes: &[usize], shift: isize) -> Vec<usize> {
    let st = strides(shape);
    let total: usize = shape.iter().product();
    let mut rolled = vec![false; shape.len()];
    for &a in axes {
        rolled[a] = true;
    }
    let mut idx = vec![0usize; shape.len()];
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        let mut src = 0usize;
        for d in 0..shape.len() {
            let i = if rolled[d] {
                let n = shape[d] as isize;
                (idx[d] as isize - shift).rem_euclid(n) as usize
            } else {
                idx[d]
            };
            src += i * st[d];
        }
        out.push(src);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
