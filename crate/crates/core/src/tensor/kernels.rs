//! Raw loops behind the graph primitives: broadcasting and matrix products.

/// Broadcast two shapes with trailing-dimension alignment.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `shape` when viewed as broadcast to `out`; broadcast
/// dimensions get stride zero.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

#[derive(Clone, Copy)]
enum Layout {
    Same,
    Scalar,
    /// Operand equals the trailing dimensions of the output; index is `o % len`.
    Suffix(usize),
    General,
}

fn layout(shape: &[usize], out: &[usize]) -> Layout {
    let numel: usize = shape.iter().product();
    if shape == out {
        Layout::Same
    } else if numel == 1 {
        Layout::Scalar
    } else if shape.len() <= out.len() && out[out.len() - shape.len()..] == *shape {
        Layout::Suffix(numel)
    } else {
        Layout::General
    }
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast
/// output.
pub(crate) fn for_each_broadcast(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out.iter().product();
    match (layout(a, out), layout(b, out)) {
        (Layout::Same, Layout::Same) => (0..numel).for_each(|o| f(o, o, o)),
        (Layout::Same, Layout::Scalar) => (0..numel).for_each(|o| f(o, o, 0)),
        (Layout::Scalar, Layout::Same) => (0..numel).for_each(|o| f(o, 0, o)),
        (Layout::Same, Layout::Suffix(n)) => (0..numel).for_each(|o| f(o, o, o % n)),
        (Layout::Suffix(n), Layout::Same) => (0..numel).for_each(|o| f(o, o % n, o)),
        _ => {
            let sa = broadcast_strides(a, out);
            let sb = broadcast_strides(b, out);
            let nd = out.len();
            let mut idx = vec![0usize; nd];
            let (mut ia, mut ib) = (0usize, 0usize);
            for o in 0..numel {
                f(o, ia, ib);
                for d in (0..nd).rev() {
                    idx[d] += 1;
                    ia += sa[d];
                    ib += sb[d];
                    if idx[d] < out[d] {
                        break;
                    }
                    ia -= sa[d] * out[d];
                    ib -= sb[d] * out[d];
                    idx[d] = 0;
                }
            }
        }
    }
}

/// Sums a gradient of shape `out` down to the broadcast source `shape`.
pub(crate) fn reduce_to(grad: &[f64], out: &[usize], shape: &[usize]) -> Vec<f64> {
    let numel: usize = shape.iter().product();
    match layout(shape, out) {
        Layout::Same => grad.to_vec(),
        Layout::Scalar => vec![grad.iter().sum()],
        Layout::Suffix(n) => {
            let mut acc = vec![0.0; n];
            for chunk in grad.chunks_exact(n) {
                for (a, g) in acc.iter_mut().zip(chunk) {
                    *a += g;
                }
            }
            acc
        }
        Layout::General => {
            let mut acc = vec![0.0; numel];
            for_each_broadcast(shape, out, out, |o, i, _| acc[i] += grad[o]);
            acc
        }
    }
}

/// `c += a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}
