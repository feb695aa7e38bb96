//! Composite layers built from graph primitives.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Element;

/// Graph handles for one convolutional LSTM cell.
///
/// `input_kernel` is `[4*C_h, C_x, k, k]`, `hidden_kernel` is `[4*C_h, C_h, k, k]`
/// and `bias` is `[4*C_h]`. Gate blocks are stacked in the order input, forget,
/// output, candidate.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmVars {
    pub input_kernel: Var,
    pub hidden_kernel: Var,
    pub bias: Var,
}

/// One ConvLSTM step without peephole connections.
///
/// ```text
/// i = σ(Wxi*x + Whi*h + bi)    f = σ(Wxf*x + Whf*h + bf)
/// o = σ(Wxo*x + Who*h + bo)    g = tanh(Wxg*x + Whg*h + bg)
/// c' = f⊙c + i⊙g               h' = o⊙tanh(c')
/// ```
///
/// Returns `(h', c')`. Padding is `k/2`, so the spatial size is preserved.
pub fn convlstm_cell<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w: &ConvLstmVars,
) -> Result<(Var, Var)> {
    let hidden_shape = g.value(h_prev).shape().to_vec();
    if g.value(c_prev).shape() != hidden_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "hidden {:?} vs cell {:?}",
            hidden_shape,
            g.value(c_prev).shape()
        )));
    }
    let (ch, _, _) = g.value(h_prev).dims3()?;
    let kshape = g.value(w.hidden_kernel).shape().to_vec();
    if kshape.len() != 4 || kshape[0] != 4 * ch || kshape[1] != ch || kshape[2] % 2 == 0 {
        return Err(Error::ShapeMismatch(format!(
            "hidden kernel {kshape:?} for {ch} hidden channels"
        )));
    }
    let pad = kshape[2] / 2;
    let from_x = g.conv2d(x, w.input_kernel, Some(w.bias), 1, pad)?;
    let from_h = g.conv2d(h_prev, w.hidden_kernel, None, 1, pad)?;
    if g.value(from_x).shape() != g.value(from_h).shape() {
        return Err(Error::ShapeMismatch(format!(
            "input gates {:?} vs hidden gates {:?}",
            g.value(from_x).shape(),
            g.value(from_h).shape()
        )));
    }
    let z = g.add(from_x, from_h)?;
    let zi = g.slice_channels(z, 0, ch)?;
    let zf = g.slice_channels(z, ch, ch)?;
    let zo = g.slice_channels(z, 2 * ch, ch)?;
    let zg = g.slice_channels(z, 3 * ch, ch)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let o = g.sigmoid(zo)?;
    let cand = g.tanh(zg)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn zero_cell(g: &mut Graph<f64>, cx: usize, ch: usize) -> ConvLstmVars {
        ConvLstmVars {
            input_kernel: g.param(Tensor::zeros(&[4 * ch, cx, 3, 3])),
            hidden_kernel: g.param(Tensor::zeros(&[4 * ch, ch, 3, 3])),
            bias: g.param(Tensor::zeros(&[4 * ch])),
        }
    }

    #[test]
    fn zero_weights_zero_state() {
        let mut g = Graph::new();
        let w = zero_cell(&mut g, 2, 3);
        let x = g.constant(Tensor::from_fn(&[2, 4, 4], |i| i as f64 * 0.1 - 1.0));
        let h0 = g.constant(Tensor::zeros(&[3, 4, 4]));
        let c0 = g.constant(Tensor::zeros(&[3, 4, 4]));
        let (h, c) = convlstm_cell(&mut g, x, h0, c0, &w).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_halve_cell_state() {
        let mut g = Graph::new();
        let w = zero_cell(&mut g, 1, 2);
        let x = g.constant(Tensor::full(&[1, 3, 3], 0.7));
        let h0 = g.constant(Tensor::zeros(&[2, 3, 3]));
        let cprev = Tensor::from_fn(&[2, 3, 3], |i| (i as f64 - 9.0) * 0.37);
        let c0 = g.constant(cprev.clone());
        let (h, c) = convlstm_cell(&mut g, x, h0, c0, &w).unwrap();
        for ((&cp, &cv), &hv) in cprev.data().iter().zip(g.value(c).data()).zip(g.value(h).data())
        {
            assert!((cv - 0.5 * cp).abs() < 1e-15);
            assert!((hv - 0.5 * (0.5 * cp).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut g = Graph::new();
        let w = zero_cell(&mut g, 1, 2);
        let x = g.constant(Tensor::zeros(&[1, 3, 3]));
        let h0 = g.constant(Tensor::zeros(&[2, 3, 3]));
        let c0 = g.constant(Tensor::zeros(&[2, 3, 4]));
        assert!(convlstm_cell(&mut g, x, h0, c0, &w).is_err());
    }
}
