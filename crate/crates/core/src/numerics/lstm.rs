//! Single-direction LSTM over the valid positions of a padded sequence,
//! with its backpropagation-through-time pass.
//!
//! Gate layout inside the `4h` pre-activation is `[input, forget, cell, output]`.

use crate::error::{Error, Result};

use super::kernels::sigmoid_scalar;
use super::Tensor;

/// Values kept from the forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct LstmTrace {
    /// Positions in processing order.
    order: Vec<usize>,
    /// Post-activation gates per processed step, `4h` each.
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    tanh_cells: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
}

fn check_shapes(x: &Tensor, wx: &Tensor, wh: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let mismatch = |lhs: &Tensor, rhs: &Tensor| Error::ShapeMismatch {
        op: "lstm",
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    };
    if x.rank() != 2 || wx.rank() != 2 || wh.rank() != 2 || b.rank() != 1 {
        return Err(mismatch(x, wx));
    }
    let din = x.shape()[1];
    let h = wh.shape()[0];
    if wx.shape() != [din, 4 * h] {
        return Err(mismatch(x, wx));
    }
    if wh.shape() != [h, 4 * h] {
        return Err(mismatch(wh, wh));
    }
    if b.shape() != [4 * h] {
        return Err(mismatch(b, wh));
    }
    Ok((din, h))
}

/// Runs the recurrence over positions where `mask` is true, in order or in
/// reverse. Output rows at masked positions are zero.
pub fn lstm_forward(
    x: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    b: &Tensor,
    mask: &[bool],
    reverse: bool,
) -> Result<(Tensor, LstmTrace)> {
    let (din, h) = check_shapes(x, wx, wh, b)?;
    let m = x.shape()[0];
    let mut order: Vec<usize> = (0..m).filter(|&p| mask[p]).collect();
    if reverse {
        order.reverse();
    }
    let mut out = Tensor::zeros(&[m, h]);
    let mut trace = LstmTrace {
        order: order.clone(),
        gates: Vec::with_capacity(order.len()),
        cells: Vec::with_capacity(order.len()),
        tanh_cells: Vec::with_capacity(order.len()),
        hidden: Vec::with_capacity(order.len()),
    };
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let (wxd, whd) = (wx.data(), wh.data());
    for &p in &order {
        let mut a = b.data().to_vec();
        let xrow = x.row(p);
        for (k, &xv) in xrow.iter().enumerate().take(din) {
            if xv != 0.0 {
                let w = &wxd[k * 4 * h..(k + 1) * 4 * h];
                for (av, wv) in a.iter_mut().zip(w) {
                    *av += xv * wv;
                }
            }
        }
        for (k, &hv) in h_prev.iter().enumerate() {
            if hv != 0.0 {
                let w = &whd[k * 4 * h..(k + 1) * 4 * h];
                for (av, wv) in a.iter_mut().zip(w) {
                    *av += hv * wv;
                }
            }
        }
        for j in 0..h {
            a[j] = sigmoid_scalar(a[j]);
            a[h + j] = sigmoid_scalar(a[h + j]);
            a[2 * h + j] = a[2 * h + j].tanh();
            a[3 * h + j] = sigmoid_scalar(a[3 * h + j]);
        }
        let mut c = vec![0.0; h];
        let mut tc = vec![0.0; h];
        let mut hv = vec![0.0; h];
        for j in 0..h {
            c[j] = a[h + j] * c_prev[j] + a[j] * a[2 * h + j];
            tc[j] = c[j].tanh();
            hv[j] = a[3 * h + j] * tc[j];
        }
        out.row_mut(p).copy_from_slice(&hv);
        trace.gates.push(a);
        trace.cells.push(c.clone());
        trace.tanh_cells.push(tc);
        trace.hidden.push(hv.clone());
        h_prev = hv;
        c_prev = c;
    }
    Ok((out, trace))
}

pub struct LstmGrads {
    pub dx: Tensor,
    pub dwx: Tensor,
    pub dwh: Tensor,
    pub db: Tensor,
}

pub fn lstm_backward(
    x: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    trace: &LstmTrace,
    dout: &Tensor,
) -> LstmGrads {
    let din = x.shape()[1];
    let h = wh.shape()[0];
    let mut dx = Tensor::zeros(x.shape());
    let mut dwx = Tensor::zeros(wx.shape());
    let mut dwh = Tensor::zeros(wh.shape());
    let mut db = Tensor::zeros(&[4 * h]);
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    let zeros = vec![0.0; h];
    for step in (0..trace.order.len()).rev() {
        let p = trace.order[step];
        let g = &trace.gates[step];
        let tc = &trace.tanh_cells[step];
        let (c_prev, h_prev) = if step == 0 {
            (&zeros, &zeros)
        } else {
            (&trace.cells[step - 1], &trace.hidden[step - 1])
        };
        let drow = dout.row(p);
        for j in 0..h {
            let (ig, fg, cg, og) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let dh = drow[j] + dh_next[j];
            let dc = dc_next[j] + dh * og * (1.0 - tc[j] * tc[j]);
            let d_o = dh * tc[j];
            let di = dc * cg;
            let dg = dc * ig;
            let df = dc * c_prev[j];
            dc_next[j] = dc * fg;
            da[j] = di * ig * (1.0 - ig);
            da[h + j] = df * fg * (1.0 - fg);
            da[2 * h + j] = dg * (1.0 - cg * cg);
            da[3 * h + j] = d_o * og * (1.0 - og);
        }
        for (dbv, &dav) in db.data_mut().iter_mut().zip(&da) {
            *dbv += dav;
        }
        let xrow = x.row(p);
        let dxrow = dx.row_mut(p);
        for k in 0..din {
            let wrow = &wx.data()[k * 4 * h..(k + 1) * 4 * h];
            let dwrow = &mut dwx.data_mut()[k * 4 * h..(k + 1) * 4 * h];
            let mut acc = 0.0;
            for q in 0..4 * h {
                dwrow[q] += xrow[k] * da[q];
                acc += wrow[q] * da[q];
            }
            dxrow[k] = acc;
        }
        for k in 0..h {
            let wrow = &wh.data()[k * 4 * h..(k + 1) * 4 * h];
            let dwrow = &mut dwh.data_mut()[k * 4 * h..(k + 1) * 4 * h];
            let mut acc = 0.0;
            for q in 0..4 * h {
                dwrow[q] += h_prev[k] * da[q];
                acc += wrow[q] * da[q];
            }
            dh_next[k] = acc;
        }
    }
    LstmGrads { dx, dwx, dwh, db }
}
