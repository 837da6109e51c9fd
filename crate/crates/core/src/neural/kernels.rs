//! Raw forward/backward kernels shared by the tape and the inference paths.
//!
//! Convolutions are cross-correlations. The transposed convolution is the
//! exact adjoint of the forward one for the same weights and spec, including
//! the padding handling, so with circular padding both ops commute with
//! circular shifts of the ring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Circular,
    Zeros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub padding_mode: PadMode,
}

impl ConvSpec {
    pub fn circular(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            padding_mode: PadMode::Circular,
        }
    }

    pub fn with_mode(self, padding_mode: PadMode) -> Self {
        Self { padding_mode, ..self }
    }

    /// `[out_channels, in_channels, kernel]`, shared by the forward and transposed ops.
    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels, self.kernel]
    }

    pub fn output_len(&self, input_len: usize) -> Result<usize> {
        let padded = input_len + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return Err(Error::shape(
                "conv1d",
                format!("length {input_len} too short for {self:?}"),
            ));
        }
        if self.padding_mode == PadMode::Circular && self.padding > input_len {
            return Err(Error::shape("conv1d", "circular padding exceeds input length"));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Output length of the transposed op on an input of `input_len`.
    pub fn transposed_len(&self, input_len: usize) -> Result<usize> {
        let full = (input_len.max(1) - 1) * self.stride + self.kernel;
        if input_len == 0 || full < 2 * self.padding + 1 {
            return Err(Error::shape(
                "conv_transpose1d",
                format!("length {input_len} too short for {self:?}"),
            ));
        }
        let out = full - 2 * self.padding;
        // The adjoint pairing requires the forward op to map `out` back to `input_len`.
        if self.output_len(out)? != input_len {
            return Err(Error::shape(
                "conv_transpose1d",
                format!("spec {self:?} is not invertible in length at {input_len}"),
            ));
        }
        Ok(out)
    }

    /// Source index in the unpadded signal for every `(output j, tap k)`.
    fn taps(&self, signal_len: usize, out_len: usize) -> Vec<Option<usize>> {
        let mut t = Vec::with_capacity(out_len * self.kernel);
        for j in 0..out_len {
            for k in 0..self.kernel {
                let i = (j * self.stride + k) as isize - self.padding as isize;
                t.push(match self.padding_mode {
                    PadMode::Circular => Some(i.rem_euclid(signal_len as isize) as usize),
                    PadMode::Zeros => (0..signal_len as isize).contains(&i).then_some(i as usize),
                });
            }
        }
        t
    }
}

/// `x (B, in, L) -> (B, out, L_out)`.
pub fn conv1d(
    x: &[f64],
    batch: usize,
    len: usize,
    w: &[f64],
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> Result<Vec<f64>> {
    let l_out = spec.output_len(len)?;
    let (ci, co, kk) = (spec.in_channels, spec.out_channels, spec.kernel);
    check_len("conv1d input", x.len(), batch * ci * len)?;
    check_len("conv1d weight", w.len(), co * ci * kk)?;
    let taps = spec.taps(len, l_out);
    let mut y = vec![0.0; batch * co * l_out];
    for b in 0..batch {
        for o in 0..co {
            let yrow = &mut y[(b * co + o) * l_out..(b * co + o + 1) * l_out];
            if let Some(bias) = bias {
                yrow.iter_mut().for_each(|v| *v = bias[o]);
            }
            for c in 0..ci {
                let xrow = &x[(b * ci + c) * len..(b * ci + c + 1) * len];
                let wrow = &w[(o * ci + c) * kk..(o * ci + c + 1) * kk];
                for (j, yv) in yrow.iter_mut().enumerate() {
                    let t = &taps[j * kk..(j + 1) * kk];
                    let mut acc = 0.0;
                    for (wk, tk) in wrow.iter().zip(t) {
                        if let Some(i) = tk {
                            acc += wk * xrow[*i];
                        }
                    }
                    *yv += acc;
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of `conv1d` given the upstream gradient `dy`: `(dx, dw, dbias)`.
pub fn conv1d_backward(
    x: &[f64],
    batch: usize,
    len: usize,
    w: &[f64],
    dy: &[f64],
    spec: &ConvSpec,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let l_out = spec.output_len(len)?;
    let (ci, co, kk) = (spec.in_channels, spec.out_channels, spec.kernel);
    let taps = spec.taps(len, l_out);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co];
    for b in 0..batch {
        for o in 0..co {
            let dyrow = &dy[(b * co + o) * l_out..(b * co + o + 1) * l_out];
            db[o] += dyrow.iter().sum::<f64>();
            for c in 0..ci {
                let base = (b * ci + c) * len;
                let wbase = (o * ci + c) * kk;
                for (j, &g) in dyrow.iter().enumerate() {
                    for k in 0..kk {
                        if let Some(i) = taps[j * kk + k] {
                            dx[base + i] += w[wbase + k] * g;
                            dw[wbase + k] += x[base + i] * g;
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Transposed convolution `y (B, out, L_in) -> (B, in, L_out)` with the
/// forward op's weights; `bias` has `in_channels` entries.
pub fn conv_transpose1d(
    y: &[f64],
    batch: usize,
    len: usize,
    w: &[f64],
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> Result<Vec<f64>> {
    let l_out = spec.transposed_len(len)?;
    let (ci, co, kk) = (spec.in_channels, spec.out_channels, spec.kernel);
    check_len("conv_transpose1d input", y.len(), batch * co * len)?;
    check_len("conv_transpose1d weight", w.len(), co * ci * kk)?;
    let taps = spec.taps(l_out, len);
    let mut x = vec![0.0; batch * ci * l_out];
    for b in 0..batch {
        for c in 0..ci {
            let base = (b * ci + c) * l_out;
            if let Some(bias) = bias {
                x[base..base + l_out].iter_mut().for_each(|v| *v = bias[c]);
            }
            for o in 0..co {
                let yrow = &y[(b * co + o) * len..(b * co + o + 1) * len];
                let wbase = (o * ci + c) * kk;
                for (j, &g) in yrow.iter().enumerate() {
                    for k in 0..kk {
                        if let Some(i) = taps[j * kk + k] {
                            x[base + i] += w[wbase + k] * g;
                        }
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Gradients of `conv_transpose1d`: `(dy, dw, dbias)`.
pub fn conv_transpose1d_backward(
    y: &[f64],
    batch: usize,
    len: usize,
    w: &[f64],
    dx: &[f64],
    spec: &ConvSpec,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let l_out = spec.transposed_len(len)?;
    let (ci, co, kk) = (spec.in_channels, spec.out_channels, spec.kernel);
    let taps = spec.taps(l_out, len);
    let mut dy = vec![0.0; y.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; ci];
    for b in 0..batch {
        for c in 0..ci {
            let base = (b * ci + c) * l_out;
            db[c] += dx[base..base + l_out].iter().sum::<f64>();
            for o in 0..co {
                let ybase = (b * co + o) * len;
                let wbase = (o * ci + c) * kk;
                for j in 0..len {
                    let mut acc = 0.0;
                    for k in 0..kk {
                        if let Some(i) = taps[j * kk + k] {
                            acc += w[wbase + k] * dx[base + i];
                            dw[wbase + k] += y[ybase + j] * dx[base + i];
                        }
                    }
                    dy[ybase + j] += acc;
                }
            }
        }
    }
    Ok((dy, dw, db))
}

/// `x (B, in) W^T (in -> out) + b`.
pub fn linear(x: &[f64], batch: usize, w: &[f64], bias: &[f64], in_f: usize, out_f: usize) -> Result<Vec<f64>> {
    check_len("linear input", x.len(), batch * in_f)?;
    check_len("linear weight", w.len(), out_f * in_f)?;
    check_len("linear bias", bias.len(), out_f)?;
    let mut y = vec![0.0; batch * out_f];
    for b in 0..batch {
        let xr = &x[b * in_f..(b + 1) * in_f];
        for o in 0..out_f {
            let wr = &w[o * in_f..(o + 1) * in_f];
            y[b * out_f + o] = bias[o] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    Ok(y)
}

/// Gradients of `linear`: `(dx, dw, dbias)`.
pub fn linear_backward(
    x: &[f64],
    batch: usize,
    w: &[f64],
    dy: &[f64],
    in_f: usize,
    out_f: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; out_f];
    for b in 0..batch {
        let xr = &x[b * in_f..(b + 1) * in_f];
        for o in 0..out_f {
            let g = dy[b * out_f + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wr = &w[o * in_f..(o + 1) * in_f];
            let dxr = &mut dx[b * in_f..(b + 1) * in_f];
            for i in 0..in_f {
                dxr[i] += wr[i] * g;
            }
            let dwr = &mut dw[o * in_f..(o + 1) * in_f];
            for i in 0..in_f {
                dwr[i] += xr[i] * g;
            }
        }
    }
    (dx, dw, db)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn check_len(what: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(what, format!("expected {want} values, got {got}")));
    }
    Ok(())
}
