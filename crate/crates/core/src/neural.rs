//! Encoder / LSTM / decoder sequence model with hand-written reverse mode.
//!
//! Each row of an `m × D` window is encoded independently by a dense stack
//! into a latent vector. An LSTM consumes the latent sequence with zero
//! initial state, its hidden state is projected back to the latent width at
//! every step, and a dense decoder maps each projected latent to a `D`-vector.
//! Inputs are affinely normalized per coordinate before encoding and the
//! decoder output is mapped back with the same affine transform; the
//! normalization is fixed at construction and is not trained.
//!
//! All parameters live in one flat vector described by a layout manifest, so
//! optimizers and checkpoints deal with a single `Vec<f64>`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Hidden widths of the encoder; its last layer maps to `latent_dim`.
    pub encoder_widths: Vec<usize>,
    pub latent_dim: usize,
    pub lstm_hidden: usize,
    /// Hidden widths of the decoder; its last layer maps to `input_dim`.
    pub decoder_widths: Vec<usize>,
    pub hidden_activation: Activation,
}

impl Architecture {
    /// `D → 32 → 16 → latent`, LSTM 32, `latent → 16 → 32 → D`, tanh.
    pub fn standard(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            encoder_widths: vec![32, 16],
            latent_dim,
            lstm_hidden: 32,
            decoder_widths: vec![16, 32],
            hidden_activation: Activation::Tanh,
        }
    }

    fn validate(&self) -> Result<()> {
        let widths = self.encoder_widths.iter().chain(&self.decoder_widths);
        if self.input_dim == 0 || self.latent_dim == 0 || self.lstm_hidden == 0 || widths.clone().any(|w| *w == 0) {
            return Err(Error::arg("all layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    #[inline]
    fn forward(&self, p: &[f64], input: &[f64], out: &mut [f64], act: Activation) {
        let w = &p[self.w..self.w + self.n_in * self.n_out];
        let b = &p[self.b..self.b + self.n_out];
        for o in 0..self.n_out {
            let row = &w[o * self.n_in..(o + 1) * self.n_in];
            let s: f64 = row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>() + b[o];
            out[o] = act.apply(s);
        }
    }

    /// `dpre` is the gradient w.r.t. the pre-activation output.
    #[inline]
    fn backward(&self, p: &[f64], g: &mut [f64], input: &[f64], dpre: &[f64], din: Option<&mut [f64]>) {
        for o in 0..self.n_out {
            let d = dpre[o];
            if d == 0.0 {
                continue;
            }
            g[self.b + o] += d;
            let gw = &mut g[self.w + o * self.n_in..self.w + (o + 1) * self.n_in];
            for (gwi, x) in gw.iter_mut().zip(input) {
                *gwi += d * x;
            }
        }
        if let Some(din) = din {
            din.iter_mut().for_each(|v| *v = 0.0);
            let w = &p[self.w..self.w + self.n_in * self.n_out];
            for o in 0..self.n_out {
                let d = dpre[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * self.n_in..(o + 1) * self.n_in];
                for (di, a) in din.iter_mut().zip(row) {
                    *di += d * a;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LstmLayer {
    wx: usize,
    wh: usize,
    b: usize,
    n_in: usize,
    h: usize,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug)]
struct Net {
    encoder: Vec<Dense>,
    lstm: LstmLayer,
    proj: Dense,
    decoder: Vec<Dense>,
}

/// Autoencoder with an LSTM bottleneck over an `m`-row window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoSdeModel {
    pub arch: Architecture,
    pub layout: Vec<ParamBlock>,
    pub params: Vec<f64>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub init_seed: u64,
}

fn build_layout(arch: &Architecture) -> (Vec<ParamBlock>, usize) {
    let mut layout = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, rows: usize, cols: usize| {
        layout.push(ParamBlock { name, rows, cols, offset });
        offset += rows * cols;
    };
    let mut n_in = arch.input_dim;
    let enc_out: Vec<usize> = arch.encoder_widths.iter().copied().chain([arch.latent_dim]).collect();
    for (i, &w) in enc_out.iter().enumerate() {
        push(format!("encoder.{i}.weight"), w, n_in);
        push(format!("encoder.{i}.bias"), w, 1);
        n_in = w;
    }
    let h = arch.lstm_hidden;
    push("lstm.weight_input".into(), 4 * h, arch.latent_dim);
    push("lstm.weight_hidden".into(), 4 * h, h);
    push("lstm.bias".into(), 4 * h, 1);
    push("projection.weight".into(), arch.latent_dim, h);
    push("projection.bias".into(), arch.latent_dim, 1);
    n_in = arch.latent_dim;
    let dec_out: Vec<usize> = arch.decoder_widths.iter().copied().chain([arch.input_dim]).collect();
    for (i, &w) in dec_out.iter().enumerate() {
        push(format!("decoder.{i}.weight"), w, n_in);
        push(format!("decoder.{i}.bias"), w, 1);
        n_in = w;
    }
    (layout, offset)
}

/// Cached intermediates of one window's forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    m: usize,
    /// Normalized inputs, then each encoder layer's output, row-major `m × width`.
    enc: Vec<Vec<f64>>,
    /// Gate activations `[i, f, g, o]`, `m × 4H`.
    gates: Vec<f64>,
    cell: Vec<f64>,
    cell_tanh: Vec<f64>,
    hidden: Vec<f64>,
    proj: Vec<f64>,
    /// Each decoder layer's output, the last being the normalized prediction.
    dec: Vec<Vec<f64>>,
}

/// Mean-square loss split into the overlap (reconstruction) and extension
/// (SDE) parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ae: f64,
    pub sde: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.ae + self.sde
    }
}

impl AutoSdeModel {
    /// Glorot-uniform weights, zero biases, LSTM forget-gate bias 1.
    pub fn new(arch: Architecture, shift: Vec<f64>, scale: Vec<f64>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if shift.len() != arch.input_dim || scale.len() != arch.input_dim {
            return Err(Error::dims(arch.input_dim, shift.len().min(scale.len()), "normalization vectors"));
        }
        if scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) || shift.iter().any(|s| !s.is_finite()) {
            return Err(Error::arg("normalization scale must be positive and finite"));
        }
        let (layout, n) = build_layout(&arch);
        let mut params = vec![0.0; n];
        let mut stream = Stream::new(seed, 0x1417);
        let h = arch.lstm_hidden;
        for block in &layout {
            let slice = &mut params[block.offset..block.offset + block.rows * block.cols];
            if block.cols == 1 {
                if block.name == "lstm.bias" {
                    slice[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
                }
                continue;
            }
            // LSTM gate blocks use the per-gate fan-out
            let fan_out = if block.name.starts_with("lstm.") { block.rows / 4 } else { block.rows };
            let limit = (6.0 / (block.cols + fan_out) as f64).sqrt();
            slice.iter_mut().for_each(|v| *v = stream.uniform_range(-limit, limit));
        }
        Ok(Self {
            arch,
            layout,
            params,
            shift,
            scale,
            init_seed: seed,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn block(&self, name: &str) -> &ParamBlock {
        self.layout
            .iter()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("missing parameter block {name}"))
    }

    fn net(&self) -> Net {
        let dense = |prefix: &str, i: usize| {
            let w = self.block(&format!("{prefix}.{i}.weight"));
            let b = self.block(&format!("{prefix}.{i}.bias"));
            Dense {
                w: w.offset,
                b: b.offset,
                n_in: w.cols,
                n_out: w.rows,
            }
        };
        let n_enc = self.arch.encoder_widths.len() + 1;
        let n_dec = self.arch.decoder_widths.len() + 1;
        let wx = self.block("lstm.weight_input");
        let pw = self.block("projection.weight");
        Net {
            encoder: (0..n_enc).map(|i| dense("encoder", i)).collect(),
            lstm: LstmLayer {
                wx: wx.offset,
                wh: self.block("lstm.weight_hidden").offset,
                b: self.block("lstm.bias").offset,
                n_in: wx.cols,
                h: self.arch.lstm_hidden,
            },
            proj: Dense {
                w: pw.offset,
                b: self.block("projection.bias").offset,
                n_in: pw.cols,
                n_out: pw.rows,
            },
            decoder: (0..n_dec).map(|i| dense("decoder", i)).collect(),
        }
    }

    /// Checks the layout manifest against the architecture and parameters.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let (layout, n) = build_layout(&self.arch);
        if layout != self.layout {
            return Err(Error::Parse("parameter layout does not match the architecture".into()));
        }
        if self.params.len() != n {
            return Err(Error::dims(n, self.params.len(), "parameter count"));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Parse("non-finite parameter".into()));
        }
        if self.shift.len() != self.arch.input_dim || self.scale.len() != self.arch.input_dim {
            return Err(Error::dims(self.arch.input_dim, self.shift.len(), "normalization vectors"));
        }
        Ok(())
    }

    /// Forward pass over a row-major `m × D` window. Returns the row-major
    /// output in data units and the tape for [`Self::backward`].
    pub fn forward_rows(&self, window: &[f64], m: usize) -> Result<(Vec<f64>, Tape)> {
        let d = self.arch.input_dim;
        if window.len() != m * d || m == 0 {
            return Err(Error::dims(m * d, window.len(), "window entries"));
        }
        let p = &self.params;
        let net = self.net();
        let act = self.arch.hidden_activation;

        let mut enc = Vec::with_capacity(net.encoder.len() + 1);
        let mut u = vec![0.0; m * d];
        for t in 0..m {
            for c in 0..d {
                u[t * d + c] = (window[t * d + c] - self.shift[c]) / self.scale[c];
            }
        }
        enc.push(u);
        for (li, layer) in net.encoder.iter().enumerate() {
            let a = if li + 1 == net.encoder.len() { Activation::Identity } else { act };
            let prev = enc.last().unwrap();
            let mut out = vec![0.0; m * layer.n_out];
            for t in 0..m {
                layer.forward(
                    p,
                    &prev[t * layer.n_in..(t + 1) * layer.n_in],
                    &mut out[t * layer.n_out..(t + 1) * layer.n_out],
                    a,
                );
            }
            enc.push(out);
        }

        let lstm = net.lstm;
        let h = lstm.h;
        let latent = enc.last().unwrap();
        let mut gates = vec![0.0; m * 4 * h];
        let mut cell = vec![0.0; m * h];
        let mut cell_tanh = vec![0.0; m * h];
        let mut hidden = vec![0.0; m * h];
        let wx = &p[lstm.wx..lstm.wx + 4 * h * lstm.n_in];
        let wh = &p[lstm.wh..lstm.wh + 4 * h * h];
        let bias = &p[lstm.b..lstm.b + 4 * h];
        let zeros = vec![0.0; h];
        for t in 0..m {
            let x = &latent[t * lstm.n_in..(t + 1) * lstm.n_in];
            let (h_prev, c_prev): (&[f64], &[f64]) = if t == 0 {
                (&zeros, &zeros)
            } else {
                (&hidden[(t - 1) * h..t * h], &cell[(t - 1) * h..t * h])
            };
            let g = &mut gates[t * 4 * h..(t + 1) * 4 * h];
            for r in 0..4 * h {
                let s = bias[r]
                    + wx[r * lstm.n_in..(r + 1) * lstm.n_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                    + wh[r * h..(r + 1) * h].iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>();
                g[r] = if (2 * h..3 * h).contains(&r) { s.tanh() } else { sigmoid(s) };
            }
            let mut c_new = vec![0.0; h];
            for k in 0..h {
                c_new[k] = g[h + k] * c_prev[k] + g[k] * g[2 * h + k];
            }
            for k in 0..h {
                let ct = c_new[k].tanh();
                cell[t * h + k] = c_new[k];
                cell_tanh[t * h + k] = ct;
                hidden[t * h + k] = g[3 * h + k] * ct;
            }
        }

        let mut proj = vec![0.0; m * net.proj.n_out];
        for t in 0..m {
            net.proj.forward(
                p,
                &hidden[t * h..(t + 1) * h],
                &mut proj[t * net.proj.n_out..(t + 1) * net.proj.n_out],
                Activation::Identity,
            );
        }

        let mut dec: Vec<Vec<f64>> = Vec::with_capacity(net.decoder.len());
        for (li, layer) in net.decoder.iter().enumerate() {
            let a = if li + 1 == net.decoder.len() { Activation::Identity } else { act };
            let prev = if li == 0 { &proj } else { &dec[li - 1] };
            let mut out = vec![0.0; m * layer.n_out];
            for t in 0..m {
                layer.forward(
                    p,
                    &prev[t * layer.n_in..(t + 1) * layer.n_in],
                    &mut out[t * layer.n_out..(t + 1) * layer.n_out],
                    a,
                );
            }
            dec.push(out);
        }
        let v = dec.last().unwrap();
        let mut output = vec![0.0; m * d];
        for t in 0..m {
            for c in 0..d {
                output[t * d + c] = self.shift[c] + self.scale[c] * v[t * d + c];
            }
        }
        if output.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalOverflow("model forward pass".into()));
        }
        let tape = Tape {
            m,
            enc,
            gates,
            cell,
            cell_tanh,
            hidden,
            proj,
            dec,
        };
        Ok((output, tape))
    }

    /// Accumulates into `grad` the gradient of a loss whose derivative with
    /// respect to the (data-unit) output is `d_output`.
    pub fn backward(&self, tape: &Tape, d_output: &[f64], grad: &mut [f64]) {
        let m = tape.m;
        let d = self.arch.input_dim;
        let p = &self.params;
        let net = self.net();
        let act = self.arch.hidden_activation;

        // decoder
        let mut delta = vec![0.0; m * d];
        for t in 0..m {
            for c in 0..d {
                delta[t * d + c] = d_output[t * d + c] * self.scale[c];
            }
        }
        for li in (0..net.decoder.len()).rev() {
            let layer = net.decoder[li];
            let input = if li == 0 { &tape.proj } else { &tape.dec[li - 1] };
            let mut din = vec![0.0; m * layer.n_in];
            for t in 0..m {
                layer.backward(
                    p,
                    grad,
                    &input[t * layer.n_in..(t + 1) * layer.n_in],
                    &delta[t * layer.n_out..(t + 1) * layer.n_out],
                    Some(&mut din[t * layer.n_in..(t + 1) * layer.n_in]),
                );
            }
            if li > 0 {
                // through the activation of the previous decoder layer
                let y = &tape.dec[li - 1];
                for (v, yy) in din.iter_mut().zip(y) {
                    *v *= act.grad_from_output(*yy);
                }
            }
            delta = din;
        }

        // projection
        let h = net.lstm.h;
        let mut dh_proj = vec![0.0; m * h];
        for t in 0..m {
            net.proj.backward(
                p,
                grad,
                &tape.hidden[t * h..(t + 1) * h],
                &delta[t * net.proj.n_out..(t + 1) * net.proj.n_out],
                Some(&mut dh_proj[t * h..(t + 1) * h]),
            );
        }

        // LSTM, back through time
        let lstm = net.lstm;
        let n_in = lstm.n_in;
        let latent = tape.enc.last().unwrap();
        let mut d_latent = vec![0.0; m * n_in];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dpre = vec![0.0; 4 * h];
        let zeros = vec![0.0; h];
        for t in (0..m).rev() {
            let g = &tape.gates[t * 4 * h..(t + 1) * 4 * h];
            let (h_prev, c_prev): (&[f64], &[f64]) = if t == 0 {
                (&zeros, &zeros)
            } else {
                (&tape.hidden[(t - 1) * h..t * h], &tape.cell[(t - 1) * h..t * h])
            };
            for k in 0..h {
                let (gi, gf, gg, go) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let ct = tape.cell_tanh[t * h + k];
                let dh = dh_proj[t * h + k] + dh_next[k];
                let d_o = dh * ct;
                let dc = dh * go * (1.0 - ct * ct) + dc_next[k];
                let d_i = dc * gg;
                let d_g = dc * gi;
                let d_f = dc * c_prev[k];
                dc_next[k] = dc * gf;
                dpre[k] = d_i * gi * (1.0 - gi);
                dpre[h + k] = d_f * gf * (1.0 - gf);
                dpre[2 * h + k] = d_g * (1.0 - gg * gg);
                dpre[3 * h + k] = d_o * go * (1.0 - go);
            }
            let x = &latent[t * n_in..(t + 1) * n_in];
            let dx = &mut d_latent[t * n_in..(t + 1) * n_in];
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            for r in 0..4 * h {
                let dr = dpre[r];
                if dr == 0.0 {
                    continue;
                }
                grad[lstm.b + r] += dr;
                let wx_row = lstm.wx + r * n_in;
                for j in 0..n_in {
                    grad[wx_row + j] += dr * x[j];
                    dx[j] += dr * p[wx_row + j];
                }
                let wh_row = lstm.wh + r * h;
                for j in 0..h {
                    grad[wh_row + j] += dr * h_prev[j];
                    dh_next[j] += dr * p[wh_row + j];
                }
            }
        }

        // encoder
        let mut delta = d_latent;
        for li in (0..net.encoder.len()).rev() {
            let layer = net.encoder[li];
            let input = &tape.enc[li];
            let need_din = li > 0;
            let mut din = vec![0.0; if need_din { m * layer.n_in } else { 0 }];
            for t in 0..m {
                let din_t = if need_din {
                    Some(&mut din[t * layer.n_in..(t + 1) * layer.n_in])
                } else {
                    None
                };
                layer.backward(
                    p,
                    grad,
                    &input[t * layer.n_in..(t + 1) * layer.n_in],
                    &delta[t * layer.n_out..(t + 1) * layer.n_out],
                    din_t,
                );
            }
            if need_din {
                for (v, yy) in din.iter_mut().zip(input) {
                    *v *= act.grad_from_output(*yy);
                }
                delta = din;
            }
        }
    }

    /// Output of the model on a `m × D` window, as a row-major matrix.
    pub fn predict(&self, window: &nalgebra::DMatrix<f64>) -> Result<nalgebra::DMatrix<f64>> {
        let (rows, d) = window.shape();
        if d != self.arch.input_dim {
            return Err(Error::dims(self.arch.input_dim, d, "window columns"));
        }
        let flat: Vec<f64> = window.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        let (out, _) = self.forward_rows(&flat, rows)?;
        Ok(nalgebra::DMatrix::from_row_slice(rows, d, &out))
    }
}

/// Loss terms and their output gradient for one window.
///
/// `overlap` holds the observed rows `l..m` (1-based) that the first
/// `m − l + 1` output rows must reproduce; `extension` holds the `l − 1`
/// SDE-extended rows that the remaining output rows must match.
pub fn window_loss(
    output: &[f64],
    overlap: &[f64],
    extension: &[f64],
    m: usize,
    l: usize,
    d: usize,
    d_output: Option<&mut [f64]>,
) -> Result<LossParts> {
    if !(l > 1 && l <= m) {
        return Err(Error::arg(format!("prediction shift l = {l} must satisfy 1 < l ≤ m = {m}")));
    }
    let n_ae = m - l + 1;
    let n_sde = l - 1;
    if output.len() != m * d {
        return Err(Error::dims(m * d, output.len(), "model output entries"));
    }
    if overlap.len() != n_ae * d {
        return Err(Error::dims(n_ae * d, overlap.len(), "overlap target entries"));
    }
    if extension.len() != n_sde * d {
        return Err(Error::dims(n_sde * d, extension.len(), "extension target entries"));
    }
    let w_ae = 1.0 / (n_ae * d) as f64;
    let w_sde = 1.0 / (n_sde * d) as f64;
    let mut parts = LossParts::default();
    let (out_ae, out_sde) = output.split_at(n_ae * d);
    let mut grad_buf = d_output;
    for (i, (o, t)) in out_ae.iter().zip(overlap).enumerate() {
        let e = o - t;
        parts.ae += w_ae * e * e;
        if let Some(g) = grad_buf.as_deref_mut() {
            g[i] = 2.0 * w_ae * e;
        }
    }
    for (i, (o, t)) in out_sde.iter().zip(extension).enumerate() {
        let e = o - t;
        parts.sde += w_sde * e * e;
        if let Some(g) = grad_buf.as_deref_mut() {
            g[n_ae * d + i] = 2.0 * w_sde * e;
        }
    }
    Ok(parts)
}

/// Loss `L_AE + L_SDE` on one window and its exact parameter gradient.
///
/// `window`, `overlap` and `extension` are row-major slices.
pub fn loss_and_grad(
    model: &AutoSdeModel,
    window: &[f64],
    overlap: &[f64],
    extension: &[f64],
    m: usize,
    l: usize,
) -> Result<(LossParts, Vec<f64>)> {
    let d = model.input_dim();
    let (out, tape) = model.forward_rows(window, m)?;
    let mut d_out = vec![0.0; m * d];
    let parts = window_loss(&out, overlap, extension, m, l, d, Some(&mut d_out))?;
    let mut grad = vec![0.0; model.n_params()];
    model.backward(&tape, &d_out, &mut grad);
    Ok((parts, grad))
}

const DENOM_FLOOR: f64 = 1e-3;

/// Max relative error between [`loss_and_grad`] and central differences of
/// step `h`, over up to 64 randomly chosen parameters.
///
/// The denominator is floored at `1e-3` so that components whose true value
/// is below the finite-difference noise do not dominate.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &AutoSdeModel,
    window: &[f64],
    overlap: &[f64],
    extension: &[f64],
    m: usize,
    l: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let n = model.n_params();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut stream = Stream::new(seed, 0x6c);
    // partial Fisher–Yates
    let k = n.min(64);
    for i in 0..k {
        let j = i + stream.index(n - i);
        idx.swap(i, j);
    }
    gradient_check_at(model, window, overlap, extension, m, l, h, &idx[..k])
}

/// [`gradient_check`] over the given parameter indices.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check_at(
    model: &AutoSdeModel,
    window: &[f64],
    overlap: &[f64],
    extension: &[f64],
    m: usize,
    l: usize,
    h: f64,
    indices: &[usize],
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    if let Some(&j) = indices.iter().find(|&&j| j >= model.n_params()) {
        return Err(Error::OutOfRange {
            index: j,
            max: model.n_params() - 1,
        });
    }
    let (_, grad) = loss_and_grad(model, window, overlap, extension, m, l)?;
    let d = model.input_dim();
    let loss_at = |params: &[f64]| -> Result<f64> {
        let mut probe = model.clone();
        probe.params.copy_from_slice(params);
        let (out, _) = probe.forward_rows(window, m)?;
        Ok(window_loss(&out, overlap, extension, m, l, d, None)?.total())
    };
    let mut worst: f64 = 0.0;
    let mut params = model.params.clone();
    for &j in indices {
        let orig = params[j];
        params[j] = orig + h;
        let up = loss_at(&params)?;
        params[j] = orig - h;
        let down = loss_at(&params)?;
        params[j] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = grad[j].abs().max(fd.abs()).max(DENOM_FLOOR);
        worst = worst.max((grad[j] - fd).abs() / denom);
    }
    Ok(worst)
}

/// ADAM moments and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected ADAM update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() || params.len() != self.m.len() {
            return Err(Error::dims(self.m.len(), grad.len(), "ADAM vectors"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
