use std::fs;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FusionError;
use crate::seed::stage_rng;

pub const HEAD_MAGIC: &[u8; 8] = b"KENYHEAD";
pub const HEAD_VERSION: u32 = 1;

/// Two-layer head over concatenated image and text features.
///
/// `w1` is `(d_img + d_txt) x hidden` and `w2` is `hidden x n_classes`,
/// both row-major, so `h = relu(b1 + sum_i x_i * w1[i, ..])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionHeadParams {
    pub d_img: usize,
    pub d_txt: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl FusionHeadParams {
    pub fn zeros(d_img: usize, d_txt: usize, hidden: usize, n_classes: usize) -> Self {
        Self {
            d_img,
            d_txt,
            hidden,
            n_classes,
            w1: vec![0.0; (d_img + d_txt) * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * n_classes],
            b2: vec![0.0; n_classes],
        }
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init(d_img: usize, d_txt: usize, hidden: usize, n_classes: usize, seed: u64) -> Self {
        let mut p = Self::zeros(d_img, d_txt, hidden, n_classes);
        let mut rng = stage_rng(seed, "fusion/init");
        let d_in = d_img + d_txt;
        let a1 = (6.0 / (d_in + hidden) as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.gen_range(-a1..=a1));
        let a2 = (6.0 / (hidden + n_classes) as f64).sqrt();
        p.w2.iter_mut().for_each(|w| *w = rng.gen_range(-a2..=a2));
        p
    }

    pub fn d_in(&self) -> usize {
        self.d_img + self.d_txt
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.hidden == 0 || self.n_classes < 2 || self.d_in() == 0 {
            return Err(FusionError::Shape(format!(
                "head needs inputs, a hidden layer and at least two classes (d_in {}, hidden {}, classes {})",
                self.d_in(),
                self.hidden,
                self.n_classes
            )));
        }
        let expect = [
            ("w1", self.w1.len(), self.d_in() * self.hidden),
            ("b1", self.b1.len(), self.hidden),
            ("w2", self.w2.len(), self.hidden * self.n_classes),
            ("b2", self.b2.len(), self.n_classes),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(FusionError::Shape(format!("{name} has {got} values, expected {want}")));
            }
        }
        Ok(())
    }

    /// Every parameter in storage order: w1, b1, w2, b2.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    fn buffers_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub(crate) fn fill_zero(&mut self) {
        self.buffers_mut().into_iter().for_each(|b| b.fill(0.0));
    }

    /// Momentum step: `v = momentum * v - lr * g`, then `self += v`.
    pub(crate) fn momentum_step(&mut self, velocity: &mut Self, grads: &mut Self, lr: f64, momentum: f64) {
        for ((p, v), g) in self
            .buffers_mut()
            .into_iter()
            .zip(velocity.buffers_mut())
            .zip(grads.buffers_mut())
        {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *v = momentum * *v - lr * g;
                *p += *v;
            }
        }
    }

    fn check_input(&self, x_img: &[f64], x_txt: &[f64]) -> Result<(), FusionError> {
        if x_img.len() != self.d_img || x_txt.len() != self.d_txt {
            return Err(FusionError::Shape(format!(
                "input dims ({}, {}) do not match head ({}, {})",
                x_img.len(),
                x_txt.len(),
                self.d_img,
                self.d_txt
            )));
        }
        Ok(())
    }

    /// Pre-activation of the hidden layer into `h`.
    fn hidden_pre(&self, x: impl Iterator<Item = f64>, h: &mut [f64]) {
        h.copy_from_slice(&self.b1);
        for (i, xi) in x.enumerate() {
            if xi != 0.0 {
                let row = &self.w1[i * self.hidden..(i + 1) * self.hidden];
                h.iter_mut().zip(row).for_each(|(hj, w)| *hj += xi * w);
            }
        }
    }

    fn logits(&self, h: &[f64], z: &mut [f64]) {
        z.copy_from_slice(&self.b2);
        for (j, &hj) in h.iter().enumerate() {
            if hj > 0.0 {
                let row = &self.w2[j * self.n_classes..(j + 1) * self.n_classes];
                z.iter_mut().zip(row).for_each(|(zk, w)| *zk += hj * w);
            }
        }
    }

    /// Class probabilities for one example.
    pub fn forward(&self, x_img: &[f64], x_txt: &[f64]) -> Result<Vec<f64>, FusionError> {
        self.check_input(x_img, x_txt)?;
        let mut h = vec![0.0; self.hidden];
        self.hidden_pre(x_img.iter().chain(x_txt).copied(), &mut h);
        relu(&mut h);
        let mut z = vec![0.0; self.n_classes];
        self.logits(&h, &mut z);
        softmax(&mut z);
        Ok(z)
    }

    /// Same as `forward` for single-precision rows.
    pub fn forward_f32(&self, x_img: &[f32], x_txt: &[f32]) -> Result<Vec<f64>, FusionError> {
        if x_img.len() != self.d_img || x_txt.len() != self.d_txt {
            return Err(FusionError::Shape(format!(
                "input dims ({}, {}) do not match head ({}, {})",
                x_img.len(),
                x_txt.len(),
                self.d_img,
                self.d_txt
            )));
        }
        let mut h = vec![0.0; self.hidden];
        self.hidden_pre(x_img.iter().chain(x_txt).map(|&v| v as f64), &mut h);
        relu(&mut h);
        let mut z = vec![0.0; self.n_classes];
        self.logits(&h, &mut z);
        softmax(&mut z);
        Ok(z)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 8 * self.n_params());
        out.extend_from_slice(HEAD_MAGIC);
        out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
        for dim in [self.d_img, self.d_txt, self.hidden, self.n_classes] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in self.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FusionError> {
        if bytes.len() < 28 || &bytes[..8] != HEAD_MAGIC {
            return Err(FusionError::HeadFormat("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let version = u32_at(8) as u32;
        if version != HEAD_VERSION {
            return Err(FusionError::HeadFormat(format!("unsupported version {version}")));
        }
        let mut p = Self::zeros(u32_at(12), u32_at(16), u32_at(20), u32_at(24));
        let body = &bytes[28..];
        if body.len() != 8 * p.n_params() {
            return Err(FusionError::HeadFormat(format!(
                "expected {} parameter bytes, found {}",
                8 * p.n_params(),
                body.len()
            )));
        }
        for (v, chunk) in p.values_mut().zip(body.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FusionError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| FusionError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FusionError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| FusionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn relu(h: &mut [f64]) {
    h.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// In-place softmax; returns log-sum-exp of the input.
pub(crate) fn softmax(z: &mut [f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
    m + sum.ln()
}

/// One training example as concatenated input and label.
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub label: usize,
}

/// Reusable buffers for gradient accumulation.
pub(crate) struct Workspace {
    x: Array2<f64>,
}

impl Workspace {
    pub(crate) fn new(p: &FusionHeadParams) -> Self {
        Self {
            x: Array2::zeros((0, p.d_in())),
        }
    }
}

impl FusionHeadParams {
    fn w1_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.d_in(), self.hidden), &self.w1).expect("w1 shape")
    }

    fn w2_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.hidden, self.n_classes), &self.w2).expect("w2 shape")
    }

    /// Hidden pre-activations and softmax probabilities for a row-major batch.
    pub(crate) fn forward_batch(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        let mut pre = x.dot(&self.w1_view());
        pre += &ArrayView1::from(&self.b1);
        let h = pre.mapv(|v| v.max(0.0));
        let mut z = h.dot(&self.w2_view());
        z += &ArrayView1::from(&self.b2);
        (pre, z)
    }
}

/// Adds mean cross-entropy gradients of `batch` into `grads` (which must
/// start zeroed). Returns the summed loss and the number of correct argmaxes.
pub(crate) fn accumulate(
    p: &FusionHeadParams,
    batch: &[Sample<'_>],
    grads: &mut FusionHeadParams,
    ws: &mut Workspace,
) -> (f64, usize) {
    let n = batch.len();
    let d_in = p.d_in();
    if ws.x.nrows() != n {
        ws.x = Array2::zeros((n, d_in));
    }
    for (mut row, s) in ws.x.rows_mut().into_iter().zip(batch) {
        row.assign(&ArrayView1::from(s.x));
    }
    let (pre, mut z) = p.forward_batch(ws.x.view());
    let mut loss = 0.0;
    let mut correct = 0;
    let scale = 1.0 / n as f64;
    for (mut zr, s) in z.rows_mut().into_iter().zip(batch) {
        let zr = zr.as_slice_mut().expect("contiguous logits");
        let zy = zr[s.label];
        let lse = softmax(zr);
        loss += lse - zy;
        if argmax(zr) == s.label {
            correct += 1;
        }
        // dz = (p - onehot) / B
        zr[s.label] -= 1.0;
        zr.iter_mut().for_each(|v| *v *= scale);
    }
    let dz = z;
    let h = pre.mapv(|v| v.max(0.0));
    let (hidden, nc) = (p.hidden, p.n_classes);
    {
        let mut gw2 = ArrayViewMut2::from_shape((hidden, nc), &mut grads.w2).expect("w2 shape");
        general_mat_mul(1.0, &h.t(), &dz, 1.0, &mut gw2);
    }
    let mut gb2 = ArrayViewMut1::from(&mut grads.b2[..]);
    gb2 += &dz.sum_axis(Axis(0));
    let mut dh = dz.dot(&p.w2_view().t());
    ndarray::Zip::from(&mut dh).and(&pre).for_each(|d, &a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
    {
        let mut gw1 = ArrayViewMut2::from_shape((d_in, hidden), &mut grads.w1).expect("w1 shape");
        general_mat_mul(1.0, &ws.x.t(), &dh, 1.0, &mut gw1);
    }
    let mut gb1 = ArrayViewMut1::from(&mut grads.b1[..]);
    gb1 += &dh.sum_axis(Axis(0));
    (loss, correct)
}

/// Mean cross-entropy over `batch` and its gradient, shaped like `p`.
pub fn loss_and_gradients(
    p: &FusionHeadParams,
    batch: &[Sample<'_>],
) -> Result<(f64, FusionHeadParams), FusionError> {
    p.validate()?;
    if batch.is_empty() {
        return Err(FusionError::EmptyBatch);
    }
    for s in batch {
        if s.x.len() != p.d_in() {
            return Err(FusionError::Shape(format!("input has {} values, head expects {}", s.x.len(), p.d_in())));
        }
        if s.label >= p.n_classes {
            return Err(FusionError::Shape(format!("label {} out of range", s.label)));
        }
    }
    let mut grads = FusionHeadParams::zeros(p.d_img, p.d_txt, p.hidden, p.n_classes);
    let mut ws = Workspace::new(p);
    let (loss, _) = accumulate(p, batch, &mut grads, &mut ws);
    Ok((loss / batch.len() as f64, grads))
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
