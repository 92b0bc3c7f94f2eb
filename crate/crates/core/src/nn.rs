//! Minimal layer set on top of `candle-core`: parameter storage with seeded
//! initialization, convolution/linear layers, optimizers, and the checkpoint
//! archive format shared by the segmenter and the anomaly detectors.

use candle_core::backprop::GradStore;
use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::ingest::stream_rng;

/// Named trainable tensors, in creation order.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    vars: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: stream_rng(seed, 0x1417),
            vars: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.vars.iter().map(|(_, v)| v)
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_params(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Uniform `[-bound, bound]` initialization.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.push(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.push(name, t)
    }

    fn push(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.get(name).is_some() {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&t)?;
        self.vars.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn export(&self) -> Result<Vec<TensorRecord>> {
        self.vars
            .iter()
            .map(|(name, v)| {
                Ok(TensorRecord {
                    name: name.clone(),
                    shape: v.dims().to_vec(),
                    values: v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
                })
            })
            .collect()
    }

    /// Overwrites every parameter from `records`; names and shapes must match.
    pub fn import(&self, records: &[TensorRecord]) -> Result<()> {
        if records.len() != self.vars.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, model has {}",
                records.len(),
                self.vars.len()
            )));
        }
        for ((name, var), rec) in self.vars.iter().zip(records) {
            if *name != rec.name || var.dims() != rec.shape.as_slice() {
                return Err(Error::Data(format!(
                    "tensor {} {:?} does not match model parameter {name} {:?}",
                    rec.name,
                    rec.shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(rec.values.clone(), rec.shape.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// 2-D convolution, `weight: (c_out, c_in, k, k)`.
pub struct Conv2d {
    weight: Var,
    bias: Var,
    padding: usize,
    stride: usize,
}

impl Conv2d {
    /// Uniform `±1/√fan_in` weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::scaled(store, name, c_in, c_out, kernel, stride, padding, 1.0)
    }

    /// Uniform `±scale/√fan_in` weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn scaled(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        scale: f64,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = store.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], scale / fan_in.sqrt())?;
        let bias = store.zeros(&format!("{name}.bias"), &[c_out])?;
        Ok(Self {
            weight,
            bias,
            padding,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, self.weight.as_tensor(), self.bias.as_tensor(), self.stride, self.padding)
    }
}

/// Transposed convolution, `weight: (c_in, c_out, k, k)`.
pub struct ConvTranspose2d {
    weight: Var,
    bias: Var,
    stride: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::scaled(store, name, c_in, c_out, kernel, stride, 1.0)
    }

    pub fn scaled(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        scale: f64,
    ) -> Result<Self> {
        if kernel != stride {
            return Err(Error::Config(format!(
                "transposed convolution needs kernel == stride, got {kernel} and {stride}"
            )));
        }
        // each output pixel of a k=s transposed conv sees c_in inputs
        let fan_in = (c_in * (kernel * kernel) / (stride * stride)).max(1) as f64;
        let weight = store.uniform(&format!("{name}.weight"), &[c_in, c_out, kernel, kernel], scale / fan_in.sqrt())?;
        let bias = store.zeros(&format!("{name}.bias"), &[c_out])?;
        Ok(Self { weight, bias, stride })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_transpose2d(x, self.weight.as_tensor(), self.bias.as_tensor(), self.stride)
    }
}

/// Geometry of an unfolding of `(N, C, H, W)` into a `(C·k·k, N·OH·OW)`
/// patch matrix, row index `(c·k + ki)·k + kj`.
#[derive(Clone, Copy, Debug)]
struct Unfold {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Unfold {
    fn cols_shape(&self) -> Shape {
        Shape::from((self.c * self.k * self.k, self.n * self.oh * self.ow))
    }

    fn image_shape(&self) -> Shape {
        Shape::from((self.n, self.c, self.h, self.w))
    }

    /// Output columns `[lo, hi)` whose tap `kj` lands inside the image row.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kj { (self.pad - kj).div_ceil(s) } else { 0 };
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / s + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Calls `f(col_start, image_start, count)` for every in-bounds run of
    /// taps; runs step by 1 in the column buffer and by `stride` in the image.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, plane) = (self.k, self.oh * self.ow);
        for b in 0..self.n {
            for ch in 0..self.c {
                let img = (b * self.c + ch) * self.h * self.w;
                for ki in 0..k {
                    for kj in 0..k {
                        let (lo, hi) = self.col_range(kj);
                        if lo >= hi {
                            continue;
                        }
                        let row = ((ch * k + ki) * k + kj) * self.n + b;
                        for r in 0..self.oh {
                            let y = (r * self.stride + ki) as isize - self.pad as isize;
                            if y < 0 || y >= self.h as isize {
                                continue;
                            }
                            let x0 = lo * self.stride + kj - self.pad;
                            f(row * plane + r * self.ow + lo, img + y as usize * self.w + x0, hi - lo);
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.cols_shape().elem_count()];
        let s = self.stride;
        self.for_each_run(|ci, ii, len| {
            if s == 1 {
                out[ci..ci + len].copy_from_slice(&src[ii..ii + len]);
            } else {
                for (o, v) in out[ci..ci + len].iter_mut().zip(src[ii..].iter().step_by(s)) {
                    *o = *v;
                }
            }
        });
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.image_shape().elem_count()];
        let s = self.stride;
        self.for_each_run(|ci, ii, len| {
            for (j, v) in cols[ci..ci + len].iter().enumerate() {
                out[ii + j * s] += *v;
            }
        });
        out
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("unfold expects a contiguous tensor"),
    }
}

/// Patch extraction; its gradient is [`Fold`].
struct Im2Col(Unfold);

/// Sums patch columns back into an image; the adjoint of [`Im2Col`].
struct Fold(Unfold);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.0.unfold(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.0.unfold(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, self.0.cols_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.0.fold(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.0.fold(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, self.0.image_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Cross-correlation of `(N, C, H, W)` with `(O, C, k, k)` plus bias,
/// zero padding on all sides. Lowered to patch columns and a matmul.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 || stride == 0 {
        return Err(Error::Shape(format!(
            "conv of {:?} with kernel {:?} stride {stride}",
            x.dims(),
            weight.dims()
        )));
    }
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    if hp < k || wp < k {
        return Err(Error::Shape(format!("kernel {k} larger than padded {hp}x{wp} input")));
    }
    let (oh, ow) = ((hp - k) / stride + 1, (wp - k) / stride + 1);
    let cols = if k == 1 && stride == 1 && padding == 0 {
        x.transpose(0, 1)?.reshape((c, n * h * w))?
    } else {
        let geometry = Unfold { n, c, h, w, k, stride, pad: padding, oh, ow };
        x.contiguous()?.apply_op1(Im2Col(geometry))?
    };
    let y = weight.reshape((o, c * k * k))?.matmul(&cols)?;
    let y = y.broadcast_add(&bias.reshape((o, 1))?)?;
    Ok(y.reshape((o, n, oh, ow))?.transpose(0, 1)?.contiguous()?)
}

/// Transposed convolution with kernel size equal to the stride, so output
/// blocks do not overlap: `(N, I, H, W)` with `(I, O, s, s)` gives
/// `(N, O, sH, sW)`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (wc, o, k, k2) = weight.dims4()?;
    if wc != c || k != stride || k2 != stride {
        return Err(Error::Shape(format!(
            "transposed conv of {:?} with kernel {:?} stride {stride}",
            x.dims(),
            weight.dims()
        )));
    }
    let s = stride;
    let cols = x.transpose(0, 1)?.reshape((c, n * h * w))?;
    let y = weight.reshape((c, o * s * s))?.t()?.matmul(&cols)?;
    let y = y
        .reshape((o, s, s, n, h, w))?
        .permute((3, 0, 4, 1, 5, 2))?
        .contiguous()?
        .reshape((n, o, h * s, w * s))?;
    Ok(y.broadcast_add(&bias.reshape((1, o, 1, 1))?)?)
}

/// Fully connected layer on `(N, in)` input.
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::scaled(store, name, d_in, d_out, 1.0)
    }

    pub fn scaled(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, scale: f64) -> Result<Self> {
        let weight = store.uniform(&format!("{name}.weight"), &[d_out, d_in], scale / (d_in as f64).sqrt())?;
        let bias = store.zeros(&format!("{name}.bias"), &[d_out])?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// 2×2 max pooling with stride 2 on `(N, C, H, W)`; `H` and `W` must be even.
/// Built from a reshape and two max reductions, whose backward routes the
/// whole gradient to the maximum.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pool needs even sides, got {h}x{w}")));
    }
    Ok(x.contiguous()?.reshape((n, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)?)
}

/// Init scale that keeps activation variance roughly constant through
/// leaky-ReLU layers: `gain·√3` with `gain = √(2 / (1 + slope²))`.
pub fn leaky_relu_init_scale(slope: f64) -> f64 {
    (6.0 / (1.0 + slope * slope)).sqrt()
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    // slope·x + (1 − slope)·relu(x)
    Ok((x.affine(slope, 0.0)? + x.relu()?.affine(1.0 - slope, 0.0)?)?)
}

/// Mean binary cross-entropy on logits, in the overflow-free form
/// `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let softplus = logits.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    let per_pixel = ((logits.relu()? - (logits * target)?)? + softplus)?;
    Ok(per_pixel.mean_all()?)
}

/// `½ Σ (e^{logvar} + μ² − 1 − logvar)` over the last dimension, one value per row.
pub fn kl_standard_normal_rows(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let terms = ((logvar.exp()? + mu.sqr()?)? - logvar.affine(1.0, 1.0)?)?;
    Ok(terms.sum(D::Minus1)?.affine(0.5, 0.0)?)
}

/// Stacks images into an `(N, C, H, W)` tensor. All images must share a shape.
pub fn images_to_tensor(images: &[&ImageBuffer], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.shape() != (h, w) || img.channels() != c {
            return Err(Error::Shape("batch images differ in shape".into()));
        }
        for ch in 0..c {
            data.extend(img.data().iter().skip(ch).step_by(c).copied());
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// RMSProp with heavy-ball momentum and L2 weight decay.
    RmspropLike,
    PlainSgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// First-order optimizer over a fixed parameter list.
pub struct Optimizer {
    settings: OptimizerSettings,
    params: Vec<Var>,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: u64,
}

const RMS_ALPHA: f64 = 0.99;
const EPS: f64 = 1e-8;
const ADAM_BETAS: (f64, f64) = (0.9, 0.999);

impl Optimizer {
    pub fn new(params: Vec<Var>, settings: OptimizerSettings) -> Result<Self> {
        if !(settings.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be > 0", settings.lr)));
        }
        let n = params.len();
        Ok(Self {
            settings,
            params,
            first: vec![None; n],
            second: vec![None; n],
            steps: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.settings.lr
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let s = self.settings;
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = grads.get(p.as_tensor()) else { continue };
            // detached so optimizer state never holds on to the autograd graph
            let param = p.as_tensor().detach();
            let mut g = g.detach();
            if s.weight_decay != 0.0 {
                g = (g + param.affine(s.weight_decay, 0.0)?)?;
            }
            let update = match s.kind {
                OptimizerKind::PlainSgd => {
                    if s.momentum != 0.0 {
                        let buf = match &self.first[i] {
                            Some(b) => (b.affine(s.momentum, 0.0)? + &g)?,
                            None => g.clone(),
                        };
                        self.first[i] = Some(buf.clone());
                        buf
                    } else {
                        g
                    }
                }
                OptimizerKind::RmspropLike => {
                    let sq = match &self.second[i] {
                        Some(v) => (v.affine(RMS_ALPHA, 0.0)? + g.sqr()?.affine(1.0 - RMS_ALPHA, 0.0)?)?,
                        None => g.sqr()?.affine(1.0 - RMS_ALPHA, 0.0)?,
                    };
                    let correction = 1.0 - RMS_ALPHA.powi(self.steps as i32);
                    let scaled = (&g / sq.affine(1.0 / correction, 0.0)?.sqrt()?.affine(1.0, EPS)?)?;
                    self.second[i] = Some(sq);
                    if s.momentum != 0.0 {
                        let buf = match &self.first[i] {
                            Some(b) => (b.affine(s.momentum, 0.0)? + &scaled)?,
                            None => scaled,
                        };
                        self.first[i] = Some(buf.clone());
                        buf
                    } else {
                        scaled
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = ADAM_BETAS;
                    let m = match &self.first[i] {
                        Some(m) => (m.affine(b1, 0.0)? + g.affine(1.0 - b1, 0.0)?)?,
                        None => g.affine(1.0 - b1, 0.0)?,
                    };
                    let v = match &self.second[i] {
                        Some(v) => (v.affine(b2, 0.0)? + g.sqr()?.affine(1.0 - b2, 0.0)?)?,
                        None => g.sqr()?.affine(1.0 - b2, 0.0)?,
                    };
                    let t = self.steps as i32;
                    let m_hat = m.affine(1.0 / (1.0 - b1.powi(t)), 0.0)?;
                    let v_hat = v.affine(1.0 / (1.0 - b2.powi(t)), 0.0)?;
                    self.first[i] = Some(m);
                    self.second[i] = Some(v);
                    (m_hat / v_hat.sqrt()?.affine(1.0, EPS)?)?
                }
            };
            p.set(&(param - update.affine(s.lr, 0.0)?)?)?;
        }
        Ok(())
    }
}

/// Largest relative disagreement between backprop and central differences
/// over every parameter element. `loss` must be deterministic.
pub fn gradient_check(store: &ParamStore, loss: impl Fn() -> Result<Tensor>, eps: f64) -> Result<GradReport> {
    let grads = loss()?.backward()?;
    let mut report = GradReport::default();
    for (name, var) in store.named() {
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
            None => vec![0.0; var.elem_count()],
        };
        let base: Vec<f64> = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let probe = |i: usize, delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] += delta;
            var.set(&Tensor::from_vec(v, var.dims(), store.device())?.to_dtype(store.dtype())?)?;
            scalar(&loss()?)
        };
        for i in 0..base.len() {
            let fd = (probe(i, eps)? - probe(i, -eps)?) / (2.0 * eps);
            let err = (fd - analytic[i]).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
            report.checked += 1;
            if err > report.worst {
                report.worst = err;
                report.worst_at = format!("{name}[{i}]: numeric {fd:.6e}, analytic {:.6e}", analytic[i]);
            }
        }
        var.set(&Tensor::from_vec(base, var.dims(), store.device())?.to_dtype(store.dtype())?)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Scalar value of a 0-d tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub const ARCHIVE_MAGIC: &[u8; 8] = b"BLDSCAN\0";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchiveHeader {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Single-file checkpoint: magic, `u32` format version, `u64` header length,
/// a JSON header (kind, typed metadata, tensor table) and the little-endian
/// `f32` parameter blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl Archive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
                len: t.values.len(),
            });
            offset += t.values.len();
        }
        let header = serde_json::to_vec(&ArchiveHeader {
            format_version: ARCHIVE_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 4);
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("malformed checkpoint: {what}"));
        if bytes.len() < 20 || &bytes[..8] != ARCHIVE_MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != ARCHIVE_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: ARCHIVE_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: ArchiveHeader = serde_json::from_slice(body)?;
        if header.format_version != ARCHIVE_VERSION {
            return Err(Error::CheckpointVersion {
                found: header.format_version,
                expected: ARCHIVE_VERSION,
            });
        }
        let blob = &bytes[20 + header_len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0;
        for e in header.tensors {
            if e.offset != expected_offset || e.shape.iter().product::<usize>() != e.len {
                return Err(bad("inconsistent tensor table"));
            }
            let raw = blob
                .get(e.offset * 4..(e.offset + e.len) * 4)
                .ok_or_else(|| bad("truncated blob"))?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            expected_offset += e.len;
            tensors.push(TensorRecord {
                name: e.name,
                shape: e.shape,
                values,
            });
        }
        if blob.len() != expected_offset * 4 {
            return Err(bad("trailing bytes after blob"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }
}
