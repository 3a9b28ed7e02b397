//! Convolution-augmented multi-head self-attention fusion of per-window
//! feature maps.
//!
//! The `V` views of a pyramid level, each `(C, H, W)`, are stacked along the
//! channel axis into `(V*C, H, W)` and sent through two parallel branches:
//!
//! * a 3x3 convolution (stride 1, zero padding 1) producing `C - d_v`
//!   channels, and
//! * multi-head self-attention over the `H*W` positions producing `d_v`
//!   channels (no positional encoding).
//!
//! The branch outputs are concatenated, convolution first, giving `C`
//! channels again. With the lesion-detector configuration (`V = 5`,
//! `C = 256`, 2 heads, key depth 20 per head, total value depth 4) the conv
//! branch has 252 output channels.
//!
//! [`fuse_backward`] is the exact reverse-mode gradient of
//! `sum(upstream * fuse(..))` with respect to every parameter and every
//! input view.

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView3, Axis, IxDyn};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("feature block has no views")]
    EmptyBlock,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid fusion configuration: {0}")]
    InvalidConfig(String),
    #[error("tau must lie in [0, 1], got {0}")]
    TauOutOfRange(f64),
}

fn dim_err<T>(msg: String) -> Result<T, FusionError> {
    Err(FusionError::DimensionMismatch(msg))
}

/// Sizes of the fusion block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    /// Number of intensity views `V`.
    pub views: usize,
    /// Channels per view `C`, also the fused output depth.
    pub channels: usize,
    pub heads: usize,
    /// Query/key depth per head.
    pub key_dim: usize,
    /// Value depth summed over heads.
    pub value_dim: usize,
}

impl FusionConfig {
    /// Five 256-channel views, 2 heads, 20 key dims per head, value depth 4.
    pub const DETECTOR: FusionConfig = FusionConfig {
        views: 5,
        channels: 256,
        heads: 2,
        key_dim: 20,
        value_dim: 4,
    };

    /// Small configuration for gradient checks.
    pub const REDUCED: FusionConfig = FusionConfig {
        views: 5,
        channels: 8,
        heads: 2,
        key_dim: 4,
        value_dim: 2,
    };

    pub fn input_channels(&self) -> usize {
        self.views * self.channels
    }

    pub fn conv_channels(&self) -> usize {
        self.channels - self.value_dim
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: &str| Err(FusionError::InvalidConfig(m.to_string()));
        if self.views == 0 || self.channels == 0 || self.heads == 0 || self.key_dim == 0 {
            return bad("views, channels, heads and key_dim must be positive");
        }
        if self.value_dim == 0 || self.value_dim % self.heads != 0 {
            return bad("value_dim must be a positive multiple of heads");
        }
        if self.value_dim >= self.channels {
            return bad("value_dim must be smaller than channels");
        }
        Ok(())
    }
}

/// Per-window feature maps of one pyramid level (`P2`..`P6`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock<T> {
    pub views: Vec<Array3<T>>,
    pub level: u8,
}

impl<T: Scalar> FeatureBlock<T> {
    pub fn new(views: Vec<Array3<T>>, level: u8) -> Result<Self, FusionError> {
        let block = Self { views, level };
        block.check()?;
        Ok(block)
    }

    fn check(&self) -> Result<(usize, usize, usize), FusionError> {
        let first = self.views.first().ok_or(FusionError::EmptyBlock)?.dim();
        if let Some(v) = self.views.iter().find(|v| v.dim() != first) {
            return Err(FusionError::ShapeMismatch(format!(
                "view shape {:?} differs from {:?}",
                v.dim(),
                first
            )));
        }
        if first.0 == 0 || first.1 == 0 || first.2 == 0 {
            return Err(FusionError::ShapeMismatch(format!("empty view {first:?}")));
        }
        Ok(first)
    }

    /// `(C, H, W)` of each view.
    pub fn view_dim(&self) -> Result<(usize, usize, usize), FusionError> {
        self.check()
    }

    /// Uniform `[-1, 1]` feature maps, as a stand-in for backbone output.
    pub fn random(cfg: &FusionConfig, height: usize, width: usize, level: u8, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new_inclusive(-1.0, 1.0);
        let views = (0..cfg.views)
            .map(|_| Array3::from_shape_fn((cfg.channels, height, width), |_| T::lit(dist.sample(&mut rng))))
            .collect();
        Self { views, level }
    }
}

/// Channel-stacks the views in order: `V x (C, H, W) -> (V*C, H, W)`.
pub fn concat_views<T: Scalar>(block: &FeatureBlock<T>) -> Result<Array3<T>, FusionError> {
    block.check()?;
    let views: Vec<ArrayView3<'_, T>> = block.views.iter().map(|v| v.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("views share shape"))
}

/// Projection matrices of the attention branch. Rows are output features,
/// columns input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub heads: usize,
    /// Query/key depth per head.
    pub key_dim: usize,
    /// `(heads * key_dim, C_in)`
    pub wq: Array2<T>,
    /// `(heads * key_dim, C_in)`
    pub wk: Array2<T>,
    /// `(value_dim, C_in)`
    pub wv: Array2<T>,
    /// `(value_dim, value_dim)`
    pub wo: Array2<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn value_dim(&self) -> usize {
        self.wv.nrows()
    }

    pub fn input_channels(&self) -> usize {
        self.wq.ncols()
    }

    fn check(&self) -> Result<(), FusionError> {
        let qk = self.heads * self.key_dim;
        let cin = self.wq.ncols();
        let dv = self.wv.nrows();
        if self.heads == 0 || self.key_dim == 0 || dv == 0 || dv % self.heads != 0 {
            return dim_err(format!(
                "heads {} / key_dim {} / value_dim {dv} inconsistent",
                self.heads, self.key_dim
            ));
        }
        if self.wq.dim() != (qk, cin) || self.wk.dim() != (qk, cin) {
            return dim_err(format!("query/key projections must be ({qk}, {cin})"));
        }
        if self.wv.ncols() != cin || self.wo.dim() != (dv, dv) {
            return dim_err(format!("value/output projections inconsistent with ({dv}, {cin})"));
        }
        Ok(())
    }
}

/// 3x3 convolution weights `(C_out, C_in, 3, 3)` and bias `(C_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub kernel: Array4<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn out_channels(&self) -> usize {
        self.kernel.dim().0
    }

    fn check(&self) -> Result<(), FusionError> {
        let (co, _, kh, kw) = self.kernel.dim();
        if (kh, kw) != (3, 3) {
            return dim_err(format!("kernel must be 3x3, got {kh}x{kw}"));
        }
        if self.bias.len() != co {
            return dim_err(format!("bias length {} for {co} output channels", self.bias.len()));
        }
        Ok(())
    }
}

/// Both branches' parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    pub attention: AttentionParams<T>,
    pub conv: ConvParams<T>,
}

pub const PARAM_NAMES: [&str; 6] = ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "conv.kernel", "conv.bias"];

impl<T: Scalar> FusionParams<T> {
    /// Seeded uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(cfg: &FusionConfig, seed: u64) -> Result<Self, FusionError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cin = cfg.input_channels();
        let qk = cfg.heads * cfg.key_dim;
        let mut uniform2 = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let d = Uniform::new_inclusive(-bound, bound);
            Array2::from_shape_fn((rows, cols), |_| T::lit(d.sample(&mut rng)))
        };
        let wq = uniform2(qk, cin, cin);
        let wk = uniform2(qk, cin, cin);
        let wv = uniform2(cfg.value_dim, cin, cin);
        let wo = uniform2(cfg.value_dim, cfg.value_dim, cfg.value_dim);
        let co = cfg.conv_channels();
        let fan = cin * 9;
        let kernel = uniform2(co, fan, fan)
            .into_shape_with_order((co, cin, 3, 3))
            .expect("kernel reshape");
        let bias = uniform2(1, co, fan).row(0).to_owned();
        Ok(Self {
            attention: AttentionParams {
                heads: cfg.heads,
                key_dim: cfg.key_dim,
                wq,
                wk,
                wv,
                wo,
            },
            conv: ConvParams { kernel, bias },
        })
    }

    /// Parameters as `(name, tensor)` pairs in [`PARAM_NAMES`] order.
    pub fn to_named(&self) -> Vec<(String, ArrayD<T>)> {
        let a = &self.attention;
        vec![
            (PARAM_NAMES[0].into(), a.wq.clone().into_dyn()),
            (PARAM_NAMES[1].into(), a.wk.clone().into_dyn()),
            (PARAM_NAMES[2].into(), a.wv.clone().into_dyn()),
            (PARAM_NAMES[3].into(), a.wo.clone().into_dyn()),
            (PARAM_NAMES[4].into(), self.conv.kernel.clone().into_dyn()),
            (PARAM_NAMES[5].into(), self.conv.bias.clone().into_dyn()),
        ]
    }

    /// Inverse of [`FusionParams::to_named`]; `heads` is not stored in the
    /// tensors and must be supplied.
    pub fn from_named(heads: usize, named: Vec<(String, ArrayD<T>)>) -> Result<Self, FusionError> {
        if named.len() != PARAM_NAMES.len() {
            return Err(FusionError::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                PARAM_NAMES.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), expected) in named.into_iter().zip(PARAM_NAMES) {
            if name != expected {
                return Err(FusionError::ShapeMismatch(format!("expected `{expected}`, got `{name}`")));
            }
            tensors.push(t);
        }
        let mut it = tensors.into_iter();
        let mut two = || {
            it.next()
                .expect("length checked")
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| FusionError::ShapeMismatch(e.to_string()))
        };
        let (wq, wk, wv, wo) = (two()?, two()?, two()?, two()?);
        let kernel = it
            .next()
            .expect("length checked")
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| FusionError::ShapeMismatch(e.to_string()))?;
        let bias = it
            .next()
            .expect("length checked")
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|e| FusionError::ShapeMismatch(e.to_string()))?;
        if heads == 0 || wq.nrows() % heads != 0 {
            return Err(FusionError::ShapeMismatch(format!("{} query rows not divisible by {heads} heads", wq.nrows())));
        }
        let params = Self {
            attention: AttentionParams {
                heads,
                key_dim: wq.nrows() / heads,
                wq,
                wk,
                wv,
                wo,
            },
            conv: ConvParams { kernel, bias },
        };
        params.attention.check()?;
        params.conv.check()?;
        Ok(params)
    }

    /// Target-network update `tau * self + (1 - tau) * online`.
    pub fn polyak(&self, online: &FusionParams<T>, tau: T) -> Result<Self, FusionError> {
        let target: Vec<_> = self.to_named();
        let online: Vec<ArrayD<T>> = online.to_named().into_iter().map(|(_, t)| t).collect();
        let names: Vec<String> = target.iter().map(|(n, _)| n.clone()).collect();
        let target: Vec<ArrayD<T>> = target.into_iter().map(|(_, t)| t).collect();
        let updated = polyak_update(&target, &online, tau)?;
        Self::from_named(self.attention.heads, names.into_iter().zip(updated).collect())
    }
}

/// Elementwise `tau * target + (1 - tau) * online` over congruent lists.
pub fn polyak_update<T: Scalar>(
    target: &[ArrayD<T>],
    online: &[ArrayD<T>],
    tau: T,
) -> Result<Vec<ArrayD<T>>, FusionError> {
    if !(tau >= T::zero() && tau <= T::one()) {
        return Err(FusionError::TauOutOfRange(tau.as_f64()));
    }
    if target.len() != online.len() {
        return Err(FusionError::ShapeMismatch(format!(
            "{} target tensors vs {} online tensors",
            target.len(),
            online.len()
        )));
    }
    target
        .iter()
        .zip(online)
        .enumerate()
        .map(|(i, (t, o))| {
            if t.shape() != o.shape() {
                return Err(FusionError::ShapeMismatch(format!(
                    "tensor {i}: {:?} vs {:?}",
                    t.shape(),
                    o.shape()
                )));
            }
            let rest = T::one() - tau;
            let mut out = t.clone();
            out.zip_mut_with(o, |x, &y| *x = tau * *x + rest * y);
            Ok(out)
        })
        .collect()
}

/// Attention branch output and the per-head `(N, N)` attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<T> {
    /// `(value_dim, H, W)`
    pub out: Array3<T>,
    pub attn: Vec<Array2<T>>,
}

struct AttentionCache<T> {
    /// `(N, C_in)`
    xt: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: Vec<Array2<T>>,
    /// Heads side by side, `(N, value_dim)`.
    concat: Array2<T>,
}

fn softmax_rows<T: Scalar>(scores: &mut Array2<T>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn attention_forward<T: Scalar>(
    x: ArrayView2<'_, T>,
    p: &AttentionParams<T>,
) -> (Array2<T>, AttentionCache<T>) {
    let xt = x.t().to_owned();
    let q = xt.dot(&p.wq.t());
    let k = xt.dot(&p.wk.t());
    let v = xt.dot(&p.wv.t());
    let dk = p.key_dim;
    let dvh = p.value_dim() / p.heads;
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let n = xt.nrows();
    let mut concat = Array2::<T>::zeros((n, p.value_dim()));
    let mut attn = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = q.slice(s![.., h * dk..(h + 1) * dk]);
        let kh = k.slice(s![.., h * dk..(h + 1) * dk]);
        let vh = v.slice(s![.., h * dvh..(h + 1) * dvh]);
        let mut a = qh.dot(&kh.t()) * scale;
        softmax_rows(&mut a);
        concat.slice_mut(s![.., h * dvh..(h + 1) * dvh]).assign(&a.dot(&vh));
        attn.push(a);
    }
    let y = concat.dot(&p.wo.t());
    (
        y.reversed_axes().as_standard_layout().into_owned(),
        AttentionCache {
            xt,
            q,
            k,
            v,
            attn,
            concat,
        },
    )
}

fn flatten<T: Scalar>(x: ArrayView3<'_, T>) -> Array2<T> {
    let (c, h, w) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous reshape")
}

/// Multi-head self-attention over the spatial positions of `x`.
pub fn mhsa_forward<T: Scalar>(
    x: ArrayView3<'_, T>,
    p: &AttentionParams<T>,
) -> Result<AttentionOutput<T>, FusionError> {
    p.check()?;
    let (c, h, w) = x.dim();
    if c != p.input_channels() {
        return dim_err(format!("input has {c} channels, attention expects {}", p.input_channels()));
    }
    if h * w == 0 {
        return dim_err("input has no positions".into());
    }
    let (out, cache) = attention_forward(flatten(x).view(), p);
    Ok(AttentionOutput {
        out: out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((p.value_dim(), h, w))
            .expect("contiguous reshape"),
        attn: cache.attn,
    })
}

/// Unfolds 3x3 zero-padded neighbourhoods: row `c*9 + ky*3 + kx`, column
/// `y*W + x`.
fn im2col<T: Scalar>(x: ArrayView3<'_, T>) -> Array2<T> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<T>::zeros((c * 9, h * w));
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let mut row = cols.row_mut(ci * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            row[y * w + xx] = x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Scalar>(cols: ArrayView2<'_, T>, dims: (usize, usize, usize)) -> Array3<T> {
    let (c, h, w) = dims;
    let mut x = Array3::<T>::zeros(dims);
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = cols.row(ci * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            x[[ci, sy as usize, sx as usize]] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

fn kernel_matrix<T: Scalar>(p: &ConvParams<T>) -> Array2<T> {
    let (co, ci, _, _) = p.kernel.dim();
    p.kernel
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, ci * 9))
        .expect("contiguous reshape")
}

/// 3x3 cross-correlation, stride 1, zero padding 1, plus bias.
pub fn conv_forward<T: Scalar>(x: ArrayView3<'_, T>, p: &ConvParams<T>) -> Result<Array3<T>, FusionError> {
    p.check()?;
    let (c, h, w) = x.dim();
    let (co, ci, _, _) = p.kernel.dim();
    if c != ci {
        return dim_err(format!("input has {c} channels, kernel expects {ci}"));
    }
    let mut out = kernel_matrix(p).dot(&im2col(x));
    out += &p.bias.view().insert_axis(Axis(1));
    Ok(out
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, h, w))
        .expect("contiguous reshape"))
}

fn check_branches<T: Scalar>(
    block: &FeatureBlock<T>,
    ap: &AttentionParams<T>,
    cp: &ConvParams<T>,
) -> Result<(usize, usize, usize), FusionError> {
    let (c, h, w) = block.check()?;
    ap.check()?;
    cp.check()?;
    let cin = c * block.views.len();
    if ap.input_channels() != cin || cp.kernel.dim().1 != cin {
        return dim_err(format!(
            "stacked input has {cin} channels; attention expects {}, conv expects {}",
            ap.input_channels(),
            cp.kernel.dim().1
        ));
    }
    Ok((cp.out_channels() + ap.value_dim(), h, w))
}

/// Fused `(C_conv + d_v, H, W)` map: conv branch channels first, attention
/// channels last.
pub fn fuse<T: Scalar>(
    block: &FeatureBlock<T>,
    ap: &AttentionParams<T>,
    cp: &ConvParams<T>,
) -> Result<Array3<T>, FusionError> {
    check_branches(block, ap, cp)?;
    let x = concat_views(block)?;
    let conv = conv_forward(x.view(), cp)?;
    let attn = mhsa_forward(x.view(), ap)?;
    Ok(concatenate(Axis(0), &[conv.view(), attn.out.view()]).expect("matching spatial dims"))
}

/// Fuses every pyramid level independently.
pub fn fuse_levels<T: Scalar>(
    blocks: &[FeatureBlock<T>],
    params: &FusionParams<T>,
) -> Result<Vec<Array3<T>>, FusionError> {
    use rayon::prelude::*;
    blocks
        .par_iter()
        .map(|b| fuse(b, &params.attention, &params.conv))
        .collect()
}

/// Gradients of `sum(upstream * fuse(..))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads<T> {
    pub views: Vec<Array3<T>>,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub kernel: Array4<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> FusionGrads<T> {
    /// Parameter gradients in [`PARAM_NAMES`] order.
    pub fn params(&self) -> FusionParams<T> {
        FusionParams {
            attention: AttentionParams {
                heads: 0,
                key_dim: 0,
                wq: self.wq.clone(),
                wk: self.wk.clone(),
                wv: self.wv.clone(),
                wo: self.wo.clone(),
            },
            conv: ConvParams {
                kernel: self.kernel.clone(),
                bias: self.bias.clone(),
            },
        }
    }
}

pub fn fuse_backward<T: Scalar>(
    block: &FeatureBlock<T>,
    ap: &AttentionParams<T>,
    cp: &ConvParams<T>,
    upstream: ArrayView3<'_, T>,
) -> Result<FusionGrads<T>, FusionError> {
    let out_dim = check_branches(block, ap, cp)?;
    if upstream.dim() != out_dim {
        return dim_err(format!("upstream {:?} but fused output is {out_dim:?}", upstream.dim()));
    }
    let (_, h, w) = out_dim;
    let n = h * w;
    let stacked = concat_views(block)?;
    let x = flatten(stacked.view());
    let co = cp.out_channels();
    let up = flatten(upstream);
    let d_conv = up.slice(s![..co, ..]);
    let d_attn_out = up.slice(s![co.., ..]);

    // convolution branch
    let cols = im2col(stacked.view());
    let kmat = kernel_matrix(cp);
    let d_kmat = d_conv.dot(&cols.t());
    let d_bias = d_conv.sum_axis(Axis(1));
    let d_cols = kmat.t().dot(&d_conv);
    let mut dx = flatten(col2im(d_cols.view(), stacked.dim()).view());

    // attention branch
    let (_, cache) = attention_forward(x.view(), ap);
    let dk = ap.key_dim;
    let dvh = ap.value_dim() / ap.heads;
    let scale = T::one() / T::lit(dk as f64).sqrt();
    let dy = d_attn_out.t();
    let d_wo = dy.t().dot(&cache.concat);
    let d_concat = dy.dot(&ap.wo);
    let mut dq = Array2::<T>::zeros(cache.q.dim());
    let mut dkm = Array2::<T>::zeros(cache.k.dim());
    let mut dv = Array2::<T>::zeros(cache.v.dim());
    for (hd, a) in cache.attn.iter().enumerate() {
        let ks = s![.., hd * dk..(hd + 1) * dk];
        let vs = s![.., hd * dvh..(hd + 1) * dvh];
        let d_oh = d_concat.slice(vs);
        let vh = cache.v.slice(vs);
        let d_a = d_oh.dot(&vh.t());
        dv.slice_mut(vs).assign(&a.t().dot(&d_oh));
        // softmax backward: dS = A * (dA - rowsum(dA * A))
        let mut d_s = Array2::<T>::zeros((n, n));
        for i in 0..n {
            let arow = a.row(i);
            let darow = d_a.row(i);
            let dot = arow.dot(&darow);
            for j in 0..n {
                d_s[[i, j]] = arow[j] * (darow[j] - dot) * scale;
            }
        }
        dq.slice_mut(ks).assign(&d_s.dot(&cache.k.slice(ks)));
        dkm.slice_mut(ks).assign(&d_s.t().dot(&cache.q.slice(ks)));
    }
    let d_wq = dq.t().dot(&cache.xt);
    let d_wk = dkm.t().dot(&cache.xt);
    let d_wv = dv.t().dot(&cache.xt);
    let dxt = dq.dot(&ap.wq) + dkm.dot(&ap.wk) + dv.dot(&ap.wv);
    dx += &dxt.t();

    let (c, _, _) = block.views[0].dim();
    let views = (0..block.views.len())
        .map(|v| {
            dx.slice(s![v * c..(v + 1) * c, ..])
                .to_owned()
                .into_shape_with_order((c, h, w))
                .expect("contiguous reshape")
        })
        .collect();
    Ok(FusionGrads {
        views,
        wq: d_wq,
        wk: d_wk,
        wv: d_wv,
        wo: d_wo,
        kernel: d_kmat
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(cp.kernel.dim())
            .expect("contiguous reshape"),
        bias: d_bias,
    })
}

/// Largest `|row sum - 1|` over all attention rows.
pub fn max_row_sum_deviation<T: Scalar>(attn: &[Array2<T>]) -> f64 {
    attn.iter()
        .flat_map(|a| a.rows().into_iter().map(|r| (r.sum().as_f64() - 1.0).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative error used by [`gradient_check`]: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares [`fuse_backward`] against central differences of
/// `sum(upstream * fuse(..))`, probing up to `per_tensor` seeded-random
/// entries of every parameter and input view (`usize::MAX` probes all).
pub fn gradient_check(
    block: &FeatureBlock<f64>,
    params: &FusionParams<f64>,
    upstream: ArrayView3<'_, f64>,
    step: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheck, FusionError> {
    use rand::seq::index::sample;

    let grads = fuse_backward(block, &params.attention, &params.conv, upstream)?;
    let loss = |b: &FeatureBlock<f64>, p: &FusionParams<f64>| -> f64 {
        let out = fuse(b, &p.attention, &p.conv).expect("shapes fixed");
        (&out * &upstream).sum()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |len: usize| -> Vec<usize> {
        if per_tensor >= len {
            (0..len).collect()
        } else {
            sample(&mut rng, len, per_tensor).into_vec()
        }
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut record = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic, numeric, GRAD_CHECK_FLOOR));
        checked += 1;
    };

    let named = params.to_named();
    let grad_named = grads.params().to_named();
    for (ti, ((_, tensor), (_, grad))) in named.iter().zip(&grad_named).enumerate() {
        let flat_grad: Vec<f64> = grad.iter().copied().collect();
        for idx in pick(tensor.len()) {
            let eval = |delta: f64| {
                let mut perturbed = named.clone();
                let t = &mut perturbed[ti].1;
                let slot = t.as_slice_mut().expect("standard layout");
                slot[idx] += delta;
                let p = FusionParams::from_named(params.attention.heads, perturbed).expect("same shapes");
                loss(block, &p)
            };
            record(flat_grad[idx], eval(step), eval(-step));
        }
    }
    for (vi, view) in block.views.iter().enumerate() {
        let flat_grad: Vec<f64> = grads.views[vi].iter().copied().collect();
        for idx in pick(view.len()) {
            let eval = |delta: f64| {
                let mut b = block.clone();
                b.views[vi].as_slice_mut().expect("standard layout")[idx] += delta;
                loss(&b, params)
            };
            record(flat_grad[idx], eval(step), eval(-step));
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}

/// Denominator floor for [`relative_error`] in gradient checks.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Shapes a flat list back into a tensor; helper for blob loading.
pub fn tensor_from_vec<T: Scalar>(shape: &[usize], data: Vec<T>) -> Result<ArrayD<T>, FusionError> {
    ArrayD::from_shape_vec(IxDyn(shape), data).map_err(|e| FusionError::ShapeMismatch(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn reduced(seed: u64, h: usize, w: usize) -> (FeatureBlock<f64>, FusionParams<f64>) {
        let cfg = FusionConfig::REDUCED;
        (FeatureBlock::random(&cfg, h, w, 3, seed), FusionParams::init(&cfg, seed + 1).unwrap())
    }

    /// Direct quadruple loop, independent of im2col.
    fn naive_conv(x: &Array3<f64>, p: &ConvParams<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let co = p.kernel.dim().0;
        let mut out = Array3::zeros((co, h, w));
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = p.bias[o];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += p.kernel[[o, ci, ky, kx]] * x[[ci, sy as usize, sx as usize]];
                                }
                            }
                        }
                    }
                    out[[o, y, xx]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn concat_shapes() {
        let cfg = FusionConfig { channels: 16, ..FusionConfig::DETECTOR };
        let block = FeatureBlock::<f64>::random(&cfg, 4, 4, 2, 0);
        assert_eq!(concat_views(&block).unwrap().dim(), (80, 4, 4));
        let single = FeatureBlock::new(vec![block.views[0].clone()], 2).unwrap();
        assert_eq!(concat_views(&single).unwrap(), block.views[0]);
        let bad = FeatureBlock {
            views: vec![Array3::<f64>::zeros((2, 3, 3)), Array3::zeros((2, 4, 3))],
            level: 2,
        };
        assert!(matches!(concat_views(&bad), Err(FusionError::ShapeMismatch(_))));
        let empty = FeatureBlock::<f64> { views: vec![], level: 2 };
        assert_eq!(concat_views(&empty), Err(FusionError::EmptyBlock));
    }

    #[test]
    fn detector_sized_concat() {
        let block = FeatureBlock::<f32>::random(&FusionConfig::DETECTOR, 4, 4, 4, 1);
        assert_eq!(concat_views(&block).unwrap().dim(), (1280, 4, 4));
    }

    #[test]
    fn conv_matches_naive_loop() {
        let (block, params) = reduced(4, 6, 5);
        let x = concat_views(&block).unwrap();
        let fast = conv_forward(x.view(), &params.conv).unwrap();
        let slow = naive_conv(&x, &params.conv);
        let diff = (&fast - &slow).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn conv_delta_and_zero_kernels() {
        let x = Array3::from_shape_fn((3, 4, 5), |(c, y, x)| (c * 20 + y * 5 + x) as f64);
        let mut kernel = Array4::zeros((2, 3, 3, 3));
        kernel[[0, 0, 1, 1]] = 1.0;
        let p = ConvParams { kernel, bias: Array1::zeros(2) };
        let out = conv_forward(x.view(), &p).unwrap();
        assert_eq!(out.slice(s![0, .., ..]), x.slice(s![0, .., ..]));
        let p = ConvParams {
            kernel: Array4::zeros((2, 3, 3, 3)),
            bias: Array1::from(vec![1.5, -2.0]),
        };
        let out = conv_forward(x.view(), &p).unwrap();
        assert!(out.slice(s![0, .., ..]).iter().all(|&v| v == 1.5));
        assert!(out.slice(s![1, .., ..]).iter().all(|&v| v == -2.0));
        assert!(matches!(
            conv_forward(Array3::<f64>::zeros((2, 4, 4)).view(), &p),
            Err(FusionError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (block, params) = reduced(8, 3, 4);
        let x = concat_views(&block).unwrap();
        let out = mhsa_forward(x.view(), &params.attention).unwrap();
        assert_eq!(out.out.dim(), (2, 3, 4));
        assert_eq!(out.attn.len(), 2);
        assert!(max_row_sum_deviation(&out.attn) < 1e-12);
        assert!(out.attn.iter().all(|a| a.iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn single_position_attention() {
        let (block, params) = reduced(2, 1, 1);
        let x = concat_views(&block).unwrap();
        let out = mhsa_forward(x.view(), &params.attention).unwrap();
        assert!(out.attn.iter().all(|a| a[[0, 0]] == 1.0));
        let xv = x.into_shape_with_order((40, 1)).unwrap();
        let values = params.attention.wv.dot(&xv);
        let expected = params.attention.wo.dot(&values);
        for c in 0..2 {
            assert!((out.out[[c, 0, 0]] - expected[[c, 0]]).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let (block, params) = reduced(12, 3, 4);
        let x = concat_views(&block).unwrap();
        let flat = flatten(x.view());
        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
        let permuted = flat.select(Axis(1), &perm).to_shape((40, 3, 4)).unwrap().to_owned();
        let base = flatten(mhsa_forward(x.view(), &params.attention).unwrap().out.view());
        let moved = flatten(mhsa_forward(permuted.view(), &params.attention).unwrap().out.view());
        let expected = base.select(Axis(1), &perm);
        let diff = (&moved - &expected).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-10);

        // the full fused map is not equivariant: the conv branch sees neighbours
        let pblock = FeatureBlock {
            views: (0..5)
                .map(|v| permuted.slice(s![v * 8..(v + 1) * 8, .., ..]).to_owned())
                .collect(),
            level: 3,
        };
        let fused = flatten(fuse(&block, &params.attention, &params.conv).unwrap().view());
        let fused_p = flatten(fuse(&pblock, &params.attention, &params.conv).unwrap().view());
        let diff = (&fused_p - &fused.select(Axis(1), &perm)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff > 1e-6);
    }

    #[test]
    fn value_path_is_linear() {
        let (block, params) = reduced(3, 2, 3);
        let x = concat_views(&block).unwrap();
        let base = mhsa_forward(x.view(), &params.attention).unwrap().out;
        let mut scaled = params.attention.clone();
        scaled.wv *= 2.5;
        let out = mhsa_forward(x.view(), &scaled).unwrap().out;
        let diff = (&out - &(&base * 2.5)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-12);
    }

    #[test]
    fn fuse_layout() {
        let (block, mut params) = reduced(6, 3, 3);
        let fused = fuse(&block, &params.attention, &params.conv).unwrap();
        assert_eq!(fused.dim(), (8, 3, 3));
        let x = concat_views(&block).unwrap();
        let attn = mhsa_forward(x.view(), &params.attention).unwrap().out;
        assert_eq!(fused.slice(s![6.., .., ..]), attn);
        params.conv.kernel.fill(0.0);
        params.conv.bias.fill(0.0);
        let fused = fuse(&block, &params.attention, &params.conv).unwrap();
        assert!(fused.slice(s![..6, .., ..]).iter().all(|&v| v == 0.0));
        assert_eq!(fused.slice(s![6.., .., ..]), attn);
    }

    #[test]
    fn fuse_levels_independent() {
        let cfg = FusionConfig::REDUCED;
        let params = FusionParams::<f64>::init(&cfg, 1).unwrap();
        let blocks: Vec<_> = (0..5u8)
            .map(|l| FeatureBlock::random(&cfg, 8 >> (l / 2), 8 >> (l / 2), l + 2, l as u64))
            .collect();
        let outs = fuse_levels(&blocks, &params).unwrap();
        for (b, o) in blocks.iter().zip(&outs) {
            assert_eq!(o, &fuse(b, &params.attention, &params.conv).unwrap());
        }
    }

    #[test]
    fn backward_zero_and_linear() {
        let (block, params) = reduced(9, 2, 3);
        let zero = Array3::zeros((8, 2, 3));
        let g = fuse_backward(&block, &params.attention, &params.conv, zero.view()).unwrap();
        for (_, t) in g.params().to_named() {
            assert!(t.iter().all(|&v| v == 0.0));
        }
        assert!(g.views.iter().all(|v| v.iter().all(|&x| x == 0.0)));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Uniform::new(-1.0, 1.0);
        let up = Array3::from_shape_fn((8, 2, 3), |_| d.sample(&mut rng));
        let g1 = fuse_backward(&block, &params.attention, &params.conv, up.view()).unwrap();
        let g3 = fuse_backward(&block, &params.attention, &params.conv, (&up * 3.0).view()).unwrap();
        for ((_, a), (_, b)) in g1.params().to_named().iter().zip(g3.params().to_named().iter()) {
            let diff = (&(a * 3.0) - b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(diff < 1e-12);
        }
        assert!(matches!(
            fuse_backward(&block, &params.attention, &params.conv, Array3::zeros((7, 2, 3)).view()),
            Err(FusionError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn sampled_gradient_check() {
        let (block, params) = reduced(21, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Uniform::new(-1.0, 1.0);
        let up = Array3::from_shape_fn((8, 3, 3), |_| d.sample(&mut rng));
        let report = gradient_check(&block, &params, up.view(), 1e-5, 20, 0).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        // wo has 4 entries and the bias 6, everything else is sampled
        assert_eq!(report.checked, 20 * 4 + 4 + 6 + 20 * 5);
    }

    #[test]
    fn polyak_cases() {
        let t = vec![ArrayD::from_elem(IxDyn(&[2, 2]), 1.0)];
        let o = vec![ArrayD::from_elem(IxDyn(&[2, 2]), 0.0)];
        assert_eq!(polyak_update(&t, &o, 1.0).unwrap(), t);
        assert_eq!(polyak_update(&t, &o, 0.0).unwrap(), o);
        assert!(polyak_update(&t, &o, 0.5).unwrap()[0].iter().all(|&v| v == 0.5));
        assert_eq!(polyak_update(&t, &o, 1.5), Err(FusionError::TauOutOfRange(1.5)));
        let wrong = vec![ArrayD::from_elem(IxDyn(&[3]), 0.0)];
        assert!(matches!(polyak_update(&t, &wrong, 0.5), Err(FusionError::ShapeMismatch(_))));

        let a = FusionParams::<f64>::init(&FusionConfig::REDUCED, 1).unwrap();
        let b = FusionParams::<f64>::init(&FusionConfig::REDUCED, 2).unwrap();
        assert_eq!(a.polyak(&b, 1.0).unwrap(), a);
        assert_eq!(a.polyak(&b, 0.0).unwrap(), b);
    }

    #[test]
    fn named_round_trip_and_init_bounds() {
        let p = FusionParams::<f64>::init(&FusionConfig::REDUCED, 3).unwrap();
        let back = FusionParams::from_named(2, p.to_named()).unwrap();
        assert_eq!(back, p);
        let bound = 1.0 / (40.0f64).sqrt();
        assert!(p.attention.wq.iter().all(|v| v.abs() <= bound));
        let bound = 1.0 / (360.0f64).sqrt();
        assert!(p.conv.kernel.iter().all(|v| v.abs() <= bound));
        assert_eq!(p, FusionParams::init(&FusionConfig::REDUCED, 3).unwrap());
        assert!(FusionParams::<f64>::init(&FusionConfig { value_dim: 3, ..FusionConfig::REDUCED }, 0).is_err());
    }
}
