//! Encoder-only transformer classifier with hand-written backpropagation.
//!
//! Pipeline per window: standardize → linear token embedding + sinusoidal
//! positions → pre-norm encoder blocks (multi-head self-attention, ReLU
//! feed-forward) → final layer norm → mean over time → two dense ReLU layers
//! → softmax head.
//!
//! All trainable values live in one flat `Vec<f64>`; named slots map it onto
//! matrices. Gradients share the layout.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FeatureWindow, GestureClass, NUM_CLASSES, STREAM_FEATURES, WINDOW_LEN};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub window_len: usize,
    pub features: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub blocks: usize,
    pub dense_units: usize,
    pub classes: usize,
}

impl ModelShape {
    /// Full-size model: 60 x 28 windows, two encoder blocks, two 64-unit
    /// dense layers, five classes.
    pub fn standard(d_model: usize, heads: usize) -> Self {
        Self {
            window_len: WINDOW_LEN,
            features: STREAM_FEATURES,
            d_model,
            heads,
            ff_dim: 2 * d_model,
            blocks: 2,
            dense_units: 64,
            classes: NUM_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("window_len", self.window_len),
            ("features", self.features),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("dense_units", self.dense_units),
            ("classes", self.classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} does not divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if self.classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "classifier head must have {NUM_CLASSES} outputs"
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockSlots {
    ln1_g: Slot,
    ln1_b: Slot,
    wq: Slot,
    bq: Slot,
    wk: Slot,
    bk: Slot,
    wv: Slot,
    bv: Slot,
    wo: Slot,
    bo: Slot,
    ln2_g: Slot,
    ln2_b: Slot,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embed_w: Slot,
    embed_b: Slot,
    blocks: Vec<BlockSlots>,
    norm_g: Slot,
    norm_b: Slot,
    dense1_w: Slot,
    dense1_b: Slot,
    dense2_w: Slot,
    dense2_b: Slot,
    head_w: Slot,
    head_b: Slot,
    total: usize,
    names: Vec<(String, Slot)>,
}

struct LayoutBuilder {
    offset: usize,
    names: Vec<(String, Slot)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Slot {
        let slot = Slot {
            offset: self.offset,
            rows,
            cols,
        };
        self.offset += rows * cols;
        self.names.push((name.into(), slot));
        slot
    }
}

impl Layout {
    fn new(shape: &ModelShape) -> Self {
        let d = shape.d_model;
        let mut b = LayoutBuilder {
            offset: 0,
            names: Vec::new(),
        };
        let embed_w = b.add("embed.w", shape.features, d);
        let embed_b = b.add("embed.b", 1, d);
        let blocks = (0..shape.blocks)
            .map(|i| BlockSlots {
                ln1_g: b.add(format!("block{i}.ln1.gamma"), 1, d),
                ln1_b: b.add(format!("block{i}.ln1.beta"), 1, d),
                wq: b.add(format!("block{i}.attn.wq"), d, d),
                bq: b.add(format!("block{i}.attn.bq"), 1, d),
                wk: b.add(format!("block{i}.attn.wk"), d, d),
                bk: b.add(format!("block{i}.attn.bk"), 1, d),
                wv: b.add(format!("block{i}.attn.wv"), d, d),
                bv: b.add(format!("block{i}.attn.bv"), 1, d),
                wo: b.add(format!("block{i}.attn.wo"), d, d),
                bo: b.add(format!("block{i}.attn.bo"), 1, d),
                ln2_g: b.add(format!("block{i}.ln2.gamma"), 1, d),
                ln2_b: b.add(format!("block{i}.ln2.beta"), 1, d),
                w1: b.add(format!("block{i}.ffn.w1"), d, shape.ff_dim),
                b1: b.add(format!("block{i}.ffn.b1"), 1, shape.ff_dim),
                w2: b.add(format!("block{i}.ffn.w2"), shape.ff_dim, d),
                b2: b.add(format!("block{i}.ffn.b2"), 1, d),
            })
            .collect();
        let norm_g = b.add("norm.gamma", 1, d);
        let norm_b = b.add("norm.beta", 1, d);
        let dense1_w = b.add("dense1.w", d, shape.dense_units);
        let dense1_b = b.add("dense1.b", 1, shape.dense_units);
        let dense2_w = b.add("dense2.w", shape.dense_units, shape.dense_units);
        let dense2_b = b.add("dense2.b", 1, shape.dense_units);
        let head_w = b.add("head.w", shape.dense_units, shape.classes);
        let head_b = b.add("head.b", 1, shape.classes);
        Self {
            embed_w,
            embed_b,
            blocks,
            norm_g,
            norm_b,
            dense1_w,
            dense1_b,
            dense2_w,
            dense2_b,
            head_w,
            head_b,
            total: b.offset,
            names: b.names,
        }
    }
}

fn view2(values: &[f64], slot: Slot) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((slot.rows, slot.cols), &values[slot.offset..slot.offset + slot.len()])
        .expect("slot within layout")
}

fn view1(values: &[f64], slot: Slot) -> ArrayView1<'_, f64> {
    ArrayView1::from(&values[slot.offset..slot.offset + slot.len()])
}

fn view2_mut(values: &mut [f64], slot: Slot) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape(
        (slot.rows, slot.cols),
        &mut values[slot.offset..slot.offset + slot.len()],
    )
    .expect("slot within layout")
}

/// Name, shape and flat offset of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Per-feature affine normalization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            scale: vec![1.0; features],
        }
    }

    /// Mean and standard deviation over every row of every window.
    pub fn fit<'a>(windows: impl IntoIterator<Item = ArrayView2<'a, f64>>, features: usize) -> Self {
        let mut sum = vec![0.0; features];
        let mut sq = vec![0.0; features];
        let mut n = 0usize;
        for w in windows {
            for row in w.rows() {
                for (j, v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity(features);
        }
        let n = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, w: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = w.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        out
    }
}

fn positional_encoding(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(t, i)| {
        let pair = (i / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shape: ModelShape,
    layout: Layout,
    values: Vec<f64>,
    positional: Array2<f64>,
    standardizer: Standardizer,
    seed: u64,
}

impl ModelParams {
    /// Glorot-normal weights, unit layer-norm gains, zero biases.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let layout = Layout::new(&shape);
        let mut values = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, slot) in &layout.names {
            let chunk = &mut values[slot.offset..slot.offset + slot.len()];
            if name.ends_with(".gamma") {
                chunk.fill(1.0);
            } else if slot.rows > 1 {
                let sd = (2.0 / (slot.rows + slot.cols) as f64).sqrt();
                let normal = Normal::new(0.0, sd).expect("positive sd");
                for v in chunk.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        Ok(Self {
            positional: positional_encoding(shape.window_len, shape.d_model),
            standardizer: Standardizer::identity(shape.features),
            shape,
            layout,
            values,
            seed,
        })
    }

    pub(crate) fn from_parts(
        shape: ModelShape,
        values: Vec<f64>,
        standardizer: Standardizer,
        seed: u64,
    ) -> Result<Self> {
        shape.validate()?;
        let layout = Layout::new(&shape);
        if values.len() != layout.total {
            return Err(Error::Shape(format!(
                "expected {} parameters for {:?}, got {}",
                layout.total,
                shape,
                values.len()
            )));
        }
        if standardizer.mean.len() != shape.features || standardizer.scale.len() != shape.features
        {
            return Err(Error::Shape("standardizer width does not match features".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(Self {
            positional: positional_encoding(shape.window_len, shape.d_model),
            shape,
            layout,
            values,
            standardizer,
            seed,
        })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn positional(&self) -> ArrayView2<'_, f64> {
        self.positional.view()
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn set_standardizer(&mut self, s: Standardizer) -> Result<()> {
        if s.mean.len() != self.shape.features || s.scale.len() != self.shape.features {
            return Err(Error::Shape("standardizer width does not match features".into()));
        }
        self.standardizer = s;
        Ok(())
    }

    pub fn tensors(&self) -> Vec<TensorInfo> {
        self.layout
            .names
            .iter()
            .map(|(name, slot)| TensorInfo {
                name: name.clone(),
                rows: slot.rows,
                cols: slot.cols,
                offset: slot.offset,
            })
            .collect()
    }

    /// Flat view of one named tensor.
    pub fn tensor(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        self.layout
            .names
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, slot)| view2(&self.values, *slot))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<ArrayViewMut2<'_, f64>> {
        let slot = self.layout.names.iter().find(|(n, _)| n == name)?.1;
        Some(view2_mut(&mut self.values, slot))
    }

    fn check_window(&self, w: &ArrayView2<'_, f64>) -> Result<()> {
        if w.dim() != (self.shape.window_len, self.shape.features) {
            return Err(Error::Shape(format!(
                "model expects {}x{} windows, got {:?}",
                self.shape.window_len,
                self.shape.features,
                w.dim()
            )));
        }
        Ok(())
    }

    /// Class probabilities for one window.
    pub fn forward(&self, window: &FeatureWindow) -> Result<[f64; NUM_CLASSES]> {
        self.forward_view(window.view())
    }

    pub fn forward_view(&self, window: ArrayView2<'_, f64>) -> Result<[f64; NUM_CLASSES]> {
        self.check_window(&window)?;
        let cache = forward_batch(self, &[window], None);
        let mut out = [0.0; NUM_CLASSES];
        for (o, p) in out.iter_mut().zip(cache.probs.row(0)) {
            *o = *p;
        }
        Ok(out)
    }

    /// Pre-softmax scores for one window.
    pub fn logits_view(&self, window: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.check_window(&window)?;
        let cache = forward_batch(self, &[window], None);
        Ok(cache.logits.row(0).to_vec())
    }

    pub fn predict_batch(&self, windows: &[ArrayView2<'_, f64>]) -> Result<Array2<f64>> {
        for w in windows {
            self.check_window(w)?;
        }
        Ok(forward_batch(self, windows, None).probs)
    }
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, istd) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *istd = 1.0 / (var + LN_EPS).sqrt();
        let s = *istd;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<'_, f64>,
    mut dg: ArrayViewMut1<'_, f64>,
    mut db: ArrayViewMut1<'_, f64>,
) -> Array2<f64> {
    dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    db += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = dy * &g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, dxh), xh), istd) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = dxh.sum() / d;
        let mean_dx = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for ((o, a), b) in out.iter_mut().zip(dxh.iter()).zip(xh.iter()) {
            *o = istd * (a - mean_d - b * mean_dx);
        }
    }
    dx
}

fn linear(x: &Array2<f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

fn linear_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    w: ArrayView2<'_, f64>,
    g: &mut [f64],
    w_slot: Slot,
    b_slot: Slot,
) -> Array2<f64> {
    assert!(w_slot.offset + w_slot.len() <= b_slot.offset, "weight precedes bias");
    let (lo, hi) = g.split_at_mut(b_slot.offset);
    let mut dw = ArrayViewMut2::from_shape(
        (w_slot.rows, w_slot.cols),
        &mut lo[w_slot.offset..w_slot.offset + w_slot.len()],
    )
    .expect("slot within layout");
    let mut db = ArrayViewMut1::from(&mut hi[..b_slot.len()]);
    dw += &x.t().dot(dy);
    db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn relu(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(|v| v.max(0.0))
}

fn relu_backward(dy: &Array2<f64>, pre: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0
        }
    });
    out
}

struct BlockCache {
    input: Array2<f64>,
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
}

pub(crate) struct ForwardCache {
    batch: usize,
    x: Array2<f64>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    pooled: Array2<f64>,
    h1_pre: Array2<f64>,
    h1: Array2<f64>,
    mask1: Option<Array2<f64>>,
    h2_pre: Array2<f64>,
    h2: Array2<f64>,
    mask2: Option<Array2<f64>>,
    pub(crate) logits: Array2<f64>,
    pub(crate) probs: Array2<f64>,
}

/// Inverted-dropout source used only while training.
pub(crate) struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn dropout_mask(rows: usize, cols: usize, d: &mut Dropout<'_>) -> Array2<f64> {
    let keep = 1.0 - d.rate;
    Array2::from_shape_fn((rows, cols), |_| {
        if d.rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

pub(crate) fn forward_batch(
    params: &ModelParams,
    windows: &[ArrayView2<'_, f64>],
    mut dropout: Option<Dropout<'_>>,
) -> ForwardCache {
    let sh = &params.shape;
    let (t_len, d) = (sh.window_len, sh.d_model);
    let batch = windows.len();
    let n = batch * t_len;
    let v = &params.values;
    let lay = &params.layout;

    let mut x = Array2::zeros((n, sh.features));
    for (i, w) in windows.iter().enumerate() {
        x.slice_mut(s![i * t_len..(i + 1) * t_len, ..])
            .assign(&params.standardizer.apply(w.view()));
    }

    let mut e = linear(&x, view2(v, lay.embed_w), view1(v, lay.embed_b));
    for i in 0..batch {
        let mut rows = e.slice_mut(s![i * t_len..(i + 1) * t_len, ..]);
        rows += &params.positional;
    }

    let heads = sh.heads;
    let dh = sh.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut blocks = Vec::with_capacity(sh.blocks);
    for bs in &lay.blocks {
        let (a, ln1) = layer_norm(&e, view1(v, bs.ln1_g), view1(v, bs.ln1_b));
        let q = linear(&a, view2(v, bs.wq), view1(v, bs.bq));
        let k = linear(&a, view2(v, bs.wk), view1(v, bs.bk));
        let vv = linear(&a, view2(v, bs.wv), view1(v, bs.bv));
        let mut attn = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(batch * heads);
        for smp in 0..batch {
            let r = smp * t_len..(smp + 1) * t_len;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qh = q.slice(s![r.clone(), c.clone()]);
                let kh = k.slice(s![r.clone(), c.clone()]);
                let vh = vv.slice(s![r.clone(), c.clone()]);
                let mut sc = qh.dot(&kh.t());
                sc.mapv_inplace(|z| z * scale);
                softmax_rows(&mut sc);
                attn.slice_mut(s![r.clone(), c]).assign(&sc.dot(&vh));
                probs.push(sc);
            }
        }
        let m = linear(&attn, view2(v, bs.wo), view1(v, bs.bo));
        let mid = &e + &m;
        let (b, ln2) = layer_norm(&mid, view1(v, bs.ln2_g), view1(v, bs.ln2_b));
        let hidden_pre = linear(&b, view2(v, bs.w1), view1(v, bs.b1));
        let hidden = relu(&hidden_pre);
        let f2 = linear(&hidden, view2(v, bs.w2), view1(v, bs.b2));
        let out = &mid + &f2;
        blocks.push(BlockCache {
            input: std::mem::replace(&mut e, out),
            ln1,
            a,
            q,
            k,
            v: vv,
            probs,
            attn,
            ln2,
            b,
            hidden_pre,
            hidden,
        });
    }

    let (z, final_ln) = layer_norm(&e, view1(v, lay.norm_g), view1(v, lay.norm_b));
    let mut pooled = Array2::zeros((batch, d));
    for i in 0..batch {
        let mean = z
            .slice(s![i * t_len..(i + 1) * t_len, ..])
            .mean_axis(Axis(0))
            .expect("non-empty window");
        pooled.row_mut(i).assign(&mean);
    }

    let h1_pre = linear(&pooled, view2(v, lay.dense1_w), view1(v, lay.dense1_b));
    let mut h1 = relu(&h1_pre);
    let mask1 = dropout.as_mut().map(|dr| dropout_mask(batch, sh.dense_units, dr));
    if let Some(m) = &mask1 {
        h1 *= m;
    }
    let h2_pre = linear(&h1, view2(v, lay.dense2_w), view1(v, lay.dense2_b));
    let mut h2 = relu(&h2_pre);
    let mask2 = dropout.as_mut().map(|dr| dropout_mask(batch, sh.dense_units, dr));
    if let Some(m) = &mask2 {
        h2 *= m;
    }
    let logits = linear(&h2, view2(v, lay.head_w), view1(v, lay.head_b));
    let mut probs = logits.clone();
    softmax_rows(&mut probs);

    ForwardCache {
        batch,
        x,
        blocks,
        final_ln,
        pooled,
        h1_pre,
        h1,
        mask1,
        h2_pre,
        h2,
        mask2,
        logits,
        probs,
    }
}

/// Gradient of the mean cross-entropy, accumulated into a flat buffer.
pub(crate) fn backward(params: &ModelParams, cache: &ForwardCache, labels: &[usize]) -> Vec<f64> {
    let sh = &params.shape;
    let lay = &params.layout;
    let v = &params.values;
    let (t_len, d) = (sh.window_len, sh.d_model);
    let batch = cache.batch;
    let n = batch * t_len;
    let mut g = vec![0.0; lay.total];

    let mut dlogits = cache.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        dlogits[(i, y)] -= 1.0;
    }
    dlogits.mapv_inplace(|z| z / batch as f64);

    let dh2 = linear_backward(&dlogits, &cache.h2, view2(v, lay.head_w), &mut g, lay.head_w, lay.head_b);
    let dh2 = match &cache.mask2 {
        Some(m) => dh2 * m,
        None => dh2,
    };
    let dh2_pre = relu_backward(&dh2, &cache.h2_pre);
    let dh1 = linear_backward(&dh2_pre, &cache.h1, view2(v, lay.dense2_w), &mut g, lay.dense2_w, lay.dense2_b);
    let dh1 = match &cache.mask1 {
        Some(m) => dh1 * m,
        None => dh1,
    };
    let dh1_pre = relu_backward(&dh1, &cache.h1_pre);
    let dpooled = linear_backward(&dh1_pre, &cache.pooled, view2(v, lay.dense1_w), &mut g, lay.dense1_w, lay.dense1_b);

    let mut dz = Array2::zeros((n, d));
    for i in 0..batch {
        let share = dpooled.row(i).mapv(|z| z / t_len as f64);
        for mut row in dz.slice_mut(s![i * t_len..(i + 1) * t_len, ..]).rows_mut() {
            row.assign(&share);
        }
    }
    let (dg, db) = split_pair(&mut g, lay.norm_g, lay.norm_b);
    let mut de = layer_norm_backward(&dz, &cache.final_ln, view1(v, lay.norm_g), dg, db);

    let heads = sh.heads;
    let dh = sh.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for (bs, bc) in lay.blocks.iter().zip(&cache.blocks).rev() {
        // out = mid + ffn(ln2(mid))
        let dhidden = linear_backward(&de, &bc.hidden, view2(v, bs.w2), &mut g, bs.w2, bs.b2);
        let dhidden_pre = relu_backward(&dhidden, &bc.hidden_pre);
        let db_in = linear_backward(&dhidden_pre, &bc.b, view2(v, bs.w1), &mut g, bs.w1, bs.b1);
        let (dg, dbeta) = split_pair(&mut g, bs.ln2_g, bs.ln2_b);
        let dmid = &de + &layer_norm_backward(&db_in, &bc.ln2, view1(v, bs.ln2_g), dg, dbeta);

        // mid = input + attn(ln1(input))
        let dattn = linear_backward(&dmid, &bc.attn, view2(v, bs.wo), &mut g, bs.wo, bs.bo);
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for smp in 0..batch {
            let r = smp * t_len..(smp + 1) * t_len;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let p = &bc.probs[smp * heads + h];
                let doh = dattn.slice(s![r.clone(), c.clone()]);
                let qh = bc.q.slice(s![r.clone(), c.clone()]);
                let kh = bc.k.slice(s![r.clone(), c.clone()]);
                let vh = bc.v.slice(s![r.clone(), c.clone()]);
                let dp = doh.dot(&vh.t());
                {
                    let mut dvh = dv.slice_mut(s![r.clone(), c.clone()]);
                    dvh += &p.t().dot(&doh);
                }
                let mut ds = dp;
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                    for (dz, pz) in drow.iter_mut().zip(prow.iter()) {
                        *dz = pz * (*dz - dot) * scale;
                    }
                }
                {
                    let mut dqh = dq.slice_mut(s![r.clone(), c.clone()]);
                    dqh += &ds.dot(&kh);
                }
                let mut dkh = dk.slice_mut(s![r.clone(), c]);
                dkh += &ds.t().dot(&qh);
            }
        }
        let mut da = linear_backward(&dq, &bc.a, view2(v, bs.wq), &mut g, bs.wq, bs.bq);
        da += &linear_backward(&dk, &bc.a, view2(v, bs.wk), &mut g, bs.wk, bs.bk);
        da += &linear_backward(&dv, &bc.a, view2(v, bs.wv), &mut g, bs.wv, bs.bv);
        let (dg, dbeta) = split_pair(&mut g, bs.ln1_g, bs.ln1_b);
        de = &dmid + &layer_norm_backward(&da, &bc.ln1, view1(v, bs.ln1_g), dg, dbeta);
        debug_assert_eq!(de.dim(), bc.input.dim());
    }

    // Positional encodings are fixed; only the embedding projection learns.
    let _ = linear_backward(&de, &cache.x, view2(v, lay.embed_w), &mut g, lay.embed_w, lay.embed_b);
    g
}

/// Mutable views of two disjoint slots (a layer-norm gain and bias).
fn split_pair(g: &mut [f64], a: Slot, b: Slot) -> (ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) {
    assert!(a.offset + a.len() <= b.offset, "slots must be ordered and disjoint");
    let (lo, hi) = g.split_at_mut(b.offset);
    (
        ArrayViewMut1::from(&mut lo[a.offset..a.offset + a.len()]),
        ArrayViewMut1::from(&mut hi[..b.len()]),
    )
}

fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        total -= row[y].ln();
    }
    let loss = total / labels.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    Ok(loss)
}

pub(crate) fn loss_and_gradients_impl(
    params: &ModelParams,
    windows: &[ArrayView2<'_, f64>],
    labels: &[usize],
    dropout: Option<Dropout<'_>>,
) -> Result<(f64, Vec<f64>, Array2<f64>)> {
    if windows.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    if windows.len() != labels.len() {
        return Err(Error::Shape("window and label counts differ".into()));
    }
    for w in windows {
        params.check_window(w)?;
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= params.shape.classes) {
        return Err(Error::Shape(format!("label {bad} out of range")));
    }
    let cache = forward_batch(params, windows, dropout);
    let loss = cross_entropy(&cache.probs, labels)?;
    let grads = backward(params, &cache, labels);
    if grads.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((loss, grads, cache.probs))
}

/// Mean cross-entropy over the batch and its gradient, laid out like
/// [`ModelParams::values`].
pub fn loss_and_gradients(
    params: &ModelParams,
    batch: &[(FeatureWindow, GestureClass)],
) -> Result<(f64, Vec<f64>)> {
    let windows: Vec<_> = batch.iter().map(|(w, _)| w.view()).collect();
    let labels: Vec<_> = batch.iter().map(|(_, c)| c.code()).collect();
    loss_and_gradients_views(params, &windows, &labels)
}

/// Same as [`loss_and_gradients`] for raw views of any shape the model accepts.
pub fn loss_and_gradients_views(
    params: &ModelParams,
    windows: &[ArrayView2<'_, f64>],
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let (loss, grads, _) = loss_and_gradients_impl(params, windows, labels, None)?;
    Ok((loss, grads))
}
