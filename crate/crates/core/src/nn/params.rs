//! Flat parameter storage with a declared tensor layout.
//!
//! Every learnable tensor lives in one contiguous `Vec<f64>`; the layout
//! records each tensor's name, shape and offset in declaration order. The
//! same layout backs gradients and optimizer moments, so the optimizer and
//! checkpoint code only ever see flat slices.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{DenoiserConfig, HeadKind, PositionalKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Zero,
    One,
    /// Zero-mean gaussian, std 0.02.
    Embedding,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub(crate) init: Init,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Index of a tensor in the layout.
pub(crate) type Slot = usize;

#[derive(Debug, Clone)]
pub(crate) struct TimeSlots {
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub wq: Slot,
    pub bq: Slot,
    pub wk: Slot,
    pub bk: Slot,
    pub wv: Slot,
    pub bv: Slot,
    pub proj_k: Slot,
    pub proj_v: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub ff_w1: Slot,
    pub ff_b1: Slot,
    pub ff_w2: Slot,
    pub ff_b2: Slot,
}

#[derive(Debug, Clone)]
pub(crate) enum PosSlots {
    Full(Slot),
    Axial { rows: Slot, cols: Slot, n_cols: usize },
    Category(Slot),
}

#[derive(Debug, Clone)]
pub(crate) struct Slots {
    pub token_emb: Slot,
    pub pos: PosSlots,
    pub time: Vec<TimeSlots>,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub head_w: Slot,
    pub head_b: Slot,
}

#[derive(Debug, Clone)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    total: usize,
    pub(crate) slots: Slots,
}

struct Builder {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Slot {
        let spec = TensorSpec {
            name,
            shape: shape.to_vec(),
            offset: self.total,
            init,
        };
        self.total += spec.len();
        self.specs.push(spec);
        self.specs.len() - 1
    }
}

impl Layout {
    pub fn new(config: &DenoiserConfig) -> Result<Layout> {
        config.validate()?;
        let d = config.width;
        let (n, k, p, f) = (config.n_tokens, config.categories, config.proj_dim, config.ffn_width);
        let mut b = Builder {
            specs: Vec::new(),
            total: 0,
        };
        let token_emb = b.add("token_embedding".into(), &[k, d], Init::Embedding);
        let pos = match config.positional {
            PositionalKind::Full => PosSlots::Full(b.add("pos_embedding".into(), &[n, d], Init::Embedding)),
            PositionalKind::Axial { rows, cols } => PosSlots::Axial {
                rows: b.add("pos_axial_rows".into(), &[rows, d], Init::Embedding),
                cols: b.add("pos_axial_cols".into(), &[cols, d], Init::Embedding),
                n_cols: cols,
            },
            PositionalKind::Category => {
                PosSlots::Category(b.add("pos_category".into(), &[k, d], Init::Embedding))
            }
        };
        let time = (0..config.time_mlps())
            .map(|m| TimeSlots {
                w1: b.add(format!("time{m}.w1"), &[d, d], Init::FanIn(d)),
                b1: b.add(format!("time{m}.b1"), &[d], Init::Zero),
                w2: b.add(format!("time{m}.w2"), &[d, d], Init::FanIn(d)),
                b2: b.add(format!("time{m}.b2"), &[d], Init::Zero),
            })
            .collect();
        let layers = (0..config.layers)
            .map(|l| LayerSlots {
                ln1_g: b.add(format!("layer{l}.ln1.gain"), &[d], Init::One),
                ln1_b: b.add(format!("layer{l}.ln1.bias"), &[d], Init::Zero),
                wq: b.add(format!("layer{l}.attn.wq"), &[d, d], Init::FanIn(d)),
                bq: b.add(format!("layer{l}.attn.bq"), &[d], Init::Zero),
                wk: b.add(format!("layer{l}.attn.wk"), &[d, d], Init::FanIn(d)),
                bk: b.add(format!("layer{l}.attn.bk"), &[d], Init::Zero),
                wv: b.add(format!("layer{l}.attn.wv"), &[d, d], Init::FanIn(d)),
                bv: b.add(format!("layer{l}.attn.bv"), &[d], Init::Zero),
                proj_k: b.add(format!("layer{l}.attn.proj_k"), &[n, p], Init::FanIn(n)),
                proj_v: b.add(format!("layer{l}.attn.proj_v"), &[n, p], Init::FanIn(n)),
                wo: b.add(format!("layer{l}.attn.wo"), &[d, d], Init::FanIn(d)),
                bo: b.add(format!("layer{l}.attn.bo"), &[d], Init::Zero),
                ln2_g: b.add(format!("layer{l}.ln2.gain"), &[d], Init::One),
                ln2_b: b.add(format!("layer{l}.ln2.bias"), &[d], Init::Zero),
                ff_w1: b.add(format!("layer{l}.ffn.w1"), &[d, f], Init::FanIn(d)),
                ff_b1: b.add(format!("layer{l}.ffn.b1"), &[f], Init::Zero),
                ff_w2: b.add(format!("layer{l}.ffn.w2"), &[f, d], Init::FanIn(f)),
                ff_b2: b.add(format!("layer{l}.ffn.b2"), &[d], Init::Zero),
            })
            .collect();
        let lnf_g = b.add("final_ln.gain".into(), &[d], Init::One);
        let lnf_b = b.add("final_ln.bias".into(), &[d], Init::Zero);
        let (head_w, head_b) = match config.head {
            HeadKind::Shared => (
                b.add("head.w".into(), &[d, k], Init::FanIn(d)),
                b.add("head.b".into(), &[k], Init::Zero),
            ),
            HeadKind::PerToken => (
                b.add("head.w".into(), &[n * d, k], Init::FanIn(d)),
                b.add("head.b".into(), &[n, k], Init::Zero),
            ),
        };
        Ok(Layout {
            specs: b.specs,
            total: b.total,
            slots: Slots {
                token_emb,
                pos,
                time,
                layers,
                lnf_g,
                lnf_b,
                head_w,
                head_b,
            },
        })
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    /// Total number of scalar parameters.
    pub fn total(&self) -> usize {
        self.total
    }
}

/// All learnable tensors of the denoiser (also used for gradients).
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    layout: std::sync::Arc<Layout>,
    values: Vec<f64>,
}

impl PartialEq for DenoiserParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.values == other.values
    }
}

impl DenoiserParams {
    pub fn zeros(config: &DenoiserConfig) -> Result<Self> {
        let layout = Layout::new(config)?;
        Ok(Self {
            config: config.clone(),
            values: vec![0.0; layout.total],
            layout: std::sync::Arc::new(layout),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    pub fn from_values(config: &DenoiserConfig, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if values.len() != p.values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                p.values.len()
            )));
        }
        p.values = values;
        Ok(p)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &DenoiserParams) -> bool {
        self.config == other.config && self.values.len() == other.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// SHA-256 of the little-endian parameter bytes, hex encoded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Values of a tensor by name.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len()])
    }

    pub(crate) fn slots(&self) -> &Slots {
        &self.layout.slots
    }

    fn range(&self, slot: Slot) -> (std::ops::Range<usize>, &[usize]) {
        let s = &self.layout.specs[slot];
        (s.offset..s.offset + s.len(), &s.shape)
    }

    pub(crate) fn mat(&self, slot: Slot) -> ArrayView2<'_, f64> {
        let (r, shape) = self.range(slot);
        let (rows, cols) = if shape.len() == 2 { (shape[0], shape[1]) } else { (1, shape[0]) };
        ArrayView2::from_shape((rows, cols), &self.values[r]).expect("layout shape")
    }

    pub(crate) fn vec(&self, slot: Slot) -> ArrayView1<'_, f64> {
        let (r, _) = self.range(slot);
        ArrayView1::from(&self.values[r])
    }

    pub(crate) fn mat_mut(&mut self, slot: Slot) -> ArrayViewMut2<'_, f64> {
        let s = &self.layout.specs[slot];
        let (rows, cols) = if s.shape.len() == 2 { (s.shape[0], s.shape[1]) } else { (1, s.shape[0]) };
        let r = s.offset..s.offset + s.len();
        ArrayViewMut2::from_shape((rows, cols), &mut self.values[r]).expect("layout shape")
    }

    pub(crate) fn vec_mut(&mut self, slot: Slot) -> ArrayViewMut1<'_, f64> {
        let s = &self.layout.specs[slot];
        let r = s.offset..s.offset + s.len();
        ArrayViewMut1::from(&mut self.values[r])
    }
}

/// Draw initial parameters: fan-in-scaled uniform weights, zero biases,
/// unit layer-norm gains and N(0, 0.02²) embeddings. Deterministic in `seed`.
pub fn init_params(config: &DenoiserConfig, seed: u64) -> Result<DenoiserParams> {
    let mut p = DenoiserParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let specs = p.layout.specs.clone();
    for spec in &specs {
        let dst = &mut p.values[spec.offset..spec.offset + spec.len()];
        match spec.init {
            Init::Zero => {}
            Init::One => dst.fill(1.0),
            Init::Embedding => dst.iter_mut().for_each(|v| *v = normal.sample(&mut rng)),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                dst.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            }
        }
    }
    Ok(p)
}
