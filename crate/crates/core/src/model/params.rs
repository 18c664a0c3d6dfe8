//! Parameter storage of the forecaster, training phases and adapter wiring.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::quant::QuantizedTensor;
use crate::numerics::Tensor;

/// Which parameters train, and how inputs are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Phase 1: every dense parameter trains; plain instance normalization.
    Pretrain,
    /// Phase 2 with quantized frozen attention and low-rank adapters.
    Peft,
    /// Phase 2 without adapters: every parameter trains at full precision.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Dense(Tensor),
    /// Frozen quantized weight, with its dequantized form cached.
    Quantized { q: QuantizedTensor, dense: Tensor },
}

impl ParamValue {
    pub fn dense(&self) -> &Tensor {
        match self {
            ParamValue::Dense(t) => t,
            ParamValue::Quantized { dense, .. } => dense,
        }
    }

    pub fn len(&self) -> usize {
        self.dense().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> &[usize] {
        self.dense().shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: ParamValue,
    pub trainable: bool,
}

/// Indices of one layer's parameters within [`ForecastModel::entries`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    /// W_q, W_k, W_v, W_o.
    pub attn: [usize; 4],
    /// `(A, B)` adapter entries per attention matrix, when adapted.
    pub adapters: [Option<(usize, usize)>; 4],
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub patch_proj: usize,
    pub pos_embed: usize,
    pub layers: Vec<LayerLayout>,
    pub head_w: usize,
    pub head_b: usize,
    pub revin_gain: usize,
    pub revin_bias: usize,
}

/// The low-rank adapter set of a PEFT model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub rank: usize,
    pub alpha: f64,
    /// `(layer, matrix index in q/k/v/o order, A entry, B entry)`.
    pub pairs: Vec<(usize, usize, usize, usize)>,
}

impl AdapterSet {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Parameter counts, itemized so either convention for "trainable" (with or
/// without the head) can be recovered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub adapters: usize,
    pub head: usize,
    pub revin: usize,
    pub quantized: usize,
}

impl ParamCounts {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

pub const ATTN_NAMES: [&str; 4] = ["wq", "wk", "wv", "wo"];

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    config: ModelConfig,
    phase: Phase,
    entries: Vec<ParamEntry>,
    layout: Layout,
    adapters: Option<AdapterSet>,
}

impl ForecastModel {
    /// Randomly initialized phase-1 model. Weight matrices and the position
    /// table are `normal(0, init_std)`; layer-norm and RevIN gains are one,
    /// biases zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, p, t) = (config.d_model, config.ffn_dim, config.patch_len, config.horizon);
        let n = config.n_patches();
        let std = config.init_std;
        let mut entries = Vec::new();
        let mut push = |name: String, value: Tensor| {
            entries.push(ParamEntry {
                name,
                value: ParamValue::Dense(value),
                trainable: true,
            });
            entries.len() - 1
        };
        let patch_proj = push("patch_proj".into(), Tensor::randn(&[p, d], std, &mut rng));
        let pos_embed = push("pos_embed".into(), Tensor::randn(&[n, d], std, &mut rng));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let ln1_gain = push(format!("layers.{l}.ln1.gain"), Tensor::ones(&[d]));
            let ln1_bias = push(format!("layers.{l}.ln1.bias"), Tensor::zeros(&[d]));
            let attn = ATTN_NAMES.map(|m| push(format!("layers.{l}.attn.{m}"), Tensor::randn(&[d, d], std, &mut rng)));
            let ln2_gain = push(format!("layers.{l}.ln2.gain"), Tensor::ones(&[d]));
            let ln2_bias = push(format!("layers.{l}.ln2.bias"), Tensor::zeros(&[d]));
            let w_gate = push(format!("layers.{l}.ffn.w_gate"), Tensor::randn(&[d, f], std, &mut rng));
            let w_up = push(format!("layers.{l}.ffn.w_up"), Tensor::randn(&[d, f], std, &mut rng));
            let w_down = push(format!("layers.{l}.ffn.w_down"), Tensor::randn(&[f, d], std, &mut rng));
            layers.push(LayerLayout {
                ln1_gain,
                ln1_bias,
                attn,
                adapters: [None; 4],
                ln2_gain,
                ln2_bias,
                w_gate,
                w_up,
                w_down,
            });
        }
        let head_w = push("head.weight".into(), Tensor::randn(&[n * d, t], std, &mut rng));
        let head_b = push("head.bias".into(), Tensor::zeros(&[t]));
        let revin_gain = push("revin.gain".into(), Tensor::ones(&[config.channels]));
        let revin_bias = push("revin.bias".into(), Tensor::zeros(&[config.channels]));
        Ok(Self {
            config,
            phase: Phase::Pretrain,
            entries,
            layout: Layout {
                patch_proj,
                pos_embed,
                layers,
                head_w,
                head_b,
                revin_gain,
                revin_bias,
            },
            adapters: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn adapters(&self) -> Option<&AdapterSet> {
        self.adapters.as_ref()
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Replaces a dense parameter by name (tests, checkpoint surgery).
    pub fn set_dense(&mut self, name: &str, value: Tensor) -> Result<()> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        let entry = &mut self.entries[idx];
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_dense",
                left: entry.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        if matches!(entry.value, ParamValue::Quantized { .. }) {
            return Err(Error::Contract(format!("{name} is quantized and frozen")));
        }
        entry.value = ParamValue::Dense(value);
        Ok(())
    }

    /// Moves to phase 2 with adapters: the attention projections are
    /// quantized and frozen, adapters are attached (A random, B zero), and only
    /// adapters, head and RevIN affine stay trainable.
    pub fn into_peft(mut self, seed: u64) -> Result<Self> {
        if self.phase != Phase::Pretrain {
            return Err(Error::Contract(format!("cannot enter PEFT from {:?}", self.phase)));
        }
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &mut self.entries {
            e.trainable = false;
        }
        for idx in [self.layout.head_w, self.layout.head_b, self.layout.revin_gain, self.layout.revin_bias] {
            self.entries[idx].trainable = true;
        }
        let mut pairs = Vec::new();
        for l in 0..self.layout.layers.len() {
            for (m, adapt) in cfg.adapt.as_array().into_iter().enumerate() {
                let idx = self.layout.layers[l].attn[m];
                let dense = self.entries[idx].value.dense().clone();
                let q = QuantizedTensor::quantize(&dense, cfg.quant_block)?;
                let deq = q.dequantize();
                self.entries[idx].value = ParamValue::Quantized { q, dense: deq };
                if !adapt {
                    continue;
                }
                let (d_in, d_out) = (cfg.d_model, cfg.d_model);
                let a = Tensor::randn(&[cfg.lora_rank, d_in], cfg.init_std, &mut rng);
                let b = Tensor::zeros(&[d_out, cfg.lora_rank]);
                let base = format!("layers.{l}.attn.{}", ATTN_NAMES[m]);
                self.entries.push(ParamEntry {
                    name: format!("{base}.lora_a"),
                    value: ParamValue::Dense(a),
                    trainable: true,
                });
                self.entries.push(ParamEntry {
                    name: format!("{base}.lora_b"),
                    value: ParamValue::Dense(b),
                    trainable: true,
                });
                let (ia, ib) = (self.entries.len() - 2, self.entries.len() - 1);
                self.layout.layers[l].adapters[m] = Some((ia, ib));
                pairs.push((l, m, ia, ib));
            }
        }
        self.adapters = Some(AdapterSet {
            rank: cfg.lora_rank,
            alpha: cfg.lora_alpha,
            pairs,
        });
        self.phase = Phase::Peft;
        Ok(self)
    }

    /// Moves to phase 2 without adapters: everything trains.
    pub fn into_full(mut self) -> Result<Self> {
        if self.phase != Phase::Pretrain {
            return Err(Error::Contract(format!("cannot enter full fine-tuning from {:?}", self.phase)));
        }
        for e in &mut self.entries {
            e.trainable = true;
        }
        self.phase = Phase::Full;
        Ok(self)
    }

    /// Entry indices of trainable parameters, in declared order.
    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].trainable).collect()
    }

    /// Copies of the trainable tensors, in declared order.
    pub fn trainable_params(&self) -> Vec<Tensor> {
        self.trainable_indices()
            .into_iter()
            .map(|i| self.entries[i].value.dense().clone())
            .collect()
    }

    pub fn set_trainable_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let idx = self.trainable_indices();
        if idx.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} trainable tensors, got {}",
                idx.len(),
                params.len()
            )));
        }
        for (i, p) in idx.into_iter().zip(params) {
            if self.entries[i].value.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "set_trainable_params",
                    left: self.entries[i].value.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            self.entries[i].value = ParamValue::Dense(p);
        }
        Ok(())
    }

    pub fn counts(&self) -> ParamCounts {
        let mut c = ParamCounts {
            total: 0,
            trainable: 0,
            adapters: 0,
            head: 0,
            revin: 0,
            quantized: 0,
        };
        let adapter_idx: Vec<usize> = self
            .adapters
            .iter()
            .flat_map(|a| a.pairs.iter().flat_map(|&(_, _, ia, ib)| [ia, ib]))
            .collect();
        for (i, e) in self.entries.iter().enumerate() {
            let n = e.value.len();
            c.total += n;
            if e.trainable {
                c.trainable += n;
            }
            if adapter_idx.contains(&i) {
                c.adapters += n;
            }
            if i == self.layout.head_w || i == self.layout.head_b {
                c.head += n;
            }
            if i == self.layout.revin_gain || i == self.layout.revin_bias {
                c.revin += n;
            }
            if matches!(e.value, ParamValue::Quantized { .. }) {
                c.quantized += n;
            }
        }
        c
    }

    /// Trainable parameter count over total count, with quantized frozen
    /// matrices counted at their original element count.
    pub fn trainable_fraction(&self) -> f64 {
        self.counts().trainable_fraction()
    }

    /// Copy with every dense value rounded to f32, i.e. exactly what a
    /// checkpoint of this model contains.
    pub fn snapped_f32(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            if let ParamValue::Dense(t) = &e.value {
                e.value = ParamValue::Dense(t.map(|v| v as f32 as f64));
            }
        }
        out
    }

    /// Reassembles a model from checkpointed parts; the layout is rebuilt from
    /// the config and phase and the entries are checked against it.
    pub(crate) fn from_parts(config: ModelConfig, phase: Phase, entries: Vec<ParamEntry>) -> Result<Self> {
        let mut template = ForecastModel::new(config.clone(), 0)?;
        template = match phase {
            Phase::Pretrain => template,
            Phase::Peft => template.into_peft(0)?,
            Phase::Full => template.into_full()?,
        };
        if template.entries.len() != entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                template.entries.len(),
                entries.len()
            )));
        }
        for (t, e) in template.entries.iter().zip(&entries) {
            if t.value.shape() != e.value.shape()
                || t.trainable != e.trainable
                || matches!(t.value, ParamValue::Quantized { .. }) != matches!(e.value, ParamValue::Quantized { .. })
            {
                return Err(Error::Checkpoint(format!("parameter {} does not match the layout", t.name)));
            }
        }
        let entries = template
            .entries
            .iter()
            .zip(entries)
            .map(|(t, e)| ParamEntry {
                name: t.name.clone(),
                ..e
            })
            .collect();
        Ok(Self { entries, ..template })
    }
}
