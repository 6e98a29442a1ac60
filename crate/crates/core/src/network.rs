//! The tangent-flow block stack: embedding, interleaved spatial and
//! temporal blocks with pre-norm residual sub-layers, and a per-joint
//! output head.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Hkpsa, LambdaMode, TemporalAttention, Trace};
use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::binio::{put_len, put_u32, read_file, write_file, Reader};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::layers::{Dropout, LayerNorm, Linear};
use crate::real::{dtype_width, Real};
use crate::skeleton::{HopMode, Skeleton, SkeletonFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    /// Number of (spatial, temporal) block pairs.
    pub spatial_blocks: usize,
    /// Temporal half-widths, one per block pair, in depth order.
    pub temporal_windows: Vec<usize>,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub joints: usize,
    pub frames: usize,
    pub lambda_mode: LambdaMode,
    pub hop_mode: HopMode,
    /// Q/K tangent norm bound before the lift.
    pub r_q: f64,
    /// Norm bound on the hidden state after every block pair.
    pub r_safety: f64,
    /// Multiplier on head outputs; 100 maps decimetre-scale outputs to mm.
    pub output_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration used for CPU training.
    pub fn desk() -> Self {
        Self {
            dim: 64,
            heads: 4,
            spatial_blocks: 3,
            temporal_windows: vec![3, 9, 13],
            mlp_ratio: 4,
            dropout: 0.1,
            joints: 17,
            frames: 27,
            lambda_mode: LambdaMode::PerHead,
            hop_mode: HopMode::Indicator,
            r_q: 3.0,
            r_safety: 15.0,
            output_scale: 100.0,
        }
    }

    /// Full-size architecture, used for parameter counting.
    pub fn full() -> Self {
        Self {
            dim: 512,
            heads: 8,
            temporal_windows: vec![3, 9, 27],
            frames: 243,
            ..Self::desk()
        }
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 || self.joints == 0 || self.frames == 0 {
            return bad(format!("all sizes must be positive: {self:?}"));
        }
        if self.dim % self.heads != 0 {
            return bad(format!("d = {} is not divisible by H = {}", self.dim, self.heads));
        }
        if self.temporal_windows.len() != self.spatial_blocks {
            return bad(format!(
                "{} temporal windows for {} block pairs",
                self.temporal_windows.len(),
                self.spatial_blocks
            ));
        }
        if self.temporal_windows.contains(&0) {
            return bad("temporal windows must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.r_q > 0.0 && self.r_q <= self.r_safety) {
            return bad(format!("need 0 < r_q ≤ r_safety, got {} and {}", self.r_q, self.r_safety));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return bad(format!("output scale {} must be positive", self.output_scale));
        }
        Ok(())
    }
}

/// Closed-form trainable parameter count of a configuration.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let (d, j, f) = (cfg.dim, cfg.joints, cfg.hidden());
    let mlp = Linear::param_count(d, f, true) + Linear::param_count(f, d, true);
    let sublayers = 2 * LayerNorm::param_count(d) + mlp;
    let spatial = sublayers + Hkpsa::param_count(d, cfg.heads, cfg.lambda_mode);
    let temporal = sublayers + TemporalAttention::param_count(d, cfg.heads);
    let head = j * (2 * d + d * f + f + f * 3 + 3);
    Embedding::param_count(d, j) + cfg.spatial_blocks * (spatial + temporal) + head
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Mlp {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl Mlp {
    fn init<F: Real, R: Rng + ?Sized>(store: &mut ParamStore<F>, rng: &mut R, name: &str, d: usize, f: usize) -> Self {
        Self {
            norm: LayerNorm::init(store, &format!("{name}.ln"), d),
            up: Linear::init(store, rng, &format!("{name}.up"), d, f, true),
            down: Linear::init(store, rng, &format!("{name}.down"), f, d, true),
        }
    }

    /// h + Dropout(W₂·GELU(W₁·LN(h))).
    fn residual<F: Real>(&self, g: &mut Graph<F>, b: &Bound, h: Var, drop: &mut Dropout) -> Result<Var> {
        let n = self.norm.forward(g, b, h)?;
        let u = self.up.forward(g, b, n)?;
        let u = g.gelu(u);
        let y = self.down.forward(g, b, u)?;
        let y = drop.apply(g, y)?;
        g.add(h, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BlockPair {
    spatial_norm: LayerNorm,
    spatial: Hkpsa,
    spatial_mlp: Mlp,
    temporal_norm: LayerNorm,
    temporal: TemporalAttention,
    temporal_mlp: Mlp,
}

/// Per-joint decoder: ŷ_j = W₂⁽ʲ⁾·GELU(W₁⁽ʲ⁾·LN⁽ʲ⁾(h_j) + b₁⁽ʲ⁾) + b₂⁽ʲ⁾.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputHead {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    /// `[J, d, d_ff]`.
    pub w1: ParamId,
    pub b1: ParamId,
    /// `[J, d_ff, 3]`.
    pub w2: ParamId,
    pub b2: ParamId,
    pub joints: usize,
    pub dim: usize,
    pub hidden: usize,
    pub scale: f64,
}

impl OutputHead {
    pub fn init<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        joints: usize,
        dim: usize,
        hidden: usize,
        scale: f64,
    ) -> Self {
        Self {
            ln_gain: store.add("head.ln.gain", Tensor::full(&[joints, dim], F::one()), false),
            ln_bias: store.add("head.ln.bias", Tensor::zeros(&[joints, dim]), false),
            w1: store.add(
                "head.w1",
                Tensor::uniform(&[joints, dim, hidden], 1.0 / (dim as f64).sqrt(), rng),
                true,
            ),
            b1: store.add("head.b1", Tensor::zeros(&[joints, hidden]), false),
            w2: store.add(
                "head.w2",
                Tensor::uniform(&[joints, hidden, 3], 1.0 / (hidden as f64).sqrt(), rng),
                true,
            ),
            b2: store.add("head.b2", Tensor::zeros(&[joints, 3]), false),
            joints,
            dim,
            hidden,
            scale,
        }
    }

    /// `[T, J, d] -> [T, J, 3]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, b: &Bound, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        if s.len() != 3 || s[1] != self.joints || s[2] != self.dim {
            return Err(Error::shape(
                "output_head",
                format!("h {s:?}, expected [T,{},{}]", self.joints, self.dim),
            ));
        }
        let (j, d, f) = (self.joints, self.dim, self.hidden);
        let x = g.permute(h, &[1, 0, 2])?;
        let n = g.layer_norm(x, F::c(LayerNorm::EPS));
        let gain = g.reshape(b.var(self.ln_gain), &[j, 1, d])?;
        let bias = g.reshape(b.var(self.ln_bias), &[j, 1, d])?;
        let n = g.mul_b(n, gain)?;
        let n = g.add_b(n, bias)?;
        let u = g.matmul(n, b.var(self.w1))?;
        let b1 = g.reshape(b.var(self.b1), &[j, 1, f])?;
        let u = g.add_b(u, b1)?;
        let u = g.gelu(u);
        let y = g.matmul(u, b.var(self.w2))?;
        let b2 = g.reshape(b.var(self.b2), &[j, 1, 3])?;
        let y = g.add_b(y, b2)?;
        let y = g.permute(y, &[1, 0, 2])?;
        Ok(g.scale(y, F::c(self.scale)))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embed: Embedding,
    blocks: Vec<BlockPair>,
    head: OutputHead,
}

/// A model: configuration, skeleton and the parameters they imply.
#[derive(Debug, Clone)]
pub struct Model<F> {
    config: ModelConfig,
    skeleton: Skeleton,
    topo: Tensor<F>,
    layout: Layout,
    pub params: ParamStore<F>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HPCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Structured-text companion of a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    model: ModelConfig,
    skeleton: SkeletonFile,
    dtype: String,
}

/// `<checkpoint>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl<F: Real> Model<F> {
    /// Fresh parameters drawn from a ChaCha stream seeded with `seed`.
    pub fn new(config: ModelConfig, skeleton: &Skeleton, seed: u64) -> Result<Self> {
        config.validate()?;
        if skeleton.num_joints() != config.joints {
            return Err(Error::Config(format!(
                "skeleton has {} joints, config expects {}",
                skeleton.num_joints(),
                config.joints
            )));
        }
        let skeleton = skeleton.with_hop_mode(config.hop_mode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h, f) = (config.dim, config.heads, config.hidden());
        let embed = Embedding::init(&mut store, &mut rng, d, config.joints);
        let mut blocks = Vec::with_capacity(config.spatial_blocks);
        for (i, &w) in config.temporal_windows.iter().enumerate() {
            let p = format!("block{i}");
            blocks.push(BlockPair {
                spatial_norm: LayerNorm::init(&mut store, &format!("{p}.spatial.ln"), d),
                spatial: Hkpsa::init(
                    &mut store,
                    &mut rng,
                    &format!("{p}.spatial.attn"),
                    d,
                    h,
                    config.lambda_mode,
                    config.r_q,
                )?,
                spatial_mlp: Mlp::init(&mut store, &mut rng, &format!("{p}.spatial.mlp"), d, f),
                temporal_norm: LayerNorm::init(&mut store, &format!("{p}.temporal.ln"), d),
                temporal: TemporalAttention::init(&mut store, &mut rng, &format!("{p}.temporal.attn"), d, h, w)?,
                temporal_mlp: Mlp::init(&mut store, &mut rng, &format!("{p}.temporal.mlp"), d, f),
            });
        }
        let head = OutputHead::init(&mut store, &mut rng, config.joints, d, f, config.output_scale);
        Ok(Self {
            topo: skeleton.power_stack(),
            skeleton,
            config,
            layout: Layout { embed, blocks, head },
            params: store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn embedding(&self) -> &Embedding {
        &self.layout.embed
    }

    pub fn head(&self) -> &OutputHead {
        &self.layout.head
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Forward pass for one `[T, J, 3]` input sequence, returning `[T, J, 3]`
    /// predictions in millimetres.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        b: &Bound,
        inputs: &Tensor<F>,
        drop: &mut Dropout,
        mut trace: Option<&mut Trace<F>>,
    ) -> Result<Var> {
        let s = inputs.shape();
        if s.len() != 3 || s[1] != self.config.joints || s[2] != 3 || s[0] == 0 {
            return Err(Error::shape(
                "forward",
                format!("inputs {s:?}, expected [T,{},3]", self.config.joints),
            ));
        }
        let (mut h, hv) = self.layout.embed.forward(g, b, inputs)?;
        for blk in &self.layout.blocks {
            let n = blk.spatial_norm.forward(g, b, h)?;
            let a = blk
                .spatial
                .forward(g, b, n, hv, &self.topo, drop, trace.as_deref_mut())?;
            h = g.add(h, a)?;
            h = blk.spatial_mlp.residual(g, b, h, drop)?;
            let n = blk.temporal_norm.forward(g, b, h)?;
            let a = blk.temporal.forward(g, b, n, drop, trace.as_deref_mut())?;
            h = g.add(h, a)?;
            h = blk.temporal_mlp.residual(g, b, h, drop)?;
            h = g.clip_norm(h, F::c(self.config.r_safety));
        }
        if let Some(tr) = trace {
            tr.final_hidden = Some(g.value(h).clone());
        }
        self.layout.head.forward(g, b, h)
    }

    /// Inference without dropout or gradients.
    pub fn predict(&self, inputs: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let y = self.forward(&mut g, &b, inputs, &mut Dropout::off(), None)?;
        Ok(g.value(y).clone())
    }

    /// [`Self::predict`] that also records a diagnostic [`Trace`].
    pub fn predict_traced(&self, inputs: &Tensor<F>) -> Result<(Tensor<F>, Trace<F>)> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let mut trace = Trace::default();
        let y = self.forward(&mut g, &b, inputs, &mut Dropout::off(), Some(&mut trace))?;
        Ok((g.value(y).clone(), trace))
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            skeleton: self.skeleton.clone(),
            topo: self.topo.cast(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Writes the binary checkpoint and its `.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(16 + self.params.numel() * std::mem::size_of::<F>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, F::DTYPE_CODE as u32);
        put_len(&mut out, self.params.len(), path)?;
        for p in self.params.iter() {
            put_len(&mut out, p.name.len(), path)?;
            out.extend_from_slice(p.name.as_bytes());
            put_len(&mut out, p.value.rank(), path)?;
            for &d in p.value.shape() {
                put_len(&mut out, d, path)?;
            }
            for &v in p.value.data() {
                v.write_le(&mut out);
            }
        }
        write_file(path, &out)?;
        let side = Sidecar {
            model: self.config.clone(),
            skeleton: self.skeleton.to_file(),
            dtype: F::NAME.to_string(),
        };
        let text = serde_json::to_string_pretty(&side)?;
        write_file(&sidecar_path(path), text.as_bytes())
    }

    /// Reads a checkpoint written by [`Self::save`] at either precision.
    pub fn load(path: &Path) -> Result<Self> {
        let side_path = sidecar_path(path);
        let text = String::from_utf8(read_file(&side_path)?).map_err(|e| Error::Format {
            path: side_path.clone(),
            reason: e.to_string(),
        })?;
        let side: Sidecar = serde_json::from_str(&text)?;
        let skeleton = Skeleton::from_file(&side.skeleton, side.model.hop_mode)?;
        let mut model = Self::new(side.model, &skeleton, 0)?;

        let bytes = read_file(path)?;
        let mut r = Reader::new(&bytes, path);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let code = r.u32()?;
        let width = u8::try_from(code)
            .ok()
            .and_then(dtype_width)
            .ok_or_else(|| r.error(format!("unknown dtype code {code}")))?;
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(r.error(format!(
                "{count} tensors, configuration implies {}",
                model.params.len()
            )));
        }
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|e| r.error(e.to_string()))?
                .to_string();
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| r.error(format!("unexpected tensor {name}")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let slot = &mut model.params.get_mut(id).value;
            if shape != slot.shape() {
                return Err(r.error(format!(
                    "{name} has shape {shape:?}, expected {:?}",
                    slot.shape()
                )));
            }
            let raw = r.take(slot.numel() * width)?;
            for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(width)) {
                *dst = if width == 4 {
                    F::c(f32::read_le(chunk) as f64)
                } else {
                    F::c(f64::read_le(chunk))
                };
            }
        }
        r.finish()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::{self, Site};

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 8,
            heads: 2,
            spatial_blocks: 2,
            temporal_windows: vec![1, 2],
            mlp_ratio: 2,
            dropout: 0.0,
            joints: 5,
            frames: 4,
            ..ModelConfig::desk()
        }
    }

    fn skel5() -> Skeleton {
        Skeleton::from_parents(&[-1, 0, 1, 0, 3]).unwrap()
    }

    fn inputs(t_len: usize, j: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::<f64>::uniform(&[t_len, j, 3], 1.0, &mut rng);
        for r in x.data_mut().chunks_exact_mut(3) {
            r[2] = r[2].abs();
        }
        x
    }

    #[test]
    fn output_shape_and_count() {
        let m = Model::<f64>::new(tiny(), &skel5(), 1).unwrap();
        assert_eq!(m.num_params(), count_parameters(&tiny()));
        let y = m.predict(&inputs(4, 5, 0)).unwrap();
        assert_eq!(y.shape(), &[4, 5, 3]);
        assert!(y.is_finite());
    }

    #[test]
    fn desk_and_full_counts_match_closed_form() {
        let desk = ModelConfig::desk();
        let m = Model::<f32>::new(desk.clone(), &Skeleton::h36m(), 0).unwrap();
        assert_eq!(m.num_params(), count_parameters(&desk));
        let shared = ModelConfig {
            lambda_mode: LambdaMode::Shared,
            ..desk.clone()
        };
        assert_eq!(count_parameters(&desk) - count_parameters(&shared), 3 * 3);
        assert!(count_parameters(&ModelConfig::full()) > 10_000_000);
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let mut m = Model::<f64>::new(tiny(), &skel5(), 2).unwrap();
        let head = *m.head();
        for id in [head.w2, head.b2] {
            let v = &mut m.params.get_mut(id).value;
            *v = Tensor::zeros(v.shape());
        }
        let y = m.predict(&inputs(4, 5, 3)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn joint_heads_are_isolated() {
        let m = Model::<f64>::new(tiny(), &skel5(), 3).unwrap();
        let x = inputs(3, 5, 4);
        let y0 = m.predict(&x).unwrap();
        let mut m2 = m.clone();
        m2.params.get_mut(m.head().w1).value.data_mut()[0] += 0.5;
        let y1 = m2.predict(&x).unwrap();
        for t in 0..3 {
            for j in 0..5 {
                let a = &y0.data()[(t * 5 + j) * 3..(t * 5 + j + 1) * 3];
                let b = &y1.data()[(t * 5 + j) * 3..(t * 5 + j + 1) * 3];
                assert_eq!(j == 0, a != b, "t={t} j={j}");
            }
        }
    }

    #[test]
    fn constant_hidden_gives_constant_prediction() {
        let m = Model::<f64>::new(tiny(), &skel5(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = Tensor::<f64>::uniform(&[1, 5, 8], 1.0, &mut rng);
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(frame.data());
        }
        let mut g = Graph::new();
        let b = m.params.bind_frozen(&mut g);
        let h = g.constant(Tensor::new(vec![4, 5, 8], data).unwrap());
        let y = m.head().forward(&mut g, &b, h).unwrap();
        let y = g.value(y).data();
        for t in 1..4 {
            assert_eq!(&y[t * 15..(t + 1) * 15], &y[..15]);
        }
    }

    #[test]
    fn forward_uses_origin_maps_only_at_tagged_sites() {
        let m = Model::<f64>::new(tiny(), &skel5(), 6).unwrap();
        instrument::reset();
        m.predict(&inputs(4, 5, 0)).unwrap();
        let c = instrument::snapshot();
        let rows = 4 * 5 * 2 * 2; // T·J·H per block, two blocks
        assert_eq!(c.exp_at(Site::HkpsaQuery), rows as u64);
        assert_eq!(c.exp_at(Site::HkpsaKey), rows as u64);
        assert_eq!(c.total_exp(), 2 * rows as u64);
        assert_eq!(c.log_at(Site::Embedding), 20);
        assert_eq!(c.total_log(), 20);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::new(tiny(), &skel5(), 7).unwrap();
        m.save(&path).unwrap();
        let back = Model::<f32>::load(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config(), m.config());
        let wide = Model::<f64>::load(&path).unwrap();
        assert_eq!(wide.params, m.params.cast::<f64>());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Model::<f32>::load(&path), Err(Error::Format { .. })));
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Model::<f32>::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.temporal_windows.push(4);
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(Model::<f64>::new(tiny(), &Skeleton::h36m(), 0).is_err());
        let json = serde_json::to_string(&ModelConfig::desk()).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ModelConfig::desk());
        let partial: ModelConfig = serde_json::from_str(r#"{"dim": 32}"#).unwrap();
        assert_eq!(partial.dim, 32);
        assert_eq!(partial.heads, 4);
    }
}
