//! Student encoder, teacher encoder, predictor with mask tokens, and the
//! output adapter.
//!
//! Trainable weights (student, predictor, adapter) live in one
//! [`ParamStore`]; the teacher has its own frozen store. Both use the same
//! [`Encoder`] layout, so teacher weights can be produced from a student
//! snapshot by renaming `student.*` to `teacher.*`.

mod layers;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use layers::{sincos_2d, trunc_normal, Block, LayerNorm, Linear, INIT_STD};

use crate::frames::Frame;
use crate::masking::PatchGrid;
use crate::numerics::{Checkpoint, CheckpointMeta, Graph, NumericsError, ParamId, ParamStore, Real, Tensor, Var};
use crate::rng::rng_for;

pub const STUDENT_PREFIX: &str = "student";
pub const TEACHER_PREFIX: &str = "teacher";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty {0} index set")]
    Empty(&'static str),
    #[error("frame {frame:?} does not tile into the {patch}px patch grid")]
    Grid { frame: (usize, usize), patch: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEmbedKind {
    #[default]
    SinCos,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub pos_embed: PosEmbedKind,
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub target_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Start a square adapter at the identity map.
    #[serde(default)]
    pub identity_adapter: bool,
}

/// Where a static teacher's weights come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TeacherSource {
    /// Seeded random initialization.
    Random,
    /// A checkpoint written by `pretrain`; its `student.*` weights become the teacher.
    Snapshot(PathBuf),
    /// A checkpoint holding `teacher.*` entries.
    Checkpoint(PathBuf),
}

impl fmt::Display for TeacherSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Random => f.write_str("random"),
            Self::Snapshot(p) => write!(f, "snapshot:{}", p.display()),
            Self::Checkpoint(p) => write!(f, "checkpoint:{}", p.display()),
        }
    }
}

impl FromStr for TeacherSource {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "random" {
            return Ok(Self::Random);
        }
        match s.split_once(':') {
            Some(("snapshot", p)) if !p.is_empty() => Ok(Self::Snapshot(p.into())),
            Some(("checkpoint", p)) if !p.is_empty() => Ok(Self::Checkpoint(p.into())),
            _ => Err(ModelError::Config(format!(
                "teacher source {s:?}: expected random, snapshot:PATH or checkpoint:PATH"
            ))),
        }
    }
}

impl Serialize for TeacherSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TeacherSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum TeacherMode {
    Static { source: TeacherSource },
    Ema { momentum_start: f64, momentum_end: f64 },
}

impl TeacherMode {
    pub fn ema_default() -> Self {
        Self::Ema {
            momentum_start: 0.996,
            momentum_end: 1.0,
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, Self::Static { .. })
    }

    /// Momentum at `progress` in `[0, 1]`, linear between the schedule ends.
    pub fn momentum_at(&self, progress: f64) -> Option<f64> {
        match *self {
            Self::Static { .. } => None,
            Self::Ema {
                momentum_start,
                momentum_end,
            } => Some(momentum_start + (momentum_end - momentum_start) * progress.clamp(0.0, 1.0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub teacher: TeacherMode,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Small stack for 64×64 frames on a single CPU core.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig {
                patch_size: 8,
                embed_dim: 64,
                depth: 4,
                heads: 4,
                mlp_ratio: 4,
                pos_embed: PosEmbedKind::SinCos,
            },
            predictor: PredictorConfig {
                embed_dim: 32,
                depth: 2,
                heads: 4,
                target_dim: 64,
                mlp_ratio: 4,
                identity_adapter: false,
            },
            teacher: TeacherMode::Static {
                source: TeacherSource::Random,
            },
            ln_eps: 1e-6,
        }
    }

    /// ViT-B/16 student and teacher with a 384-wide, 12-deep predictor.
    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig {
                patch_size: 16,
                embed_dim: 768,
                depth: 12,
                heads: 12,
                mlp_ratio: 4,
                pos_embed: PosEmbedKind::SinCos,
            },
            predictor: PredictorConfig {
                embed_dim: 384,
                depth: 12,
                heads: 12,
                target_dim: 768,
                mlp_ratio: 4,
                identity_adapter: false,
            },
            teacher: TeacherMode::Static {
                source: TeacherSource::Random,
            },
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        let e = &self.encoder;
        let p = &self.predictor;
        if e.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        for (what, dim, heads) in [("encoder", e.embed_dim, e.heads), ("predictor", p.embed_dim, p.heads)] {
            if heads == 0 || dim % heads != 0 {
                return bad(format!("{what} embed_dim {dim} not divisible by heads {heads}"));
            }
            if dim % 4 != 0 {
                return bad(format!("{what} embed_dim {dim} must be divisible by 4"));
            }
        }
        if e.mlp_ratio == 0 || p.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if p.target_dim != e.embed_dim {
            return bad(format!(
                "adapter target_dim {} must equal the teacher width {}",
                p.target_dim, e.embed_dim
            ));
        }
        if p.identity_adapter && p.embed_dim != p.target_dim {
            return bad("identity_adapter needs predictor embed_dim == target_dim".into());
        }
        if let TeacherMode::Ema {
            momentum_start,
            momentum_end,
        } = self.teacher
        {
            if !(0.0..=1.0).contains(&momentum_start)
                || !(0.0..=1.0).contains(&momentum_end)
                || momentum_start > momentum_end
            {
                return bad("EMA momentum must satisfy 0 <= start <= end <= 1".into());
            }
        }
        if self.ln_eps <= 0.0 {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}

/// Flattened patch pixels for `indices`, mapped from `[0, 1]` to `[-1, 1]`.
pub fn patchify<T: Real>(frame: &Frame, grid: &PatchGrid, indices: &[usize]) -> Tensor<T> {
    let p2 = grid.patch_size * grid.patch_size;
    let mut data = Vec::with_capacity(indices.len() * p2);
    for &i in indices {
        data.extend(grid.patch_pixels(frame, i).into_iter().map(|v| T::from_f64(2.0 * v - 1.0)));
    }
    Tensor::new(&[indices.len(), p2], data)
}

pub fn positions(grid: &PatchGrid, indices: &[usize]) -> Vec<(usize, usize)> {
    indices.iter().map(|&i| grid.position(i)).collect()
}

pub fn pos_embed<T: Real>(grid: &PatchGrid, indices: &[usize], dim: usize) -> Tensor<T> {
    Tensor::from_f64(&[indices.len(), dim], &sincos_2d(&positions(grid, indices), dim))
}

/// Vision transformer over an arbitrary subset of patch tokens.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new<T: Real, R: rand::Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &EncoderConfig,
        ln_eps: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let d = config.embed_dim;
        let p2 = config.patch_size * config.patch_size;
        let patch_embed = Linear::new(store, &format!("{prefix}.patch_embed"), p2, d, trainable, rng);
        let blocks = (0..config.depth)
            .map(|i| {
                let name = format!("{prefix}.blocks.{i}");
                Block::new(store, &name, d, config.heads, config.mlp_ratio, ln_eps, trainable, rng)
            })
            .collect();
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), d, ln_eps, trainable);
        Self {
            config: config.clone(),
            patch_embed,
            blocks,
            norm,
        }
    }

    /// Embeds the `indices` patches of `frame`; one output row per index, in order.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        frame: &Frame,
        grid: &PatchGrid,
        indices: &[usize],
    ) -> Result<Var, ModelError> {
        if indices.is_empty() {
            return Err(ModelError::Empty("patch"));
        }
        let tokens = g.constant(patchify(frame, grid, indices));
        let pos = g.constant(pos_embed(grid, indices, self.config.embed_dim));
        let x = self.patch_embed.forward(g, tokens);
        let mut x = g.add(x, pos);
        for b in &self.blocks {
            x = b.forward(g, x);
        }
        Ok(self.norm.forward(g, x))
    }
}

/// Narrow transformer that predicts target-block embeddings from context
/// embeddings plus positional mask tokens, followed by the linear adapter.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub adapter: Linear,
}

impl Predictor {
    pub fn new<T: Real, R: rand::Rng>(
        store: &mut ParamStore<T>,
        encoder_dim: usize,
        config: &PredictorConfig,
        ln_eps: f64,
        rng: &mut R,
    ) -> Self {
        let d = config.embed_dim;
        let embed = Linear::new(store, "predictor.embed", encoder_dim, d, true, rng);
        let mask_token = store.add(
            "predictor.mask_token",
            Tensor::from_f64(&[d], &trunc_normal(rng, d, INIT_STD)),
            true,
        );
        let blocks = (0..config.depth)
            .map(|i| {
                let name = format!("predictor.blocks.{i}");
                Block::new(store, &name, d, config.heads, config.mlp_ratio, ln_eps, true, rng)
            })
            .collect();
        let norm = LayerNorm::new(store, "predictor.norm", d, ln_eps, true);
        let adapter = Linear::new(store, "adapter", d, config.target_dim, true, rng);
        if config.identity_adapter {
            let mut eye = vec![0.0; d * d];
            for i in 0..d {
                eye[i * d + i] = 1.0;
            }
            store.get_mut(adapter.weight).value = Tensor::from_f64(&[d, d], &eye);
        }
        Self {
            config: config.clone(),
            embed,
            mask_token,
            blocks,
            norm,
            adapter,
        }
    }

    /// Predictor-width output for the `targets` patches, one row per target.
    pub fn predict<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        context: Var,
        grid: &PatchGrid,
        context_indices: &[usize],
        targets: &[usize],
    ) -> Result<Var, ModelError> {
        if targets.is_empty() {
            return Err(ModelError::Empty("target"));
        }
        let (rows, _) = g.value(context).dims2();
        if rows != context_indices.len() {
            return Err(ModelError::Shape(format!(
                "{rows} context rows for {} context indices",
                context_indices.len()
            )));
        }
        let d = self.config.embed_dim;
        let ctx = self.embed.forward(g, context);
        let ctx_pos = g.constant(pos_embed(grid, context_indices, d));
        let ctx = g.add(ctx, ctx_pos);
        let tgt_pos = g.constant(pos_embed(grid, targets, d));
        let token = g.param(self.mask_token);
        let masks = g.add_row(tgt_pos, token);
        let mut x = g.concat_rows(&[ctx, masks]);
        for b in &self.blocks {
            x = b.forward(g, x);
        }
        let x = self.norm.forward(g, x);
        let tail: Vec<usize> = (rows..rows + targets.len()).collect();
        Ok(g.gather_rows(x, &tail))
    }

    pub fn adapt<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, ModelError> {
        let width = g.value(x).dims2().1;
        if width != self.config.embed_dim {
            return Err(ModelError::Shape(format!(
                "adapter expects width {}, got {width}",
                self.config.embed_dim
            )));
        }
        Ok(self.adapter.forward(g, x))
    }
}

/// Rows of the teacher output `s_y` at `indices`, in order.
pub fn select<T: Real>(s_y: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>, ModelError> {
    let (n, d) = s_y.dims2();
    let mut data = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        if i >= n {
            return Err(ModelError::Shape(format!("row {i} of {n}")));
        }
        data.extend_from_slice(s_y.row(i));
    }
    Ok(Tensor::new(&[indices.len(), d], data))
}

/// `θ̄ ← m·θ̄ + (1 − m)·θ` for every teacher parameter, matched by position.
pub fn ema_update<T: Real>(
    teacher: &mut ParamStore<T>,
    student: &ParamStore<T>,
    momentum: f64,
) -> Result<(), ModelError> {
    let pairs: Vec<_> = teacher.iter().map(|p| p.name.clone()).collect();
    for name in pairs {
        let src = student_name(&name);
        let s = student
            .by_name(&src)
            .ok_or_else(|| ModelError::Shape(format!("student has no {src}")))?;
        let tid = teacher.id(&name).expect("name came from teacher");
        let t = teacher.get_mut(tid);
        if t.value.shape() != s.value.shape() {
            return Err(ModelError::Shape(format!("{name} vs {src}")));
        }
        let m = T::from_f64(momentum);
        let one_m = T::from_f64(1.0 - momentum);
        for (tv, &sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = m * *tv + one_m * sv;
        }
    }
    Ok(())
}

fn student_name(teacher_name: &str) -> String {
    match teacher_name.strip_prefix(TEACHER_PREFIX) {
        Some(rest) => format!("{STUDENT_PREFIX}{rest}"),
        None => teacher_name.to_string(),
    }
}

/// Student, predictor and adapter (trainable) plus the teacher (frozen).
pub struct ModelStack<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub teacher_params: ParamStore<T>,
    pub student: Encoder,
    pub predictor: Predictor,
    pub teacher: Encoder,
}

impl<T: Real> ModelStack<T> {
    /// Freshly initialized stack. Static teachers with a file source still
    /// need [`ModelStack::load_teacher`].
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, &[0x57D]);
        let student = Encoder::new(&mut params, STUDENT_PREFIX, &config.encoder, config.ln_eps, true, &mut rng);
        let mut rng = rng_for(seed, &[0x9ED]);
        let predictor = Predictor::new(&mut params, config.encoder.embed_dim, &config.predictor, config.ln_eps, &mut rng);
        let mut teacher_params = ParamStore::new();
        let mut rng = rng_for(seed, &[0x7EA]);
        let teacher = Encoder::new(
            &mut teacher_params,
            TEACHER_PREFIX,
            &config.encoder,
            config.ln_eps,
            false,
            &mut rng,
        );
        let mut stack = Self {
            config: config.clone(),
            params,
            teacher_params,
            student,
            predictor,
            teacher,
        };
        if !config.teacher.is_static() {
            // the EMA teacher starts as a copy of the student
            ema_update(&mut stack.teacher_params, &stack.params, 0.0)?;
        }
        Ok(stack)
    }

    /// Loads teacher weights according to a static source. `Random` is a no-op.
    pub fn load_teacher(&mut self, source: &TeacherSource) -> Result<(), ModelError> {
        match source {
            TeacherSource::Random => Ok(()),
            TeacherSource::Snapshot(path) => {
                let ck = Checkpoint::read(path)?;
                ck.restore_into(&mut self.teacher_params, student_name)?;
                Ok(())
            }
            TeacherSource::Checkpoint(path) => {
                let ck = Checkpoint::read(path)?;
                ck.restore_into(&mut self.teacher_params, str::to_string)?;
                Ok(())
            }
        }
    }

    pub fn grid_for(&self, frame: &Frame) -> Result<PatchGrid, ModelError> {
        PatchGrid::new(frame.height(), frame.width(), self.config.encoder.patch_size).map_err(|_| ModelError::Grid {
            frame: (frame.height(), frame.width()),
            patch: self.config.encoder.patch_size,
        })
    }

    pub fn encode_context(
        &self,
        g: &mut Graph<'_, T>,
        frame: &Frame,
        grid: &PatchGrid,
        context: &[usize],
    ) -> Result<Var, ModelError> {
        if context.is_empty() {
            return Err(ModelError::Empty("context"));
        }
        self.student.forward(g, frame, grid, context)
    }

    /// Teacher embeddings of every patch, computed without recording gradients.
    pub fn encode_target(&self, frame: &Frame, grid: &PatchGrid) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new(&self.teacher_params);
        let v = self.teacher.forward(&mut g, frame, grid, &grid.all())?;
        Ok(g.value(v).clone())
    }

    /// Mean of the student's patch embeddings over the whole frame.
    pub fn pooled_features(&self, frame: &Frame) -> Result<Vec<f64>, ModelError> {
        let grid = self.grid_for(frame)?;
        let mut g = Graph::new(&self.params);
        let v = self.student.forward(&mut g, frame, &grid, &grid.all())?;
        let t = g.value(v);
        let (n, d) = t.dims2();
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v.as_f64();
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(out)
    }

    /// Adapted predictions for one target block given recorded context embeddings.
    pub fn predict_target(
        &self,
        g: &mut Graph<'_, T>,
        context: Var,
        grid: &PatchGrid,
        context_indices: &[usize],
        target: &[usize],
    ) -> Result<Var, ModelError> {
        let h = self.predictor.predict(g, context, grid, context_indices, target)?;
        self.predictor.adapt(g, h)
    }

    pub fn teacher_digest(&self) -> String {
        self.teacher_params.digest()
    }

    /// Digest of the trainable store (student, predictor, adapter).
    pub fn params_digest(&self) -> String {
        self.params.digest()
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        let mut ck = Checkpoint::new(meta);
        ck.push_store(&self.params);
        ck.push_store(&self.teacher_params);
        ck
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<(), ModelError> {
        ck.restore_into(&mut self.params, str::to_string)?;
        ck.restore_into(&mut self.teacher_params, str::to_string)?;
        Ok(())
    }

    /// Copies every parameter into a stack of another precision.
    pub fn cast<U: Real>(&self) -> ModelStack<U> {
        let convert = |s: &ParamStore<T>| {
            let mut out = ParamStore::new();
            for p in s.iter() {
                out.add(p.name.clone(), p.value.cast(), p.trainable);
            }
            out
        };
        ModelStack {
            config: self.config.clone(),
            params: convert(&self.params),
            teacher_params: convert(&self.teacher_params),
            student: self.student.clone(),
            predictor: self.predictor.clone(),
            teacher: self.teacher.clone(),
        }
    }
}

/// Plain-text record of what produced a checkpoint.
pub fn write_model_card(
    path: &Path,
    config: &ModelConfig,
    seed: u64,
    teacher_provenance: &str,
    extra: &[(&str, String)],
) -> Result<(), ModelError> {
    let mut text = String::from("usjepa model card\n");
    text.push_str(&format!("seed: {seed}\n"));
    text.push_str(&format!("teacher: {teacher_provenance}\n"));
    for (k, v) in extra {
        text.push_str(&format!("{k}: {v}\n"));
    }
    text.push_str("config:\n");
    text.push_str(&serde_json::to_string_pretty(config).expect("config serializes"));
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
