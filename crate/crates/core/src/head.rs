//! Prompt-tuned cosine-softmax classification head.
//!
//! For proposal `i` with vision embedding `f_i` and OCR text embedding `e_i`
//! the network produces offsets `o_i = φ(e_i)` and `v_i = φ(f_i)`. A
//! [`TuningMode`] routes each offset either to the prompt side (adjusting
//! every category prompt `t_j`) or to the vision side (adjusting `f_i`), and
//! a [`FusionMode`] combines each side with its base vector. Class
//! probabilities are a softmax over `cos(t̂_ji, f̂_i) / τ`.
//!
//! With the offsets disabled, or zero under sum fusion, the head reduces to
//! the frozen-prompt baseline computed by [`baseline_probabilities`].

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::data::{CategorySet, SplitFilter};
use crate::error::{Error, Result};
use crate::math::{cosine, dot, ln, norm, softmax_into, Matrix};
use crate::network::{AptNetwork, Mode, NetworkConfig, Trace};
use crate::store::{prompt_key, EmbeddingStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    #[default]
    Sum,
    Multiply,
    /// Concatenate a side's vectors and map back to `d` with a trained linear layer.
    Attention,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Sum, FusionMode::Multiply, FusionMode::Attention];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Sum => "sum",
            FusionMode::Multiply => "multiply",
            FusionMode::Attention => "attention",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Which side receives each offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TuningMode {
    /// `t_j + v_i + o_i` vs. `f_i`
    #[default]
    PromptBoth,
    /// `t_j + o_i` vs. `f_i + v_i`
    PromptOcrVisionVision,
    /// `t_j + v_i` vs. `f_i + o_i`
    PromptVisionVisionOcr,
    /// `t_j` vs. `f_i + v_i + o_i`
    VisionBoth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Offset {
    Ocr,
    Vision,
}

impl TuningMode {
    pub const ALL: [TuningMode; 4] = [
        TuningMode::PromptBoth,
        TuningMode::PromptOcrVisionVision,
        TuningMode::PromptVisionVisionOcr,
        TuningMode::VisionBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TuningMode::PromptBoth => "prompt-both",
            TuningMode::PromptOcrVisionVision => "prompt-ocr",
            TuningMode::PromptVisionVisionOcr => "prompt-vision",
            TuningMode::VisionBoth => "vision-both",
        }
    }

    /// Table label, e.g. `t+o vs. f+v`.
    pub fn label(self) -> &'static str {
        match self {
            TuningMode::PromptBoth => "t+v+o vs. f",
            TuningMode::PromptOcrVisionVision => "t+o vs. f+v",
            TuningMode::PromptVisionVisionOcr => "t+v vs. f+o",
            TuningMode::VisionBoth => "t vs. f+v+o",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn on_prompt_side(self, offset: Offset) -> bool {
        matches!(
            (self, offset),
            (TuningMode::PromptBoth, _)
                | (TuningMode::PromptOcrVisionVision, Offset::Ocr)
                | (TuningMode::PromptVisionVisionOcr, Offset::Vision)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub fusion: FusionMode,
    pub tuning: TuningMode,
    pub share_weights: bool,
    pub tau: f64,
    pub use_ocr: bool,
    pub use_vision: bool,
    pub layers: usize,
    pub reduction: usize,
    pub rectify_output: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            fusion: FusionMode::Sum,
            tuning: TuningMode::PromptBoth,
            share_weights: true,
            tau: 0.01,
            use_ocr: true,
            use_vision: true,
            layers: 2,
            reduction: 16,
            rectify_output: false,
        }
    }
}

impl HeadConfig {
    /// Frozen prompts, no tuning network.
    pub fn baseline() -> Self {
        Self { use_ocr: false, use_vision: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    fn uses(&self, o: Offset) -> bool {
        match o {
            Offset::Ocr => self.use_ocr,
            Offset::Vision => self.use_vision,
        }
    }

    fn side(&self, prompt: bool) -> Vec<Offset> {
        [Offset::Vision, Offset::Ocr]
            .into_iter()
            .filter(|&o| self.uses(o) && self.tuning.on_prompt_side(o) == prompt)
            .collect()
    }
}

/// Linear map from the concatenation of a base vector and its offsets back to `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fuser {
    pub dim: usize,
    pub blocks: usize,
    /// `dim × (blocks·dim)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Fuser {
    /// Every block starts as the identity, so the map begins as a plain sum.
    pub fn identity_blocks(dim: usize, blocks: usize) -> Self {
        let width = blocks * dim;
        let mut weight = vec![0.0; dim * width];
        for r in 0..dim {
            for b in 0..blocks {
                weight[r * width + b * dim + r] = 1.0;
            }
        }
        Self { dim, blocks, weight, bias: vec![0.0; dim] }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `W_block · x`, without bias.
    fn apply_block(&self, block: usize, x: &[f64], out: &mut [f64]) {
        let width = self.blocks * self.dim;
        for (r, o) in out.iter_mut().enumerate() {
            let w = &self.weight[r * width + block * self.dim..r * width + (block + 1) * self.dim];
            *o += dot(w, x);
        }
    }

    /// `out += W_blockᵀ · g`
    fn apply_block_transposed(&self, block: usize, g: &[f64], out: &mut [f64]) {
        let width = self.blocks * self.dim;
        for (r, gr) in g.iter().enumerate() {
            let w = &self.weight[r * width + block * self.dim..r * width + (block + 1) * self.dim];
            for (o, wv) in out.iter_mut().zip(w) {
                *o += gr * wv;
            }
        }
    }

    fn apply(&self, base: &[f64], offsets: &[&[f64]]) -> Vec<f64> {
        let mut out = self.bias.clone();
        self.apply_block(0, base, &mut out);
        for (a, u) in offsets.iter().enumerate() {
            self.apply_block(a + 1, u, &mut out);
        }
        out
    }
}

/// Combines `base` with its side's offsets.
pub fn fuse_side(fusion: FusionMode, fuser: Option<&Fuser>, base: &[f64], offsets: &[&[f64]]) -> Vec<f64> {
    if offsets.is_empty() {
        return base.to_vec();
    }
    match fusion {
        FusionMode::Sum => {
            let mut out = base.to_vec();
            for u in offsets {
                out.iter_mut().zip(*u).for_each(|(o, x)| *o += x);
            }
            out
        }
        FusionMode::Multiply => {
            let mut out = base.to_vec();
            for u in offsets {
                out.iter_mut().zip(*u).for_each(|(o, x)| *o *= x);
            }
            out
        }
        FusionMode::Attention => fuser.expect("attention fusion needs a fuser").apply(base, offsets),
    }
}

/// Frozen category prompt vectors `t_j`. There is no mutable access.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPrompts {
    names: Vec<String>,
    vectors: Matrix,
}

impl CategoryPrompts {
    pub fn new(names: Vec<String>, vectors: Matrix) -> Result<Self> {
        if names.len() != vectors.rows() {
            return Err(Error::DimensionMismatch { expected: names.len(), found: vectors.rows() });
        }
        if !vectors.is_finite() {
            return Err(Error::InvalidConfig("prompt vectors must be finite".into()));
        }
        Ok(Self { names, vectors })
    }

    /// Loads `prompt:<name>` for every category admitted by `filter`, in set order.
    pub fn from_store(store: &EmbeddingStore, categories: &CategorySet, filter: SplitFilter) -> Result<Self> {
        let mut names = Vec::new();
        let mut rows = Vec::new();
        for idx in categories.indices(filter) {
            let name = categories.name(idx);
            rows.push(store.vector(&prompt_key(name))?);
            names.push(String::from(name));
        }
        let vectors = if rows.is_empty() { Matrix::zeros(0, store.dim()) } else { Matrix::from_rows(&rows)? };
        Self::new(names, vectors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// The prompts at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::LabelOutOfRange { label: bad, categories: self.len() });
        }
        Ok(Self {
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            vectors: self.vectors.select_rows(indices),
        })
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Little-endian bytes of every component, for bit-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.vectors.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Row-aligned proposal embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalBatch {
    pub vision: Matrix,
    pub ocr: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl ProposalBatch {
    pub fn new(vision: Matrix, ocr: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if vision.rows() != ocr.rows() {
            return Err(Error::DimensionMismatch { expected: vision.rows(), found: ocr.rows() });
        }
        if vision.cols() != ocr.cols() {
            return Err(Error::DimensionMismatch { expected: vision.cols(), found: ocr.cols() });
        }
        if let Some(l) = &labels {
            if l.len() != vision.rows() {
                return Err(Error::DimensionMismatch { expected: vision.rows(), found: l.len() });
            }
        }
        if !vision.is_finite() || !ocr.is_finite() {
            return Err(Error::InvalidConfig("proposal embeddings must be finite".into()));
        }
        Ok(Self { vision, ocr, labels })
    }

    pub fn len(&self) -> usize {
        self.vision.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vision.cols()
    }

    pub fn select(&self, idx: &[usize]) -> ProposalBatch {
        ProposalBatch {
            vision: self.vision.select_rows(idx),
            ocr: self.ocr.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Everything a forward pass computed, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    ocr: Option<(Matrix, Trace)>,
    vision: Option<(Matrix, Trace)>,
    fhat: Matrix,
    fhat_norm: Vec<f64>,
    /// Row `i·m + j` holds `t̂_ji`.
    that: Matrix,
    that_norm: Vec<f64>,
    cos: Matrix,
    pub probs: Matrix,
}

impl HeadTrace {
    pub fn tuned_prompt(&self, proposal: usize, category: usize) -> &[f64] {
        self.that.row(proposal * self.probs.cols() + category)
    }

    pub fn tuned_vision(&self, proposal: usize) -> &[f64] {
        self.fhat.row(proposal)
    }

    pub fn cosines(&self) -> &Matrix {
        &self.cos
    }

    /// Network traces whose batch statistics should be committed after a step.
    pub fn network_traces(&self) -> impl Iterator<Item = (Offset, &Trace)> {
        self.ocr
            .as_ref()
            .map(|(_, t)| (Offset::Ocr, t))
            .into_iter()
            .chain(self.vision.as_ref().map(|(_, t)| (Offset::Vision, t)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AptHead {
    cfg: HeadConfig,
    dim: usize,
    nets: Vec<AptNetwork>,
    ocr_net: Option<usize>,
    vision_net: Option<usize>,
    prompt_fuser: Option<Fuser>,
    vision_fuser: Option<Fuser>,
    mode: Mode,
}

impl AptHead {
    pub fn new<R: Rng + ?Sized>(cfg: HeadConfig, dim: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let net_cfg = NetworkConfig {
            dim,
            reduction: cfg.reduction,
            layers: cfg.layers,
            rectify_output: cfg.rectify_output,
        };
        if cfg.use_ocr || cfg.use_vision {
            net_cfg.validate()?;
        }
        let shift = if cfg.fusion == FusionMode::Multiply { 1.0 } else { 0.0 };
        let mut nets = Vec::new();
        let mut ocr_net = None;
        let mut vision_net = None;
        if cfg.use_ocr {
            nets.push(AptNetwork::init(net_cfg, shift, rng)?);
            ocr_net = Some(0);
        }
        if cfg.use_vision {
            if cfg.share_weights && ocr_net.is_some() {
                vision_net = ocr_net;
            } else {
                nets.push(AptNetwork::init(net_cfg, shift, rng)?);
                vision_net = Some(nets.len() - 1);
            }
        }
        let fuser_for = |prompt: bool| {
            let k = cfg.side(prompt).len();
            (cfg.fusion == FusionMode::Attention && k > 0).then(|| Fuser::identity_blocks(dim, k + 1))
        };
        Ok(Self {
            prompt_fuser: fuser_for(true),
            vision_fuser: fuser_for(false),
            cfg,
            dim,
            nets,
            ocr_net,
            vision_net,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn networks(&self) -> &[AptNetwork] {
        &self.nets
    }

    pub fn networks_mut(&mut self) -> &mut [AptNetwork] {
        &mut self.nets
    }

    pub fn network_for(&self, o: Offset) -> Option<&AptNetwork> {
        let idx = match o {
            Offset::Ocr => self.ocr_net,
            Offset::Vision => self.vision_net,
        };
        idx.map(|i| &self.nets[i])
    }

    /// Index into [`Self::networks`] of the network producing `o`.
    pub fn network_index(&self, o: Offset) -> Option<usize> {
        match o {
            Offset::Ocr => self.ocr_net,
            Offset::Vision => self.vision_net,
        }
    }

    pub fn prompt_fuser(&self) -> Option<&Fuser> {
        self.prompt_fuser.as_ref()
    }

    pub fn vision_fuser(&self) -> Option<&Fuser> {
        self.vision_fuser.as_ref()
    }

    pub fn fusers_mut(&mut self) -> (Option<&mut Fuser>, Option<&mut Fuser>) {
        (self.prompt_fuser.as_mut(), self.vision_fuser.as_mut())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.nets.iter_mut().for_each(|n| n.set_mode(mode));
    }

    pub fn param_count(&self) -> usize {
        self.segments().last().map_or(0, |(_, r)| r.end)
    }

    /// Named ranges of the flat parameter vector.
    pub fn segments(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        let mut pos = 0;
        let mut push = |name: String, len: usize| {
            out.push((name, pos..pos + len));
            pos += len;
        };
        for (k, n) in self.nets.iter().enumerate() {
            push(format!("phi{k}"), n.param_count());
        }
        if let Some(f) = &self.prompt_fuser {
            push("fuse:prompt".into(), f.param_count());
        }
        if let Some(f) = &self.vision_fuser {
            push("fuse:vision".into(), f.param_count());
        }
        out
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for n in &self.nets {
            n.write_params(&mut out);
        }
        for f in [&self.prompt_fuser, &self.vision_fuser].into_iter().flatten() {
            out.extend_from_slice(&f.weight);
            out.extend_from_slice(&f.bias);
        }
        out
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::DimensionMismatch { expected: self.param_count(), found: src.len() });
        }
        let mut pos = 0;
        for n in self.nets.iter_mut() {
            pos += n.read_params(&src[pos..]);
        }
        for f in [&mut self.prompt_fuser, &mut self.vision_fuser].into_iter().flatten() {
            for buf in [&mut f.weight, &mut f.bias] {
                let n = buf.len();
                buf.copy_from_slice(&src[pos..pos + n]);
                pos += n;
            }
        }
        Ok(())
    }

    /// Visits every parameter buffer in flat-layout order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for n in self.nets.iter_mut() {
            n.visit_params_mut(f);
        }
        for fu in [&mut self.prompt_fuser, &mut self.vision_fuser].into_iter().flatten() {
            f(&mut fu.weight);
            f(&mut fu.bias);
        }
    }

    /// Folds a training pass's batch statistics into the running statistics.
    /// A shared network is updated once per use.
    pub fn commit(&mut self, trace: &HeadTrace) {
        for (o, t) in trace.network_traces() {
            if let Some(i) = self.network_index(o) {
                self.nets[i].commit(t);
            }
        }
    }

    /// Tunes one prompt against one proposal, running φ in eval mode.
    pub fn tune_pair(&self, prompt: &[f64], vision: &[f64], ocr: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        for v in [prompt, vision, ocr] {
            if v.len() != self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim, found: v.len() });
            }
        }
        let offset = |o: Offset, x: &[f64]| -> Result<Option<Vec<f64>>> {
            match self.network_for(o) {
                Some(net) => {
                    let m = Matrix::from_vec(1, self.dim, x.to_vec())?;
                    Ok(Some(net.forward_traced(&m, false)?.0.into_vec()))
                }
                None => Ok(None),
            }
        };
        let o = offset(Offset::Ocr, ocr)?;
        let v = offset(Offset::Vision, vision)?;
        let pick = |prompt_side: bool| -> Vec<&[f64]> {
            self.cfg
                .side(prompt_side)
                .into_iter()
                .map(|k| match k {
                    Offset::Ocr => o.as_deref().unwrap(),
                    Offset::Vision => v.as_deref().unwrap(),
                })
                .collect()
        };
        let t_hat = fuse_side(self.cfg.fusion, self.prompt_fuser.as_ref(), prompt, &pick(true));
        let f_hat = fuse_side(self.cfg.fusion, self.vision_fuser.as_ref(), vision, &pick(false));
        Ok((t_hat, f_hat))
    }

    fn check_inputs(&self, prompts: &CategoryPrompts, batch: &ProposalBatch) -> Result<()> {
        if prompts.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: prompts.dim() });
        }
        if batch.dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: batch.dim() });
        }
        if prompts.is_empty() {
            return Err(Error::InvalidConfig("no category prompts".into()));
        }
        if let Some(labels) = &batch.labels {
            if let Some(&bad) = labels.iter().find(|&&l| l >= prompts.len()) {
                return Err(Error::LabelOutOfRange { label: bad, categories: prompts.len() });
            }
        }
        Ok(())
    }

    /// Class probabilities (`n × m`) using the head's current mode.
    pub fn predict(&self, prompts: &CategoryPrompts, batch: &ProposalBatch) -> Result<Matrix> {
        Ok(self.forward(prompts, batch, self.mode == Mode::Train)?.probs)
    }

    pub fn forward(&self, prompts: &CategoryPrompts, batch: &ProposalBatch, train: bool) -> Result<HeadTrace> {
        self.check_inputs(prompts, batch)?;
        let n = batch.len();
        let m = prompts.len();
        let d = self.dim;
        let t = prompts.vectors();

        let ocr = match self.network_for(Offset::Ocr) {
            Some(net) => Some(net.forward_traced(&batch.ocr, train)?),
            None => None,
        };
        let vision = match self.network_for(Offset::Vision) {
            Some(net) => Some(net.forward_traced(&batch.vision, train)?),
            None => None,
        };
        let offset = |k: Offset, i: usize| -> &[f64] {
            match k {
                Offset::Ocr => ocr.as_ref().unwrap().0.row(i),
                Offset::Vision => vision.as_ref().unwrap().0.row(i),
            }
        };
        let prompt_side = self.cfg.side(true);
        let vision_side = self.cfg.side(false);

        let mut fhat = Matrix::zeros(n, d);
        for i in 0..n {
            let offs: Vec<&[f64]> = vision_side.iter().map(|&k| offset(k, i)).collect();
            fhat.row_mut(i)
                .copy_from_slice(&fuse_side(self.cfg.fusion, self.vision_fuser.as_ref(), batch.vision.row(i), &offs));
        }

        let mut that = Matrix::zeros(n * m, d);
        // Attention splits into a per-category and a per-proposal part.
        let prompt_part: Option<Matrix> = self.prompt_fuser.as_ref().map(|fu| {
            let mut a = Matrix::zeros(m, d);
            for j in 0..m {
                fu.apply_block(0, t.row(j), a.row_mut(j));
            }
            a
        });
        for i in 0..n {
            let offs: Vec<&[f64]> = prompt_side.iter().map(|&k| offset(k, i)).collect();
            match (&prompt_part, self.prompt_fuser.as_ref()) {
                (Some(a), Some(fu)) => {
                    let mut b = fu.bias.clone();
                    for (blk, u) in offs.iter().enumerate() {
                        fu.apply_block(blk + 1, u, &mut b);
                    }
                    for j in 0..m {
                        let row = that.row_mut(i * m + j);
                        for ((r, x), y) in row.iter_mut().zip(a.row(j)).zip(&b) {
                            *r = x + y;
                        }
                    }
                }
                _ => {
                    for j in 0..m {
                        that.row_mut(i * m + j).copy_from_slice(&fuse_side(self.cfg.fusion, None, t.row(j), &offs));
                    }
                }
            }
        }

        let fhat_norm: Vec<f64> = fhat.iter_rows().map(norm).collect();
        let that_norm: Vec<f64> = that.iter_rows().map(norm).collect();
        if fhat_norm.iter().any(|&v| v == 0.0) {
            return Err(Error::ZeroNorm("tuned vision embedding"));
        }
        if that_norm.iter().any(|&v| v == 0.0) {
            return Err(Error::ZeroNorm("tuned category prompt"));
        }
        let mut cos = Matrix::zeros(n, m);
        let mut probs = Matrix::zeros(n, m);
        let mut logits = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                let c = dot(that.row(i * m + j), fhat.row(i)) / (that_norm[i * m + j] * fhat_norm[i]);
                cos.set(i, j, c);
                logits[j] = c / self.cfg.tau;
            }
            softmax_into(&logits, probs.row_mut(i));
        }
        Ok(HeadTrace { ocr, vision, fhat, fhat_norm, that, that_norm, cos, probs })
    }

    /// Mean cross-entropy loss and its gradient w.r.t. the flat parameters.
    pub fn loss_and_gradient(
        &self,
        prompts: &CategoryPrompts,
        batch: &ProposalBatch,
        train: bool,
    ) -> Result<(f64, Vec<f64>, HeadTrace)> {
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("training needs labels".into()))?;
        let trace = self.forward(prompts, batch, train)?;
        let loss = loss(&trace.probs, labels)?;
        let n = batch.len() as f64;
        let mut dlogits = trace.probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            for j in 0..dlogits.cols() {
                let v = dlogits.get(i, j) - if j == y { 1.0 } else { 0.0 };
                dlogits.set(i, j, v / n);
            }
        }
        let grad = self.backward(prompts, batch, &trace, &dlogits);
        Ok((loss, grad, trace))
    }

    /// Parameter gradient given the gradient of the objective w.r.t. the
    /// logits `cos(t̂_ji, f̂_i) / τ`. Prompts receive no gradient.
    pub fn backward(
        &self,
        prompts: &CategoryPrompts,
        batch: &ProposalBatch,
        trace: &HeadTrace,
        dlogits: &Matrix,
    ) -> Vec<f64> {
        let n = batch.len();
        let m = prompts.len();
        let d = self.dim;
        let t = prompts.vectors();
        let tau = self.cfg.tau;

        // cosine backward
        let mut d_that = Matrix::zeros(n * m, d);
        let mut d_fhat = Matrix::zeros(n, d);
        for i in 0..n {
            let f = trace.fhat.row(i);
            let fnorm = trace.fhat_norm[i];
            for j in 0..m {
                let g = dlogits.get(i, j) / tau;
                if g == 0.0 {
                    continue;
                }
                let c = trace.cos.get(i, j);
                let th = trace.that.row(i * m + j);
                let tnorm = trace.that_norm[i * m + j];
                let a = g / (tnorm * fnorm);
                let bt = g * c / (tnorm * tnorm);
                let bf = g * c / (fnorm * fnorm);
                let dt = d_that.row_mut(i * m + j);
                for k in 0..d {
                    dt[k] = a * f[k] - bt * th[k];
                }
                let df = d_fhat.row_mut(i);
                for k in 0..d {
                    df[k] += a * th[k] - bf * f[k];
                }
            }
        }

        let mut grad = vec![0.0; self.param_count()];
        let segments = self.segments();
        let seg = |name: &str| segments.iter().find(|(s, _)| s == name).map(|(_, r)| r.clone());

        let mut d_ocr = Matrix::zeros(n, d);
        let mut d_vis = Matrix::zeros(n, d);
        let offset = |k: Offset, i: usize| -> &[f64] {
            match k {
                Offset::Ocr => trace.ocr.as_ref().unwrap().0.row(i),
                Offset::Vision => trace.vision.as_ref().unwrap().0.row(i),
            }
        };

        // prompt side
        let prompt_side = self.cfg.side(true);
        if !prompt_side.is_empty() {
            let mut fuser_grad = seg("fuse:prompt").map(|r| (r.start, vec![0.0; r.len()]));
            for i in 0..n {
                let mut sum_dt = vec![0.0; d];
                for j in 0..m {
                    sum_dt.iter_mut().zip(d_that.row(i * m + j)).for_each(|(s, v)| *s += v);
                }
                for (a, &kind) in prompt_side.iter().enumerate() {
                    let mut du = vec![0.0; d];
                    match self.cfg.fusion {
                        FusionMode::Sum => du.copy_from_slice(&sum_dt),
                        FusionMode::Multiply => {
                            let mut others = vec![1.0; d];
                            for (b, &kb) in prompt_side.iter().enumerate() {
                                if b != a {
                                    others.iter_mut().zip(offset(kb, i)).for_each(|(o, x)| *o *= x);
                                }
                            }
                            for j in 0..m {
                                let dt = d_that.row(i * m + j);
                                let tj = t.row(j);
                                for k in 0..d {
                                    du[k] += dt[k] * tj[k] * others[k];
                                }
                            }
                        }
                        FusionMode::Attention => {
                            self.prompt_fuser.as_ref().unwrap().apply_block_transposed(a + 1, &sum_dt, &mut du);
                        }
                    }
                    let target = match kind {
                        Offset::Ocr => &mut d_ocr,
                        Offset::Vision => &mut d_vis,
                    };
                    target.row_mut(i).iter_mut().zip(&du).for_each(|(x, y)| *x += y);
                }
                if let (Some((_, g)), Some(fu)) = (fuser_grad.as_mut(), self.prompt_fuser.as_ref()) {
                    let width = fu.blocks * d;
                    let mut inputs: Vec<&[f64]> = Vec::with_capacity(fu.blocks);
                    inputs.push(&[]);
                    inputs.extend(prompt_side.iter().map(|&k| offset(k, i)));
                    for r in 0..d {
                        let grow = &mut g[r * width..(r + 1) * width];
                        // offset blocks
                        for (blk, u) in inputs.iter().enumerate().skip(1) {
                            for (gv, uv) in grow[blk * d..(blk + 1) * d].iter_mut().zip(*u) {
                                *gv += sum_dt[r] * uv;
                            }
                        }
                        // base block: Σ_j dt̂_ji[r] · t_j
                        for j in 0..m {
                            let dtr = d_that.get(i * m + j, r);
                            if dtr != 0.0 {
                                for (gv, tv) in grow[..d].iter_mut().zip(t.row(j)) {
                                    *gv += dtr * tv;
                                }
                            }
                        }
                    }
                    let gb = &mut g[d * width..];
                    gb.iter_mut().zip(&sum_dt).for_each(|(x, y)| *x += y);
                }
            }
            if let Some((start, g)) = fuser_grad {
                grad[start..start + g.len()].iter_mut().zip(&g).for_each(|(x, y)| *x += y);
            }
        }

        // vision side
        let vision_side = self.cfg.side(false);
        if !vision_side.is_empty() {
            let mut fuser_grad = seg("fuse:vision").map(|r| (r.start, vec![0.0; r.len()]));
            for i in 0..n {
                let df = d_fhat.row(i);
                let f = batch.vision.row(i);
                for (a, &kind) in vision_side.iter().enumerate() {
                    let mut du = vec![0.0; d];
                    match self.cfg.fusion {
                        FusionMode::Sum => du.copy_from_slice(df),
                        FusionMode::Multiply => {
                            let mut others = vec![1.0; d];
                            for (b, &kb) in vision_side.iter().enumerate() {
                                if b != a {
                                    others.iter_mut().zip(offset(kb, i)).for_each(|(o, x)| *o *= x);
                                }
                            }
                            for k in 0..d {
                                du[k] = df[k] * f[k] * others[k];
                            }
                        }
                        FusionMode::Attention => {
                            self.vision_fuser.as_ref().unwrap().apply_block_transposed(a + 1, df, &mut du);
                        }
                    }
                    let target = match kind {
                        Offset::Ocr => &mut d_ocr,
                        Offset::Vision => &mut d_vis,
                    };
                    target.row_mut(i).iter_mut().zip(&du).for_each(|(x, y)| *x += y);
                }
                if let (Some((_, g)), Some(fu)) = (fuser_grad.as_mut(), self.vision_fuser.as_ref()) {
                    let width = fu.blocks * d;
                    let mut inputs: Vec<&[f64]> = Vec::with_capacity(fu.blocks);
                    inputs.push(f);
                    inputs.extend(vision_side.iter().map(|&k| offset(k, i)));
                    for r in 0..d {
                        let grow = &mut g[r * width..(r + 1) * width];
                        for (blk, u) in inputs.iter().enumerate() {
                            for (gv, uv) in grow[blk * d..(blk + 1) * d].iter_mut().zip(*u) {
                                *gv += df[r] * uv;
                            }
                        }
                    }
                    let gb = &mut g[d * width..];
                    gb.iter_mut().zip(df).for_each(|(x, y)| *x += y);
                }
            }
            if let Some((start, g)) = fuser_grad {
                grad[start..start + g.len()].iter_mut().zip(&g).for_each(|(x, y)| *x += y);
            }
        }

        // networks; a shared network accumulates both contributions
        for (kind, dout) in [(Offset::Ocr, &d_ocr), (Offset::Vision, &d_vis)] {
            let (Some(idx), Some(tr)) = (
                self.network_index(kind),
                match kind {
                    Offset::Ocr => trace.ocr.as_ref(),
                    Offset::Vision => trace.vision.as_ref(),
                },
            ) else {
                continue;
            };
            let r = seg(&format!("phi{idx}")).unwrap();
            self.nets[idx].backward(&tr.1, dout, &mut grad[r]);
        }
        grad
    }
}

/// Frozen-prompt probabilities: softmax over `cos(t_j, f_i) / τ`.
pub fn baseline_probabilities(prompts: &CategoryPrompts, vision: &Matrix, tau: f64) -> Result<Matrix> {
    if prompts.dim() != vision.cols() {
        return Err(Error::DimensionMismatch { expected: prompts.dim(), found: vision.cols() });
    }
    let m = prompts.len();
    let mut probs = Matrix::zeros(vision.rows(), m);
    let mut logits = vec![0.0; m];
    for (i, f) in vision.iter_rows().enumerate() {
        for (j, l) in logits.iter_mut().enumerate() {
            *l = cosine(prompts.vectors().row(j), f)? / tau;
        }
        softmax_into(&logits, probs.row_mut(i));
    }
    Ok(probs)
}

/// Mean over rows of `-ln p[i, label_i]`.
pub fn loss(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.rows() {
        return Err(Error::DimensionMismatch { expected: probs.rows(), found: labels.len() });
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= probs.cols() {
            return Err(Error::LabelOutOfRange { label: y, categories: probs.cols() });
        }
        let p = probs.get(i, y);
        if p == 0.0 {
            return Err(Error::ZeroProbability { row: i });
        }
        total -= ln(p);
    }
    Ok(total / labels.len() as f64)
}

/// Row-wise argmax (first index on ties).
pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    probs
        .iter_rows()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prompts(rows: &[&[f64]]) -> CategoryPrompts {
        let names = (0..rows.len()).map(|i| format!("c{i}")).collect();
        CategoryPrompts::new(names, Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn sum_and_product_fusion() {
        let t = [1.0, 0.0];
        let o = [0.0, 1.0];
        let v = [1.0, 1.0];
        assert_eq!(fuse_side(FusionMode::Sum, None, &t, &[&v, &o]), [2.0, 2.0]);
        assert_eq!(fuse_side(FusionMode::Multiply, None, &[2.0, 3.0], &[&v, &[1.0, 0.0]]), [2.0, 0.0]);
        assert_eq!(fuse_side(FusionMode::Multiply, None, &[2.0, 3.0], &[]), [2.0, 3.0]);
    }

    #[test]
    fn attention_fuser_starts_as_sum() {
        let fu = Fuser::identity_blocks(2, 3);
        assert_eq!(fuse_side(FusionMode::Attention, Some(&fu), &[1.0, 0.0], &[&[1.0, 1.0], &[0.0, 1.0]]), [2.0, 2.0]);
    }

    #[test]
    fn tuning_routes() {
        use Offset::*;
        let cfg = |tuning| HeadConfig { tuning, ..HeadConfig::default() };
        assert_eq!(cfg(TuningMode::PromptBoth).side(true), [Vision, Ocr]);
        assert!(cfg(TuningMode::PromptBoth).side(false).is_empty());
        assert_eq!(cfg(TuningMode::PromptOcrVisionVision).side(true), [Ocr]);
        assert_eq!(cfg(TuningMode::PromptOcrVisionVision).side(false), [Vision]);
        assert_eq!(cfg(TuningMode::PromptVisionVisionOcr).side(true), [Vision]);
        assert_eq!(cfg(TuningMode::PromptVisionVisionOcr).side(false), [Ocr]);
        assert_eq!(cfg(TuningMode::VisionBoth).side(false), [Vision, Ocr]);
        let no_ocr = HeadConfig { use_ocr: false, ..HeadConfig::default() };
        assert_eq!(no_ocr.side(true), [Vision]);
    }

    #[test]
    fn freshly_initialized_head_is_the_identity_for_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t: Vec<f64> = (0..32).map(|k| k as f64 * 0.1 - 1.0).collect();
        let f: Vec<f64> = (0..32).map(|k| (k as f64 * 0.3).sin()).collect();
        let e: Vec<f64> = (0..32).map(|k| (k as f64).cos()).collect();
        for fusion in FusionMode::ALL {
            for tuning in TuningMode::ALL {
                let cfg = HeadConfig { fusion, tuning, ..HeadConfig::default() };
                let head = AptHead::new(cfg, 32, &mut rng).unwrap();
                let (th, fh) = head.tune_pair(&t, &f, &e).unwrap();
                assert_eq!(th, t, "{fusion:?} {tuning:?}");
                assert_eq!(fh, f, "{fusion:?} {tuning:?}");
            }
        }
    }

    #[test]
    fn probability_examples() {
        let head = AptHead::new(HeadConfig::baseline(), 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // both prompts at 45 degrees from f
        let p = prompts(&[&[1.0, 1.0], &[1.0, -1.0]]);
        let f = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let batch = ProposalBatch::new(f.clone(), Matrix::zeros(1, 2), None).unwrap();
        let probs = head.predict(&p, &batch).unwrap();
        assert!((probs.get(0, 0) - 0.5).abs() < 1e-15);

        // cosines (1, 0) at τ = 0.01
        let p = prompts(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let probs = head.predict(&p, &batch).unwrap();
        assert!((probs.get(0, 0) - 1.0 / (1.0 + (-100f64).exp())).abs() < 1e-15);

        // cosines (0.8, 0.6) at τ = 1
        let cfg = HeadConfig { tau: 1.0, ..HeadConfig::baseline() };
        let head = AptHead::new(cfg, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = prompts(&[&[0.8, 0.6], &[0.6, 0.8]]);
        let probs = head.predict(&p, &batch).unwrap();
        let z = 0.8f64.exp() + 0.6f64.exp();
        assert!((probs.get(0, 0) - 0.8f64.exp() / z).abs() < 1e-12);
        assert!((probs.get(0, 0) - 0.5498).abs() < 1e-4);
        assert!((probs.get(0, 1) - 0.4502).abs() < 1e-4);
    }

    #[test]
    fn loss_examples() {
        let one = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(loss(&one, &[0, 1]).unwrap(), 0.0);
        let half = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        assert!((loss(&half, &[0]).unwrap() - core::f64::consts::LN_2).abs() < 1e-15);
        let two = Matrix::from_rows(&[[0.5, 0.5], [0.75, 0.25]]).unwrap();
        assert!((loss(&two, &[0, 1]).unwrap() - 1.039_720_770_839_918).abs() < 1e-12);
        assert_eq!(loss(&one, &[1, 1]), Err(Error::ZeroProbability { row: 0 }));
        assert!(matches!(loss(&one, &[0, 2]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn zero_norm_is_reported() {
        let head = AptHead::new(HeadConfig::baseline(), 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = prompts(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let batch = ProposalBatch::new(Matrix::zeros(1, 2), Matrix::zeros(1, 2), None).unwrap();
        assert_eq!(head.predict(&p, &batch), Err(Error::ZeroNorm("tuned vision embedding")));
    }

    #[test]
    fn input_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = AptHead::new(HeadConfig { reduction: 4, ..HeadConfig::default() }, 8, &mut rng).unwrap();
        let p = prompts(&[&[1.0; 4]]);
        let batch = ProposalBatch::new(Matrix::filled(2, 8, 1.0), Matrix::filled(2, 8, 1.0), None).unwrap();
        assert_eq!(head.predict(&p, &batch), Err(Error::DimensionMismatch { expected: 8, found: 4 }));
        let p8 = prompts(&[&[1.0; 8]]);
        let labeled = ProposalBatch { labels: Some(alloc::vec![0, 3]), ..batch };
        assert!(matches!(head.predict(&p8, &labeled), Err(Error::LabelOutOfRange { label: 3, .. })));
        assert!(AptHead::new(HeadConfig { tau: 0.0, ..HeadConfig::default() }, 8, &mut rng).is_err());
    }

    #[test]
    fn shared_and_individual_parameter_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shared = AptHead::new(HeadConfig { reduction: 4, ..HeadConfig::default() }, 16, &mut rng).unwrap();
        assert_eq!(shared.networks().len(), 1);
        assert_eq!(shared.network_index(Offset::Ocr), shared.network_index(Offset::Vision));
        let single = NetworkConfig::new(16, 4, 2).param_count();
        assert_eq!(shared.param_count(), single);
        let split = AptHead::new(
            HeadConfig { reduction: 4, share_weights: false, ..HeadConfig::default() },
            16,
            &mut rng,
        )
        .unwrap();
        assert_eq!(split.networks().len(), 2);
        assert_eq!(split.param_count(), 2 * single);
        assert_eq!(AptHead::new(HeadConfig::baseline(), 16, &mut rng).unwrap().param_count(), 0);
    }

    #[test]
    fn subset_reorders_prompts() {
        let p = prompts(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let s = p.subset(&[2, 0]).unwrap();
        assert_eq!(s.names(), ["c2".to_string(), "c0".to_string()]);
        assert_eq!(s.vectors().row(0), &[1.0, 1.0]);
        assert!(p.subset(&[3]).is_err());
    }
}
