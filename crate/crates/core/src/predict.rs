//! Response prediction: input fusion, a single-layer gated recurrence with a
//! per-question logistic readout, training with truncated backpropagation
//! and Adam, and AUC/ACC evaluation.
//!
//! Step `t` consumes the input of interaction `t` and its hidden state
//! predicts the response at `t + 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Dataset, Interaction, StudentSequence};
use crate::optim::Adam;
use crate::pretrain::{EmbeddingSet, RelationGraphs};
use crate::seed;

const MAGIC: &[u8; 8] = b"CRDPMDL1";

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("empty dataset")]
    Empty,
    #[error("non-finite activations at epoch {epoch}, student {student}")]
    Diverged { epoch: usize, student: u64 },
    #[error("embedding table has dimension {got}, model expects {want}")]
    Dimension { got: usize, want: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a model checkpoint ({reason})")]
    Format { path: PathBuf, reason: String },
}

type Result<T> = std::result::Result<T, PredictError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionParams {
    pub w: f64,
    pub use_embeddings: bool,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self { w: 0.5, use_embeddings: false }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(PredictError::Params(format!("fusion weight must lie in [0, 1], got {}", self.w)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorParams {
    pub hidden_dim: usize,
    pub lr: f64,
    /// Student sequences per optimiser step.
    pub batch: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Truncated backpropagation window in steps.
    pub bptt: usize,
}

impl Default for PredictorParams {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            lr: 0.001,
            batch: 256,
            dropout: 0.5,
            epochs: 20,
            seed: 0,
            bptt: 50,
        }
    }
}

impl PredictorParams {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.batch == 0 || self.bptt == 0 {
            return Err(PredictError::Params("hidden_dim, batch and bptt must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PredictError::Params(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PredictError::Params(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Frozen problem embeddings used on the embedding path of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    pub known: Vec<bool>,
    pub mean: Vec<f64>,
}

impl EmbeddingTable {
    /// Questions without any skill tag in `graphs` count as unknown.
    pub fn from_pretrained(emb: &EmbeddingSet, graphs: &RelationGraphs) -> Self {
        let vectors = emb.problem_embeddings(graphs);
        let known: Vec<bool> = graphs.qs.iter().map(|t| !t.is_empty()).collect();
        Self::new(vectors, known)
    }

    pub fn new(vectors: Vec<Vec<f64>>, known: Vec<bool>) -> Self {
        let dim = vectors.first().map_or(0, |v| v.len());
        let mut mean = vec![0.0; dim];
        let count = known.iter().filter(|&&k| k).count();
        if count > 0 {
            for (v, _) in vectors.iter().zip(&known).filter(|(_, &k)| k) {
                for (m, x) in mean.iter_mut().zip(v) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
        }
        Self { dim, vectors, known, mean }
    }

    /// The embedding of `q`, and whether the mean was substituted.
    pub fn get(&self, q: u32) -> (&[f64], bool) {
        match self.known.get(q as usize) {
            Some(true) => (&self.vectors[q as usize], false),
            _ => (&self.mean, true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    base: usize,
    proj: usize,
    wz: usize,
    uz: usize,
    bz: usize,
    wc: usize,
    uc: usize,
    bc: usize,
    read: usize,
    read_b: usize,
    len: usize,
}

impl Layout {
    fn new(h: usize, num_skills: usize, num_questions: usize, emb_dim: usize) -> Self {
        let base = 0;
        let proj = base + 2 * num_skills * h;
        let wz = proj + h * 2 * emb_dim;
        let uz = wz + h * h;
        let bz = uz + h * h;
        let wc = bz + h;
        let uc = wc + h * h;
        let bc = uc + h * h;
        let read = bc + h;
        let read_b = read + (num_questions + 1) * h;
        let len = read_b + num_questions + 1;
        Self { base, proj, wz, uz, bz, wc, uc, bc, read, read_b, len }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub hidden_dim: usize,
    pub num_questions: usize,
    pub num_skills: usize,
    pub fusion: FusionParams,
    pub params: Vec<f64>,
    pub embeddings: Option<EmbeddingTable>,
    /// Questions whose readout row was trained; the rest use the fallback row.
    pub seen: Vec<bool>,
    layout: Layout,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += M v` for a row-major `rows x v.len()` matrix.
fn matvec_add(m: &[f64], v: &[f64], out: &mut [f64]) {
    let c = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o += dot(&m[r * c..(r + 1) * c], v);
    }
}

/// `out += M^T u` for a row-major `u.len() x out.len()` matrix.
fn matvec_t_add(m: &[f64], u: &[f64], out: &mut [f64]) {
    let c = out.len();
    for (r, &ur) in u.iter().enumerate() {
        if ur != 0.0 {
            for (o, x) in out.iter_mut().zip(&m[r * c..(r + 1) * c]) {
                *o += ur * x;
            }
        }
    }
}

/// `g += u v^T`.
fn outer_add(g: &mut [f64], u: &[f64], v: &[f64]) {
    let c = v.len();
    for (r, &ur) in u.iter().enumerate() {
        if ur != 0.0 {
            for (o, x) in g[r * c..(r + 1) * c].iter_mut().zip(v) {
                *o += ur * x;
            }
        }
    }
}

struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

impl Model {
    pub fn new(
        hidden_dim: usize,
        num_questions: usize,
        num_skills: usize,
        fusion: FusionParams,
        embeddings: Option<EmbeddingTable>,
    ) -> Self {
        let embeddings = if fusion.use_embeddings { embeddings } else { None };
        let emb_dim = embeddings.as_ref().map_or(0, |e| e.dim);
        let layout = Layout::new(hidden_dim, num_skills, num_questions, emb_dim);
        Self {
            hidden_dim,
            num_questions,
            num_skills,
            fusion,
            params: vec![0.0; layout.len],
            embeddings,
            seen: vec![false; num_questions],
            layout,
        }
    }

    pub fn init_random(&mut self, rng: &mut impl Rng) {
        let h = self.hidden_dim;
        let l = self.layout;
        let fill = |p: &mut [f64], b: f64, rng: &mut dyn rand::RngCore| {
            for x in p {
                *x = rng.gen_range(-b..b);
            }
        };
        let hb = 1.0 / (h as f64).sqrt();
        fill(&mut self.params[l.base..l.proj], 0.1, rng);
        let ed = self.emb_dim().max(1);
        fill(&mut self.params[l.proj..l.wz], 1.0 / ((2 * ed) as f64).sqrt(), rng);
        fill(&mut self.params[l.wz..l.bz], hb, rng);
        fill(&mut self.params[l.wc..l.bc], hb, rng);
        fill(&mut self.params[l.read..l.read_b], hb, rng);
    }

    pub fn emb_dim(&self) -> usize {
        self.embeddings.as_ref().map_or(0, |e| e.dim)
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    fn readout_row(&self, q: u32) -> usize {
        if (q as usize) < self.num_questions && self.seen[q as usize] {
            q as usize
        } else {
            self.num_questions
        }
    }

    /// Input vector for one interaction; the flag reports a mean-embedding fallback.
    pub fn fuse(&self, it: &Interaction) -> (Vec<f64>, bool) {
        let h = self.hidden_dim;
        let row = self.layout.base + (2 * it.skill_id as usize + usize::from(it.response)) * h;
        let base = &self.params[row..row + h];
        match &self.embeddings {
            None => (base.to_vec(), false),
            Some(table) => {
                let (e, fallback) = table.get(it.question_id);
                let path = self.embedding_path(e, it.response);
                let w = self.fusion.w;
                (base.iter().zip(&path).map(|(b, p)| w * b + (1.0 - w) * p).collect(), fallback)
            }
        }
    }

    /// Projection of `[r e; (1 - r) e]`.
    fn embedding_path(&self, e: &[f64], response: bool) -> Vec<f64> {
        let (h, d) = (self.hidden_dim, self.emb_dim());
        let half = if response { 0 } else { d };
        let p = &self.params[self.layout.proj..self.layout.wz];
        (0..h).map(|r| dot(&p[r * 2 * d + half..r * 2 * d + half + d], e)).collect()
    }

    fn cell(&self, h_prev: &[f64], x: &[f64]) -> StepCache {
        let (h, l) = (self.hidden_dim, self.layout);
        let p = &self.params;
        let mut az = p[l.bz..l.bz + h].to_vec();
        matvec_add(&p[l.wz..l.uz], x, &mut az);
        matvec_add(&p[l.uz..l.bz], h_prev, &mut az);
        let mut ac = p[l.bc..l.bc + h].to_vec();
        matvec_add(&p[l.wc..l.uc], x, &mut ac);
        matvec_add(&p[l.uc..l.bc], h_prev, &mut ac);
        let z: Vec<f64> = az.iter().map(|&a| sigmoid(a)).collect();
        let c: Vec<f64> = ac.iter().map(|a| a.tanh()).collect();
        let hn = (0..h).map(|k| (1.0 - z[k]) * h_prev[k] + z[k] * c[k]).collect();
        StepCache { x: x.to_vec(), h_prev: h_prev.to_vec(), z, c, h: hn }
    }

    /// One recurrence step and the prediction it makes for `next_question`.
    pub fn recurrent_step(&self, h_prev: &[f64], x_prev: &[f64], next_question: u32) -> (Vec<f64>, f64) {
        let cache = self.cell(h_prev, x_prev);
        let y = self.readout(&cache.h, next_question);
        (cache.h, y)
    }

    fn readout(&self, h: &[f64], q: u32) -> f64 {
        let row = self.readout_row(q);
        let l = self.layout;
        let hd = self.hidden_dim;
        sigmoid(dot(&self.params[l.read + row * hd..l.read + (row + 1) * hd], h) + self.params[l.read_b + row])
    }

    /// Predicted probabilities for positions `1..n` of `seq`, and the number
    /// of mean-embedding fallbacks.
    pub fn predict_sequence(&self, seq: &StudentSequence) -> (Vec<f64>, usize) {
        let mut h = vec![0.0; self.hidden_dim];
        let mut out = Vec::with_capacity(seq.len().saturating_sub(1));
        let mut fallbacks = 0;
        for t in 0..seq.len().saturating_sub(1) {
            let (x, fb) = self.fuse(&seq.interactions[t]);
            fallbacks += usize::from(fb);
            let (hn, y) = self.recurrent_step(&h, &x, seq.interactions[t + 1].question_id);
            h = hn;
            out.push(y);
        }
        (out, fallbacks)
    }

    /// Sum of BCE over the predictions of `seq` and its gradient, added into
    /// `grad`. `masks` holds one dropout mask per step (already scaled).
    fn sequence_grad(&self, seq: &StudentSequence, masks: Option<&[Vec<f64>]>, bptt: usize, grad: &mut [f64]) -> (f64, usize) {
        let (hd, l) = (self.hidden_dim, self.layout);
        let n = seq.len();
        if n < 2 {
            return (0.0, 0);
        }
        let steps = n - 1;
        let mut h = vec![0.0; hd];
        let mut loss = 0.0;
        let mut start = 0;
        while start < steps {
            let end = (start + bptt).min(steps);
            let mut caches = Vec::with_capacity(end - start);
            let mut dh_read = Vec::with_capacity(end - start);
            for t in start..end {
                let (x, _) = self.fuse(&seq.interactions[t]);
                let cache = self.cell(&h, &x);
                let next = &seq.interactions[t + 1];
                let row = self.readout_row(next.question_id);
                let hm: Vec<f64> = match masks {
                    Some(m) => cache.h.iter().zip(&m[t]).map(|(a, b)| a * b).collect(),
                    None => cache.h.clone(),
                };
                let rw = l.read + row * hd;
                let p = sigmoid(dot(&self.params[rw..rw + hd], &hm) + self.params[l.read_b + row]);
                let y = if next.response { 1.0 } else { 0.0 };
                let pc = p.clamp(1e-12, 1.0 - 1e-12);
                loss += -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
                let dout = p - y;
                for k in 0..hd {
                    grad[rw + k] += dout * hm[k];
                }
                grad[l.read_b + row] += dout;
                let mut dh: Vec<f64> = self.params[rw..rw + hd].iter().map(|r| dout * r).collect();
                if let Some(m) = masks {
                    dh.iter_mut().zip(&m[t]).for_each(|(a, b)| *a *= b);
                }
                h = cache.h.clone();
                caches.push(cache);
                dh_read.push(dh);
            }
            let mut dh_next = vec![0.0; hd];
            for (i, cache) in caches.iter().enumerate().rev() {
                let t = start + i;
                let dh: Vec<f64> = dh_read[i].iter().zip(&dh_next).map(|(a, b)| a + b).collect();
                let mut daz = vec![0.0; hd];
                let mut dac = vec![0.0; hd];
                let mut dh_prev = vec![0.0; hd];
                for k in 0..hd {
                    let (z, c) = (cache.z[k], cache.c[k]);
                    daz[k] = dh[k] * (c - cache.h_prev[k]) * z * (1.0 - z);
                    dac[k] = dh[k] * z * (1.0 - c * c);
                    dh_prev[k] = dh[k] * (1.0 - z);
                }
                outer_add(&mut grad[l.wz..l.uz], &daz, &cache.x);
                outer_add(&mut grad[l.uz..l.bz], &daz, &cache.h_prev);
                outer_add(&mut grad[l.wc..l.uc], &dac, &cache.x);
                outer_add(&mut grad[l.uc..l.bc], &dac, &cache.h_prev);
                for k in 0..hd {
                    grad[l.bz + k] += daz[k];
                    grad[l.bc + k] += dac[k];
                }
                let mut dx = vec![0.0; hd];
                matvec_t_add(&self.params[l.wz..l.uz], &daz, &mut dx);
                matvec_t_add(&self.params[l.wc..l.uc], &dac, &mut dx);
                matvec_t_add(&self.params[l.uz..l.bz], &daz, &mut dh_prev);
                matvec_t_add(&self.params[l.uc..l.bc], &dac, &mut dh_prev);
                self.input_grad(&seq.interactions[t], &dx, grad);
                dh_next = dh_prev;
            }
            start = end;
        }
        (loss, steps)
    }

    fn input_grad(&self, it: &Interaction, dx: &[f64], grad: &mut [f64]) {
        let (hd, l) = (self.hidden_dim, self.layout);
        let row = l.base + (2 * it.skill_id as usize + usize::from(it.response)) * hd;
        match &self.embeddings {
            None => {
                for k in 0..hd {
                    grad[row + k] += dx[k];
                }
            }
            Some(table) => {
                let w = self.fusion.w;
                for k in 0..hd {
                    grad[row + k] += w * dx[k];
                }
                let d = table.dim;
                let (e, _) = table.get(it.question_id);
                let half = if it.response { 0 } else { d };
                for r in 0..hd {
                    let g = (1.0 - w) * dx[r];
                    if g != 0.0 {
                        let o = l.proj + r * 2 * d + half;
                        for (gp, x) in grad[o..o + d].iter_mut().zip(e) {
                            *gp += g * x;
                        }
                    }
                }
            }
        }
    }

    /// Summed BCE over all predictions of `data` and its gradient, without dropout.
    pub fn loss_and_grad(&self, data: &[StudentSequence], bptt: usize) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; self.layout.len];
        let mut loss = 0.0;
        for s in data {
            loss += self.sequence_grad(s, None, bptt, &mut g).0;
        }
        (loss, g)
    }

    /// Summed BCE over all predictions of `data`.
    pub fn loss(&self, data: &[StudentSequence]) -> f64 {
        let mut total = 0.0;
        for s in data {
            let (preds, _) = self.predict_sequence(s);
            for (p, it) in preds.iter().zip(&s.interactions[1..]) {
                let p = p.clamp(1e-12, 1.0 - 1e-12);
                total -= if it.response { p.ln() } else { (1.0 - p).ln() };
            }
        }
        total
    }

    /// Mean BCE per prediction over `data`.
    pub fn mean_bce(&self, data: &Dataset) -> f64 {
        let n: usize = data.sequences.iter().map(|s| s.len().saturating_sub(1)).sum();
        if n == 0 {
            0.0
        } else {
            self.loss(&data.sequences) / n as f64
        }
    }

    /// Point the fallback readout row at the mean of the trained rows.
    fn refresh_fallback(&mut self) {
        let (hd, l, m) = (self.hidden_dim, self.layout, self.num_questions);
        let count = self.seen.iter().filter(|&&s| s).count();
        if count == 0 {
            return;
        }
        let mut row = vec![0.0; hd];
        let mut bias = 0.0;
        for q in (0..m).filter(|&q| self.seen[q]) {
            for k in 0..hd {
                row[k] += self.params[l.read + q * hd + k];
            }
            bias += self.params[l.read_b + q];
        }
        let c = count as f64;
        for k in 0..hd {
            self.params[l.read + m * hd + k] = row[k] / c;
        }
        self.params[l.read_b + m] = bias / c;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| PredictError::Io { path: path.to_path_buf(), source };
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [self.hidden_dim, self.num_questions, self.num_skills, self.emb_dim()] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.push(u8::from(self.fusion.use_embeddings));
        buf.extend_from_slice(&self.fusion.w.to_le_bytes());
        for &x in &self.params {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.extend(self.seen.iter().map(|&s| u8::from(s)));
        if let Some(t) = &self.embeddings {
            buf.extend_from_slice(&(t.vectors.len() as u32).to_le_bytes());
            for (v, &k) in t.vectors.iter().zip(&t.known) {
                buf.push(u8::from(k));
                for &x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(&buf).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |source| PredictError::Io { path: path.to_path_buf(), source };
        let bad = |reason: &str| PredictError::Format { path: path.to_path_buf(), reason: reason.into() };
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(io)?).read_to_end(&mut bytes).map_err(io)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| bad("truncated"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = || cur_u32(&mut cur).ok_or_else(|| bad("truncated header"));
        let (hd, m, k, d) = (word()? as usize, word()? as usize, word()? as usize, word()? as usize);
        let use_embeddings = cur.take(1).ok_or_else(|| bad("truncated header"))?[0] == 1;
        let w = cur_f64(&mut cur).ok_or_else(|| bad("truncated header"))?;
        let fusion = FusionParams { w, use_embeddings };
        let layout = Layout::new(hd, k, m, d);
        let mut params = Vec::with_capacity(layout.len);
        for _ in 0..layout.len {
            params.push(cur_f64(&mut cur).ok_or_else(|| bad("truncated parameters"))?);
        }
        let seen = cur.take(m).ok_or_else(|| bad("truncated"))?.iter().map(|&b| b == 1).collect();
        let embeddings = if use_embeddings && d > 0 {
            let rows = cur_u32(&mut cur).ok_or_else(|| bad("truncated embeddings"))? as usize;
            let mut vectors = Vec::with_capacity(rows);
            let mut known = Vec::with_capacity(rows);
            for _ in 0..rows {
                known.push(cur.take(1).ok_or_else(|| bad("truncated embeddings"))?[0] == 1);
                let mut v = Vec::with_capacity(d);
                for _ in 0..d {
                    v.push(cur_f64(&mut cur).ok_or_else(|| bad("truncated embeddings"))?);
                }
                vectors.push(v);
            }
            Some(EmbeddingTable::new(vectors, known))
        } else {
            None
        };
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            hidden_dim: hd,
            num_questions: m,
            num_skills: k,
            fusion,
            params,
            embeddings,
            seen,
            layout,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
}

fn cur_u32(c: &mut Cursor) -> Option<u32> {
    c.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

fn cur_f64(c: &mut Cursor) -> Option<f64> {
    c.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean training BCE per prediction of each epoch, with dropout active.
    pub losses: Vec<f64>,
}

pub fn train_predictor(
    train: &Dataset,
    embeddings: Option<EmbeddingTable>,
    fusion: &FusionParams,
    params: &PredictorParams,
) -> Result<TrainOutcome> {
    fusion.validate()?;
    params.validate()?;
    if train.sequences.is_empty() {
        return Err(PredictError::Empty);
    }
    if let (Some(t), true) = (&embeddings, fusion.use_embeddings) {
        if t.vectors.iter().any(|v| v.len() != t.dim) {
            return Err(PredictError::Dimension { got: t.vectors.len(), want: t.dim });
        }
    }
    let mut rng = seed::stage_rng(params.seed, "predict");
    let mut model = Model::new(params.hidden_dim, train.num_questions, train.num_skills, *fusion, embeddings);
    model.init_random(&mut rng);
    // Only questions that are prediction targets in training get their own readout row.
    for s in &train.sequences {
        for it in s.interactions.iter().skip(1) {
            model.seen[it.question_id as usize] = true;
        }
    }

    let mut opt = Adam::new(model.num_params(), params.lr);
    let mut order: Vec<usize> = (0..train.sequences.len()).collect();
    let keep = 1.0 - params.dropout;
    let mut losses = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for chunk in order.chunks(params.batch) {
            let mut grad = vec![0.0; model.num_params()];
            let mut count = 0usize;
            for &si in chunk {
                let seq = &train.sequences[si];
                let masks: Vec<Vec<f64>> = (0..seq.len())
                    .map(|_| {
                        (0..model.hidden_dim)
                            .map(|_| if params.dropout > 0.0 && rng.gen::<f64>() >= keep { 0.0 } else { 1.0 / keep })
                            .collect()
                    })
                    .collect();
                let (loss, n) = model.sequence_grad(seq, Some(&masks), params.bptt, &mut grad);
                if !loss.is_finite() {
                    return Err(PredictError::Diverged { epoch, student: seq.student_id });
                }
                epoch_loss += loss;
                count += n;
            }
            if count == 0 {
                continue;
            }
            epoch_count += count;
            let scale = 1.0 / count as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(PredictError::Diverged { epoch, student: train.sequences[chunk[0]].student_id });
            }
            opt.step(&mut model.params, &grad);
        }
        let mean = if epoch_count > 0 { epoch_loss / epoch_count as f64 } else { 0.0 };
        log::debug!("predictor epoch {epoch}: train bce {mean:.6}");
        losses.push(mean);
    }
    model.refresh_fallback();
    Ok(TrainOutcome { model, losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub auc: Option<f64>,
    pub acc: f64,
    pub n_predictions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc_note: Option<String>,
    #[serde(skip)]
    pub embedding_fallbacks: usize,
}

pub fn evaluate(model: &Model, test: &Dataset) -> Result<Evaluation> {
    if test.sequences.is_empty() {
        return Err(PredictError::Empty);
    }
    let per_student: Vec<(Vec<f64>, Vec<bool>, usize)> = test
        .sequences
        .par_iter()
        .map(|s| {
            let (p, fb) = model.predict_sequence(s);
            let labels = s.interactions.iter().skip(1).map(|i| i.response).collect();
            (p, labels, fb)
        })
        .collect();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut fallbacks = 0;
    for (p, l, fb) in per_student {
        scores.extend(p);
        labels.extend(l);
        fallbacks += fb;
    }
    if fallbacks > 0 {
        log::info!("{fallbacks} inputs used the mean embedding");
    }
    for &s in &scores {
        if !s.is_finite() {
            return Err(PredictError::Diverged { epoch: 0, student: 0 });
        }
    }
    let auc_value = auc(&scores, &labels);
    let auc_note = if auc_value.is_none() {
        Some(if scores.is_empty() { "no predictions".into() } else { "test labels contain a single class".into() })
    } else {
        None
    };
    Ok(Evaluation {
        auc: auc_value,
        acc: accuracy(&scores, &labels),
        n_predictions: scores.len(),
        auc_note,
        embedding_fallbacks: fallbacks,
    })
}

/// Mann-Whitney AUC with midranks for ties. `None` when either class is empty.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of predictions on the right side of 0.5 (scores of exactly 0.5 predict 1).
pub fn accuracy(scores: &[f64], labels: &[bool]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores.iter().zip(labels).filter(|(&s, &l)| (s >= 0.5) == l).count();
    hits as f64 / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(accuracy(&[0.9, 0.1], &[true, false]), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(auc(&[0.2, 0.8, 0.6], &[true, false, true]), Some(0.0));
        assert!((accuracy(&[0.2, 0.8, 0.6], &[true, false, true]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(auc(&[0.3, 0.4], &[true, true]), None);
    }

    fn toy_dataset(students: usize, len: usize, seed_value: u64) -> Dataset {
        let mut rng = seed::rng(seed_value);
        let seqs = (0..students)
            .map(|s| {
                let its = (0..len)
                    .map(|_| {
                        let q = rng.gen_range(0..6u32);
                        Interaction::new(q, q % 3, rng.gen_bool(if q < 3 { 0.8 } else { 0.3 }))
                    })
                    .collect();
                StudentSequence::new(s as u64, its)
            })
            .collect();
        Dataset::new(seqs, 6, 3)
    }

    fn toy_table(dim: usize, rng: &mut impl Rng) -> EmbeddingTable {
        let vectors = (0..6).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        EmbeddingTable::new(vectors, vec![true, true, true, true, true, false])
    }

    #[test]
    fn zero_weights_predict_one_half() {
        let m = Model::new(4, 6, 3, FusionParams::default(), None);
        let d = toy_dataset(1, 5, 1);
        let (p, _) = m.predict_sequence(&d.sequences[0]);
        assert!(p.iter().all(|&y| y == 0.5));
    }

    #[test]
    fn fusion_weight_extremes() {
        let mut rng = seed::rng(5);
        let table = toy_table(3, &mut rng);
        let it = Interaction::new(2, 1, true);
        let mut with = Model::new(4, 6, 3, FusionParams { w: 1.0, use_embeddings: true }, Some(table.clone()));
        with.init_random(&mut rng);
        let mut plain = Model::new(4, 6, 3, FusionParams { w: 1.0, use_embeddings: false }, None);
        let base_len = 2 * 3 * 4;
        plain.params[..base_len].copy_from_slice(&with.params[..base_len]);
        assert_eq!(with.fuse(&it).0, plain.fuse(&it).0);

        with.fusion.w = 0.0;
        assert_eq!(with.fuse(&it).0, with.embedding_path(&table.vectors[2], true));

        let off_a = Model::new(4, 6, 3, FusionParams { w: 0.2, use_embeddings: false }, Some(table.clone()));
        let off_b = Model::new(4, 6, 3, FusionParams { w: 0.9, use_embeddings: false }, Some(table));
        assert_eq!(off_a.fuse(&it).0, off_b.fuse(&it).0);
    }

    #[test]
    fn unknown_question_uses_mean_embedding() {
        let mut rng = seed::rng(6);
        let table = toy_table(3, &mut rng);
        let m = Model::new(4, 6, 3, FusionParams { w: 0.5, use_embeddings: true }, Some(table));
        assert!(m.fuse(&Interaction::new(5, 2, true)).1);
        assert!(m.fuse(&Interaction::new(99, 2, true)).1);
        assert!(!m.fuse(&Interaction::new(1, 1, true)).1);
    }

    fn check_gradient(use_embeddings: bool, point: u64) {
        let mut rng = seed::rng(100 + point);
        let table = toy_table(3, &mut rng);
        let fusion = FusionParams { w: rng.gen_range(0.0..1.0), use_embeddings };
        let mut m = Model::new(4, 6, 3, fusion, Some(table));
        m.seen = vec![true, true, true, true, false, true];
        m.init_random(&mut rng);
        let data = toy_dataset(2, 7, point);
        let (_, full) = m.loss_and_grad(&data.sequences, usize::MAX);
        let h = 1e-4;
        for k in 0..m.num_params() {
            let at = |delta: f64| {
                let mut c = m.clone();
                c.params[k] += delta;
                c.loss(&data.sequences)
            };
            let fd = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
            let err = (full[k] - fd).abs() / full[k].abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-4, "param {k}: {} vs {fd}", full[k]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for point in 0..3 {
            check_gradient(false, point);
            check_gradient(true, point);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let d = toy_dataset(40, 20, 9);
        let pp = PredictorParams { hidden_dim: 8, batch: 8, epochs: 15, lr: 0.01, ..Default::default() };
        let fusion = FusionParams::default();
        let a = train_predictor(&d, None, &fusion, &pp).unwrap();
        let untrained = train_predictor(&d, None, &fusion, &PredictorParams { epochs: 0, ..pp.clone() }).unwrap();
        assert!(a.model.mean_bce(&d) < untrained.model.mean_bce(&d));
        let b = train_predictor(&d, None, &fusion, &pp).unwrap();
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn zero_epochs_is_initialisation() {
        let d = toy_dataset(4, 6, 2);
        let pp = PredictorParams { hidden_dim: 4, epochs: 0, ..Default::default() };
        let out = train_predictor(&d, None, &FusionParams::default(), &pp).unwrap();
        let mut rng = seed::stage_rng(pp.seed, "predict");
        let mut fresh = Model::new(4, 6, 3, FusionParams::default(), None);
        fresh.init_random(&mut rng);
        let l = fresh.layout;
        assert_eq!(out.model.params[..l.read], fresh.params[..l.read]);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn single_class_test_has_no_auc() {
        let seq = StudentSequence::new(0, (0..4).map(|q| Interaction::new(q, 0, true)).collect());
        let d = Dataset::new(vec![seq], 6, 3);
        let m = Model::new(4, 6, 3, FusionParams::default(), None);
        let e = evaluate(&m, &d).unwrap();
        assert_eq!(e.auc, None);
        assert!(e.auc_note.is_some());
        assert_eq!(e.n_predictions, 3);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seed::rng(8);
        let table = toy_table(3, &mut rng);
        let mut m = Model::new(4, 6, 3, FusionParams { w: 0.3, use_embeddings: true }, Some(table));
        m.init_random(&mut rng);
        m.seen[2] = true;
        let path = dir.path().join("model.bin");
        m.save(&path).unwrap();
        assert_eq!(&std::fs::read(&path).unwrap()[..8], b"CRDPMDL1");
        assert_eq!(Model::load(&path).unwrap(), m);
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_count(data in prop::collection::vec((0u8..20, any::<bool>()), 1..300)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 20.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            let a = auc(&scores, &labels);
            let b = brute_auc(&scores, &labels);
            match (a, b) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (None, None) => {}
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn auc_invariant_under_monotone_maps(data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..200)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(auc(&scores, &labels), auc(&mapped, &labels));
        }
    }
}
