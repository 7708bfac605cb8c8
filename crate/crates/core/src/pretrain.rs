//! Question and skill embeddings trained on the question-skill,
//! question-question and skill-skill relation graphs, plus a linear
//! attribute head that regresses each question's difficulty.
//!
//! All trainable parameters live in one flat vector laid out as
//! `Q | S | P | p0 | w | b`, where `P` (d x 2dv) and `p0` project
//! `[q_i; mean skill vector]` to the final problem embedding and
//! `w`, `b` read the attribute off that embedding.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Dataset;
use crate::optim::Adam;
use crate::seed;

const EPS: f64 = 1e-12;
const MAGIC: &[u8; 8] = b"CRDPEMB1";
const NEGATIVE_TRIES: usize = 64;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("lambda must lie in [0, 1], got {0}")]
    Lambda(f64),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("graph has no questions")]
    EmptyGraph,
    #[error("loss diverged at epoch {epoch}, batch {batch}: {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not an embedding file ({reason})")]
    Format { path: PathBuf, reason: String },
}

type Result<T> = std::result::Result<T, PretrainError>;

/// The three relation graphs. The question-question graph is stored as
/// cliques: two questions are related iff they share a group.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraphs {
    pub num_questions: usize,
    pub num_skills: usize,
    /// Sorted skills tagged on each question.
    pub qs: Vec<Vec<u32>>,
    pub qq_groups: Vec<Vec<u32>>,
    /// Groups each question belongs to.
    pub question_groups: Vec<Vec<u32>>,
    /// Sorted neighbours of each skill.
    pub ss: Vec<Vec<u32>>,
}

impl RelationGraphs {
    pub fn qs_edge(&self, q: u32, s: u32) -> bool {
        self.qs[q as usize].binary_search(&s).is_ok()
    }

    pub fn qq_edge(&self, a: u32, b: u32) -> bool {
        if a == b {
            return false;
        }
        let gb = &self.question_groups[b as usize];
        self.question_groups[a as usize].iter().any(|g| gb.contains(g))
    }

    pub fn ss_edge(&self, a: u32, b: u32) -> bool {
        self.ss[a as usize].binary_search(&b).is_ok()
    }

    pub fn qs_edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for (q, skills) in self.qs.iter().enumerate() {
            for &s in skills {
                out.push((q as u32, s));
            }
        }
        out
    }

    /// Copy with some question-skill edges removed. The question-question
    /// groups are kept as they are.
    pub fn without_qs_edges(&self, removed: &[(u32, u32)]) -> Self {
        let mut g = self.clone();
        for &(q, s) in removed {
            g.qs[q as usize].retain(|&x| x != s);
        }
        g
    }
}

fn groups_from_tags(tags: &[Vec<u32>], num_skills: usize) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let mut groups: Vec<Vec<u32>> = vec![Vec::new(); num_skills];
    for (q, skills) in tags.iter().enumerate() {
        for &s in skills {
            groups[s as usize].push(q as u32);
        }
    }
    groups.retain(|g| g.len() >= 2);
    let mut question_groups = vec![Vec::new(); tags.len()];
    for (gi, g) in groups.iter().enumerate() {
        for &q in g {
            question_groups[q as usize].push(gi as u32);
        }
    }
    (groups, question_groups)
}

/// Build the relation graphs from the tags observed in `dataset`.
pub fn build_graphs(dataset: &Dataset) -> RelationGraphs {
    let m = dataset.num_questions;
    let n = dataset.num_skills;
    let mut tags: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); m];
    for it in dataset.interactions() {
        tags[it.question_id as usize].extend(it.skills());
    }
    let qs: Vec<Vec<u32>> = tags.iter().map(|t| t.iter().copied().collect()).collect();
    let (qq_groups, question_groups) = groups_from_tags(&qs, n);

    let mut ss: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    let multi = qs.iter().any(|t| t.len() > 1);
    if multi {
        for t in &qs {
            for &a in t {
                for &b in t {
                    if a != b {
                        ss[a as usize].insert(b);
                    }
                }
            }
        }
    } else {
        for seq in &dataset.sequences {
            let its = &seq.interactions;
            for t in 0..its.len() {
                for u in t + 1..(t + 3).min(its.len()) {
                    let (a, b) = (its[t].skill_id, its[u].skill_id);
                    if a != b {
                        ss[a as usize].insert(b);
                        ss[b as usize].insert(a);
                    }
                }
            }
        }
    }
    RelationGraphs {
        num_questions: m,
        num_skills: n,
        qs,
        qq_groups,
        question_groups,
        ss: ss.into_iter().map(|s| s.into_iter().collect()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainParams {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Questions per minibatch.
    pub batch: usize,
    pub seed: u64,
    pub negative_ratio: usize,
    pub dv: usize,
    pub d: usize,
    /// Sum over every pair of every graph instead of sampling.
    pub full_sum: bool,
}

impl Default for PretrainParams {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            epochs: 50,
            lr: 0.001,
            batch: 256,
            seed: 0,
            negative_ratio: 1,
            dv: 64,
            d: 128,
            full_sum: false,
        }
    }
}

impl PretrainParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(PretrainError::Lambda(self.lambda));
        }
        if self.dv == 0 || self.d == 0 || self.batch == 0 {
            return Err(PretrainError::Params("dv, d and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PretrainError::Params(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dv: usize,
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub params: Vec<f64>,
}

impl EmbeddingSet {
    pub fn zeros(m: usize, n: usize, dv: usize, d: usize) -> Self {
        let len = (m + n) * dv + d * 2 * dv + 2 * d + 1;
        Self { dv, d, m, n, params: vec![0.0; len] }
    }

    pub fn random(m: usize, n: usize, dv: usize, d: usize, rng: &mut impl Rng) -> Self {
        let mut e = Self::zeros(m, n, dv, d);
        let a = 0.1;
        for x in &mut e.params[..(m + n) * dv] {
            *x = rng.gen_range(-a..a);
        }
        let pb = 1.0 / ((2 * dv) as f64).sqrt();
        let off = e.off_p();
        for x in &mut e.params[off..off + d * 2 * dv] {
            *x = rng.gen_range(-pb..pb);
        }
        let wb = 1.0 / (d as f64).sqrt();
        let off = e.off_w();
        for x in &mut e.params[off..off + d] {
            *x = rng.gen_range(-wb..wb);
        }
        e
    }

    fn off_s(&self) -> usize {
        self.m * self.dv
    }
    fn off_p(&self) -> usize {
        (self.m + self.n) * self.dv
    }
    fn off_p0(&self) -> usize {
        self.off_p() + self.d * 2 * self.dv
    }
    fn off_w(&self) -> usize {
        self.off_p0() + self.d
    }
    fn off_b(&self) -> usize {
        self.off_w() + self.d
    }

    pub fn q(&self, i: u32) -> &[f64] {
        let o = i as usize * self.dv;
        &self.params[o..o + self.dv]
    }

    pub fn s(&self, j: u32) -> &[f64] {
        let o = self.off_s() + j as usize * self.dv;
        &self.params[o..o + self.dv]
    }

    /// The attribute head: projection, its bias, readout weights, readout bias.
    pub fn theta(&self) -> &[f64] {
        &self.params[self.off_p()..]
    }

    fn concat_input(&self, i: u32, tags: &[u32]) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 * self.dv);
        x.extend_from_slice(self.q(i));
        let mut mean = vec![0.0; self.dv];
        if !tags.is_empty() {
            for &s in tags {
                for (m, v) in mean.iter_mut().zip(self.s(s)) {
                    *m += v;
                }
            }
            let k = tags.len() as f64;
            mean.iter_mut().for_each(|m| *m /= k);
        }
        x.extend(mean);
        x
    }

    /// Final d-dimensional problem embedding of question `i` given its skill tags.
    pub fn problem_embedding(&self, i: u32, tags: &[u32]) -> Vec<f64> {
        let x = self.concat_input(i, tags);
        let p = &self.params[self.off_p()..self.off_p0()];
        let p0 = &self.params[self.off_p0()..self.off_w()];
        (0..self.d)
            .map(|r| dot(&p[r * 2 * self.dv..(r + 1) * 2 * self.dv], &x) + p0[r])
            .collect()
    }

    pub fn problem_embeddings(&self, graphs: &RelationGraphs) -> Vec<Vec<f64>> {
        (0..self.m as u32).map(|i| self.problem_embedding(i, &graphs.qs[i as usize])).collect()
    }

    pub fn predict_attribute(&self, i: u32, tags: &[u32]) -> f64 {
        let e = self.problem_embedding(i, tags);
        dot(&self.params[self.off_w()..self.off_b()], &e) + self.params[self.off_b()]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| PretrainError::Io { path: path.to_path_buf(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let mut buf = Vec::with_capacity(24 + self.params.len() * 4);
        buf.extend_from_slice(MAGIC);
        for v in [self.dv, self.d, self.m, self.n] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &x in &self.params {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |source| PretrainError::Io { path: path.to_path_buf(), source };
        let bad = |reason: &str| PretrainError::Format { path: path.to_path_buf(), reason: reason.into() };
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(io)?).read_to_end(&mut bytes).map_err(io)?;
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize;
        let mut e = Self::zeros(word(2), word(3), word(0), word(1));
        if bytes.len() != 24 + 4 * e.params.len() {
            return Err(bad("length does not match header"));
        }
        for (x, c) in e.params.iter_mut().zip(bytes[24..].chunks_exact(4)) {
            *x = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        }
        Ok(e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn bce(p: f64, r: bool) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    if r {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Binary cross-entropy of `logistic(u . w)` against `r`.
pub fn pair_loss(u: &[f64], w: &[f64], r: bool) -> f64 {
    assert_eq!(u.len(), w.len(), "pair_loss: dimension mismatch");
    bce(sigmoid(dot(u, w)), r)
}

/// Squared error of the attribute head's prediction for question `i`.
pub fn attr_loss(emb: &EmbeddingSet, i: u32, tags: &[u32], a: f64) -> f64 {
    let d = a - emb.predict_attribute(i, tags);
    d * d
}

/// Terms of one minibatch: labelled pairs per graph and the questions
/// whose attribute is regressed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub qs: Vec<(u32, u32, bool)>,
    pub qq: Vec<(u32, u32, bool)>,
    pub ss: Vec<(u32, u32, bool)>,
    pub attr: Vec<u32>,
}

impl Batch {
    /// Every pair of every graph and every question.
    pub fn full(graphs: &RelationGraphs) -> Self {
        let (m, n) = (graphs.num_questions as u32, graphs.num_skills as u32);
        let mut b = Batch::default();
        for i in 0..m {
            for j in 0..n {
                b.qs.push((i, j, graphs.qs_edge(i, j)));
            }
            for j in i + 1..m {
                b.qq.push((i, j, graphs.qq_edge(i, j)));
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                b.ss.push((i, j, graphs.ss_edge(i, j)));
            }
        }
        b.attr = (0..m).collect();
        b
    }

    /// Positives around the given questions, each followed by
    /// `negative_ratio` sampled non-edges.
    pub fn sample(graphs: &RelationGraphs, questions: &[u32], negative_ratio: usize, rng: &mut impl Rng) -> Self {
        let (m, n) = (graphs.num_questions as u32, graphs.num_skills as u32);
        let mut b = Batch::default();
        for &i in questions {
            for &j in &graphs.qs[i as usize] {
                b.qs.push((i, j, true));
                for _ in 0..negative_ratio {
                    if let Some(k) = draw_negative(n, rng, |k| !graphs.qs_edge(i, k)) {
                        b.qs.push((i, k, false));
                    }
                }
                let neighbours = &graphs.ss[j as usize];
                if !neighbours.is_empty() {
                    let k = neighbours[rng.gen_range(0..neighbours.len())];
                    b.ss.push((j, k, true));
                    for _ in 0..negative_ratio {
                        if let Some(k) = draw_negative(n, rng, |k| k != j && !graphs.ss_edge(j, k)) {
                            b.ss.push((j, k, false));
                        }
                    }
                }
            }
            let groups = &graphs.question_groups[i as usize];
            if !groups.is_empty() {
                let g = &graphs.qq_groups[groups[rng.gen_range(0..groups.len())] as usize];
                let k = loop {
                    let k = g[rng.gen_range(0..g.len())];
                    if k != i {
                        break k;
                    }
                };
                b.qq.push((i, k, true));
                for _ in 0..negative_ratio {
                    if let Some(k) = draw_negative(m, rng, |k| k != i && !graphs.qq_edge(i, k)) {
                        b.qq.push((i, k, false));
                    }
                }
            }
            b.attr.push(i);
        }
        b
    }
}

fn draw_negative(range: u32, rng: &mut impl Rng, ok: impl Fn(u32) -> bool) -> Option<u32> {
    (0..NEGATIVE_TRIES).map(|_| rng.gen_range(0..range)).find(|&k| ok(k))
}

/// The four component sums of a batch: question-skill, question-question,
/// skill-skill and attribute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
}

impl LossParts {
    pub fn joint(&self, lambda: f64) -> f64 {
        lambda * (self.l1 + self.l2 + self.l3) + (1.0 - lambda) * self.l4
    }
}

pub fn loss_parts(emb: &EmbeddingSet, graphs: &RelationGraphs, batch: &Batch, attributes: &[f64]) -> LossParts {
    let sum = |pairs: &[(u32, u32, bool)], a_question: bool, b_question: bool| -> f64 {
        let pick = |question: bool, i: u32| if question { emb.q(i) } else { emb.s(i) };
        pairs.iter().map(|&(i, j, r)| pair_loss(pick(a_question, i), pick(b_question, j), r)).sum()
    };
    LossParts {
        l1: sum(&batch.qs, true, false),
        l2: sum(&batch.qq, true, true),
        l3: sum(&batch.ss, false, false),
        l4: batch
            .attr
            .iter()
            .map(|&i| attr_loss(emb, i, &graphs.qs[i as usize], attributes[i as usize]))
            .sum(),
    }
}

/// `lambda (L1 + L2 + L3) + (1 - lambda) L4` over the batch.
pub fn joint_loss(emb: &EmbeddingSet, graphs: &RelationGraphs, batch: &Batch, attributes: &[f64], lambda: f64) -> f64 {
    loss_parts(emb, graphs, batch, attributes).joint(lambda)
}

/// Joint loss and its gradient with respect to `emb.params`.
pub fn joint_loss_grad(
    emb: &EmbeddingSet,
    graphs: &RelationGraphs,
    batch: &Batch,
    attributes: &[f64],
    lambda: f64,
) -> (f64, Vec<f64>) {
    let dv = emb.dv;
    let mut g = vec![0.0; emb.params.len()];
    let q_off = |i: u32| i as usize * dv;
    let s_off = |j: u32| emb.off_s() + j as usize * dv;
    let mut pair_terms = |pairs: &[(u32, u32, bool)], oa: &dyn Fn(u32) -> usize, ob: &dyn Fn(u32) -> usize| -> f64 {
        let mut total = 0.0;
        for &(i, j, r) in pairs {
            let (a, b) = (oa(i), ob(j));
            let z = dot(&emb.params[a..a + dv], &emb.params[b..b + dv]);
            let p = sigmoid(z);
            total += bce(p, r);
            let dz = lambda * (p - if r { 1.0 } else { 0.0 });
            for k in 0..dv {
                let (u, w) = (emb.params[a + k], emb.params[b + k]);
                g[a + k] += dz * w;
                g[b + k] += dz * u;
            }
        }
        total
    };
    let l1 = pair_terms(&batch.qs, &q_off, &s_off);
    let l2 = pair_terms(&batch.qq, &q_off, &q_off);
    let l3 = pair_terms(&batch.ss, &s_off, &s_off);

    let (d, off_p, off_p0, off_w, off_b) = (emb.d, emb.off_p(), emb.off_p0(), emb.off_w(), emb.off_b());
    let mut l4 = 0.0;
    for &i in &batch.attr {
        let tags = &graphs.qs[i as usize];
        let x = emb.concat_input(i, tags);
        let e = emb.problem_embedding(i, tags);
        let a_hat = dot(&emb.params[off_w..off_b], &e) + emb.params[off_b];
        let diff = attributes[i as usize] - a_hat;
        l4 += diff * diff;
        let da = -2.0 * diff * (1.0 - lambda);
        g[off_b] += da;
        let mut dx = vec![0.0; 2 * dv];
        for r in 0..d {
            g[off_w + r] += da * e[r];
            let de = da * emb.params[off_w + r];
            g[off_p0 + r] += de;
            let row = off_p + r * 2 * dv;
            for c in 0..2 * dv {
                g[row + c] += de * x[c];
                dx[c] += de * emb.params[row + c];
            }
        }
        for k in 0..dv {
            g[q_off(i) + k] += dx[k];
        }
        if !tags.is_empty() {
            let kf = tags.len() as f64;
            for &s in tags {
                for k in 0..dv {
                    g[s_off(s) + k] += dx[dv + k] / kf;
                }
            }
        }
    }
    let loss = LossParts { l1, l2, l3, l4 }.joint(lambda);
    (loss, g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub embeddings: EmbeddingSet,
    /// Summed joint loss of each epoch's batches, evaluated before each update.
    pub losses: Vec<f64>,
}

/// Train embeddings on `graphs` with per-question attributes `attributes`.
pub fn train_embeddings(graphs: &RelationGraphs, attributes: &[f64], params: &PretrainParams) -> Result<PretrainOutcome> {
    params.validate()?;
    if graphs.num_questions == 0 {
        return Err(PretrainError::EmptyGraph);
    }
    if attributes.len() != graphs.num_questions {
        return Err(PretrainError::Params(format!(
            "{} attributes for {} questions",
            attributes.len(),
            graphs.num_questions
        )));
    }
    let mut rng = seed::stage_rng(params.seed, "pretrain");
    let mut emb = EmbeddingSet::random(graphs.num_questions, graphs.num_skills, params.dv, params.d, &mut rng);
    let mut opt = Adam::new(emb.params.len(), params.lr);
    let mut order: Vec<u32> = (0..graphs.num_questions as u32).collect();
    let full = params.full_sum.then(|| Batch::full(graphs));
    let mut losses = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        let mut epoch_loss = 0.0;
        let batches: Vec<Batch> = match &full {
            Some(b) => vec![b.clone()],
            None => {
                order.shuffle(&mut rng);
                order
                    .chunks(params.batch)
                    .map(|qs| Batch::sample(graphs, qs, params.negative_ratio, &mut rng))
                    .collect()
            }
        };
        for (bi, batch) in batches.iter().enumerate() {
            let (loss, grad) = joint_loss_grad(&emb, graphs, batch, attributes, params.lambda);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(PretrainError::Diverged { epoch, batch: bi, loss });
            }
            epoch_loss += loss;
            opt.step(&mut emb.params, &grad);
        }
        log::debug!("pretrain epoch {epoch}: loss {epoch_loss:.6}");
        losses.push(epoch_loss);
    }
    if !emb.is_finite() {
        return Err(PretrainError::Diverged { epoch: params.epochs, batch: 0, loss: f64::NAN });
    }
    Ok(PretrainOutcome { embeddings: emb, losses })
}

pub fn write_loss_csv(losses: &[f64], path: &Path) -> Result<()> {
    let io = |source| PretrainError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "epoch,loss").map_err(io)?;
    for (e, l) in losses.iter().enumerate() {
        writeln!(w, "{e},{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// AUC of `logistic(q_i . s_j)` separating `positives` from `negatives`.
pub fn link_auc(emb: &EmbeddingSet, positives: &[(u32, u32)], negatives: &[(u32, u32)]) -> Option<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (pairs, label) in [(positives, true), (negatives, false)] {
        for &(i, j) in pairs {
            scores.push(dot(emb.q(i), emb.s(j)));
            labels.push(label);
        }
    }
    crate::predict::auc(&scores, &labels)
}
