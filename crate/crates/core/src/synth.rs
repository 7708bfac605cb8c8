//! Synthetic students with latent mastery and slip/guess noise.
//!
//! Each (student, skill) pair gets a mastery drawn uniformly from [0, 1];
//! each question a latent difficulty. A response is latently correct iff
//! mastery reaches the question's difficulty. Observed responses flip
//! latent 1 to 0 with the slip rate and latent 0 to 1 with the guess rate.
//! Students practise in same-skill blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Dataset, Interaction, StudentSequence};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("datasets differ in shape: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MasteryModel {
    StaticPerSkill,
    /// Mastery grows by 0.01 per practice of the skill, capped at 1.
    Drifting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_students: usize,
    pub n_questions: usize,
    pub n_skills: usize,
    pub seq_len: usize,
    pub slip_rate: f64,
    pub guess_rate: f64,
    pub mastery_model: MasteryModel,
    pub seed: u64,
    /// Mean length of a same-skill practice block.
    pub block_len: usize,
    /// Width of the band of question difficulties around each skill's level.
    pub difficulty_spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_students: 500,
            n_questions: 200,
            n_skills: 10,
            seq_len: 100,
            slip_rate: 0.1,
            guess_rate: 0.1,
            mastery_model: MasteryModel::StaticPerSkill,
            seed: 42,
            block_len: 15,
            difficulty_spread: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let rate = |r: f64| (0.0..=1.0).contains(&r);
        if !rate(self.slip_rate) || !rate(self.guess_rate) {
            return Err(SynthError::Config("rates must lie in [0, 1]".into()));
        }
        if self.n_students == 0 || self.seq_len == 0 || self.n_skills == 0 || self.block_len == 0 {
            return Err(SynthError::Config("counts must be positive".into()));
        }
        if self.n_questions < self.n_skills {
            return Err(SynthError::Config("need at least one question per skill".into()));
        }
        Ok(())
    }
}

/// Ground truth behind a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// Latent response per student and position.
    pub latent: Vec<Vec<bool>>,
    pub question_difficulty: Vec<f64>,
    pub question_skill: Vec<u32>,
}

/// Generate a dataset and its latent responses. Deterministic in `config.seed`.
pub fn generate(config: &SynthConfig) -> (Dataset, SynthTruth) {
    let mut rng = seed::stage_rng(config.seed, "synth");
    let n_skills = config.n_skills.max(1);
    let n_questions = config.n_questions.max(n_skills);
    let question_skill: Vec<u32> = (0..n_questions).map(|q| (q % n_skills) as u32).collect();
    let skill_level: Vec<f64> = (0..n_skills).map(|_| rng.gen::<f64>()).collect();
    let question_difficulty: Vec<f64> = question_skill
        .iter()
        .map(|&k| (skill_level[k as usize] + config.difficulty_spread * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0))
        .collect();
    let mut by_skill: Vec<Vec<u32>> = vec![Vec::new(); n_skills];
    for (q, &k) in question_skill.iter().enumerate() {
        by_skill[k as usize].push(q as u32);
    }

    let mut sequences = Vec::with_capacity(config.n_students);
    let mut latent_all = Vec::with_capacity(config.n_students);
    for student in 0..config.n_students {
        let mut mastery: Vec<f64> = (0..n_skills).map(|_| rng.gen::<f64>()).collect();
        let mut interactions = Vec::with_capacity(config.seq_len);
        let mut latent = Vec::with_capacity(config.seq_len);
        while interactions.len() < config.seq_len {
            let skill = rng.gen_range(0..n_skills);
            let block = rng.gen_range(1..=2 * config.block_len - 1);
            for _ in 0..block.min(config.seq_len - interactions.len()) {
                let pool = &by_skill[skill];
                let q = pool[rng.gen_range(0..pool.len())];
                let truth = mastery[skill] >= question_difficulty[q as usize];
                let noise: f64 = rng.gen();
                let observed = if truth {
                    noise >= config.slip_rate
                } else {
                    noise < config.guess_rate
                };
                interactions.push(Interaction::new(q, skill as u32, observed));
                latent.push(truth);
                if config.mastery_model == MasteryModel::Drifting {
                    mastery[skill] = (mastery[skill] + 0.01).min(1.0);
                }
            }
        }
        sequences.push(StudentSequence::new(student as u64, interactions));
        latent_all.push(latent);
    }
    (
        Dataset::new(sequences, n_questions, n_skills),
        SynthTruth {
            latent: latent_all,
            question_difficulty,
            question_skill,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub total: usize,
    /// Observed responses that differ from the latent response.
    pub injected: usize,
    pub flips: usize,
    /// Flips that undo an injected corruption.
    pub recovered: usize,
    /// Flips at uncorrupted positions.
    pub false_corrections: usize,
    pub agreement_raw: f64,
    pub agreement_opt: f64,
}

impl RecoveryReport {
    pub fn false_rate(&self) -> f64 {
        if self.flips == 0 {
            0.0
        } else {
            self.false_corrections as f64 / self.flips as f64
        }
    }

    pub fn gain(&self) -> f64 {
        self.agreement_opt - self.agreement_raw
    }
}

pub fn score_recovery(observed: &Dataset, optimized: &Dataset, latent: &[Vec<bool>]) -> Result<RecoveryReport, SynthError> {
    if observed.sequences.len() != optimized.sequences.len() || observed.sequences.len() != latent.len() {
        return Err(SynthError::ShapeMismatch("student counts differ".into()));
    }
    let mut r = RecoveryReport {
        total: 0,
        injected: 0,
        flips: 0,
        recovered: 0,
        false_corrections: 0,
        agreement_raw: 0.0,
        agreement_opt: 0.0,
    };
    let (mut agree_raw, mut agree_opt) = (0usize, 0usize);
    for ((obs, opt), lat) in observed.sequences.iter().zip(&optimized.sequences).zip(latent) {
        if obs.len() != opt.len() || obs.len() != lat.len() {
            return Err(SynthError::ShapeMismatch(format!("student {} lengths differ", obs.student_id)));
        }
        for ((a, b), &truth) in obs.interactions.iter().zip(&opt.interactions).zip(lat) {
            let corrupted = a.response != truth;
            let flipped = a.response != b.response;
            r.total += 1;
            r.injected += usize::from(corrupted);
            r.flips += usize::from(flipped);
            r.recovered += usize::from(flipped && corrupted);
            r.false_corrections += usize::from(flipped && !corrupted);
            agree_raw += usize::from(a.response == truth);
            agree_opt += usize::from(b.response == truth);
        }
    }
    if r.total > 0 {
        r.agreement_raw = agree_raw as f64 / r.total as f64;
        r.agreement_opt = agree_opt as f64 / r.total as f64;
    }
    Ok(r)
}
