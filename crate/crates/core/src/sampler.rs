//! Iterative parallel decoding.
//!
//! Decoding starts from an all-mask grid. Each step runs the model, samples
//! a token at every still-masked position and fixes the highest-scoring
//! ones, where the score is the log-probability of the sampled token plus
//! Gumbel noise whose temperature decays linearly to zero. Everything not
//! fixed is masked again.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::MaskSchedule;
use crate::transformer::{Input, LogitsGrid, Transformer};

/// Anything that scores token grids.
pub trait TokenModel {
    fn codebook_size(&self) -> usize;
    fn grid_len(&self) -> usize;
    fn logits(&self, batch: &[Input<'_>]) -> Result<Vec<LogitsGrid>>;

    fn mask_id(&self) -> usize {
        self.codebook_size()
    }
}

impl TokenModel for Transformer {
    fn codebook_size(&self) -> usize {
        self.config().codebook_size
    }

    fn grid_len(&self) -> usize {
        self.config().grid_len()
    }

    fn logits(&self, batch: &[Input<'_>]) -> Result<Vec<LogitsGrid>> {
        self.forward_batch(batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub schedule: MaskSchedule,
    pub softmax_temp: f32,
    pub gumbel_temp: f32,
    pub cfg_weight: f32,
    pub seed: u64,
    pub snapshot_every: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 8,
            schedule: MaskSchedule::Arccos,
            softmax_temp: 1.0,
            gumbel_temp: 4.5,
            cfg_weight: 3.0,
            seed: 0,
            snapshot_every: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.softmax_temp > 0.0) || !self.softmax_temp.is_finite() {
            return Err(Error::Config(format!("softmax_temp {} must be positive", self.softmax_temp)));
        }
        if !(self.gumbel_temp >= 0.0) || !self.gumbel_temp.is_finite() {
            return Err(Error::Config(format!("gumbel_temp {} must be >= 0", self.gumbel_temp)));
        }
        if !(self.cfg_weight >= 0.0) || !self.cfg_weight.is_finite() {
            return Err(Error::Config(format!("cfg_weight {} must be >= 0", self.cfg_weight)));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::Config("snapshot_every must be positive".into()));
        }
        Ok(())
    }

    /// Model passes per step: conditional and unconditional when guided.
    pub fn forwards_per_step(&self) -> usize {
        if self.cfg_weight > 0.0 {
            2
        } else {
            1
        }
    }
}

/// Tokens newly fixed at each of `steps` steps for `n` positions.
///
/// Positions still masked after step `t` are `round(γ(t/T)·n)`, zero after
/// the last step. Steps that would fix nothing borrow one token from a later
/// step (or, failing that, an earlier one) so every step fixes at least one.
pub fn plan_unmask_counts(schedule: MaskSchedule, steps: usize, n: usize) -> Result<Vec<usize>> {
    if steps == 0 || n == 0 {
        return Err(Error::Config(format!("need at least one step and one position, got T = {steps}, N = {n}")));
    }
    if steps > n {
        return Err(Error::Config(format!("{steps} steps cannot each fix a token among {n} positions")));
    }
    let mut remaining = Vec::with_capacity(steps + 1);
    remaining.push(n);
    for t in 1..steps {
        let r = (schedule.gamma(t as f64 / steps as f64)? * n as f64).round() as usize;
        remaining.push(r.min(n));
    }
    remaining.push(0);
    let mut counts: Vec<usize> = remaining.windows(2).map(|w| w[0].saturating_sub(w[1])).collect();
    for i in 0..steps {
        if counts[i] > 0 {
            continue;
        }
        let donor = (i + 1..steps)
            .find(|&j| counts[j] > 1)
            .or_else(|| (0..i).rev().find(|&j| counts[j] > 1))
            .expect("steps <= n leaves a donor");
        counts[donor] -= 1;
        counts[i] = 1;
    }
    Ok(counts)
}

/// `(1+w)·cond − w·uncond`, evaluated as `cond + w·(cond − uncond)` so it
/// returns `cond` exactly when `w = 0` or the two agree.
pub fn cfg_logits(cond: &[f32], uncond: &[f32], w: f32) -> Result<Vec<f32>> {
    if cond.len() != uncond.len() {
        return Err(Error::Dimension {
            op: "cfg_logits",
            left: vec![cond.len()],
            right: vec![uncond.len()],
        });
    }
    if w == 0.0 {
        return Ok(cond.to_vec());
    }
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| c + w * (c - u)).collect())
}

/// Gumbel temperature after `step` of `steps`: decays linearly from
/// `gumbel_temp` to exactly zero at the last step.
pub fn gumbel_temp_at(gumbel_temp: f32, step: usize, steps: usize) -> f64 {
    if step >= steps {
        return 0.0;
    }
    gumbel_temp as f64 * (1.0 - step as f64 / steps as f64)
}

/// Draws one token from `softmax(row / temp)`; returns it with its
/// probability.
pub fn sample_row<R: Rng + ?Sized>(row: &[f32], temp: f32, rng: &mut R) -> (usize, f32) {
    let t = temp as f64;
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 / t));
    let weights: Vec<f64> = row.iter().map(|&v| (v as f64 / t - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut pick = row.len() - 1;
    for (j, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            pick = j;
            break;
        }
    }
    (pick, (weights[pick] / total) as f32)
}

/// Categorical draw at every position; returns tokens and the probability
/// of each drawn token.
pub fn sample_tokens<R: Rng + ?Sized>(logits: &LogitsGrid, temp: f32, rng: &mut R) -> Result<(Vec<usize>, Vec<f32>)> {
    if !(temp > 0.0) {
        return Err(Error::InvalidParameter(format!("softmax temperature {temp} must be positive")));
    }
    Ok((0..logits.positions).map(|p| sample_row(logits.row(p), temp, rng)).unzip())
}

/// Standard Gumbel draw.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

/// Positions to fix this step: the `n` still-masked, non-frozen positions
/// with the largest `ln(conf) + gumbel_temp_t·G`; ties go to the lower
/// index. Returned in ascending position order.
pub fn confidence_select<R: Rng + ?Sized>(
    conf: &[f32],
    frozen: &[bool],
    still_masked: &[bool],
    n: usize,
    gumbel_temp_t: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if conf.len() != frozen.len() || conf.len() != still_masked.len() {
        return Err(Error::Dimension {
            op: "confidence_select",
            left: vec![conf.len()],
            right: vec![frozen.len(), still_masked.len()],
        });
    }
    if !(gumbel_temp_t >= 0.0) {
        return Err(Error::InvalidParameter(format!("gumbel temperature {gumbel_temp_t} must be >= 0")));
    }
    let candidates: Vec<usize> = (0..conf.len()).filter(|&i| still_masked[i] && !frozen[i]).collect();
    if n > candidates.len() {
        return Err(Error::Contract(format!(
            "asked to fix {n} positions but only {} are masked",
            candidates.len()
        )));
    }
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| {
            let base = (conf[i] as f64).ln();
            let noise = if gumbel_temp_t > 0.0 { gumbel_temp_t * gumbel(rng) } else { 0.0 };
            (base + noise, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = scored[..n].iter().map(|&(_, i)| i).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStep {
    /// 1-based step index.
    pub step: usize,
    /// Positions still masked after this step.
    pub mask: Vec<bool>,
    /// Grid after this step, mask id where masked.
    pub tokens: Vec<usize>,
    /// Probability of the token sampled at each position this step; 1 for
    /// positions that were already fixed or frozen.
    pub confidences: Vec<f32>,
    pub newly_fixed: usize,
    pub remaining_masked: usize,
    pub gumbel_temp_t: f64,
    pub forwards_so_far: usize,
    pub snapshot: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub label: Option<usize>,
    pub initial: Vec<usize>,
    pub frozen: Vec<bool>,
    pub steps: Vec<DecodeStep>,
    pub tokens: Vec<usize>,
    pub forwards: usize,
}

impl DecodeStep {
    /// One JSON-lines record.
    pub fn json(&self) -> String {
        format!(
            "{{\"step\":{},\"remaining_masked\":{},\"newly_fixed\":{},\"gumbel_temp_t\":{},\"forwards_so_far\":{}}}",
            self.step, self.remaining_masked, self.newly_fixed, self.gumbel_temp_t, self.forwards_so_far
        )
    }
}

/// One decode in a lockstep batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeJob {
    pub label: Option<usize>,
    /// Starting grid; entries at frozen positions are kept, others ignored.
    pub tokens: Vec<usize>,
    pub frozen: Vec<bool>,
}

impl DecodeJob {
    pub fn fresh(label: Option<usize>, n: usize, mask_id: usize) -> Self {
        DecodeJob {
            label,
            tokens: vec![mask_id; n],
            frozen: vec![false; n],
        }
    }
}

struct Live {
    tokens: Vec<usize>,
    plan: Vec<usize>,
    trace: DecodeTrace,
    rng: ChaCha8Rng,
}

/// Sequences per model call in lockstep decoding.
const MAX_FORWARD_BATCH: usize = 128;

/// Decodes every job in lockstep, sharing model calls across jobs. Job `i`
/// draws from its own stream seeded with `seed ⊕ i`, so each trace equals a
/// solo decode of that job with seed `seed ⊕ i`.
pub fn decode_jobs<M: TokenModel + ?Sized>(model: &M, jobs: &[DecodeJob], config: &SamplerConfig) -> Result<Vec<DecodeTrace>> {
    config.validate()?;
    let n = model.grid_len();
    let k = model.codebook_size();
    let mask_id = model.mask_id();
    let mut live = Vec::with_capacity(jobs.len());
    for (i, job) in jobs.iter().enumerate() {
        if job.tokens.len() != n || job.frozen.len() != n {
            return Err(Error::Dimension {
                op: "decode",
                left: vec![job.tokens.len(), job.frozen.len()],
                right: vec![n],
            });
        }
        let mut tokens = vec![mask_id; n];
        for p in 0..n {
            if job.frozen[p] {
                if job.tokens[p] >= k {
                    return Err(Error::Contract(format!("frozen position {p} holds no visual token")));
                }
                tokens[p] = job.tokens[p];
            }
        }
        let free = job.frozen.iter().filter(|&&f| !f).count();
        let plan = if free == 0 {
            Vec::new()
        } else {
            plan_unmask_counts(config.schedule, config.steps, free)?
        };
        live.push(Live {
            trace: DecodeTrace {
                label: job.label,
                initial: tokens.clone(),
                frozen: job.frozen.clone(),
                steps: Vec::with_capacity(plan.len()),
                tokens: Vec::new(),
                forwards: 0,
            },
            tokens,
            plan,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ i as u64),
        });
    }

    let guided = config.cfg_weight > 0.0;
    for t in 1..=config.steps {
        let active: Vec<usize> = (0..live.len()).filter(|&i| !live[i].plan.is_empty()).collect();
        if active.is_empty() {
            break;
        }
        let mut inputs = Vec::with_capacity(active.len() * 2);
        for &i in &active {
            inputs.push(Input {
                tokens: &live[i].tokens,
                label: live[i].trace.label,
            });
            if guided {
                inputs.push(Input {
                    tokens: &live[i].tokens,
                    label: None,
                });
            }
        }
        let mut logits = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(MAX_FORWARD_BATCH) {
            logits.extend(model.logits(chunk)?);
        }
        let per = if guided { 2 } else { 1 };
        let gumbel_t = gumbel_temp_at(config.gumbel_temp, t, config.steps);
        for (slot, &i) in active.iter().enumerate() {
            let cond = &logits[slot * per];
            let guided_grid;
            let grid = if guided {
                guided_grid = LogitsGrid {
                    positions: cond.positions,
                    k: cond.k,
                    data: cfg_logits(&cond.data, &logits[slot * per + 1].data, config.cfg_weight)?,
                };
                &guided_grid
            } else {
                cond
            };
            let job = &mut live[i];
            let still_masked: Vec<bool> = job.tokens.iter().map(|&v| v == mask_id).collect();
            let mut sampled = vec![mask_id; n];
            let mut conf = vec![1.0f32; n];
            for p in (0..n).filter(|&p| still_masked[p]) {
                let (tok, c) = sample_row(grid.row(p), config.softmax_temp, &mut job.rng);
                sampled[p] = tok;
                conf[p] = c;
            }
            let count = job.plan[t - 1];
            let chosen = confidence_select(&conf, &job.trace.frozen, &still_masked, count, gumbel_t, &mut job.rng)?;
            for &p in &chosen {
                job.tokens[p] = sampled[p];
            }
            job.trace.forwards += per;
            let mask: Vec<bool> = job.tokens.iter().map(|&v| v == mask_id).collect();
            let remaining = mask.iter().filter(|&&m| m).count();
            let snapshot = t == config.steps || config.snapshot_every.is_some_and(|e| t % e == 0);
            job.trace.steps.push(DecodeStep {
                step: t,
                mask,
                tokens: job.tokens.clone(),
                confidences: conf,
                newly_fixed: chosen.len(),
                remaining_masked: remaining,
                gumbel_temp_t: gumbel_t,
                forwards_so_far: job.trace.forwards,
                snapshot,
            });
        }
    }
    Ok(live
        .into_iter()
        .map(|mut l| {
            l.trace.tokens = l.tokens;
            l.trace
        })
        .collect())
}

/// Generates one grid from scratch.
pub fn decode<M: TokenModel + ?Sized>(model: &M, label: Option<usize>, config: &SamplerConfig) -> Result<DecodeTrace> {
    let job = DecodeJob::fresh(label, model.grid_len(), model.mask_id());
    Ok(decode_jobs(model, &[job], config)?.remove(0))
}

/// Generates `labels.len()` grids; sample `i` uses seed `config.seed ⊕ i`.
pub fn decode_batch<M: TokenModel + ?Sized>(model: &M, labels: &[Option<usize>], config: &SamplerConfig) -> Result<Vec<DecodeTrace>> {
    let jobs: Vec<DecodeJob> = labels
        .iter()
        .map(|&l| DecodeJob::fresh(l, model.grid_len(), model.mask_id()))
        .collect();
    decode_jobs(model, &jobs, config)
}

/// Decodes the non-frozen positions of `partial`, leaving frozen ones
/// untouched.
pub fn inpaint<M: TokenModel + ?Sized>(
    model: &M,
    partial: &[usize],
    frozen: &[bool],
    label: Option<usize>,
    config: &SamplerConfig,
) -> Result<DecodeTrace> {
    let job = DecodeJob {
        label,
        tokens: partial.to_vec(),
        frozen: frozen.to_vec(),
    };
    Ok(decode_jobs(model, &[job], config)?.remove(0))
}

/// Raster-order decoding, one token per model call. Returns the grid and
/// the number of forward passes.
pub fn autoregressive_baseline<M: TokenModel + ?Sized>(
    model: &M,
    label: Option<usize>,
    softmax_temp: f32,
    seed: u64,
) -> Result<(Vec<usize>, usize)> {
    if !(softmax_temp > 0.0) {
        return Err(Error::InvalidParameter(format!("softmax temperature {softmax_temp} must be positive")));
    }
    let n = model.grid_len();
    let mut tokens = vec![model.mask_id(); n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut forwards = 0;
    for p in 0..n {
        let logits = model.logits(&[Input { tokens: &tokens, label }])?.remove(0);
        forwards += 1;
        tokens[p] = sample_row(logits.row(p), softmax_temp, &mut rng).0;
    }
    Ok((tokens, forwards))
}
