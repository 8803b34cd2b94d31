//! Latent diffusion over embedding sequences: cosine schedule, convolutional
//! ε-predictor, masked training, in-painting sampling and a variational
//! forecast score.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::auction::EpisodeRecord;
use crate::error::{Error, Result};
use crate::graph::EpisodeEmbedding;
use crate::numkit::{
    adam_step, AdamConfig, AdamState, Bound, Checkpoint, Conv1d, Linear, ParamStore, Real, Tape, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdmConfig {
    /// Window length in steps.
    pub window: usize,
    /// Diffusion steps.
    pub steps: usize,
    /// Hidden channels; 0 means the latent width.
    pub channels: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub step_embed: usize,
    pub lr: f64,
    pub train_steps: usize,
    pub batch: usize,
    /// In-painting resample loops per reverse step.
    pub resample: usize,
    /// Monte-Carlo draws for the forecast score.
    pub forecast_draws: usize,
}

impl Default for LdmConfig {
    fn default() -> Self {
        Self {
            window: 16,
            steps: 100,
            channels: 0,
            blocks: 4,
            kernel: 5,
            step_embed: 32,
            lr: 1e-3,
            train_steps: 2000,
            batch: 8,
            resample: 1,
            forecast_draws: 8,
        }
    }
}

impl LdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.steps == 0 || self.blocks == 0 || self.resample == 0 {
            return Err(Error::Config("ldm needs window >= 2 and positive steps, blocks and resample".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("ldm kernel must be odd, got {}", self.kernel)));
        }
        if self.step_embed == 0 || !self.step_embed.is_multiple_of(2) {
            return Err(Error::Config("step_embed must be a positive even number".into()));
        }
        Ok(())
    }
}

/// Cosine noise schedule with `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub n: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(n: usize) -> Self {
        let s = 0.008;
        let f = |k: usize| (((k as f64 / n as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mut betas = vec![0.0; n + 1];
        let mut alphas = vec![1.0; n + 1];
        let mut alpha_bars = vec![1.0; n + 1];
        for k in 1..=n {
            let b = (1.0 - f(k) / f(k - 1)).clamp(0.0, 0.999);
            betas[k] = b;
            alphas[k] = 1.0 - b;
            alpha_bars[k] = alpha_bars[k - 1] * (1.0 - b);
        }
        Self { n, betas, alphas, alpha_bars }
    }

    /// Variance of the reverse step into `n-1`; at `n = 1` this is `β_1`.
    pub fn reverse_variance(&self, n: usize) -> f64 {
        if n <= 1 {
            self.betas[1]
        } else {
            self.betas[n] * (1.0 - self.alpha_bars[n - 1]) / (1.0 - self.alpha_bars[n])
        }
    }
}

/// `z_n = √ᾱ_n z0 + √(1−ᾱ_n) ε`.
pub fn q_sample(schedule: &NoiseSchedule, z0: &[f32], n: usize, noise: &[f32]) -> Result<Vec<f32>> {
    if n > schedule.n {
        return Err(Error::Input(format!("diffusion step {n} outside 0..={}", schedule.n)));
    }
    if z0.len() != noise.len() {
        return Err(Error::Input("noise and signal lengths differ".into()));
    }
    let a = schedule.alpha_bars[n].sqrt() as f32;
    let b = (1.0 - schedule.alpha_bars[n]).sqrt() as f32;
    Ok(z0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// One sequence: `[dim × window]` values (channel-major), a per-step mask
/// (`true` = observed) and a condition vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub z: Vec<f32>,
    pub mask: Vec<bool>,
    pub cond: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryBatch {
    pub dim: usize,
    pub window: usize,
    pub items: Vec<Trajectory>,
}

impl TrajectoryBatch {
    /// Build from `[window × dim]` step-major sequences.
    pub fn from_steps(dim: usize, window: usize, seqs: &[(Vec<f32>, Vec<bool>, Vec<f32>)]) -> Result<Self> {
        let mut items = Vec::with_capacity(seqs.len());
        for (x, mask, cond) in seqs {
            if x.len() != dim * window || mask.len() != window {
                return Err(Error::Input(format!("sequence must be {window}x{dim} with a {window}-step mask")));
            }
            items.push(Trajectory { z: to_channel_major(x, dim, window), mask: mask.clone(), cond: cond.clone() });
        }
        Ok(Self { dim, window, items })
    }
}

pub fn to_channel_major(x: &[f32], dim: usize, window: usize) -> Vec<f32> {
    let mut z = vec![0.0; dim * window];
    for t in 0..window {
        for c in 0..dim {
            z[c * window + t] = x[t * dim + c];
        }
    }
    z
}

pub fn to_step_major(z: &[f32], dim: usize, window: usize) -> Vec<f32> {
    let mut x = vec![0.0; dim * window];
    for t in 0..window {
        for c in 0..dim {
            x[t * dim + c] = z[c * window + t];
        }
    }
    x
}

/// Per-dimension affine normalization of latent vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Fit from step-major rows of width `dim`.
    pub fn fit(rows: &[f32], dim: usize) -> Self {
        let n = (rows.len() / dim).max(1) as f64;
        let mut mean = vec![0.0f64; dim];
        let mut sq = vec![0.0f64; dim];
        for r in rows.chunks(dim) {
            for c in 0..dim {
                mean[c] += r[c] as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for r in rows.chunks(dim) {
            for c in 0..dim {
                sq[c] += (r[c] as f64 - mean[c]).powi(2);
            }
        }
        Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: sq.iter().map(|&s| ((s / n).sqrt().max(1e-6)) as f32).collect(),
        }
    }

    pub fn apply(&self, rows: &[f32]) -> Vec<f32> {
        let d = self.mean.len();
        rows.iter().enumerate().map(|(i, &v)| (v - self.mean[i % d]) / self.std[i % d]).collect()
    }

    pub fn invert(&self, rows: &[f32]) -> Vec<f32> {
        let d = self.mean.len();
        rows.iter().enumerate().map(|(i, &v)| v * self.std[i % d] + self.mean[i % d]).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Block {
    conv_a: Conv1d,
    conv_b: Conv1d,
    modulate: Linear,
}

/// Residual 1-D convolution ε-predictor with sinusoidal step embedding and
/// condition-driven scale/shift per block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Denoiser {
    input: Conv1d,
    step_mlp: Linear,
    blocks: Vec<Block>,
    output: Conv1d,
    pub dim: usize,
    pub channels: usize,
    pub cond_dim: usize,
    pub step_embed: usize,
    /// `ᾱ_n` per step. The network output `F` is read as a velocity:
    /// `ε̂ = √(1−ᾱ_n)·z_n + √ᾱ_n·F`.
    pub alpha_bars: Vec<f64>,
}

pub fn step_embedding(n: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut e = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        e.push((n as f64 * freq).sin() as f32);
    }
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        e.push((n as f64 * freq).cos() as f32);
    }
    e
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        dim: usize,
        cond_dim: usize,
        config: &LdmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = if config.channels == 0 { dim } else { config.channels };
        let k = config.kernel;
        let blocks = (0..config.blocks)
            .map(|b| {
                Ok(Block {
                    conv_a: Conv1d::new(store, &format!("ldm.b{b}.a"), c, c, k, rng)?,
                    conv_b: Conv1d::new(store, &format!("ldm.b{b}.b"), c, c, k, rng)?,
                    modulate: Linear::new(store, &format!("ldm.b{b}.mod"), c + cond_dim, 2 * c, rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input: Conv1d::new(store, "ldm.in", dim, c, 1, rng)?,
            step_mlp: Linear::new(store, "ldm.step", config.step_embed, c, rng),
            blocks,
            output: Conv1d::new(store, "ldm.out", c, dim, 1, rng)?,
            dim,
            channels: c,
            cond_dim,
            step_embed: config.step_embed,
            alpha_bars: NoiseSchedule::cosine(config.steps).alpha_bars,
        })
    }

    /// Predicted noise `[dim × T]` for `z: [dim × T]` at step `n`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, z: Var, n: usize, cond: &[f32]) -> Result<Var> {
        let (d, t) = tape.value(z).dims2();
        if d != self.dim || cond.len() != self.cond_dim {
            return Err(Error::Config(format!(
                "denoiser expects {} channels and {} condition inputs, got {d} and {}",
                self.dim,
                self.cond_dim,
                cond.len()
            )));
        }
        let c = self.channels;
        let emb: Vec<f64> = step_embedding(n, self.step_embed).iter().map(|&v| v as f64).collect();
        let e = tape.constant(Tensor::from_f64(&[1, self.step_embed], &emb)?);
        let e = self.step_mlp.forward(tape, p, e)?;
        let e = tape.gelu(e);
        let ec = if self.cond_dim == 0 {
            e
        } else {
            let c64: Vec<f64> = cond.iter().map(|&v| v as f64).collect();
            let cv = tape.constant(Tensor::from_f64(&[1, self.cond_dim], &c64)?);
            tape.concat_cols(&[e, cv])?
        };
        let mut h = self.input.forward(tape, p, z)?;
        for b in &self.blocks {
            let m = b.modulate.forward(tape, p, ec)?;
            let gamma = tape.slice_cols(m, 0, c)?;
            let beta = tape.slice_cols(m, c, c)?;
            let gamma = tape.transpose(gamma);
            let beta = tape.transpose(beta);
            let gamma = tape.expand_col(gamma, t);
            let beta = tape.expand_col(beta, t);
            let a = b.conv_a.forward(tape, p, h)?;
            let at = tape.transpose(a);
            let at = tape.layer_norm(at, 1e-5);
            let a = tape.transpose(at);
            let scaled = tape.mul(a, gamma)?;
            let a = tape.add(a, scaled)?;
            let a = tape.add(a, beta)?;
            let a = tape.gelu(a);
            let a = b.conv_b.forward(tape, p, a)?;
            h = tape.add(h, a)?;
        }
        let f = self.output.forward(tape, p, h)?;
        let ab = self.alpha_bars.get(n).copied().ok_or_else(|| Error::Input(format!("diffusion step {n} outside the schedule")))?;
        let zs = tape.scale(z, (1.0 - ab).sqrt());
        let fs = tape.scale(f, ab.sqrt());
        tape.add(zs, fs)
    }
}

/// Diffusion model with its schedule and latent normalization.
#[derive(Clone, Debug)]
pub struct Ldm {
    pub config: LdmConfig,
    pub schedule: NoiseSchedule,
    pub denoiser: Denoiser,
    pub store: ParamStore<f32>,
    pub norm: Normalizer,
    /// Batches where every position was observed.
    pub empty_mask_warnings: u64,
}

impl Ldm {
    pub fn new(config: &LdmConfig, dim: usize, cond_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let denoiser = Denoiser::new(&mut store, dim, cond_dim, config, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            schedule: NoiseSchedule::cosine(config.steps),
            denoiser,
            store,
            norm: Normalizer::identity(dim),
            empty_mask_warnings: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.denoiser.dim
    }

    /// Normalize a raw step-major window into channel-major model space.
    pub fn encode_window(&self, x: &[f32]) -> Vec<f32> {
        to_channel_major(&self.norm.apply(x), self.dim(), x.len() / self.dim())
    }

    /// Inverse of [`Ldm::encode_window`].
    pub fn decode_window(&self, z: &[f32]) -> Vec<f32> {
        self.norm.invert(&to_step_major(z, self.dim(), z.len() / self.dim()))
    }

    /// Fit the normalizer and build training trajectories from raw windows.
    pub fn prepare(&mut self, raw: &[(Vec<f32>, Vec<f32>)]) -> Vec<Trajectory> {
        let all: Vec<f32> = raw.iter().flat_map(|(x, _)| x.iter().copied()).collect();
        self.norm = Normalizer::fit(&all, self.dim());
        let w = self.config.window;
        raw.iter().map(|(x, c)| Trajectory { z: self.encode_window(x), mask: vec![false; w], cond: c.clone() }).collect()
    }

    /// Masked ε-prediction loss of a batch with given steps and noise.
    pub fn loss_with(
        &self,
        tape: &mut Tape<f32>,
        p: &Bound,
        batch: &TrajectoryBatch,
        steps: &[usize],
        noise: &[Vec<f32>],
    ) -> Result<Option<Var>> {
        let (d, w) = (batch.dim, batch.window);
        let mut total: Option<Var> = None;
        let mut count = 0usize;
        for (i, item) in batch.items.iter().enumerate() {
            let unknown: Vec<f32> = item.mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
            let n_unknown = unknown.iter().filter(|&&u| u > 0.0).count();
            if n_unknown == 0 {
                continue;
            }
            let zn = q_sample(&self.schedule, &item.z, steps[i], &noise[i])?;
            let zv = tape.constant(Tensor::new(&[d, w], zn)?);
            let eps = self.denoiser.forward(tape, p, zv, steps[i], &item.cond)?;
            let target = tape.constant(Tensor::new(&[d, w], noise[i].clone())?);
            let diff = tape.sub(eps, target)?;
            let m: Vec<f32> = (0..d).flat_map(|_| unknown.iter().copied()).collect();
            let mv = tape.constant(Tensor::new(&[d, w], m)?);
            let masked = tape.mul(diff, mv)?;
            let sq = tape.square(masked);
            let s = tape.sum_all(sq);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
            count += n_unknown * d;
        }
        Ok(total.map(|t| tape.scale(t, 1.0 / count as f64)))
    }

    /// Sample steps and noise, then compute the masked loss.
    pub fn loss(&self, tape: &mut Tape<f32>, p: &Bound, batch: &TrajectoryBatch, rng: &mut ChaCha8Rng) -> Result<Option<Var>> {
        let steps: Vec<usize> = batch.items.iter().map(|_| rng.random_range(1..=self.schedule.n)).collect();
        let noise: Vec<Vec<f32>> = batch.items.iter().map(|_| gaussian(rng, batch.dim * batch.window)).collect();
        self.loss_with(tape, p, batch, &steps, &noise)
    }

    /// One optimizer step; returns the loss (0 when nothing is unobserved).
    pub fn train_step(&mut self, batch: &TrajectoryBatch, state: &mut AdamState<f32>, rng: &mut ChaCha8Rng) -> Result<f64> {
        if batch.items.is_empty() {
            return Err(Error::Input("empty trajectory batch".into()));
        }
        let mut tape = Tape::new();
        let p = tape.bind(&self.store);
        let Some(loss) = self.loss(&mut tape, &p, batch, rng)? else {
            self.empty_mask_warnings += 1;
            return Ok(0.0);
        };
        let value = tape.scalar(loss) as f64;
        let grads = tape.backward(loss)?;
        let g = grads.params(&p, &self.store);
        adam_step(&mut self.store, &g, state)?;
        Ok(value)
    }

    /// Train on `pool` with random prefix masks; returns per-step losses.
    pub fn fit(&mut self, pool: &[Trajectory], steps: usize, seed: u64) -> Result<Vec<f64>> {
        if pool.is_empty() {
            return Err(Error::Input("no training sequences".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = AdamState::new(&self.store, AdamConfig::with_lr(self.config.lr));
        self.fit_with(pool, steps, &mut rng, &mut state, true)
    }

    pub fn fit_with(
        &mut self,
        pool: &[Trajectory],
        steps: usize,
        rng: &mut ChaCha8Rng,
        state: &mut AdamState<f32>,
        random_masks: bool,
    ) -> Result<Vec<f64>> {
        let w = self.config.window;
        let d = self.dim();
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut cursor = order.len();
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut items = Vec::with_capacity(self.config.batch);
            while items.len() < self.config.batch.min(pool.len()) {
                if cursor == order.len() {
                    order.shuffle(rng);
                    cursor = 0;
                }
                let mut it = pool[order[cursor]].clone();
                if random_masks {
                    let known = rng.random_range(0..w);
                    it.mask = (0..w).map(|t| t < known).collect();
                }
                items.push(it);
                cursor += 1;
            }
            losses.push(self.train_step(&TrajectoryBatch { dim: d, window: w, items }, state, rng)?);
        }
        Ok(losses)
    }

    /// In-painting sampler: observed steps follow the forward-noised
    /// conditioning values and are copied exactly at the end.
    pub fn sample_inpaint(&self, known: &Trajectory, rng: &mut ChaCha8Rng, resample: usize) -> Result<Vec<f32>> {
        let (d, w) = (self.dim(), self.config.window);
        if known.z.len() != d * w || known.mask.len() != w {
            return Err(Error::Input(format!("conditioning must be {d}x{w}")));
        }
        if known.mask.iter().all(|&m| m) {
            return Ok(known.z.clone());
        }
        let s = &self.schedule;
        let observed = |i: usize| known.mask[i % w];
        let mut tape = Tape::inference();
        let p = tape.bind_frozen(&self.store);
        let base = tape.len();
        let mut z = gaussian(rng, d * w);
        for n in (1..=s.n).rev() {
            for u in 0..resample.max(1) {
                let known_prev = q_sample(s, &known.z, n - 1, &gaussian(rng, d * w))?;
                tape.truncate(base);
                let zv = tape.constant(Tensor::new(&[d, w], z.clone())?);
                let eps = self.denoiser.forward(&mut tape, &p, zv, n, &known.cond)?;
                let eps = tape.value(eps).data().to_vec();
                let coef = s.betas[n] / (1.0 - s.alpha_bars[n]).sqrt();
                let inv = 1.0 / s.alphas[n].sqrt();
                let sigma = if n > 1 { s.reverse_variance(n).sqrt() } else { 0.0 };
                let noise = gaussian(rng, d * w);
                let mut prev = vec![0.0f32; d * w];
                for i in 0..d * w {
                    prev[i] = if observed(i) {
                        known_prev[i]
                    } else {
                        (inv * (z[i] as f64 - coef * eps[i] as f64) + sigma * noise[i] as f64) as f32
                    };
                }
                if u + 1 < resample && n > 1 {
                    let a = s.alphas[n].sqrt() as f32;
                    let b = s.betas[n].sqrt() as f32;
                    let fresh = gaussian(rng, d * w);
                    z = prev.iter().zip(&fresh).map(|(x, e)| a * x + b * e).collect();
                } else {
                    z = prev;
                    break;
                }
            }
        }
        for i in 0..d * w {
            if observed(i) {
                z[i] = known.z[i];
            }
        }
        Ok(z)
    }

    /// Variational lower bound on `log p(future | past)` of the raw
    /// embeddings, in nats per future coordinate, averaged over `draws`
    /// Monte-Carlo draws. `seq` is a normalized channel-major window; steps
    /// `< split` are observed.
    pub fn forecast_loglik(&self, seq: &[f32], cond: &[f32], split: usize, draws: usize, seed: u64) -> Result<f64> {
        let (d, w) = (self.dim(), self.config.window);
        if seq.len() != d * w {
            return Err(Error::Input(format!("forecast window must be {d}x{w}")));
        }
        if split == 0 || split >= w {
            return Err(Error::Input(format!("split {split} must lie in 1..{w}")));
        }
        let s = &self.schedule;
        let future: Vec<usize> = (0..d * w).filter(|i| i % w >= split).collect();
        let dims = future.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::inference();
        let p = tape.bind_frozen(&self.store);
        let base = tape.len();
        let mut total = 0.0;
        for _ in 0..draws.max(1) {
            let ab = s.alpha_bars[s.n];
            let mut bound = 0.0;
            for &i in &future {
                let x = seq[i] as f64;
                bound += 0.5 * (ab * x * x + (1.0 - ab) - 1.0 - (1.0 - ab).ln());
            }
            for n in 1..=s.n {
                let noise = gaussian(&mut rng, d * w);
                let zn = q_sample(s, seq, n, &noise)?;
                tape.truncate(base);
                let zv = tape.constant(Tensor::new(&[d, w], zn.clone())?);
                let eps = self.denoiser.forward(&mut tape, &p, zv, n, cond)?;
                let eps = tape.value(eps).data();
                if n == 1 {
                    let var = s.betas[1];
                    let coef = s.betas[1] / (1.0 - s.alpha_bars[1]).sqrt();
                    let inv = 1.0 / s.alphas[1].sqrt();
                    for &i in &future {
                        let mu = inv * (zn[i] as f64 - coef * eps[i] as f64);
                        let r = seq[i] as f64 - mu;
                        bound += 0.5 * (2.0 * std::f64::consts::PI * var).ln() + r * r / (2.0 * var);
                    }
                } else {
                    let var = s.reverse_variance(n);
                    let k = s.betas[n].powi(2) / (2.0 * var * s.alphas[n] * (1.0 - s.alpha_bars[n]));
                    for &i in &future {
                        let e = noise[i] as f64 - eps[i] as f64;
                        bound += k * e * e;
                    }
                }
            }
            total += -bound / dims;
        }
        // Change of variables back to raw embedding units.
        let jacobian = future.iter().map(|&i| (self.norm.std[i / w] as f64).ln()).sum::<f64>() / dims;
        let total = total - jacobian * draws.max(1) as f64;
        Ok(total / draws.max(1) as f64)
    }

    pub fn write_into(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.set_meta("ldm.config", serde_json::to_string(&self.config)?);
        ckpt.set_meta("ldm.dims", format!("{} {}", self.dim(), self.denoiser.cond_dim));
        ckpt.set_meta("ldm.norm", serde_json::to_string(&self.norm)?);
        self.store.write_into("ldm", ckpt);
        Ok(())
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        let missing = |k: &str| Error::Checkpoint(format!("missing {k}"));
        let cfg: LdmConfig = serde_json::from_str(ckpt.meta("ldm.config").ok_or_else(|| missing("ldm.config"))?)?;
        let dims: Vec<usize> = ckpt
            .meta("ldm.dims")
            .ok_or_else(|| missing("ldm.dims"))?
            .split(' ')
            .map(|v| v.parse().map_err(|e| Error::Checkpoint(format!("ldm.dims: {e}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(Error::Checkpoint("ldm.dims needs 2 fields".into()));
        }
        let mut m = Self::new(&cfg, dims[0], dims[1], 0)?;
        m.norm = serde_json::from_str(ckpt.meta("ldm.norm").ok_or_else(|| missing("ldm.norm"))?)?;
        m.store.load_from("ldm", ckpt)?;
        Ok(m)
    }
}

/// Condition vector `[category one-hot, budget / budget_max]`.
pub fn condition_vector(category: usize, categories: usize, budget: f64, budget_max: f64) -> Vec<f32> {
    let mut c: Vec<f32> = (0..categories).map(|k| if k == category { 1.0 } else { 0.0 }).collect();
    c.push((budget / budget_max) as f32);
    c
}

pub fn condition_dim(categories: usize) -> usize {
    categories + 1
}

/// Condition of an episode's agent, or of the whole population for joint
/// sequences (no category, mean budget).
pub fn episode_condition(episode: &EpisodeRecord, agent: Option<usize>) -> Vec<f32> {
    let cfg = &episode.config;
    match agent {
        Some(i) => condition_vector(episode.profiles[i].category, cfg.categories, episode.profiles[i].budget, cfg.budget_max),
        None => {
            let mean = episode.profiles.iter().map(|p| p.budget).sum::<f64>() / episode.profiles.len().max(1) as f64;
            condition_vector(usize::MAX, cfg.categories, mean, cfg.budget_max)
        }
    }
}

/// Raw step-major sequences for diffusion: one per agent, or the joint
/// sequence when the embedding carries one.
pub fn episode_sequences(emb: &EpisodeEmbedding, episode: &EpisodeRecord) -> Vec<(Vec<f32>, Vec<f32>)> {
    match &emb.joint {
        Some(j) => vec![(j.clone(), episode_condition(episode, None))],
        None => (0..emb.agents).map(|i| (emb.agent_sequence(i), episode_condition(episode, Some(i)))).collect(),
    }
}

/// Sliding windows of length `window` with the given stride.
pub fn windows(seq: &[f32], dim: usize, window: usize, stride: usize) -> Vec<Vec<f32>> {
    let steps = seq.len() / dim;
    if steps < window {
        return Vec::new();
    }
    (0..=steps - window).step_by(stride.max(1)).map(|s| seq[s * dim..(s + window) * dim].to_vec()).collect()
}

/// CSV row of a forecast evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub split: usize,
    pub k: usize,
    pub score: f64,
    pub seed: u64,
}
