//! Joint optimization of guidance extraction and the denoiser, ablation
//! variants, checkpoints, and training logs.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dam::{denoise, recon_loss, ssm_loss, LossParts};
use crate::datapipe::{make_training_samples, Dataset, SequenceSample};
use crate::diffusion::{euclidean_forward, grw_forward_with_noise, NoiseSchedule, NoiseScale, ScheduleSpec};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::exec::Execution;
use crate::gem::{build_guidance, gem_loss, select_guidance, GemKind};
use crate::inference::{Recommender, RetrievalMode, ServeConfig};
use crate::model::{ModelConfig, ModelParams, ParamKey};
use crate::numerics::{dot, Gradients, Tape, Tensor};
use crate::rng::{gaussian_vec, stream, Rng};

/// Samples per gradient chunk. Chunks are the unit of parallel work and are
/// folded in order, so results do not depend on the thread count.
const CHUNK: usize = 8;

/// Loss above which training is considered diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dim: usize,
    pub batch_size: usize,
    pub interests: usize,
    pub lr: f64,
    pub negatives: usize,
    pub schedule: ScheduleSpec,
    /// Weight of the reconstruction loss.
    pub lambda: f64,
    /// Weight of the denoiser's sampled-softmax loss.
    pub mu: f64,
    pub max_len: usize,
    pub use_gem_loss: bool,
    pub use_recon_loss: bool,
    pub use_ssm_loss: bool,
    pub use_grw: bool,
    pub gem: GemKind,
    pub retrieval: RetrievalMode,
    pub noise_scale: NoiseScale,
    pub seed: u64,
    pub epochs: usize,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    pub clip_norm: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            batch_size: 256,
            interests: 4,
            lr: 0.005,
            negatives: 10,
            schedule: ScheduleSpec::default(),
            lambda: 0.1,
            mu: 1.0,
            max_len: 50,
            use_gem_loss: true,
            use_recon_loss: true,
            use_ssm_loss: true,
            use_grw: true,
            gem: GemKind::SelfAttentive,
            retrieval: RetrievalMode::Diffusion,
            noise_scale: NoiseScale::Stddev,
            seed: 0,
            epochs: 10,
            patience: 5,
            clip_norm: 5.0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.negatives == 0 || self.epochs == 0 {
            return bad("batch_size, negatives and epochs must be positive");
        }
        if !(0.0..).contains(&self.lr) || !self.lr.is_finite() {
            return bad("lr must be a finite non-negative number");
        }
        if !(self.lambda >= 0.0 && self.mu >= 0.0) {
            return bad("lambda and mu must be non-negative");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        self.model_config(1).validate()?;
        self.schedule.build().map(|_| ())
    }

    pub fn model_config(&self, item_count: usize) -> ModelConfig {
        ModelConfig {
            item_count,
            dim: self.dim,
            interests: self.interests,
            max_len: self.max_len,
            gem: self.gem,
        }
    }

    pub fn serve_config(&self) -> ServeConfig {
        ServeConfig {
            steps: self.schedule.steps,
            noise_scale: self.noise_scale,
            spherical: self.use_grw,
            mode: self.retrieval,
        }
    }

    fn gem_on(&self) -> bool {
        self.use_gem_loss
    }

    fn recon_on(&self) -> bool {
        self.use_recon_loss && self.lambda > 0.0
    }

    fn ssm_on(&self) -> bool {
        self.use_ssm_loss && self.mu > 0.0
    }
}

/// Ablation presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Without the guidance loss.
    V1,
    /// Without the guidance and reconstruction losses.
    V2,
    /// Without the guidance and reconstruction losses and without GRW.
    V3,
    /// Without the guidance loss and the denoiser's sampled softmax.
    V4,
}

impl Variant {
    /// `(use_gem_loss, use_recon_loss, use_ssm_loss, use_grw)`.
    pub fn flags(self) -> (bool, bool, bool, bool) {
        match self {
            Variant::Full => (true, true, true, true),
            Variant::V1 => (false, true, true, true),
            Variant::V2 => (false, false, true, true),
            Variant::V3 => (false, false, true, false),
            Variant::V4 => (false, true, false, true),
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        let (g, r, s, w) = self.flags();
        cfg.use_gem_loss = g;
        cfg.use_recon_loss = r;
        cfg.use_ssm_loss = s;
        cfg.use_grw = w;
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "v1" => Ok(Self::V1),
            "v2" => Ok(Self::V2),
            "v3" => Ok(Self::V3),
            "v4" => Ok(Self::V4),
            other => Err(Error::Config(format!("unknown variant `{other}` (full, v1..v4)"))),
        }
    }
}

/// The random part of one training instance: step and Gaussian draw.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleNoise {
    pub t: usize,
    pub eps: Vec<f64>,
}

impl SampleNoise {
    /// `t ~ Uniform{1..T}` and a standard Gaussian `eps`.
    pub fn draw(rng: &mut Rng, steps: usize, dim: usize) -> Self {
        let t = rng.random_range(1..=steps);
        Self {
            t,
            eps: gaussian_vec(rng, dim),
        }
    }
}

/// Noised target for a sample. The state is computed from current parameter
/// values and enters the objective as data (no gradient flows through it).
pub fn noised_state(
    params: &ModelParams,
    target: usize,
    noise: &SampleNoise,
    schedule: &NoiseSchedule,
    use_grw: bool,
) -> Result<Vec<f64>> {
    let e = params.item_embedding.row(target);
    if use_grw {
        Ok(grw_forward_with_noise(e, noise.t, schedule, &noise.eps)?.x_t)
    } else {
        euclidean_forward(e, noise.t, schedule, &noise.eps)
    }
}

/// Value-level outcome of one sample's objective.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutcome {
    pub parts: LossParts,
    pub total: f64,
    /// `|‖x0 − x̂0‖² − (2 − 2 x0·x̂0)|`.
    pub identity_gap: f64,
}

/// Builds the objective for one sample on `tape` and returns the scalar loss
/// (`None` when every loss is disabled) with its value breakdown.
pub fn sample_objective<'a>(
    tape: &mut Tape<'a>,
    params: &'a ModelParams,
    trainable: bool,
    sample: &SequenceSample,
    x_t: &[f64],
    t: usize,
    cfg: &TrainConfig,
) -> Result<(Option<crate::numerics::Var>, SampleOutcome)> {
    let vars = params.register(tape, trainable);
    let table = vars.item_embedding;
    let guidance = build_guidance(tape, params, table, vars.positional, &vars.gem, &sample.history)?;
    let mut ids = Vec::with_capacity(1 + sample.negatives.len());
    ids.push(sample.target);
    ids.extend_from_slice(&sample.negatives);
    let candidates = tape.gather(table, &ids)?;
    let e_a = tape.row(table, sample.target)?;

    let mut parts = LossParts::default();
    let mut terms = Vec::new();
    if cfg.gem_on() {
        let k = select_guidance(tape.value(guidance.g), tape.value(e_a).data());
        let g_u = tape.row(guidance.g, k)?;
        let l = gem_loss(tape, g_u, candidates)?;
        parts.gem = tape.value(l).item();
        terms.push((l, 1.0));
    }

    let x0 = if cfg.use_grw { tape.l2_normalize(e_a)? } else { e_a };
    let xv = tape.constant(Tensor::vector(x_t.to_vec()));
    let den = denoise(tape, xv, t, guidance.g, &vars.dam, cfg.use_grw)?;
    let (x0v, xhv) = (tape.value(x0).data(), tape.value(den.x0_hat).data());
    let sq: f64 = x0v.iter().zip(xhv).map(|(a, b)| (a - b) * (a - b)).sum();
    let identity_gap = (sq - (2.0 - 2.0 * dot(x0v, xhv))).abs();

    if cfg.recon_on() {
        let l = recon_loss(tape, den.x0_hat, x0)?;
        parts.recon = tape.value(l).item();
        terms.push((l, cfg.lambda));
    }
    if cfg.ssm_on() {
        let l = ssm_loss(tape, den.x0_hat, candidates)?;
        parts.ssm = tape.value(l).item();
        terms.push((l, cfg.mu));
    }

    let mut loss = None;
    for (term, coef) in terms {
        let scaled = if coef == 1.0 { term } else { tape.scale(term, coef) };
        loss = Some(match loss {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    let total = loss.map_or(0.0, |l| tape.value(l).item());
    Ok((
        loss,
        SampleOutcome {
            parts,
            total,
            identity_gap,
        },
    ))
}

/// Loss value of one sample with `x_t` held fixed.
pub fn sample_loss(params: &ModelParams, sample: &SequenceSample, x_t: &[f64], t: usize, cfg: &TrainConfig) -> Result<SampleOutcome> {
    let mut tape = Tape::new();
    Ok(sample_objective(&mut tape, params, false, sample, x_t, t, cfg)?.1)
}

/// Loss and parameter gradients of one sample with `x_t` held fixed.
pub fn sample_gradients(
    params: &ModelParams,
    sample: &SequenceSample,
    x_t: &[f64],
    t: usize,
    cfg: &TrainConfig,
) -> Result<(SampleOutcome, Option<Gradients>)> {
    let mut tape = Tape::new();
    let (loss, outcome) = sample_objective(&mut tape, params, true, sample, x_t, t, cfg)?;
    if !outcome.total.is_finite() {
        return Err(Error::NonFinite("sample loss"));
    }
    let grads = match loss {
        Some(l) => Some(tape.backward(l)?),
        None => None,
    };
    Ok((outcome, grads))
}

/// Dense per-parameter buffers in `ParamKey` order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer(pub Vec<Vec<f64>>);

impl GradBuffer {
    pub fn zeros(params: &ModelParams) -> Self {
        Self(ParamKey::ALL.iter().map(|k| vec![0.0; params.get(*k).len()]).collect())
    }

    pub fn add(&mut self, grads: &Gradients, scale: f64) {
        for (key, g) in grads.iter() {
            g.accumulate_into(&mut self.0[key], scale);
        }
    }

    pub fn add_buffer(&mut self, other: &GradBuffer) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= c);
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: GradBuffer,
    v: GradBuffer,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: GradBuffer::zeros(params),
            v: GradBuffer::zeros(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &GradBuffer) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for key in ParamKey::ALL {
            let i = key.index();
            let p = params.get_mut(key).data_mut();
            let (m, v, g) = (&mut self.m.0[i], &mut self.v.0[i], &grads.0[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Batch-averaged losses and update diagnostics of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub gem: f64,
    pub recon: f64,
    pub ssm: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    /// Largest `|L_recon − (2 − 2cos)|` over the batch.
    pub identity_gap: f64,
}

/// Noise for sample `index` of optimizer step `step`.
pub fn step_noise(cfg: &TrainConfig, step: u64, index: usize) -> SampleNoise {
    let mut rng = stream(cfg.seed, &[0x7a1, step, index as u64]);
    SampleNoise::draw(&mut rng, cfg.schedule.steps, cfg.dim)
}

/// One optimizer step over `batch`: per-sample objectives, averaged
/// gradients, global-norm clipping and an Adam update.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut Adam,
    batch: &[SequenceSample],
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let step = adam.steps() + 1;
    let chunks: Vec<&[SequenceSample]> = batch.chunks(CHUNK).collect();
    let frozen: &ModelParams = params;
    let results = cfg.execution.map(chunks.len(), |c| -> Result<(GradBuffer, Vec<SampleOutcome>, bool)> {
        let mut buf = GradBuffer::zeros(frozen);
        let mut outcomes = Vec::with_capacity(CHUNK);
        let mut any = false;
        for (j, sample) in chunks[c].iter().enumerate() {
            let noise = step_noise(cfg, step, c * CHUNK + j);
            let x_t = noised_state(frozen, sample.target, &noise, schedule, cfg.use_grw)?;
            let (outcome, grads) = match sample_gradients(frozen, sample, &x_t, noise.t, cfg) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => {
                    let o = sample_loss(frozen, sample, &x_t, noise.t, cfg).ok();
                    return Err(Error::Diverged {
                        step: step as usize,
                        detail: format!("non-finite loss for user {}: {:?}", sample.user, o.map(|o| o.parts)),
                    });
                }
                Err(e) => return Err(e),
            };
            if let Some(g) = grads {
                buf.add(&g, 1.0);
                any = true;
            }
            outcomes.push(outcome);
        }
        Ok((buf, outcomes, any))
    });

    let mut total = GradBuffer::zeros(params);
    let mut sums = LossParts::default();
    let (mut loss_sum, mut gap, mut any) = (0.0, 0.0f64, false);
    for r in results {
        let (buf, outcomes, a) = r?;
        total.add_buffer(&buf);
        any |= a;
        for o in outcomes {
            sums.gem += o.parts.gem;
            sums.recon += o.parts.recon;
            sums.ssm += o.parts.ssm;
            loss_sum += o.total;
            gap = gap.max(o.identity_gap);
        }
    }
    let n = batch.len() as f64;
    let mean_total = loss_sum / n;
    if !mean_total.is_finite() || mean_total > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            step: step as usize,
            detail: format!(
                "loss {mean_total} (gem {}, recon {}, ssm {})",
                sums.gem / n,
                sums.recon / n,
                sums.ssm / n
            ),
        });
    }
    total.scale(1.0 / n);
    let grad_norm = total.norm();
    let clipped = grad_norm > cfg.clip_norm;
    if clipped {
        log::debug!("step {step}: clipping gradient norm {grad_norm:.3} to {}", cfg.clip_norm);
        total.scale(cfg.clip_norm / grad_norm);
    }
    if any {
        adam.update(params, &total);
    } else {
        adam.step += 1;
    }
    Ok(StepReport {
        step,
        gem: sums.gem / n,
        recon: sums.recon / n,
        ssm: sums.ssm / n,
        total: mean_total,
        lr: adam.lr,
        grad_norm,
        clipped,
        identity_gap: gap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub gem: f64,
    pub recon: f64,
    pub ssm: f64,
    pub total: f64,
    pub valid_recall_at_20: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters from the best validation round (the last epoch when
    /// validation is unavailable).
    pub params: ModelParams,
    pub epochs: Vec<EpochSummary>,
    pub steps: Vec<StepReport>,
    pub best_epoch: usize,
    pub best_valid_recall: Option<f64>,
    pub stopped_early: bool,
}

/// Trains on the train users of `dataset`, validating Recall@20 after each
/// epoch and stopping after `patience` rounds without improvement. Each
/// step is appended to `log` as a JSON line.
pub fn fit(dataset: &Dataset, cfg: &TrainConfig, mut log: Option<&mut dyn Write>) -> Result<FitResult> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    let mut params = ModelParams::init(cfg.model_config(dataset.item_count()), cfg.seed)?;
    let mut adam = Adam::new(&params, cfg.lr);
    let valid = dataset.valid_cases();
    let serve = cfg.serve_config();

    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let epoch_seed = stream(cfg.seed, &[0xe90c, epoch as u64]).random::<u64>();
        let mut samples = make_training_samples(&dataset.log, &dataset.split, dataset.max_len, cfg.negatives, epoch_seed)?;
        if samples.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        samples.shuffle(&mut stream(cfg.seed, &[0x5f1e, epoch as u64]));
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let batches: Vec<&[SequenceSample]> = samples.chunks(cfg.batch_size).collect();
        for batch in &batches {
            let report = train_step(&mut params, &mut adam, batch, cfg, &schedule)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &report)?;
                writeln!(w).map_err(|e| Error::io(Path::new("<train log>"), e))?;
            }
            sums.0 += report.gem;
            sums.1 += report.recon;
            sums.2 += report.ssm;
            sums.3 += report.total;
            steps.push(report);
        }
        let nb = batches.len() as f64;
        let recall = if valid.is_empty() {
            None
        } else {
            let rec = Recommender::new(&params, &schedule, serve)?;
            let report = evaluate(&rec, &valid, &[20], cfg.seed ^ 0x7a11d, cfg.execution)?;
            Some(report.mean("recall", 20))
        };
        let summary = EpochSummary {
            epoch,
            steps: batches.len(),
            gem: sums.0 / nb,
            recon: sums.1 / nb,
            ssm: sums.2 / nb,
            total: sums.3 / nb,
            valid_recall_at_20: recall,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (gem {:.4}, recon {:.4}, ssm {:.4}) valid recall@20 {:?}",
            summary.total,
            summary.gem,
            summary.recon,
            summary.ssm,
            recall
        );
        epochs.push(summary);
        if let Some(r) = recall {
            if best.as_ref().is_none_or(|b| r > b.0) {
                best = Some((r, epoch, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let (params, best_epoch, best_valid_recall) = match best {
        Some((r, e, p)) => (p, e, Some(r)),
        None => (params, epochs.len() - 1, None),
    };
    Ok(FitResult {
        params,
        epochs,
        steps,
        best_epoch,
        best_valid_recall,
        stopped_early,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    /// Offset into the payload in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub groups: Vec<String>,
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub config: serde_json::Value,
    pub item_vocab_hash: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ModelParams,
    /// Set when the caller's vocabulary hash differs from the stored one.
    pub vocab_mismatch: bool,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// Writes `manifest.json` and `weights.bin` (little-endian f32 in manifest
/// order) into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams,
    schedule: &ScheduleSpec,
    config: serde_json::Value,
    item_vocab_hash: Option<String>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let mut groups: Vec<String> = Vec::new();
    let mut payload = Vec::with_capacity(params.parameter_count() * 4);
    let mut offset = 0;
    for key in ParamKey::ALL {
        let t = params.get(key);
        tensors.push(TensorEntry {
            name: key.name().to_string(),
            group: key.group().to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        if !groups.iter().any(|g| g == key.group()) {
            groups.push(key.group().to_string());
        }
        offset += t.len();
        for v in t.data() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: 1,
        dtype: "f32le".into(),
        tensors,
        groups,
        model: params.config.clone(),
        schedule: schedule.clone(),
        config,
        item_vocab_hash,
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, payload).map_err(|e| Error::io(&wpath, e))?;
    Ok(manifest)
}

/// Loads a checkpoint directory. A vocabulary hash that differs from
/// `expected_vocab_hash` is logged and flagged, not rejected.
pub fn load_checkpoint(dir: &Path, expected_vocab_hash: Option<&str>) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        tensor: MANIFEST_FILE.into(),
        message: e.to_string(),
    })?;
    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let mut params = ModelParams::init(manifest.model.clone(), 0)?;
    for key in ParamKey::ALL {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == key.name())
            .ok_or_else(|| Error::Checkpoint {
                tensor: key.name().into(),
                message: "missing from manifest".into(),
            })?;
        let target = params.get_mut(key);
        if entry.shape != target.shape() {
            return Err(Error::Checkpoint {
                tensor: entry.name.clone(),
                message: format!("shape {:?} does not match model shape {:?}", entry.shape, target.shape()),
            });
        }
        let (start, end) = (entry.offset * 4, (entry.offset + target.len()) * 4);
        if end > bytes.len() {
            return Err(Error::Checkpoint {
                tensor: entry.name.clone(),
                message: format!("payload truncated: need {end} bytes, have {}", bytes.len()),
            });
        }
        for (dst, chunk) in target.data_mut().iter_mut().zip(bytes[start..end].chunks_exact(4)) {
            *dst = f64::from(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")));
        }
    }
    let expected_len = params.parameter_count() * 4;
    if bytes.len() != expected_len {
        return Err(Error::Checkpoint {
            tensor: WEIGHTS_FILE.into(),
            message: format!("payload is {} bytes, manifest describes {expected_len}", bytes.len()),
        });
    }
    let vocab_mismatch = match (expected_vocab_hash, manifest.item_vocab_hash.as_deref()) {
        (Some(want), Some(have)) if want != have => {
            log::warn!("checkpoint item vocabulary {have} differs from dataset vocabulary {want}");
            true
        }
        _ => false,
    };
    Ok(Checkpoint {
        manifest,
        params,
        vocab_mismatch,
    })
}
