//! Latent representation learner: an MLP encoder producing a Gaussian
//! posterior over latent vectors, a lattice-parameter head, a denoising
//! score network over fractional coordinates, the training loop combining
//! the three losses, and annealed Langevin-dynamics decoding.

use crate::crystal::{
    canonicalize, featurize, wrap_component, Crystal, CrystalError, FeatureScale, Lattice,
};
use crate::io::fmt_f64;
use crate::nn::{Activation, AdamTrainer, NeuralNet, NnError, ParamGrads};
use crate::oracle::{mix_seed, Composition, DatasetRecord, OracleError};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("crystal composition {got:?} does not match model composition {expected:?}")]
    CompositionMismatch { expected: String, got: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("checkpoint parse error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Crystal(#[from] CrystalError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed-dimension latent encoding of a crystal; the optimization variable.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    values: Vec<f64>,
}

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for LatentVector {
    fn from(values: Vec<f64>) -> Self {
        Self { values }
    }
}

/// Strictly decreasing geometric sequence of noise scales,
/// `sigma[j] / sigma[j+1]` constant and greater than one.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn geometric(sigma_max: f64, sigma_min: f64, levels: usize) -> Result<Self, VaeError> {
        if levels < 2 {
            return Err(VaeError::InvalidSchedule(format!(
                "need at least 2 levels, got {levels}"
            )));
        }
        if !(sigma_min > 0.0 && sigma_max > sigma_min) {
            return Err(VaeError::InvalidSchedule(format!(
                "need sigma_max > sigma_min > 0, got {sigma_max} and {sigma_min}"
            )));
        }
        let (lo, hi) = (sigma_min.ln(), sigma_max.ln());
        let sigmas = (0..levels)
            .map(|j| (hi + (lo - hi) * j as f64 / (levels - 1) as f64).exp())
            .collect();
        Ok(Self { sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn levels(&self) -> usize {
        self.sigmas.len()
    }

    /// Scalar level embedding fed to the score network: 1 at the noisiest
    /// level, 0 at the finest.
    pub fn embed(&self, level: usize) -> f64 {
        let hi = self.sigmas[0].ln();
        let lo = self.sigmas[self.levels() - 1].ln();
        (self.sigmas[level].ln() - lo) / (hi - lo)
    }
}

/// Frequencies (cycles per cell) of the periodic coordinate features fed
/// to the score network. The top frequency bounds the slope the network
/// can express cheaply, which must cover 1/sigma_min.
pub const SCORE_FREQUENCIES: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

/// Input width of the score network: sine/cosine pairs per coordinate and
/// frequency, the latent vector, and the level embedding scalar.
pub fn score_input_dim(n_atoms: usize, d_z: usize) -> usize {
    3 * n_atoms * 2 * SCORE_FREQUENCIES.len() + d_z + 1
}

/// Lattice-parameter window the decoder clamps its head output into.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeBounds {
    pub len_min: f64,
    pub len_max: f64,
    pub angle_min: f64,
    pub angle_max: f64,
}

/// The three-part latent model for one composition: encoder
/// (features -> mean and log-variance), lattice head (z -> six normalized
/// lattice parameters), and score network
/// (noisy coordinates + z + level embedding -> denoising direction).
///
/// Fields are public for inspection and gradient checking; dimension
/// consistency is established by [`train_vae`] and checked on load.
#[derive(Debug, Clone, PartialEq)]
pub struct CdVaeModel {
    pub encoder: NeuralNet,
    pub lattice_head: NeuralNet,
    pub score_net: NeuralNet,
    pub composition: Composition,
    pub scale: FeatureScale,
    pub schedule: NoiseSchedule,
    pub langevin_steps: usize,
    pub eta_base: f64,
    pub final_denoise_steps: usize,
    pub decode_bounds: DecodeBounds,
}

/// Training settings. Desk-scale defaults; the hidden widths and batch
/// size are freely configurable.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub d_z: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub score_hidden: Vec<usize>,
    /// Joint epochs over encoder, lattice head, and score network.
    pub epochs: usize,
    /// Decoder-refinement optimizer steps with the encoder frozen and z
    /// fixed to the posterior mean. The score task needs far more steps
    /// than the others, and a step budget (rather than epochs) keeps the
    /// cost independent of how many records survived de-duplication.
    pub score_steps: usize,
    /// Denoising draws (level + noise) per record per epoch.
    pub dec_draws: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta_kl: f64,
    pub lambda_dec: f64,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub levels: usize,
    pub langevin_steps: usize,
    pub eta_base: f64,
    /// Noise-free score steps appended after the Langevin sweep; each jumps
    /// by `sigma_min * score`, the predicted displacement to the clean point.
    pub final_denoise_steps: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            d_z: 32,
            encoder_hidden: vec![256, 256],
            head_hidden: vec![256],
            score_hidden: vec![256, 256],
            epochs: 400,
            score_steps: 40_000,
            dec_draws: 4,
            batch_size: 16,
            learning_rate: 1e-3,
            beta_kl: 0.01,
            lambda_dec: 1.0,
            sigma_max: 0.35,
            sigma_min: 0.01,
            levels: 10,
            langevin_steps: 50,
            eta_base: 2e-5,
            final_denoise_steps: 5,
            seed: 0,
        }
    }
}

/// Per-epoch mean loss terms, logged by [`train_vae`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeEpochLoss {
    pub lattice: f64,
    pub kl: f64,
    pub denoise: f64,
    pub total: f64,
}

impl CdVaeModel {
    pub fn d_z(&self) -> usize {
        self.lattice_head.input_dim()
    }

    fn check_composition(&self, crystal: &Crystal) -> Result<(), VaeError> {
        if !self.composition.matches(crystal) {
            return Err(VaeError::CompositionMismatch {
                expected: self.composition.id().to_string(),
                got: crystal.composition().to_string(),
            });
        }
        Ok(())
    }

    /// Posterior parameters for a crystal. The mean is the deterministic
    /// encoding used by the surrogate and the optimizer; sampling happens
    /// only inside training. Structures are reduced to the canonical
    /// translation/ordering gauge first, so physically identical crystals
    /// encode identically.
    pub fn encode(&self, crystal: &Crystal) -> Result<(LatentVector, Vec<f64>), VaeError> {
        self.check_composition(crystal)?;
        let features = featurize(&canonicalize(crystal), &self.scale);
        let out = self.encoder.forward(features.values())?;
        let d_z = self.d_z();
        let mu = LatentVector::new(out[..d_z].to_vec());
        let logvar = out[d_z..].to_vec();
        Ok((mu, logvar))
    }

    /// The six normalized lattice parameters targeted by the lattice head.
    fn lattice_targets(&self, crystal: &Crystal) -> [f64; 6] {
        let p = crystal.lattice().params();
        [
            p[0] / self.scale.len_ref,
            p[1] / self.scale.len_ref,
            p[2] / self.scale.len_ref,
            p[3] / 180.0,
            p[4] / 180.0,
            p[5] / 180.0,
        ]
    }

    /// Squared error between the lattice head's output at `z` and the
    /// crystal's normalized lattice parameters (canonical gauge, matching
    /// what the head is trained against).
    pub fn lattice_loss(&self, z: &LatentVector, crystal: &Crystal) -> Result<f64, VaeError> {
        let out = self.lattice_head.forward(z.values())?;
        let target = self.lattice_targets(&canonicalize(crystal));
        Ok(out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum())
    }

    /// Score-network input for noisy coordinates at a schedule level.
    /// Coordinates enter as sine/cosine pairs at a few frequencies so the
    /// network sees the torus topology directly; raw coordinates cannot
    /// express the wrap, and the steep 1/sigma slopes at fine noise levels
    /// come cheaply from the high-frequency features.
    fn score_input(&self, noisy: &[[f64; 3]], z: &[f64], level: usize) -> Vec<f64> {
        let mut input = Vec::with_capacity(score_input_dim(noisy.len(), z.len()));
        for row in noisy {
            for &x in row {
                for f in SCORE_FREQUENCIES {
                    let (s, c) = (std::f64::consts::TAU * f * x).sin_cos();
                    input.push(s);
                    input.push(c);
                }
            }
        }
        input.extend_from_slice(z);
        input.push(self.schedule.embed(level));
        input
    }

    /// Denoising loss for an explicit level and noise draw: perturbs the
    /// coordinates by `sigma * noise`, and scores the squared error of the
    /// network against the scaled minimum-image displacement back to the
    /// clean coordinates. The crystal is taken as given (training data is
    /// already in the canonical gauge).
    pub fn denoise_loss_at(
        &self,
        crystal: &Crystal,
        z: &LatentVector,
        level: usize,
        noise: &[[f64; 3]],
    ) -> Result<f64, VaeError> {
        let (_, _, loss) = self.denoise_parts(crystal, z, level, noise)?;
        Ok(loss)
    }

    fn denoise_parts(
        &self,
        crystal: &Crystal,
        z: &LatentVector,
        level: usize,
        noise: &[[f64; 3]],
    ) -> Result<(Vec<f64>, Vec<f64>, f64), VaeError> {
        let sigma = self.schedule.sigmas()[level];
        let clean = crystal.frac_coords();
        let noisy: Vec<[f64; 3]> = clean
            .iter()
            .zip(noise)
            .map(|(x, e)| {
                [
                    wrap_component(x[0] + sigma * e[0]),
                    wrap_component(x[1] + sigma * e[1]),
                    wrap_component(x[2] + sigma * e[2]),
                ]
            })
            .collect();
        // Per-component minimum-image fractional displacement from the
        // noisy coordinates back to the clean ones, scaled by 1/sigma.
        let mut target = Vec::with_capacity(3 * clean.len());
        for (x, xt) in clean.iter().zip(&noisy) {
            for k in 0..3 {
                let d = x[k] - xt[k];
                target.push((d - d.round()) / sigma);
            }
        }
        let input = self.score_input(&noisy, z.values(), level);
        let out = self.score_net.forward(&input)?;
        let loss = out.iter().zip(&target).map(|(o, t)| (o - t) * (o - t)).sum();
        Ok((input, target, loss))
    }

    /// Denoising loss with a uniformly drawn level and Gaussian noise.
    pub fn denoise_loss(
        &self,
        crystal: &Crystal,
        z: &LatentVector,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, VaeError> {
        self.check_composition(crystal)?;
        let level = rng.random_range(0..self.schedule.levels());
        let noise = sample_noise(crystal.n(), rng);
        self.denoise_loss_at(&canonicalize(crystal), z, level, &noise)
    }

    /// Decodes a latent vector: the lattice comes from the head (clamped
    /// into the decode bounds), the coordinates from annealed Langevin
    /// dynamics over the score network, coarse noise levels first.
    pub fn decode(&self, z: &LatentVector, rng: &mut ChaCha8Rng) -> Result<Crystal, VaeError> {
        let head = self.lattice_head.forward(z.values())?;
        let b = &self.decode_bounds;
        let lens = [
            (head[0] * self.scale.len_ref).clamp(b.len_min, b.len_max),
            (head[1] * self.scale.len_ref).clamp(b.len_min, b.len_max),
            (head[2] * self.scale.len_ref).clamp(b.len_min, b.len_max),
        ];
        let mut angles = [
            (head[3] * 180.0).clamp(b.angle_min, b.angle_max),
            (head[4] * 180.0).clamp(b.angle_min, b.angle_max),
            (head[5] * 180.0).clamp(b.angle_min, b.angle_max),
        ];
        // A clamped angle triple can still be unsatisfiable; pull the
        // angles toward 90 degrees until the cell builds.
        let mut attempts = 0;
        let lattice = loop {
            match Lattice::from_params(lens[0], lens[1], lens[2], angles[0], angles[1], angles[2])
            {
                Ok(l) => break l,
                Err(e) if attempts >= 8 => return Err(e.into()),
                Err(_) => {
                    attempts += 1;
                    for a in &mut angles {
                        *a = 90.0 + 0.8 * (*a - 90.0);
                    }
                }
            }
        };

        let n = self.composition.n();
        let mut coords: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let sigmas = self.schedule.sigmas();
        let last = sigmas.len() - 1;
        for level in 0..sigmas.len() {
            let eta = self.eta_base * (sigmas[level] / sigmas[last]).powi(2);
            // The network predicts d/sigma = sigma * (score of the smoothed
            // density); the extra 1/sigma restores the true score so every
            // level pulls the same fraction of the way per step.
            let drift = 0.5 * eta / sigmas[level];
            let spread = eta.sqrt();
            for _ in 0..self.langevin_steps {
                let input = self.score_input(&coords, z.values(), level);
                let score = self.score_net.forward(&input)?;
                for (i, row) in coords.iter_mut().enumerate() {
                    for k in 0..3 {
                        let eps: f64 = rng.sample(StandardNormal);
                        row[k] =
                            wrap_component(row[k] + drift * score[3 * i + k] + spread * eps);
                    }
                }
            }
        }
        // Noise-free polish: the score at the finest level estimates
        // (clean - x) / sigma_min, so stepping by sigma_min * score walks
        // onto the predicted clean configuration.
        for _ in 0..self.final_denoise_steps {
            let input = self.score_input(&coords, z.values(), last);
            let score = self.score_net.forward(&input)?;
            for (i, row) in coords.iter_mut().enumerate() {
                for k in 0..3 {
                    row[k] = wrap_component(row[k] + sigmas[last] * score[3 * i + k]);
                }
            }
        }
        Ok(Crystal::new(
            lattice,
            self.composition.species_list(),
            coords,
            self.composition.id(),
        )?)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), VaeError> {
        writeln!(w, "cdvae v1")?;
        writeln!(w, "composition {}", self.composition.id())?;
        writeln!(w, "len_ref {}", fmt_f64(self.scale.len_ref))?;
        write!(w, "sigmas")?;
        for s in self.schedule.sigmas() {
            write!(w, " {}", fmt_f64(*s))?;
        }
        writeln!(w)?;
        writeln!(w, "langevin_steps {}", self.langevin_steps)?;
        writeln!(w, "eta_base {}", fmt_f64(self.eta_base))?;
        writeln!(w, "final_denoise_steps {}", self.final_denoise_steps)?;
        writeln!(
            w,
            "bounds {} {} {} {}",
            fmt_f64(self.decode_bounds.len_min),
            fmt_f64(self.decode_bounds.len_max),
            fmt_f64(self.decode_bounds.angle_min),
            fmt_f64(self.decode_bounds.angle_max)
        )?;
        self.encoder.write_to(w)?;
        self.lattice_head.write_to(w)?;
        self.score_net.write_to(w)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self, VaeError> {
        let mut line = String::new();
        let mut next = |line: &mut String| -> Result<(), VaeError> {
            line.clear();
            r.read_line(line)?;
            if line.is_empty() {
                return Err(VaeError::Checkpoint("unexpected end of file".into()));
            }
            Ok(())
        };
        next(&mut line)?;
        if line.trim() != "cdvae v1" {
            return Err(VaeError::Checkpoint(format!("bad header {:?}", line.trim())));
        }
        next(&mut line)?;
        let composition = Composition::parse(
            line.trim()
                .strip_prefix("composition ")
                .ok_or_else(|| VaeError::Checkpoint("missing composition".into()))?,
        )?;
        next(&mut line)?;
        let len_ref: f64 = parse_field(&line, "len_ref")?;
        next(&mut line)?;
        let sigmas: Vec<f64> = line
            .trim()
            .strip_prefix("sigmas")
            .ok_or_else(|| VaeError::Checkpoint("missing sigmas".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| VaeError::Checkpoint(format!("{e}"))))
            .collect::<Result<_, _>>()?;
        next(&mut line)?;
        let langevin_steps: usize = parse_field(&line, "langevin_steps")?;
        next(&mut line)?;
        let eta_base: f64 = parse_field(&line, "eta_base")?;
        next(&mut line)?;
        let final_denoise_steps: usize = parse_field(&line, "final_denoise_steps")?;
        next(&mut line)?;
        let bounds: Vec<f64> = line
            .trim()
            .strip_prefix("bounds")
            .ok_or_else(|| VaeError::Checkpoint("missing bounds".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| VaeError::Checkpoint(format!("{e}"))))
            .collect::<Result<_, _>>()?;
        if bounds.len() != 4 {
            return Err(VaeError::Checkpoint("bounds needs 4 values".into()));
        }
        let encoder = NeuralNet::read_from(r)?;
        let lattice_head = NeuralNet::read_from(r)?;
        let score_net = NeuralNet::read_from(r)?;

        let model = Self {
            encoder,
            lattice_head,
            score_net,
            composition,
            scale: FeatureScale::new(len_ref),
            schedule: NoiseSchedule { sigmas },
            langevin_steps,
            eta_base,
            final_denoise_steps,
            decode_bounds: DecodeBounds {
                len_min: bounds[0],
                len_max: bounds[1],
                angle_min: bounds[2],
                angle_max: bounds[3],
            },
        };
        model.validate_dims()?;
        Ok(model)
    }

    fn validate_dims(&self) -> Result<(), VaeError> {
        let n = self.composition.n();
        let d_feat = crate::crystal::feature_dim(n);
        let d_z = self.d_z();
        let ok = self.encoder.input_dim() == d_feat
            && self.encoder.output_dim() == 2 * d_z
            && self.lattice_head.output_dim() == 6
            && self.score_net.input_dim() == score_input_dim(n, d_z)
            && self.score_net.output_dim() == 3 * n;
        if !ok {
            return Err(VaeError::Checkpoint(format!(
                "inconsistent dimensions for composition {} (n = {n}, d_z = {d_z})",
                self.composition.id()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), VaeError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, VaeError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }
}

/// Gaussian KL divergence against the standard normal:
/// `0.5 * sum(exp(logvar) + mu^2 - 1 - logvar)`; non-negative, zero only
/// for the standard normal itself.
pub fn kl_loss(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum()
}

fn sample_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ]
        })
        .collect()
}

fn parse_field<T: std::str::FromStr>(line: &str, name: &str) -> Result<T, VaeError>
where
    T::Err: std::fmt::Display,
{
    line.trim()
        .strip_prefix(name)
        .ok_or_else(|| VaeError::Checkpoint(format!("missing {name}")))?
        .trim()
        .parse()
        .map_err(|e| VaeError::Checkpoint(format!("{name}: {e}")))
}

/// Reference cell length for feature normalization: the mean of the
/// dataset's lattice lengths, so normalized lengths sit near 1.
fn fit_scale(dataset: &[DatasetRecord]) -> FeatureScale {
    let mut sum = 0.0;
    let mut count = 0.0;
    for r in dataset {
        let p = r.crystal.lattice().params();
        sum += p[0] + p[1] + p[2];
        count += 3.0;
    }
    FeatureScale::new(sum / count)
}

fn decode_bounds_from(dataset: &[DatasetRecord]) -> DecodeBounds {
    let mut len_min = f64::INFINITY;
    let mut len_max = f64::NEG_INFINITY;
    let mut ang_min = f64::INFINITY;
    let mut ang_max = f64::NEG_INFINITY;
    for r in dataset {
        let p = r.crystal.lattice().params();
        for &l in &p[..3] {
            len_min = len_min.min(l);
            len_max = len_max.max(l);
        }
        for &a in &p[3..] {
            ang_min = ang_min.min(a);
            ang_max = ang_max.max(a);
        }
    }
    // A little slack around the observed cells. Relaxation routinely walks
    // angles far outside the sampling window, so the angle window has to
    // come from the data too.
    DecodeBounds {
        len_min: 0.8 * len_min,
        len_max: 1.25 * len_max,
        angle_min: (ang_min - 5.0).max(15.0),
        angle_max: (ang_max + 5.0).min(165.0),
    }
}

/// Trains the three-part model on a single-composition dataset by
/// minimizing `lattice + beta_kl * kl + lambda_dec * denoise` with
/// reparameterized latent samples. Deterministic per seed.
pub fn train_vae(
    dataset: &[DatasetRecord],
    config: &VaeConfig,
) -> Result<(CdVaeModel, Vec<VaeEpochLoss>), VaeError> {
    let first = dataset.first().ok_or(VaeError::EmptyDataset)?;
    let composition = Composition::parse(&first.composition)?;
    for r in dataset {
        if r.composition != first.composition || !composition.matches(&r.crystal) {
            return Err(VaeError::CompositionMismatch {
                expected: first.composition.clone(),
                got: r.composition.clone(),
            });
        }
    }
    // Reduce every record to the canonical gauge once; translated or
    // reordered copies of the same structure would otherwise hand the score
    // network contradictory targets.
    let dataset: Vec<DatasetRecord> = dataset
        .iter()
        .map(|r| DatasetRecord {
            crystal: canonicalize(&r.crystal),
            composition: r.composition.clone(),
            energy: r.energy,
        })
        .collect();
    let dataset = dataset.as_slice();
    let n = composition.n();
    let d_feat = crate::crystal::feature_dim(n);
    let d_z = config.d_z;

    let mut enc_sizes = vec![d_feat];
    enc_sizes.extend_from_slice(&config.encoder_hidden);
    enc_sizes.push(2 * d_z);
    let mut head_sizes = vec![d_z];
    head_sizes.extend_from_slice(&config.head_hidden);
    head_sizes.push(6);
    let mut score_sizes = vec![score_input_dim(n, d_z)];
    score_sizes.extend_from_slice(&config.score_hidden);
    score_sizes.push(3 * n);

    let mut model = CdVaeModel {
        encoder: NeuralNet::init(&enc_sizes, Activation::LeakyRelu, mix_seed(config.seed, 1))?,
        lattice_head: NeuralNet::init(&head_sizes, Activation::LeakyRelu, mix_seed(config.seed, 2))?,
        score_net: NeuralNet::init(&score_sizes, Activation::LeakyRelu, mix_seed(config.seed, 3))?,
        composition,
        scale: fit_scale(dataset),
        schedule: NoiseSchedule::geometric(config.sigma_max, config.sigma_min, config.levels)?,
        langevin_steps: config.langevin_steps,
        eta_base: config.eta_base,
        final_denoise_steps: config.final_denoise_steps,
        decode_bounds: decode_bounds_from(dataset),
    };

    let features: Vec<Vec<f64>> = dataset
        .iter()
        .map(|r| featurize(&r.crystal, &model.scale).values().to_vec())
        .collect();

    let mut enc_opt = AdamTrainer::new(&model.encoder, config.learning_rate);
    let mut head_opt = AdamTrainer::new(&model.lattice_head, config.learning_rate);
    let mut score_opt = AdamTrainer::new(&model.score_net, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 4));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let draws = config.dec_draws.max(1);

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch = VaeEpochLoss { lattice: 0.0, kl: 0.0, denoise: 0.0, total: 0.0 };
        for batch in order.chunks(config.batch_size.max(1)) {
            let inv = 1.0 / batch.len() as f64;
            let mut enc_grads = ParamGrads::zeros_like(&model.encoder);
            let mut head_grads = ParamGrads::zeros_like(&model.lattice_head);
            let mut score_grads = ParamGrads::zeros_like(&model.score_net);

            for &idx in batch {
                let record = &dataset[idx];
                let f = &features[idx];

                let enc_out = model.encoder.forward(f)?;
                let (mu, logvar) = enc_out.split_at(d_z);
                let eps_z: Vec<f64> =
                    (0..d_z).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let z: Vec<f64> = mu
                    .iter()
                    .zip(logvar)
                    .zip(&eps_z)
                    .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
                    .collect();

                // Lattice reconstruction term.
                let head_out = model.lattice_head.forward(&z)?;
                let target = model.lattice_targets(&record.crystal);
                let head_residual: Vec<f64> =
                    head_out.iter().zip(target).map(|(o, t)| o - t).collect();
                let l_lat: f64 = head_residual.iter().map(|r| r * r).sum();
                let head_up: Vec<f64> = head_residual.iter().map(|r| 2.0 * r * inv).collect();
                let (hg, dlat_dz) = model.lattice_head.backward(&z, &head_up)?;
                head_grads.accumulate(&hg, 1.0);

                // KL term.
                let l_kl = kl_loss(mu, logvar);

                // Denoising term, averaged over several (level, noise) draws.
                let z_offset = score_input_dim(n, 0) - 1;
                let mut l_dec = 0.0;
                let mut dz_from_score = vec![0.0; d_z];
                for _ in 0..draws {
                    let level = rng.random_range(0..model.schedule.levels());
                    let noise = sample_noise(n, &mut rng);
                    let (s_in, s_target, l_draw) =
                        model.denoise_parts(&record.crystal, &z.clone().into(), level, &noise)?;
                    let s_out = model.score_net.forward(&s_in)?;
                    let score_up: Vec<f64> = s_out
                        .iter()
                        .zip(&s_target)
                        .map(|(o, t)| 2.0 * (o - t) * config.lambda_dec * inv / draws as f64)
                        .collect();
                    let (sg, ds_in) = model.score_net.backward(&s_in, &score_up)?;
                    score_grads.accumulate(&sg, 1.0);
                    for k in 0..d_z {
                        // Already carries the lambda/batch/draw scaling.
                        dz_from_score[k] += ds_in[z_offset + k];
                    }
                    l_dec += l_draw / draws as f64;
                }

                // Combine the latent gradients and push through the encoder.
                // dz/dmu = 1; dz/dlogvar = 0.5 * (z - mu).
                let mut upstream = vec![0.0; 2 * d_z];
                for k in 0..d_z {
                    let dl_dz = dlat_dz[k] + dz_from_score[k];
                    upstream[k] = dl_dz + config.beta_kl * mu[k] * inv;
                    upstream[d_z + k] = dl_dz * 0.5 * (z[k] - mu[k])
                        + config.beta_kl * 0.5 * (logvar[k].exp() - 1.0) * inv;
                }
                let (eg, _) = model.encoder.backward(f, &upstream)?;
                enc_grads.accumulate(&eg, 1.0);

                epoch.lattice += l_lat;
                epoch.kl += l_kl;
                epoch.denoise += l_dec;
                epoch.total += l_lat + config.beta_kl * l_kl + config.lambda_dec * l_dec;
            }
            enc_opt.step(&mut model.encoder, &enc_grads)?;
            head_opt.step(&mut model.lattice_head, &head_grads)?;
            score_opt.step(&mut model.score_net, &score_grads)?;
        }
        let inv = 1.0 / dataset.len() as f64;
        epoch.lattice *= inv;
        epoch.kl *= inv;
        epoch.denoise *= inv;
        epoch.total *= inv;
        log.push(epoch);
    }

    // Decoder refinement: the encoder is frozen and z is fixed to the
    // posterior means, which is exactly how the decoder is driven later.
    // The lattice head and the score network keep training; the score task
    // needs most of these steps.
    let means: Vec<LatentVector> = dataset
        .iter()
        .map(|r| model.encode(&r.crystal).map(|(mu, _)| mu))
        .collect::<Result<_, _>>()?;
    let last_kl = log.last().map(|e| e.kl).unwrap_or(f64::NAN);
    let mut steps_done = 0;
    while steps_done < config.score_steps {
        // Two-stage schedule: drop to 0.3x for the tail, where the fine
        // noise levels are being sharpened.
        if steps_done >= config.score_steps * 3 / 5 {
            score_opt.learning_rate = 0.3 * config.learning_rate;
            head_opt.learning_rate = 0.3 * config.learning_rate;
        }
        order.shuffle(&mut rng);
        let mut dec_sum = 0.0;
        let mut lat_sum = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let inv = 1.0 / batch.len() as f64;
            let mut head_grads = ParamGrads::zeros_like(&model.lattice_head);
            let mut score_grads = ParamGrads::zeros_like(&model.score_net);
            for &idx in batch {
                let record = &dataset[idx];
                let z = means[idx].values();

                let head_out = model.lattice_head.forward(z)?;
                let target = model.lattice_targets(&record.crystal);
                let head_residual: Vec<f64> =
                    head_out.iter().zip(target).map(|(o, t)| o - t).collect();
                lat_sum += head_residual.iter().map(|r| r * r).sum::<f64>();
                let head_up: Vec<f64> = head_residual.iter().map(|r| 2.0 * r * inv).collect();
                let (hg, _) = model.lattice_head.backward(z, &head_up)?;
                head_grads.accumulate(&hg, 1.0);

                for _ in 0..draws {
                    let level = rng.random_range(0..model.schedule.levels());
                    let noise = sample_noise(n, &mut rng);
                    let (s_in, s_target, l_draw) =
                        model.denoise_parts(&record.crystal, &means[idx], level, &noise)?;
                    let s_out = model.score_net.forward(&s_in)?;
                    let score_up: Vec<f64> = s_out
                        .iter()
                        .zip(&s_target)
                        .map(|(o, t)| 2.0 * (o - t) * config.lambda_dec * inv / draws as f64)
                        .collect();
                    let (sg, _) = model.score_net.backward(&s_in, &score_up)?;
                    score_grads.accumulate(&sg, 1.0);
                    dec_sum += l_draw / draws as f64;
                }
            }
            head_opt.step(&mut model.lattice_head, &head_grads)?;
            score_opt.step(&mut model.score_net, &score_grads)?;
            steps_done += 1;
            if steps_done >= config.score_steps {
                break;
            }
        }
        let denoise = dec_sum / dataset.len() as f64;
        let lattice = lat_sum / dataset.len() as f64;
        log.push(VaeEpochLoss {
            lattice,
            kl: last_kl,
            denoise,
            total: lattice + config.beta_kl * last_kl + config.lambda_dec * denoise,
        });
    }
    Ok((model, log))
}
