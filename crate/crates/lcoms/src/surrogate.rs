//! Surrogate energy model over latent vectors, trained with the
//! conservative regularizer (fixed-weight and dual-threshold variants) or
//! as a plain supervised baseline. Conservative training mines adversarial
//! latents that look spuriously low-energy and pushes their predictions up,
//! balanced by pushing down on the data latents.

use crate::io::fmt_f64;
use crate::nn::{Activation, AdamTrainer, NeuralNet, NnError, ParamGrads};
use crate::oracle::{mix_seed, DatasetRecord};
use crate::vae::{CdVaeModel, LatentVector, VaeError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("record composition {got:?} does not match {expected:?}")]
    CompositionMismatch { expected: String, got: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("need at least 2 records, got {0}")]
    TooFewRecords(usize),
    #[error("degenerate energies: standard deviation {0} is not positive")]
    DegenerateEnergies(f64),
    #[error("checkpoint parse error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Scalar energy surface over latent space with an analytic gradient.
/// Implemented by the surrogate model and by test stubs.
pub trait LatentEnergy {
    fn dim(&self) -> usize;
    /// Energy in normalized units (training scale).
    fn value(&self, z: &[f64]) -> f64;
    /// Gradient of [`LatentEnergy::value`] with respect to z.
    fn grad(&self, z: &[f64]) -> Vec<f64>;
}

/// One training sample for the surrogate: an encoded structure and its
/// normalized oracle energy.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRecord {
    pub z: Vec<f64>,
    pub energy: f64,
}

/// Encoded dataset with the normalization constants that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDataset {
    pub composition: String,
    pub d_z: usize,
    pub energy_mean: f64,
    pub energy_std: f64,
    pub records: Vec<LatentRecord>,
}

/// Encodes every dataset record to its posterior mean and normalizes the
/// energies to zero mean and unit standard deviation.
pub fn encode_dataset(
    vae: &CdVaeModel,
    dataset: &[DatasetRecord],
) -> Result<LatentDataset, SurrogateError> {
    if dataset.is_empty() {
        return Err(SurrogateError::EmptyDataset);
    }
    for r in dataset {
        if r.composition != vae.composition.id() {
            return Err(SurrogateError::CompositionMismatch {
                expected: vae.composition.id().to_string(),
                got: r.composition.clone(),
            });
        }
    }
    let n = dataset.len() as f64;
    let mean = dataset.iter().map(|r| r.energy).sum::<f64>() / n;
    let var = dataset.iter().map(|r| (r.energy - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(SurrogateError::DegenerateEnergies(std));
    }
    let records = dataset
        .iter()
        .map(|r| -> Result<LatentRecord, SurrogateError> {
            let (mu, _) = vae.encode(&r.crystal)?;
            Ok(LatentRecord {
                z: mu.values().to_vec(),
                energy: (r.energy - mean) / std,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(LatentDataset {
        composition: vae.composition.id().to_string(),
        d_z: vae.d_z(),
        energy_mean: mean,
        energy_std: std,
        records,
    })
}

/// Trained surrogate. `net` maps z to the normalized energy; predictions
/// in oracle units go through the stored normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub net: NeuralNet,
    pub energy_mean: f64,
    pub energy_std: f64,
    pub composition: String,
}

impl SurrogateModel {
    /// Prediction in oracle energy units.
    pub fn predict(&self, z: &LatentVector) -> Result<f64, SurrogateError> {
        Ok(self.net.forward(z.values())?[0] * self.energy_std + self.energy_mean)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), SurrogateError> {
        writeln!(w, "surrogate v1")?;
        writeln!(w, "composition {}", self.composition)?;
        writeln!(w, "energy_mean {}", fmt_f64(self.energy_mean))?;
        writeln!(w, "energy_std {}", fmt_f64(self.energy_std))?;
        self.net.write_to(w)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self, SurrogateError> {
        let mut line = String::new();
        let mut next = |line: &mut String| -> Result<(), SurrogateError> {
            line.clear();
            r.read_line(line)?;
            if line.is_empty() {
                return Err(SurrogateError::Checkpoint("unexpected end of file".into()));
            }
            Ok(())
        };
        next(&mut line)?;
        if line.trim() != "surrogate v1" {
            return Err(SurrogateError::Checkpoint(format!(
                "bad header {:?}",
                line.trim()
            )));
        }
        next(&mut line)?;
        let composition = line
            .trim()
            .strip_prefix("composition ")
            .ok_or_else(|| SurrogateError::Checkpoint("missing composition".into()))?
            .to_string();
        next(&mut line)?;
        let energy_mean: f64 = parse_field(&line, "energy_mean")?;
        next(&mut line)?;
        let energy_std: f64 = parse_field(&line, "energy_std")?;
        let net = NeuralNet::read_from(r)?;
        if net.output_dim() != 1 {
            return Err(SurrogateError::Checkpoint("surrogate net must be scalar".into()));
        }
        Ok(Self { net, energy_mean, energy_std, composition })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SurrogateError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SurrogateError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }
}

impl LatentEnergy for SurrogateModel {
    fn dim(&self) -> usize {
        self.net.input_dim()
    }

    fn value(&self, z: &[f64]) -> f64 {
        self.net.forward(z).expect("dimension checked by caller")[0]
    }

    fn grad(&self, z: &[f64]) -> Vec<f64> {
        let (_, input_grad) = self
            .net
            .backward(z, &[1.0])
            .expect("dimension checked by caller");
        input_grad
    }
}

fn parse_field<T: std::str::FromStr>(line: &str, name: &str) -> Result<T, SurrogateError>
where
    T::Err: std::fmt::Display,
{
    line.trim()
        .strip_prefix(name)
        .ok_or_else(|| SurrogateError::Checkpoint(format!("missing {name}")))?
        .trim()
        .parse()
        .map_err(|e| SurrogateError::Checkpoint(format!("{name}: {e}")))
}

/// Conservatism mode: a fixed regularizer weight, or the dual variant where
/// the weight is a Lagrange multiplier driven toward an overestimation
/// budget of `tau` data-energy standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Conservatism {
    FixedAlpha(f64),
    Dual { tau: f64, dual_lr: f64 },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ComsConfig {
    pub conservatism: Conservatism,
    /// Gradient-descent steps used to mine each adversarial latent.
    pub adv_steps: usize,
    /// Step size for adversarial mining, in normalized latent units.
    pub adv_lr: f64,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Upper clip for the dual multiplier.
    pub alpha_max: f64,
    pub seed: u64,
}

impl Default for ComsConfig {
    fn default() -> Self {
        Self {
            conservatism: Conservatism::FixedAlpha(1.0),
            adv_steps: 1,
            adv_lr: 0.05,
            hidden: vec![256, 256],
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            alpha_max: 100.0,
            seed: 0,
        }
    }
}

/// Mines an adversarial latent by descending the surrogate from `z0`
/// (low predicted energy is the lure).
pub fn mine_adversarial(
    model: &impl LatentEnergy,
    z0: &[f64],
    adv_steps: usize,
    adv_lr: f64,
) -> Vec<f64> {
    let mut z = z0.to_vec();
    for _ in 0..adv_steps {
        let g = model.grad(&z);
        for (zi, gi) in z.iter_mut().zip(&g) {
            *zi -= adv_lr * gi;
        }
    }
    z
}

/// Diagnostics reported alongside the conservative loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComsDiagnostics {
    pub mse: f64,
    /// Overestimation gap: mean prediction on data latents minus mean
    /// prediction on mined latents. Positive when mined points look
    /// spuriously low.
    pub gap: f64,
}

/// Conservative loss for a batch with the mined latents supplied
/// explicitly: `MSE - alpha * (mean E(z+) - mean E(z))`. Mined points are
/// constants of the loss (no gradient flows through the mining path).
pub fn coms_loss_with_mined(
    model: &SurrogateModel,
    batch: &[LatentRecord],
    mined: &[Vec<f64>],
    alpha: f64,
) -> (f64, ComsDiagnostics) {
    assert_eq!(batch.len(), mined.len());
    let inv = 1.0 / batch.len() as f64;
    let mut mse = 0.0;
    let mut mean_data = 0.0;
    for r in batch {
        let pred = model.value(&r.z);
        mse += (pred - r.energy) * (pred - r.energy) * inv;
        mean_data += pred * inv;
    }
    let mean_mined: f64 = mined.iter().map(|z| model.value(z) * inv).sum();
    let gap = mean_data - mean_mined;
    let loss = mse - alpha * (mean_mined - mean_data);
    (loss, ComsDiagnostics { mse, gap })
}

/// Conservative loss with adversarial latents freshly mined from each
/// batch element.
pub fn coms_loss(
    model: &SurrogateModel,
    batch: &[LatentRecord],
    cfg: &ComsConfig,
    alpha: f64,
) -> (f64, ComsDiagnostics) {
    let mined: Vec<Vec<f64>> = batch
        .iter()
        .map(|r| mine_adversarial(model, &r.z, cfg.adv_steps, cfg.adv_lr))
        .collect();
    coms_loss_with_mined(model, batch, &mined, alpha)
}

/// Per-epoch training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateEpochLog {
    pub mse: f64,
    pub gap: f64,
    pub alpha: f64,
}

/// Trains the surrogate by minibatch descent on the conservative loss.
/// In dual mode the multiplier ascends on (gap - tau * data-energy std),
/// clipped to `[0, alpha_max]`. Reproducible bit-for-bit per seed.
pub fn train_surrogate(
    latents: &LatentDataset,
    cfg: &ComsConfig,
) -> Result<(SurrogateModel, Vec<SurrogateEpochLog>), SurrogateError> {
    if latents.records.is_empty() {
        return Err(SurrogateError::EmptyDataset);
    }
    if latents.records.len() < 2 {
        return Err(SurrogateError::TooFewRecords(latents.records.len()));
    }
    let records = &latents.records;
    let d_z = latents.d_z;

    let mut sizes = vec![d_z];
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(1);
    let mut model = SurrogateModel {
        net: NeuralNet::init(&sizes, Activation::LeakyRelu, mix_seed(cfg.seed, 21))?,
        energy_mean: latents.energy_mean,
        energy_std: latents.energy_std,
        composition: latents.composition.clone(),
    };
    let mut opt = AdamTrainer::new(&model.net, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 22));
    let mut order: Vec<usize> = (0..records.len()).collect();

    // Normalized energies have unit std by construction; measure anyway so
    // the dual constraint stays correct for hand-built latent sets.
    let e_mean = records.iter().map(|r| r.energy).sum::<f64>() / records.len() as f64;
    let data_std = (records
        .iter()
        .map(|r| (r.energy - e_mean).powi(2))
        .sum::<f64>()
        / records.len() as f64)
        .sqrt();

    let (mut alpha, dual) = match cfg.conservatism {
        Conservatism::FixedAlpha(a) => (a, None),
        Conservatism::Dual { tau, dual_lr } => (0.0, Some((tau, dual_lr))),
    };
    let mut log = Vec::with_capacity(cfg.epochs);

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch = SurrogateEpochLog { mse: 0.0, gap: 0.0, alpha };
        let mut batches = 0.0;
        for batch_idx in order.chunks(cfg.batch_size.max(1)) {
            let inv = 1.0 / batch_idx.len() as f64;
            let mut grads = ParamGrads::zeros_like(&model.net);
            let mut mse = 0.0;
            let mut mean_data = 0.0;
            for &k in batch_idx {
                let r = &records[k];
                let pred = model.value(&r.z);
                mse += (pred - r.energy) * (pred - r.energy) * inv;
                mean_data += pred * inv;
                let (g, _) = model.net.backward(&r.z, &[2.0 * (pred - r.energy) * inv])?;
                grads.accumulate(&g, 1.0);
            }

            let mut gap = 0.0;
            if alpha != 0.0 {
                // Push mined points up, data points down.
                let mut mean_mined = 0.0;
                for &k in batch_idx {
                    let r = &records[k];
                    let mined = mine_adversarial(&model, &r.z, cfg.adv_steps, cfg.adv_lr);
                    mean_mined += model.value(&mined) * inv;
                    let (g_plus, _) = model.net.backward(&mined, &[1.0])?;
                    grads.accumulate(&g_plus, -alpha * inv);
                    let (g_data, _) = model.net.backward(&r.z, &[1.0])?;
                    grads.accumulate(&g_data, alpha * inv);
                }
                gap = mean_data - mean_mined;
            } else if dual.is_some() {
                // Dual mode needs the gap signal even while alpha is zero.
                let mut mean_mined = 0.0;
                for &k in batch_idx {
                    let mined =
                        mine_adversarial(&model, &records[k].z, cfg.adv_steps, cfg.adv_lr);
                    mean_mined += model.value(&mined) * inv;
                }
                gap = mean_data - mean_mined;
            }

            opt.step(&mut model.net, &grads)?;
            if let Some((tau, dual_lr)) = dual {
                alpha = (alpha + dual_lr * (gap - tau * data_std)).clamp(0.0, cfg.alpha_max);
            }
            epoch.mse += mse;
            epoch.gap += gap;
            batches += 1.0;
        }
        epoch.mse /= batches;
        epoch.gap /= batches;
        epoch.alpha = alpha;
        log.push(epoch);
    }
    Ok((model, log))
}

/// The supervised baseline: identical training with the conservatism
/// weight forced to zero.
pub fn train_naive(
    latents: &LatentDataset,
    cfg: &ComsConfig,
) -> Result<(SurrogateModel, Vec<SurrogateEpochLog>), SurrogateError> {
    let cfg = ComsConfig {
        conservatism: Conservatism::FixedAlpha(0.0),
        ..cfg.clone()
    };
    train_surrogate(latents, &cfg)
}

/// Latent dataset file: a small header followed by one record per line
/// (`z` values then the normalized energy), all reals with 17 significant
/// digits.
pub fn write_latents(w: &mut impl Write, latents: &LatentDataset) -> Result<(), SurrogateError> {
    writeln!(w, "latents v1")?;
    writeln!(w, "composition {}", latents.composition)?;
    writeln!(w, "d_z {}", latents.d_z)?;
    writeln!(w, "energy_mean {}", fmt_f64(latents.energy_mean))?;
    writeln!(w, "energy_std {}", fmt_f64(latents.energy_std))?;
    writeln!(w, "count {}", latents.records.len())?;
    for r in &latents.records {
        for v in &r.z {
            write!(w, "{} ", fmt_f64(*v))?;
        }
        writeln!(w, "{}", fmt_f64(r.energy))?;
    }
    Ok(())
}

pub fn read_latents(r: &mut impl BufRead) -> Result<LatentDataset, SurrogateError> {
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<(), SurrogateError> {
        line.clear();
        r.read_line(line)?;
        if line.is_empty() {
            return Err(SurrogateError::Checkpoint("unexpected end of file".into()));
        }
        Ok(())
    };
    next(&mut line)?;
    if line.trim() != "latents v1" {
        return Err(SurrogateError::Checkpoint(format!("bad header {:?}", line.trim())));
    }
    next(&mut line)?;
    let composition = line
        .trim()
        .strip_prefix("composition ")
        .ok_or_else(|| SurrogateError::Checkpoint("missing composition".into()))?
        .to_string();
    next(&mut line)?;
    let d_z: usize = parse_field(&line, "d_z")?;
    next(&mut line)?;
    let energy_mean: f64 = parse_field(&line, "energy_mean")?;
    next(&mut line)?;
    let energy_std: f64 = parse_field(&line, "energy_std")?;
    next(&mut line)?;
    let count: usize = parse_field(&line, "count")?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        next(&mut line)?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| SurrogateError::Checkpoint(format!("{e}"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != d_z + 1 {
            return Err(SurrogateError::Checkpoint(format!(
                "record has {} values, expected {}",
                vals.len(),
                d_z + 1
            )));
        }
        records.push(LatentRecord {
            z: vals[..d_z].to_vec(),
            energy: vals[d_z],
        });
    }
    Ok(LatentDataset { composition, d_z, energy_mean, energy_std, records })
}

pub fn save_latents(path: &std::path::Path, latents: &LatentDataset) -> Result<(), SurrogateError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_latents(&mut file, latents)
}

pub fn load_latents(path: &std::path::Path) -> Result<LatentDataset, SurrogateError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_latents(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Quadratic bowl used by the analytic mining examples.
    struct QuadraticBowl {
        dim: usize,
    }

    impl LatentEnergy for QuadraticBowl {
        fn dim(&self) -> usize {
            self.dim
        }
        fn value(&self, z: &[f64]) -> f64 {
            z.iter().map(|v| v * v).sum()
        }
        fn grad(&self, z: &[f64]) -> Vec<f64> {
            z.iter().map(|v| 2.0 * v).collect()
        }
    }

    /// Synthetic latent dataset: z uniform in a box, E = a smooth bowl with
    /// species-free structure, normalized downstream.
    fn synthetic_latents(n: usize, d_z: usize, seed: u64) -> LatentDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<(Vec<f64>, f64)> = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..d_z).map(|_| rng.random_range(-1.5..1.5)).collect();
                let e: f64 = z.iter().map(|v| v * v).sum::<f64>()
                    + 0.3 * (3.0 * z[0]).sin()
                    + 0.05 * rng.random_range(-1.0..1.0);
                (z, e)
            })
            .collect();
        let mean = raw.iter().map(|(_, e)| e).sum::<f64>() / n as f64;
        let std = (raw.iter().map(|(_, e)| (e - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        LatentDataset {
            composition: "AB".into(),
            d_z,
            energy_mean: mean,
            energy_std: std,
            records: raw
                .into_iter()
                .map(|(z, e)| LatentRecord { z, energy: (e - mean) / std })
                .collect(),
        }
    }

    fn small_cfg(seed: u64) -> ComsConfig {
        ComsConfig {
            hidden: vec![32, 32],
            epochs: 60,
            batch_size: 32,
            learning_rate: 3e-3,
            seed,
            ..ComsConfig::default()
        }
    }

    #[test]
    fn mining_with_zero_step_is_identity() {
        let bowl = QuadraticBowl { dim: 4 };
        let z0 = vec![0.5, -1.0, 2.0, 0.0];
        assert_eq!(mine_adversarial(&bowl, &z0, 3, 0.0), z0);
    }

    #[test]
    fn mining_on_quadratic_contracts_analytically() {
        let bowl = QuadraticBowl { dim: 3 };
        let z0 = vec![1.0, -2.0, 0.5];
        let adv_lr = 0.1;
        let z1 = mine_adversarial(&bowl, &z0, 1, adv_lr);
        for (a, b) in z1.iter().zip(&z0) {
            assert!(approx(*a, (1.0 - 2.0 * adv_lr) * b, 1e-15));
        }
        // Two steps compose the contraction.
        let z2 = mine_adversarial(&bowl, &z0, 2, adv_lr);
        for (a, b) in z2.iter().zip(&z0) {
            assert!(approx(*a, (1.0 - 2.0 * adv_lr).powi(2) * b, 1e-15));
        }
    }

    #[test]
    fn mining_lowers_predictions_on_average() {
        let latents = synthetic_latents(100, 6, 3);
        let (model, _) = train_naive(&latents, &small_cfg(3)).unwrap();
        let mut before = 0.0;
        let mut after = 0.0;
        for r in &latents.records {
            before += model.value(&r.z);
            after += model.value(&mine_adversarial(&model, &r.z, 1, 0.05));
        }
        assert!(
            after < before,
            "mining did not lower mean prediction: {after} vs {before}"
        );
    }

    #[test]
    fn encode_dataset_normalizes_energies() {
        use crate::oracle::{generate_dataset, Composition, PotentialSpec};
        use crate::vae::{train_vae, VaeConfig};
        let spec = PotentialSpec::single_species(2.5);
        let comps = vec![Composition::parse("A2").unwrap()];
        let data = generate_dataset(&comps, 10, &spec, 31).unwrap();
        let cfg = VaeConfig {
            d_z: 4,
            encoder_hidden: vec![16],
            head_hidden: vec![16],
            score_hidden: vec![16],
            epochs: 5,
            score_steps: 0,
            batch_size: 8,
            seed: 31,
            ..VaeConfig::default()
        };
        let (vae, _) = train_vae(&data, &cfg).unwrap();
        let latents = encode_dataset(&vae, &data).unwrap();
        assert_eq!(latents.records.len(), data.len());
        let n = latents.records.len() as f64;
        let mean: f64 = latents.records.iter().map(|r| r.energy).sum::<f64>() / n;
        let var: f64 = latents.records.iter().map(|r| r.energy * r.energy).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "normalized mean {mean}");
        assert!(approx(var, 1.0, 1e-9), "normalized variance {var}");
        // Determinism.
        let again = encode_dataset(&vae, &data).unwrap();
        assert_eq!(latents, again);
    }

    #[test]
    fn coms_loss_reduces_to_mse_at_zero_alpha() {
        let latents = synthetic_latents(40, 5, 7);
        let (model, _) = train_naive(&latents, &small_cfg(7)).unwrap();
        let batch = &latents.records[..16];
        let cfg = small_cfg(7);
        let (loss, diag) = coms_loss(&model, batch, &cfg, 0.0);
        let inv = 1.0 / batch.len() as f64;
        let mse: f64 = batch
            .iter()
            .map(|r| {
                let p = model.value(&r.z);
                (p - r.energy) * (p - r.energy) * inv
            })
            .sum();
        assert_eq!(loss, mse);
        assert_eq!(diag.mse, mse);
    }

    #[test]
    fn constant_model_has_zero_regularizer() {
        let latents = synthetic_latents(20, 4, 9);
        let (mut model, _) = train_naive(&latents, &small_cfg(9)).unwrap();
        // Zero all weights: the net returns its final bias everywhere.
        for l in 0..model.net.num_layers() {
            model.net.weights_mut(l).fill(0.0);
        }
        let batch = &latents.records[..8];
        let cfg = small_cfg(9);
        let (loss, diag) = coms_loss(&model, batch, &cfg, 2.5);
        assert!(approx(diag.gap, 0.0, 1e-15));
        assert!(approx(loss, diag.mse, 1e-15));
    }

    #[test]
    fn coms_loss_gradient_matches_finite_differences() {
        let latents = synthetic_latents(12, 3, 11);
        let cfg = ComsConfig {
            hidden: vec![8],
            epochs: 10,
            batch_size: 12,
            ..small_cfg(11)
        };
        let (model, _) = train_surrogate(&latents, &cfg).unwrap();
        let batch = &latents.records[..6];
        let alpha = 0.7;
        // Mined points are constants of the loss; freeze them for both the
        // analytic gradient and the finite differences.
        let mined: Vec<Vec<f64>> = batch
            .iter()
            .map(|r| mine_adversarial(&model, &r.z, cfg.adv_steps, cfg.adv_lr))
            .collect();
        let inv = 1.0 / batch.len() as f64;
        let mut analytic = ParamGrads::zeros_like(&model.net);
        for (r, zp) in batch.iter().zip(&mined) {
            let pred = model.value(&r.z);
            let (g, _) = model.net.backward(&r.z, &[2.0 * (pred - r.energy) * inv]).unwrap();
            analytic.accumulate(&g, 1.0);
            let (gp, _) = model.net.backward(zp, &[1.0]).unwrap();
            analytic.accumulate(&gp, -alpha * inv);
            let (gd, _) = model.net.backward(&r.z, &[1.0]).unwrap();
            analytic.accumulate(&gd, alpha * inv);
        }
        let h = 1e-5;
        for l in 0..model.net.num_layers() {
            for k in [0, model.net.weights(l).len() / 2, model.net.weights(l).len() - 1] {
                let mut hi = model.clone();
                let mut lo = model.clone();
                hi.net.weights_mut(l)[k] += h;
                lo.net.weights_mut(l)[k] -= h;
                let (lh, _) = coms_loss_with_mined(&hi, batch, &mined, alpha);
                let (ll, _) = coms_loss_with_mined(&lo, batch, &mined, alpha);
                let fd = (lh - ll) / (2.0 * h);
                let an = analytic.weights[l][k];
                let scale = fd.abs().max(an.abs()).max(1e-4);
                assert!((fd - an).abs() / scale < 1e-4, "w[{l}][{k}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn zero_alpha_training_is_bit_identical_to_naive() {
        let latents = synthetic_latents(60, 5, 13);
        let cfg = ComsConfig {
            conservatism: Conservatism::FixedAlpha(0.0),
            ..small_cfg(13)
        };
        let (a, _) = train_surrogate(&latents, &cfg).unwrap();
        let (b, _) = train_naive(&latents, &small_cfg(13)).unwrap();
        assert_eq!(a, b);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.write_to(&mut buf_a).unwrap();
        b.write_to(&mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
    }

    #[test]
    fn training_is_reproducible() {
        let latents = synthetic_latents(40, 4, 17);
        let cfg = ComsConfig {
            conservatism: Conservatism::FixedAlpha(0.5),
            epochs: 20,
            ..small_cfg(17)
        };
        let (a, la) = train_surrogate(&latents, &cfg).unwrap();
        let (b, lb) = train_surrogate(&latents, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn naive_model_fits_constant_energies() {
        let mut latents = synthetic_latents(30, 4, 19);
        for r in &mut latents.records {
            r.energy = 0.75;
        }
        let cfg = ComsConfig {
            epochs: 800,
            ..small_cfg(19)
        };
        let (model, log) = train_naive(&latents, &cfg).unwrap();
        assert!(log.last().unwrap().mse < 1e-4, "mse {}", log.last().unwrap().mse);
        for r in &latents.records {
            assert!(approx(model.value(&r.z), 0.75, 0.05));
        }
    }

    #[test]
    fn held_out_mse_improves_substantially() {
        let train_set = synthetic_latents(500, 6, 23);
        let test_set = synthetic_latents(200, 6, 24);
        let cfg = ComsConfig {
            hidden: vec![64, 64],
            epochs: 80,
            batch_size: 64,
            ..small_cfg(23)
        };
        let held_out = |model: &SurrogateModel| -> f64 {
            test_set
                .records
                .iter()
                .map(|r| {
                    let p = model.value(&r.z);
                    (p - r.energy) * (p - r.energy)
                })
                .sum::<f64>()
                / test_set.records.len() as f64
        };
        let fresh = ComsConfig { epochs: 0, ..cfg.clone() };
        let (untrained, _) = train_naive(&train_set, &fresh).unwrap();
        let (trained, _) = train_naive(&train_set, &cfg).unwrap();
        let (before, after) = (held_out(&untrained), held_out(&trained));
        assert!(
            after * 5.0 <= before,
            "held-out MSE only moved {before} -> {after}"
        );
    }

    #[test]
    fn conservatism_raises_mined_predictions_relative_to_naive() {
        let latents = synthetic_latents(500, 6, 29);
        let base = ComsConfig {
            hidden: vec![64, 64],
            epochs: 60,
            batch_size: 64,
            ..small_cfg(29)
        };
        for seed in [29, 31, 37] {
            let cfg = ComsConfig { seed, ..base.clone() };
            let coms_cfg = ComsConfig {
                conservatism: Conservatism::FixedAlpha(1.0),
                ..cfg.clone()
            };
            let (conservative, _) = train_surrogate(&latents, &coms_cfg).unwrap();
            let (naive, _) = train_naive(&latents, &cfg).unwrap();
            let gap = |m: &SurrogateModel| -> f64 {
                let inv = 1.0 / latents.records.len() as f64;
                latents
                    .records
                    .iter()
                    .map(|r| {
                        let mined = mine_adversarial(m, &r.z, 1, 0.05);
                        (m.value(&mined) - m.value(&r.z)) * inv
                    })
                    .sum()
            };
            // Mined minus data: conservative training pushes mined points up.
            let (gc, gn) = (gap(&conservative), gap(&naive));
            assert!(
                gc > gn,
                "seed {seed}: conservative mined-data gap {gc} not above naive {gn}"
            );
        }
    }

    #[test]
    fn conservative_held_out_mse_stays_comparable() {
        let train_set = synthetic_latents(500, 6, 41);
        let test_set = synthetic_latents(200, 6, 42);
        let cfg = ComsConfig {
            hidden: vec![64, 64],
            epochs: 60,
            batch_size: 64,
            ..small_cfg(41)
        };
        let coms_cfg = ComsConfig {
            conservatism: Conservatism::FixedAlpha(1.0),
            ..cfg.clone()
        };
        let held_out = |model: &SurrogateModel| -> f64 {
            test_set
                .records
                .iter()
                .map(|r| {
                    let p = model.value(&r.z);
                    (p - r.energy) * (p - r.energy)
                })
                .sum::<f64>()
                / test_set.records.len() as f64
        };
        let (conservative, _) = train_surrogate(&train_set, &coms_cfg).unwrap();
        let (naive, _) = train_naive(&train_set, &cfg).unwrap();
        let (mc, mn) = (held_out(&conservative), held_out(&naive));
        assert!(mc <= 3.0 * mn, "conservative held-out {mc} vs naive {mn}");
    }

    #[test]
    fn dual_mode_tracks_the_overestimation_budget() {
        // tau must sit below the naive model's natural mined-point gap so
        // the constraint actually binds.
        let latents = synthetic_latents(300, 5, 43);
        let tau = 0.05;
        let cfg = ComsConfig {
            conservatism: Conservatism::Dual { tau, dual_lr: 0.4 },
            hidden: vec![48, 48],
            epochs: 400,
            batch_size: 64,
            ..small_cfg(43)
        };
        let (_, log) = train_surrogate(&latents, &cfg).unwrap();
        let tail = &log[log.len() - 10..];
        let mean_gap: f64 = tail.iter().map(|e| e.gap).sum::<f64>() / tail.len() as f64;
        // Normalized energies have unit std, so the budget is tau itself.
        assert!(
            (mean_gap - tau).abs() <= 0.2 * tau,
            "tail gap {mean_gap} not within 20% of tau {tau}"
        );
        let alpha_tail = tail.iter().map(|e| e.alpha).fold(0.0f64, f64::max);
        assert!(alpha_tail > 0.0, "dual multiplier never activated");
    }

    #[test]
    fn too_few_records_is_an_error() {
        let latents = synthetic_latents(1, 3, 47);
        assert!(matches!(
            train_surrogate(&latents, &small_cfg(47)),
            Err(SurrogateError::TooFewRecords(1))
        ));
    }

    #[test]
    fn checkpoint_and_latents_round_trip_exactly() {
        let latents = synthetic_latents(25, 4, 53);
        let (model, _) = train_naive(&latents, &small_cfg(53)).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back = SurrogateModel::read_from(&mut std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(model, back);

        let mut lbuf = Vec::new();
        write_latents(&mut lbuf, &latents).unwrap();
        let lback = read_latents(&mut std::io::BufReader::new(lbuf.as_slice())).unwrap();
        assert_eq!(latents, lback);
    }
}
