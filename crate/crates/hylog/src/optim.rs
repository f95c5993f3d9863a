//! Adam optimization, the training loop and evaluation.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointBundle};
use crate::data::{load_sample, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::{hybrid_loss, psnr, ssim_metric, DehazeTargets, LossWeights};
use crate::net::{DehazeNet, ModelConfig};
use crate::tensor::{Elem, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments keyed by parameter name, plus the
/// shared step count.
#[derive(Clone, Debug)]
pub struct AdamState<T: Elem> {
    pub cfg: AdamConfig,
    pub t: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
    names: Option<Vec<String>>,
}

impl<T: Elem> AdamState<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            names: None,
        }
    }

    pub fn first_moments(&self) -> impl Iterator<Item = (&String, &Vec<T>)> {
        self.m.iter()
    }

    pub fn second_moments(&self) -> impl Iterator<Item = (&String, &Vec<T>)> {
        self.v.iter()
    }

    /// Bias-corrected update of one parameter array in place. `t` must
    /// already count the current step.
    pub fn update_one(&mut self, name: &str, param: &mut [T], grad: &[T]) {
        debug_assert_eq!(param.len(), grad.len());
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let corr1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let corr2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); param.len()]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); param.len()]);
        for ((p, &g), (mi, vi)) in param
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    /// One optimizer step over every model parameter. Every parameter
    /// must carry a gradient, and the parameter name set must not change
    /// between steps.
    pub fn step_model(&mut self, model: &mut DehazeNet<T>) -> Result<()> {
        self.t += 1;
        let mut seen = Vec::new();
        let mut failure: Option<Error> = None;
        let mut this = std::mem::replace(self, AdamState::new(self.cfg));
        model.for_each_param(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            let Some(grad) = p.grad() else {
                failure = Some(Error::MissingGrad(name));
                return;
            };
            let mut data = p.data().to_vec();
            this.update_one(&name, &mut data, &grad);
            *p = Tensor::param(data, p.shape()).expect("shape preserved");
            seen.push(name);
        });
        if let Some(e) = failure {
            *self = this;
            return Err(e);
        }
        match &this.names {
            None => this.names = Some(seen),
            Some(expected) => {
                if *expected != seen {
                    *self = this;
                    return Err(Error::Config(
                        "parameter name set changed between optimizer steps".into(),
                    ));
                }
            }
        }
        *self = this;
        Ok(())
    }
}

/// Training-run settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Total optimizer steps; when nonzero it takes precedence over
    /// `epochs` and cycles through the data as often as needed.
    pub steps: u64,
    pub epochs: u64,
    pub seed: u64,
    pub log_every: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr: 1e-4,
            steps: 200,
            epochs: 0,
            seed: 0,
            log_every: 1,
            weights: LossWeights::default(),
        }
    }
}

/// One logged optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub step: u64,
    pub total: f64,
    pub l_r: f64,
    pub l_s: f64,
    pub l_d: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps_run: u64,
    pub step_losses: Vec<StepLoss>,
    /// (step, mean test PSNR, mean test SSIM) at each epoch boundary.
    pub epoch_evals: Vec<(u64, f64, f64)>,
    pub final_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

pub const METRICS_HEADER: &str = "step,L,L_R,L_S,L_D,psnr,ssim";

struct TrainSample {
    hazy: Tensor<f32>,
    targets: DehazeTargets<f32>,
}

fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    model_cfg: &ModelConfig,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for stem in manifest.stems(split) {
        let s = load_sample(&manifest.root, stem)?;
        out.push(TrainSample {
            hazy: s.hazy,
            targets: DehazeTargets {
                clear: s.clear,
                reflectance: model_cfg
                    .decoders
                    .reflectance_enabled()
                    .then_some(s.reflectance),
                shading: model_cfg.decoders.shading_enabled().then_some(s.shading),
            },
        })
    }
    Ok(out)
}

fn eval_on(net: &mut DehazeNet<f32>, samples: &[TrainSample]) -> Result<(f64, f64)> {
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for s in samples {
        let out = net.forward(&s.hazy, Mode::Eval)?;
        psnr_sum += psnr(&out.dehazed, &s.targets.clear, 1.0)?;
        ssim_sum += ssim_metric(&out.dehazed, &s.targets.clear)?;
    }
    let n = samples.len().max(1) as f64;
    Ok((psnr_sum / n, ssim_sum / n))
}

/// Train on the manifest's train split, evaluating the test split at
/// every epoch boundary. Writes `metrics.csv`, per-epoch checkpoints and
/// `final.bin` into `out_dir`. Deterministic for fixed
/// (seed, config, dataset).
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data_root: &Path,
    out_dir: &Path,
) -> Result<TrainReport> {
    if train_cfg.steps == 0 && train_cfg.epochs == 0 {
        return Err(Error::Config("either steps or epochs must be nonzero".into()));
    }
    if train_cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let manifest = DatasetManifest::load(data_root)?;
    let train_samples = load_split(&manifest, Split::Train, model_cfg)?;
    let test_samples = load_split(&manifest, Split::Test, model_cfg)?;
    if train_samples.is_empty() {
        return Err(Error::Config("dataset has no train split".into()));
    }
    let hw = (
        train_samples[0].hazy.shape()[0],
        train_samples[0].hazy.shape()[1],
    );
    for s in train_samples.iter().chain(&test_samples) {
        if (s.hazy.shape()[0], s.hazy.shape()[1]) != hw {
            return Err(Error::geometry(
                "train",
                "dataset images must share one extent".to_string(),
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut net = DehazeNet::<f32>::init(model_cfg, hw, &mut rng)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: train_cfg.lr,
        ..AdamConfig::default()
    });

    let mut csv = String::new();
    csv.push_str(METRICS_HEADER);
    csv.push('\n');

    let mut report = TrainReport {
        steps_run: 0,
        step_losses: Vec::new(),
        epoch_evals: Vec::new(),
        final_checkpoint: out_dir.join("final.bin"),
        metrics_csv: out_dir.join("metrics.csv"),
    };

    let mut step: u64 = 0;
    let mut epoch: u64 = 0;
    'outer: loop {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(train_cfg.seed ^ (epoch.wrapping_mul(0x9e37_79b9)));
        order.shuffle(&mut epoch_rng);

        for batch in order.chunks(train_cfg.batch_size) {
            step += 1;
            let mut total: Option<Tensor<f32>> = None;
            let mut comps = (0.0, 0.0, 0.0);
            for &idx in batch {
                let sample = &train_samples[idx];
                let out = net.forward(&sample.hazy, Mode::Train)?;
                let hl = hybrid_loss(&out, &sample.targets, &train_cfg.weights)?;
                comps.0 += hl.l_r;
                comps.1 += hl.l_s;
                comps.2 += hl.l_d;
                total = Some(match total {
                    Some(t) => t.add(&hl.total)?,
                    None => hl.total,
                });
            }
            let n = batch.len() as f64;
            let total = total.expect("nonempty batch").mul_scalar(1.0 / n);
            let loss_val = total.item()?.to_f64();
            if !loss_val.is_finite() {
                return Err(Error::Diverged { step });
            }
            total.backward()?;
            adam.step_model(&mut net)?;

            let sl = StepLoss {
                step,
                total: loss_val,
                l_r: comps.0 / n,
                l_s: comps.1 / n,
                l_d: comps.2 / n,
            };
            report.step_losses.push(sl);
            if step % train_cfg.log_every == 0 {
                csv.push_str(&format!(
                    "{},{:.6},{:.6},{:.6},{:.6},,\n",
                    sl.step, sl.total, sl.l_r, sl.l_s, sl.l_d
                ));
            }

            if train_cfg.steps > 0 && step >= train_cfg.steps {
                break 'outer;
            }
        }

        epoch += 1;
        if !test_samples.is_empty() {
            let (p, s) = eval_on(&mut net, &test_samples)?;
            report.epoch_evals.push((step, p, s));
            csv.push_str(&format!("{step},,,,,{p:.6},{s:.6}\n"));
        }
        save_checkpoint(
            &out_dir.join(format!("checkpoint_epoch{epoch}.bin")),
            &mut net,
            Some(&adam),
            step,
        )?;
        if train_cfg.steps == 0 && epoch >= train_cfg.epochs {
            break;
        }
    }
    report.steps_run = step;

    save_checkpoint(&report.final_checkpoint, &mut net, Some(&adam), step)?;
    let mut f = std::fs::File::create(&report.metrics_csv)?;
    f.write_all(csv.as_bytes())?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub per_sample: Vec<(String, f64, f64)>,
}

/// Evaluate a checkpoint on one split of a dataset: mean PSNR/SSIM of
/// the dehazed output against the clear ground truth.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    data_root: &Path,
    split: Split,
) -> Result<EvalReport> {
    let bundle = CheckpointBundle::read(checkpoint)?;
    let manifest = DatasetManifest::load(data_root)?;
    let mut model: Option<DehazeNet<f32>> = None;
    let mut per_sample = Vec::new();
    for stem in manifest.stems(split) {
        let s = load_sample(&manifest.root, stem)?;
        let hw = (s.hazy.shape()[0], s.hazy.shape()[1]);
        let net = match &mut model {
            Some(m) if m.input_size == hw => m,
            _ => {
                model = Some(crate::checkpoint::model_from_bundle_for_size(&bundle, hw)?);
                model.as_mut().unwrap()
            }
        };
        let out = net.forward(&s.hazy, Mode::Eval)?;
        per_sample.push((
            stem.to_string(),
            psnr(&out.dehazed, &s.clear, 1.0)?,
            ssim_metric(&out.dehazed, &s.clear)?,
        ));
    }
    let n = per_sample.len().max(1) as f64;
    Ok(EvalReport {
        mean_psnr: per_sample.iter().map(|x| x.1).sum::<f64>() / n,
        mean_ssim: per_sample.iter().map(|x| x.2).sum::<f64>() / n,
        per_sample,
    })
}

/// PSNR/SSIM of the hazy inputs against the clear ground truth: the
/// do-nothing baseline a dehazer must beat.
pub fn hazy_baseline(data_root: &Path, split: Split) -> Result<(f64, f64)> {
    let manifest = DatasetManifest::load(data_root)?;
    let mut p = 0.0;
    let mut s = 0.0;
    let mut n = 0usize;
    for stem in manifest.stems(split) {
        let sample = load_sample(&manifest.root, stem)?;
        p += psnr(&sample.hazy, &sample.clear, 1.0)?;
        s += ssim_metric(&sample.hazy, &sample.clear)?;
        n += 1;
    }
    let n = n.max(1) as f64;
    Ok((p / n, s / n))
}
