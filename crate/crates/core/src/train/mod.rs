//! Training loop, evaluation and the gradient-check harness.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod optim;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ModelConfig, RunConfig};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::head::predict;
use crate::metrics::{aggregate, example_metrics, MetricsReport};
use crate::model::Model;
use crate::tensor::Tensor;

use checkpoint::Checkpoint;
use optim::{optimizer_step, OptimizerState};

pub const LOSS_LOG: &str = "loss.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.mac";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Mean training loss of every epoch, in order.
    pub losses: Vec<f64>,
    pub optimizer: OptimizerState<f32>,
}

/// Checks that a sample fits the model geometry, naming the offending
/// config field.
pub fn check_sample(config: &ModelConfig, s: &Sample) -> Result<()> {
    if s.labels.len() != config.classes {
        return Err(Error::config(format!(
            "model.classes: config has {}, sample {} has {} labels",
            config.classes,
            s.id,
            s.labels.len()
        )));
    }
    if s.subsets.len() != config.branches.len() {
        return Err(Error::config(format!(
            "model.branches: config has {}, sample {} has {} band subsets",
            config.branches.len(),
            s.id,
            s.subsets.len()
        )));
    }
    for (k, (t, b)) in s.subsets.iter().zip(&config.branches).enumerate() {
        let want = [b.channels(), b.height, b.width];
        if t.shape() != want {
            return Err(Error::config(format!(
                "model.branches[{k}]: config expects {want:?}, sample {} has {:?}",
                s.id,
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Trains `model` on `samples`, starting from a fresh optimizer state.
///
/// With `out` set, writes `loss.tsv`, periodic checkpoints under
/// `checkpoints/` and `final.mac`. `on_epoch` sees `(epoch, mean loss)`.
pub fn train(
    model: Model<f32>,
    samples: &[Sample],
    cfg: &RunConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.train.validate()?;
    if model.config() != &cfg.model {
        return Err(Error::config("model: parameters were built for a different model config"));
    }
    if samples.is_empty() {
        return Err(Error::usage("no training samples"));
    }
    for s in samples {
        check_sample(&cfg.model, s)?;
    }
    let mut model = model;
    let mut optimizer = OptimizerState::new(cfg.train.optimizer, model.params().tensors());
    let labels: Vec<Tensor<f32>> = samples.iter().map(Sample::label_tensor).collect();

    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if cfg.train.checkpoint_every > 0 {
                let ck = dir.join(CHECKPOINT_DIR);
                fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
            }
            let path = dir.join(LOSS_LOG);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut losses = Vec::with_capacity(cfg.train.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut total = 0.0f64;
        for (batch, idx) in order.chunks(cfg.train.batch_size).enumerate() {
            let per_sample: Vec<(f32, Vec<Tensor<f32>>)> = idx
                .par_iter()
                .map(|&i| model.loss_and_grads(&samples[i].subsets, &labels[i]))
                .collect::<Result<_>>()?;

            let bad: Vec<String> = idx
                .iter()
                .zip(&per_sample)
                .filter(|(_, (l, g))| !l.is_finite() || !g.iter().all(Tensor::all_finite))
                .map(|(&i, _)| samples[i].id.clone())
                .collect();
            if !bad.is_empty() {
                return Err(Error::Divergence { epoch, batch: batch + 1, samples: bad });
            }

            // Sum in sample order so the result does not depend on scheduling.
            let mut iter = per_sample.into_iter();
            let (first_loss, mut grads) = iter.next().expect("non-empty batch");
            total += f64::from(first_loss);
            for (l, g) in iter {
                total += f64::from(l);
                for (acc, t) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += *v;
                    }
                }
            }
            let scale = 1.0 / idx.len() as f32;
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            optimizer_step(model.params_mut().tensors_mut(), &grads, &mut optimizer, cfg.train.learning_rate)?;
        }

        let mean = total / samples.len() as f64;
        losses.push(mean);
        on_epoch(epoch, mean);
        if let (Some((file, path)), Some(dir)) = (log.as_mut(), out) {
            writeln!(file, "{epoch}\t{mean}").map_err(|e| Error::io(&*path, e))?;
            file.flush().map_err(|e| Error::io(&*path, e))?;
            let every = cfg.train.checkpoint_every;
            if every > 0 && epoch % every == 0 {
                let path = dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.mac"));
                Checkpoint::from_model(&model, &optimizer, epoch as u32, cfg).save(&path)?;
            }
        }
    }
    if let Some(dir) = out {
        Checkpoint::from_model(&model, &optimizer, cfg.train.epochs as u32, cfg)
            .save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { model, losses, optimizer })
}

/// Model outputs over an evaluation set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub probabilities: Vec<Vec<f32>>,
    pub predictions: Vec<Vec<u8>>,
}

/// Thresholds the posteriors of every sample and scores them against the
/// ground-truth labels.
pub fn evaluate_model(model: &Model<f32>, samples: &[Sample], threshold: f64) -> Result<Evaluation> {
    for s in samples {
        check_sample(model.config(), s)?;
    }
    let probabilities: Vec<Vec<f32>> = samples
        .par_iter()
        .map(|s| model.infer(&s.subsets).map(|inf| inf.probabilities))
        .collect::<Result<_>>()?;
    let predictions: Vec<Vec<u8>> =
        probabilities.iter().map(|p| predict(p, threshold)).collect::<Result<_>>()?;
    let per: Vec<_> = samples
        .iter()
        .zip(&predictions)
        .map(|(s, p)| example_metrics(&s.labels, p))
        .collect::<Result<_>>()?;
    Ok(Evaluation { report: aggregate(&per, false)?, probabilities, predictions })
}
