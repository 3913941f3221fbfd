use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{AutoEncoder, Batch};
use super::CaeError;
use crate::patchex::PatchSet;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 500,
            learning_rate: 0.0003,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CaeError> {
        if self.batch_size == 0 {
            return Err(CaeError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CaeError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Minibatch SGD over shuffled patches. Returns the trained model and the
/// mean loss of each epoch (each minibatch's loss measured before its
/// update, weighted by minibatch size).
pub fn train(
    mut model: AutoEncoder<f32>,
    patches: &PatchSet,
    config: &TrainConfig,
) -> Result<(AutoEncoder<f32>, Vec<f64>), CaeError> {
    config.validate()?;
    if patches.is_empty() {
        return Err(CaeError::EmptyPatchSet);
    }
    let data = Batch::<f32>::from_patch_set(patches);
    let mut order: Vec<usize> = (0..data.n).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = seed::rng(seed::derive(config.shuffle_seed, seed::stream::CAE_SHUFFLE, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch = data.gather(idx);
            let (loss, grads) = model.loss_and_gradients(&batch)?;
            total += loss * idx.len() as f64;
            model.sgd_step(&grads, config.learning_rate)?;
        }
        let mean = total / data.n as f64;
        debug!("cae epoch {}: mean loss {mean:.6}", epoch + 1);
        trace.push(mean);
    }
    if model.params().iter().any(|v| !v.is_finite()) {
        return Err(CaeError::NonFinite);
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cae::CaeArch;
    use crate::dataio::Region;
    use crate::patchex::{Patch, PatchSource};
    use rand::Rng;

    fn toy_patches(n: usize, seed: u64) -> PatchSet {
        let mut rng = crate::seed::rng(seed);
        let src = PatchSource::new("S000", Region::Cc, "FA");
        let patches = (0..n)
            .map(|i| Patch {
                origin: [i, 0, 0],
                values: (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                source: src.clone(),
            })
            .collect();
        PatchSet::new(16, 1, patches).unwrap()
    }

    #[test]
    fn zero_epochs_is_identity() {
        let m = AutoEncoder::<f32>::init(CaeArch::per_metric(), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (out, trace) = train(m.clone(), &toy_patches(10, 1), &cfg).unwrap();
        assert_eq!(out, m);
        assert!(trace.is_empty());
    }

    #[test]
    fn deterministic_and_descends() {
        let m = AutoEncoder::<f32>::init(CaeArch::per_metric(), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 16,
            learning_rate: 0.05,
            shuffle_seed: 3,
        };
        let set = toy_patches(64, 2);
        let (a, ta) = train(m.clone(), &set, &cfg).unwrap();
        let (b, tb) = train(m, &set, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 4);
        assert!(ta[3] < ta[0], "{ta:?}");
    }

    #[test]
    fn rejects_empty_and_bad_config() {
        let m = AutoEncoder::<f32>::init(CaeArch::per_metric(), 1).unwrap();
        let empty = PatchSet::new(16, 1, vec![]).unwrap();
        assert!(matches!(
            train(m.clone(), &empty, &TrainConfig::default()),
            Err(CaeError::EmptyPatchSet)
        ));
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(m, &toy_patches(2, 0), &bad),
            Err(CaeError::InvalidConfig(_))
        ));
    }
}
