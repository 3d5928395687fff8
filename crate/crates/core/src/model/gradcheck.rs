//! Finite-difference check of the whole network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, SceneModel};
use crate::error::{Error, Result};
use crate::numerics::{finite_diff_check, GradcheckConfig, GradcheckReport, Mode, ParamStore, Tensor};

#[derive(Debug, Clone)]
pub struct ModelGradcheck {
    pub batch: usize,
    pub frames: usize,
    /// Seeds parameters, input, labels and the pinned dropout masks.
    pub seed: u64,
    pub check: GradcheckConfig,
    /// Test hook: perturb the analytic gradient of this slot before comparing.
    pub corrupt: Option<String>,
}

impl Default for ModelGradcheck {
    fn default() -> Self {
        Self {
            batch: 2,
            frames: 8,
            seed: 0,
            check: GradcheckConfig {
                epsilon: 1e-5,
                max_coords: Some(24),
                fallback_steps: vec![1e-4, 1e-3, 1e-6, 1e-7],
                ..GradcheckConfig::default()
            },
            corrupt: None,
        }
    }
}

/// Train-mode loss (batch statistics, seed-pinned dropout) of a random batch,
/// differentiated by the tape and by central differences for every slot.
pub fn check_model_gradients(config: &ModelConfig, opts: &ModelGradcheck) -> Result<GradcheckReport> {
    let model = SceneModel::<f64>::new(config.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let input = Tensor::from_fn(&[opts.batch, 1, config.n_mels, opts.frames], |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..opts.batch).map(|_| rng.random_range(0..config.n_classes)).collect();
    let mask_seed: u64 = rng.random();

    let loss_of = |params: &ParamStore<f64>| -> Result<(f64, std::collections::BTreeMap<String, Tensor<f64>>)> {
        let m = SceneModel {
            config: model.config.clone(),
            params: params.clone(),
            buffers: model.buffers.clone(),
        };
        let mut masks = ChaCha8Rng::seed_from_u64(mask_seed);
        let g = m.gradients(input.clone(), &labels, Mode::Train, &mut masks)?;
        Ok((g.loss, g.grads))
    };

    let mut params = model.params.clone();
    let (_, mut grads) = loss_of(&params)?;
    if let Some(name) = &opts.corrupt {
        let g = grads
            .get_mut(name)
            .ok_or_else(|| Error::Parameter(format!("no slot named {name:?} to corrupt")))?;
        g.data_mut().iter_mut().for_each(|v| *v = *v * 1.5 + 1e-3);
    }
    params.accumulate(grads)?;
    finite_diff_check(&mut params, |p| Ok(loss_of(p)?.0), &opts.check)
}
