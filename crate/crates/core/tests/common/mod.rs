#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use egofront::codec::CodecSpec;
use egofront::condition::ConceptSpec;
use egofront::config::TrainingConfig;
use egofront::denoiser::DenoiserSpec;
use egofront::objective::{compound_loss, Batch, BatchItem, PerceptualSpec, Trainer, TrainingSet};
use egofront::{EgoFront, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A complete model with well under 10^4 parameters.
pub fn mini_config() -> RunConfig {
    let d = RunConfig::default();
    RunConfig {
        image_size: 16,
        codec: CodecSpec { downsample_factor: 4, latent_channels: 2, widths: vec![4, 4], ..d.codec },
        denoiser: DenoiserSpec {
            base_channels: 4,
            channel_multipliers: vec![1, 1],
            attention_levels: vec![0, 1],
            in_channels: 4,
            out_channels: 2,
            embed_dim: 8,
            heads: 2,
            norm_groups: 2,
            ..d.denoiser
        },
        concept: ConceptSpec { backbone_width: 4, patch_size: 8, heads: 2, ..d.concept },
        perceptual: PerceptualSpec { widths: vec![4, 8], ..d.perceptual },
        training: TrainingConfig { batch_size: 2, learning_rate: 1e-3, checkpoint_every: 0, ..d.training },
        ..d
    }
}

pub fn mini_data(seed: u64) -> TrainingSet {
    TrainingSet::from_toy(&egofront::toy::generate(4, 2, 16, seed))
}

pub fn fixed_batch(model: &EgoFront, data: &TrainingSet) -> Batch {
    let items: Vec<BatchItem<'_>> = data
        .items
        .iter()
        .take(2)
        .map(|i| BatchItem { id: &i.id, ego: &i.egos[0], frontal: &i.frontal, mask: &i.mask })
        .collect();
    Batch::new(&items, model.config().image_size, model.store.dtype(), model.store.device()).unwrap()
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

/// Compares autograd gradients of the compound loss with central
/// differences on `count` randomly chosen trainable scalars. The model is
/// first trained for a few steps so the zero-initialised projections pass
/// gradient through.
pub fn gradient_check(count: usize, h: f64) -> (usize, Vec<Probe>) {
    let data = mini_data(3);
    let model = EgoFront::new(&mini_config(), DType::F64, &Device::Cpu).unwrap();
    let total = model.store.total_count();
    let mut trainer = Trainer::new(model, "gradcheck");
    trainer.run(&data, 3, None, |_| {}).unwrap();
    let model = trainer.model;
    let batch = fixed_batch(&model, &data);
    let weights = model.config().loss;
    let loss = |m: &EgoFront| compound_loss(m, &batch, &weights, 17).unwrap();

    let out = loss(&model);
    let grads = out.total.backward().unwrap();
    let trainable: Vec<(String, usize)> =
        model.store.trainable().iter().map(|p| (p.name.clone(), p.var.elem_count())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut probes = Vec::new();
    for _ in 0..count {
        let (name, n) = &trainable[rng.random_range(0..trainable.len())];
        let index = rng.random_range(0..*n);
        let param = model.store.get(name).unwrap();
        let analytic = grads.get(param.var.as_tensor()).map(|g| flat(g)[index]).unwrap_or(0.0);
        let original = param.var.as_tensor().copy().unwrap();
        let shape = original.dims().to_vec();
        let base = flat(&original);
        let eval_at = |delta: f64| {
            let mut v = base.clone();
            v[index] += delta;
            model.store.assign(name, &Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            loss(&model).components.total
        };
        let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        model.store.assign(name, &original).unwrap();
        probes.push(Probe { name: name.clone(), index, analytic, numeric });
    }
    (total, probes)
}
