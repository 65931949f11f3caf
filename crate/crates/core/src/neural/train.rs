use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::Tensor;
use super::{BandControlNet, NeuralError, Sample};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.99);
const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction. Blocks without a gradient in a step keep
/// their moments untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::new(t.shape.clone(), vec![0.0; t.data.len()])).collect();
        Self { m: zeros.clone(), v: zeros, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        let (b1, b2) = ADAM_BETAS;
        self.steps += 1;
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        for (id, g) in grads.blocks.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = params.tensor_mut(id);
            for (((p, m), v), &g) in p.data.iter_mut().zip(&mut m.data).zip(&mut v.data).zip(&g.data) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Summed cross-entropy over every target in the batch.
    pub loss_sum: f64,
    pub tokens: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// One optimizer step on the per-token mean loss of `batch`. Samples are
/// differentiated in parallel and reduced in batch order, so the result
/// does not depend on the thread count.
pub fn train_step(model: &mut BandControlNet, opt: &mut Adam, batch: &[Sample], lr: f64) -> Result<StepStats, NeuralError> {
    let per_sample: Vec<Result<(f64, usize, Gradients), NeuralError>> =
        batch.par_iter().map(|s| model.gradients(s)).collect();
    let mut total = Gradients::zeros_like(&model.params);
    let (mut loss_sum, mut tokens) = (0.0, 0);
    for r in per_sample {
        let (l, n, g) = r?;
        loss_sum += l;
        tokens += n;
        total.accumulate(&g);
    }
    if tokens == 0 {
        return Err(NeuralError::Shape("batch has no targets".into()));
    }
    total.scale(1.0 / tokens as f64);
    if total.blocks.iter().flatten().any(|t| !t.is_finite()) {
        return Err(NeuralError::NonFinite("backward"));
    }
    opt.step(&mut model.params, &total, lr);
    Ok(StepStats { loss_sum, tokens, mean_loss: loss_sum / tokens as f64, lr })
}

/// `steps` optimizer steps over minibatches drawn from reshuffled passes
/// through `samples`, with the learning rate following the config schedule
/// in epochs.
pub fn train(
    model: &mut BandControlNet,
    samples: &[Sample],
    steps: usize,
    seed: u64,
    mut on_step: impl FnMut(usize, &StepStats),
) -> Result<Vec<StepStats>, NeuralError> {
    if samples.is_empty() {
        return Err(NeuralError::Shape("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(&model.params);
    let batch = model.config.batch_size.min(samples.len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(samples[order[cursor]].clone());
            cursor += 1;
        }
        let epoch = (step * batch) as f64 / samples.len() as f64;
        let stats = train_step(model, &mut opt, &picked, model.config.lr_at(epoch))?;
        on_step(step, &stats);
        history.push(stats);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = ParamStore::default();
        p.insert("w", Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]));
        let mut opt = Adam::new(&p);
        let g = Gradients { blocks: vec![Some(Tensor::from_rows(&[vec![3.0, -0.1, 0.0]]))] };
        opt.step(&mut p, &g, 0.01);
        let w = p.get("w").unwrap();
        assert!((w.get(0, 0) - 0.99).abs() < 1e-9);
        assert!((w.get(0, 1) + 1.99).abs() < 1e-9);
        assert_eq!(w.get(0, 2), 0.5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = ParamStore::default();
        p.insert("x", Tensor::from_rows(&[vec![5.0, -3.0]]));
        let mut opt = Adam::new(&p);
        for _ in 0..3000 {
            let x = p.get("x").unwrap().clone();
            let g = Gradients { blocks: vec![Some(Tensor::from_rows(&[vec![2.0 * (x.get(0, 0) - 1.0), 2.0 * x.get(0, 1)]]))] };
            opt.step(&mut p, &g, 0.01);
        }
        let x = p.get("x").unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-2 && x.get(0, 1).abs() < 1e-2);
    }
}
