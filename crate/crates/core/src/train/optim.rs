use crate::model::{ModelConfig, ModelParams};

/// Adam with decoupled weight decay. Moments live in `f64`; decay applies to
/// matrices only (embeddings and projections), never to gains or gate vectors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ModelParams<f64>,
    v: ModelParams<f64>,
    decay: Vec<bool>,
    t: u32,
}

impl AdamW {
    pub fn new(cfg: &ModelConfig, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        let m = ModelParams::zeros(cfg);
        let decay = m.tensors().iter().map(|(_, dims, _)| dims.len() == 2).collect();
        Self {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            weight_decay,
            v: m.clone(),
            m,
            decay,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn update(&mut self, params: &mut ModelParams<f64>, grads: &ModelParams<f64>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(&self.decay);
        for (((((_, p), (_, _, g)), (_, m)), (_, v)), &decay) in tensors {
            let wd = if decay { self.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let step = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= lr * (step + wd * p[i]);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams<f64>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::LayerConfig;
    use crate::model::MixerKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig::new(1, LayerConfig::dense(2, 4, 4), MixerKind::FactorizationMemory, 4)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = cfg();
        let mut p = ModelParams::<f64>::zeros(&cfg);
        let mut g = ModelParams::<f64>::zeros(&cfg);
        g.embed.set(3, 1, 0.25);
        g.embed.set(4, 2, -7.0);
        let mut opt = AdamW::new(&cfg, [0.9, 0.95], 1e-12, 0.0);
        opt.update(&mut p, &g, 0.01);
        assert!((p.embed.get(3, 1) + 0.01).abs() < 1e-9);
        assert!((p.embed.get(4, 2) - 0.01).abs() < 1e-9);
        assert_eq!(p.embed.get(0, 0), 0.0);
    }

    #[test]
    fn decay_skips_vectors() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let before = p.clone();
        let g = ModelParams::<f64>::zeros(&cfg);
        let mut opt = AdamW::new(&cfg, [0.9, 0.95], 1e-8, 0.5);
        opt.update(&mut p, &g, 0.1);
        assert_eq!(p.final_norm, before.final_norm);
        assert_eq!(p.blocks[0].norm1, before.blocks[0].norm1);
        let ratio = p.embed.get(1, 1) / before.embed.get(1, 1);
        assert!((ratio - 0.95).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let g = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(&cfg, [0.9, 0.95], 1e-8, 0.1);
        for _ in 0..3 {
            opt.update(&mut p, &g, 0.0);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn clipping() {
        let cfg = cfg();
        let mut g = ModelParams::<f64>::zeros(&cfg);
        g.embed.set(0, 0, 3.0);
        g.embed.set(0, 1, 4.0);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, 2.0), g.global_norm());
    }
}
