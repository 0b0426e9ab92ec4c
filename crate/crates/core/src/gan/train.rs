use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Adam, Discriminator, DiscriminatorSpec, FeatureShape, Generator};
use super::{disc_loss, gen_loss, sample_synthetic, Dataset, GanError, LossKind};
use crate::diagnostics::{
    effective_rank, grad_norm_input, grad_norm_weights, mean_pairwise_cosine, Critic, MetricsRecord,
};
use crate::norm::{NormParams, Pass, Phase, StatsMode, Variant};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_d: f64,
    pub lr_g: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub dataset: Dataset,
    pub real_train_size: usize,
    pub real_test_size: usize,
    pub norm: NormParams,
    /// Normalization in the discriminator; `None` for a plain MLP.
    pub variant: Option<Variant>,
    pub mode: Option<StatsMode>,
    pub loss: LossKind,
    pub d_hidden: Vec<usize>,
    pub g_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub feature_shape: FeatureShape,
    /// Diagnostics run on steps divisible by this; others repeat the last
    /// values.
    pub diag_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            lr_d: 2e-4,
            lr_g: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            seed: 0,
            dataset: Dataset::Ring,
            real_train_size: 2048,
            real_test_size: 512,
            norm: NormParams::default(),
            variant: Some(Variant::Chain),
            mode: None,
            loss: LossKind::Hinge,
            d_hidden: vec![64, 64],
            g_hidden: vec![64, 64, 64],
            latent_dim: 8,
            feature_shape: FeatureShape::Flat,
            diag_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GanError> {
        let fail = |m: String| Err(GanError::InvalidConfig(m));
        if self.batch_size < 2 {
            return fail(format!("batch_size {} < 2", self.batch_size));
        }
        if self.real_train_size < self.batch_size {
            return fail(format!(
                "real_train_size {} < batch_size {}",
                self.real_train_size, self.batch_size
            ));
        }
        if self.real_test_size == 0 {
            return fail("real_test_size must be positive".into());
        }
        for (name, lr) in [("lr_d", self.lr_d), ("lr_g", self.lr_g)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return fail(format!("{name} = {lr}"));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} = {b} not in [0, 1)"));
            }
        }
        if self.diag_every == 0 {
            return fail("diag_every must be at least 1".into());
        }
        if self.g_hidden.is_empty() {
            return fail("generator needs at least one hidden layer".into());
        }
        if self.variant.is_none() && self.mode.is_some() {
            return fail("mode set without a variant".into());
        }
        self.norm.validate()?;
        self.disc_spec().validate()
    }

    pub fn disc_spec(&self) -> DiscriminatorSpec {
        let mut layer_widths = self.d_hidden.clone();
        layer_widths.push(1);
        DiscriminatorSpec {
            input_dim: 2,
            layer_widths,
            leaky_slope: 0.2,
            norm: self.variant,
            mode: self.mode,
            feature_shape: self.feature_shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Probes {
    grad_norm_input: f64,
    grad_norm_weights: f64,
    erank: Vec<f64>,
    mean_cosine: Vec<f64>,
    mean_cosine_fake: Vec<f64>,
    d_real: f64,
    d_fake: f64,
    d_test: f64,
}

/// One generator, one discriminator and their optimizers.
pub struct Trainer {
    pub config: TrainConfig,
    pub disc: Discriminator,
    pub gen: Generator,
    d_opt: Adam,
    g_opt: Adam,
    train_set: Tensor,
    test_set: Tensor,
    data_rng: ChaCha8Rng,
    latent_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
    step: u64,
    last: Option<Probes>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, GanError> {
        config.validate()?;
        let mut init_rng = stream(config.seed, 0);
        let mut data_rng = stream(config.seed, 1);
        let disc = Discriminator::new(config.disc_spec(), config.norm, &mut init_rng)?;
        let gen = Generator::new(config.latent_dim, &config.g_hidden, 2, &mut init_rng)?;
        let train_set = sample_synthetic(config.dataset, config.real_train_size, &mut data_rng)?;
        let test_set = sample_synthetic(config.dataset, config.real_test_size, &mut data_rng)?;
        Ok(Self {
            d_opt: Adam::new(config.lr_d, config.beta1, config.beta2),
            g_opt: Adam::new(config.lr_g, config.beta1, config.beta2),
            disc,
            gen,
            train_set,
            test_set,
            data_rng,
            latent_rng: stream(config.seed, 2),
            mask_rng: stream(config.seed, 3),
            step: 0,
            last: None,
            config,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    fn draw_rows(&mut self, from_test: bool) -> Result<Tensor, GanError> {
        let set = if from_test {
            &self.test_set
        } else {
            &self.train_set
        };
        let n = set.rows();
        let b = self.config.batch_size;
        let mut data = Vec::with_capacity(2 * b);
        for _ in 0..b {
            let i = self.data_rng.random_range(0..n);
            data.extend_from_slice(set.row(i));
        }
        Ok(Tensor::new(vec![b, 2], data)?)
    }

    fn draw_latent(&mut self) -> Result<Tensor, GanError> {
        Ok(Tensor::randn(
            &[self.config.batch_size, self.config.latent_dim],
            &mut self.latent_rng,
        )?)
    }

    fn check(&self, quantity: &'static str, value: f64) -> Result<(), GanError> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(GanError::NonFinite {
                step: self.step,
                quantity,
                value,
            })
        }
    }

    /// One discriminator update on separate real and generated batches,
    /// one controller update from the real scores, one generator update,
    /// then diagnostics.
    pub fn train_step(&mut self) -> Result<MetricsRecord, GanError> {
        let real = self.draw_rows(false)?;
        let z = self.draw_latent()?;
        let fake = self.gen.sample(&z)?;

        // discriminator
        let mut g = Graph::new();
        let params = self.disc.bind(&mut g, true);
        let xr = g.constant(real.clone());
        let xf = g.constant(fake.clone());
        let fr = self.disc.forward(
            &mut g,
            &params,
            xr,
            Phase::Train(Pass::Real),
            &mut self.mask_rng,
        )?;
        let ff = self.disc.forward(
            &mut g,
            &params,
            xf,
            Phase::Train(Pass::Fake),
            &mut self.mask_rng,
        )?;
        let regs: Vec<Var> = fr.regs.iter().chain(&ff.regs).copied().collect();
        let d_loss_var = disc_loss(&mut g, fr.out, ff.out, self.config.loss, &regs)?;
        let d_loss = g.value(d_loss_var).item()?;
        self.check("d_loss", d_loss)?;
        let mut reg = 0.0;
        for &r in &regs {
            reg += g.value(r).item()?;
        }
        let real_scores = g.value(fr.out).data().to_vec();
        let grads = g.backward(d_loss_var)?;
        let d_grads: Vec<Option<&Tensor>> = params.iter().map(|&v| grads.get(v)).collect();
        self.disc.absorb(&g);
        self.d_opt.step(self.disc.params_mut(), &d_grads)?;

        for s in self.disc.norm_states_mut() {
            s.update_p(&real_scores)?;
        }

        // generator
        let z = self.draw_latent()?;
        let mut g = Graph::new();
        let gp = self.gen.bind(&mut g, true);
        let dp = self.disc.bind(&mut g, false);
        let zv = g.constant(z);
        let x = self.gen.forward(&mut g, &gp, zv)?;
        let fg = self
            .disc
            .forward(&mut g, &dp, x, Phase::Train(Pass::Fake), &mut self.mask_rng)?;
        let g_loss_var = gen_loss(&mut g, fg.out)?;
        let g_loss = g.value(g_loss_var).item()?;
        self.check("g_loss", g_loss)?;
        let grads = g.backward(g_loss_var)?;
        let g_grads: Vec<Option<&Tensor>> = gp.iter().map(|&v| grads.get(v)).collect();
        self.disc.absorb(&g);
        self.g_opt.step(self.gen.params_mut(), &g_grads)?;

        let step = self.step;
        if step % self.config.diag_every == 0 || self.last.is_none() {
            let probes = self.probe(&real, &fake)?;
            self.last = Some(probes);
        }
        let pr = self.last.clone().expect("probes computed");
        let record = MetricsRecord {
            step,
            d_loss,
            g_loss,
            p: self.disc.p(),
            grad_norm_input: pr.grad_norm_input,
            grad_norm_weights: pr.grad_norm_weights,
            erank: pr.erank,
            mean_cosine: pr.mean_cosine,
            mean_cosine_fake: pr.mean_cosine_fake,
            d_real: pr.d_real,
            d_fake: pr.d_fake,
            d_test: pr.d_test,
            reg,
        };
        self.check("grad_norm_input", record.grad_norm_input)?;
        self.check("grad_norm_weights", record.grad_norm_weights)?;
        self.step += 1;
        Ok(record)
    }

    /// Evaluation-mode measurements. Degenerate probe features keep the
    /// previous value.
    fn probe(&mut self, real: &Tensor, fake: &Tensor) -> Result<Probes, GanError> {
        let test = self.draw_rows(true)?;
        let previous = self.last.clone();
        let mut rng = stream(self.config.seed, 4);
        let mut critic = self.disc.eval_critic(&mut rng);
        let grad_norm_input = grad_norm_input(&mut critic, real)?;
        let grad_norm_weights = grad_norm_weights(&mut critic, real)?;

        let mut features = |x: &Tensor| -> Result<(f64, Vec<Tensor>), GanError> {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let co = critic.critic(&mut g, xv)?;
            let probes = co.probes.iter().map(|&v| g.value(v).clone()).collect();
            Ok((g.value(co.out).mean(), probes))
        };
        let (d_real, real_feats) = features(real)?;
        let (d_fake, fake_feats) = features(fake)?;
        let (d_test, _) = features(&test)?;

        let pick = |i: usize, prev: Option<&Vec<f64>>, value: Option<f64>| -> f64 {
            value
                .or_else(|| prev.and_then(|p| p.get(i).copied()))
                .unwrap_or(0.0)
        };
        let prev_erank = previous.as_ref().map(|p| &p.erank);
        let prev_cos = previous.as_ref().map(|p| &p.mean_cosine);
        let prev_cos_fake = previous.as_ref().map(|p| &p.mean_cosine_fake);
        let erank = real_feats
            .iter()
            .enumerate()
            .map(|(i, f)| pick(i, prev_erank, effective_rank(f).ok()))
            .collect();
        let mean_cosine = real_feats
            .iter()
            .enumerate()
            .map(|(i, f)| pick(i, prev_cos, mean_pairwise_cosine(f).ok().map(|c| c.mean)))
            .collect();
        let mean_cosine_fake = fake_feats
            .iter()
            .enumerate()
            .map(|(i, f)| {
                pick(
                    i,
                    prev_cos_fake,
                    mean_pairwise_cosine(f).ok().map(|c| c.mean),
                )
            })
            .collect();
        Ok(Probes {
            grad_norm_input,
            grad_norm_weights,
            erank,
            mean_cosine,
            mean_cosine_fake,
            d_real,
            d_fake,
            d_test,
        })
    }
}

/// Runs `config.steps` training steps and returns every record.
pub fn train_run(config: TrainConfig) -> Result<Vec<MetricsRecord>, GanError> {
    let steps = config.steps;
    let mut trainer = Trainer::new(config)?;
    (0..steps).map(|_| trainer.train_step()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 16,
            real_train_size: 64,
            real_test_size: 32,
            d_hidden: vec![8, 8],
            g_hidden: vec![8, 8, 8],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            batch_size: 1,
            ..small(1)
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            real_train_size: 8,
            ..small(1)
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn run_lengths() {
        assert!(train_run(small(0)).unwrap().is_empty());
        let recs = train_run(small(10)).unwrap();
        assert_eq!(recs.len(), 10);
        assert!(recs.windows(2).all(|w| w[1].step > w[0].step));
        assert!(recs.iter().all(MetricsRecord::is_finite));
    }

    #[test]
    fn same_seed_same_trajectory() {
        assert_eq!(train_run(small(5)).unwrap(), train_run(small(5)).unwrap());
        let other = TrainConfig {
            seed: 1,
            ..small(5)
        };
        assert_ne!(train_run(small(5)).unwrap(), train_run(other).unwrap());
    }

    #[test]
    fn zero_learning_rates_freeze_weights_but_not_p() {
        let c = TrainConfig {
            lr_d: 0.0,
            lr_g: 0.0,
            ..small(3)
        };
        let mut t = Trainer::new(c).unwrap();
        let (d0, g0) = (t.disc.layers.clone(), t.gen.layers.clone());
        let recs: Vec<_> = (0..3).map(|_| t.train_step().unwrap()).collect();
        assert_eq!(t.disc.layers, d0);
        assert_eq!(t.gen.layers, g0);
        for w in recs.windows(2) {
            assert!((w[1].p - w[0].p).abs() <= 0.001 + 1e-15);
        }
    }

    #[test]
    fn real_and_fake_statistics_stay_separate() {
        let mut t = Trainer::new(small(4)).unwrap();
        for _ in 0..4 {
            t.train_step().unwrap();
        }
        for s in t.disc.norm_states() {
            let c = s.counters();
            assert_eq!(c.real_passes, 4);
            // one fake pass in the discriminator step, one in the generator step
            assert_eq!(c.fake_passes, 8);
            assert_eq!(c.max_rows_per_pass, 16);
        }
    }

    #[test]
    fn plain_discriminator_trains() {
        let c = TrainConfig {
            variant: None,
            ..small(3)
        };
        let recs = train_run(c).unwrap();
        assert!(recs.iter().all(|r| r.p == 0.0 && r.reg == 0.0));
    }
}
