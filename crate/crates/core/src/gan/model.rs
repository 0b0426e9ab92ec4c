use rand::{Rng, RngCore};

use super::GanError;
use crate::diagnostics::{Critic, CriticOutput, DiagError};
use crate::norm::{
    chain_layer_forward, Frozen, LayerContext, NormParams, NormState, Phase, StatsMode, Variant,
};
use crate::tensor::{Graph, Tensor, Var};

/// Affine map `x·W + b` with `W` stored in×out.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Uniform weights in `±sqrt(6 / ((1 + slope²)·fan_in))`, zero bias.
    pub fn init<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self, GanError> {
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
        Ok(Self {
            w: Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng)?,
            b: Tensor::zeros(&[1, fan_out])?,
        })
    }

    fn apply(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, GanError> {
        let xw = g.matmul(x, w)?;
        Ok(g.add(xw, b)?)
    }
}

/// How hidden features are laid out when they reach a normalization layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureShape {
    /// B×d.
    #[default]
    Flat,
    /// B×(d/(h·w))×h×w.
    Spatial { h: usize, w: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorSpec {
    pub input_dim: usize,
    /// Output width of every linear layer. The last one must be 1.
    pub layer_widths: Vec<usize>,
    pub leaky_slope: f64,
    /// Normalization after every hidden linear layer, if any.
    pub norm: Option<Variant>,
    /// Overrides the variant's default statistics mode.
    pub mode: Option<StatsMode>,
    pub feature_shape: FeatureShape,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            input_dim: 2,
            layer_widths: vec![64, 64, 1],
            leaky_slope: 0.2,
            norm: Some(Variant::Chain),
            mode: None,
            feature_shape: FeatureShape::Flat,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<(), GanError> {
        let bad = |m: String| Err(GanError::InvalidConfig(m));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        match self.layer_widths.last() {
            Some(1) => {}
            _ => {
                return bad(format!(
                    "last layer width must be 1, got {:?}",
                    self.layer_widths
                ))
            }
        }
        if self.layer_widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky slope {} not in [0, 1)", self.leaky_slope));
        }
        if let (Some(v), Some(StatsMode::Running)) = (self.norm, self.mode) {
            if !v.supports_running() {
                return bad(format!("{v} has no running-statistics mode"));
            }
        }
        if let FeatureShape::Spatial { h, w } = self.feature_shape {
            let hidden = &self.layer_widths[..self.layer_widths.len() - 1];
            if h == 0 || w == 0 || hidden.iter().any(|d| d % (h * w) != 0) {
                return bad(format!("hidden widths {hidden:?} not divisible by {h}x{w}"));
            }
        }
        Ok(())
    }
}

/// Graph nodes of one discriminator evaluation.
#[derive(Debug, Clone)]
pub struct DiscForward {
    /// Scores, B×1.
    pub out: Var,
    /// Normalized hidden features before the activation, one per hidden layer.
    pub probes: Vec<Var>,
    /// Zero-mean penalties of the normalization layers.
    pub regs: Vec<Var>,
    pub traces: Vec<Frozen>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub layers: Vec<Linear>,
    pub norms: Vec<Option<NormState>>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        spec: DiscriminatorSpec,
        params: NormParams,
        rng: &mut R,
    ) -> Result<Self, GanError> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let mut fan_in = spec.input_dim;
        let hidden = spec.layer_widths.len() - 1;
        for (i, &width) in spec.layer_widths.iter().enumerate() {
            layers.push(Linear::init(fan_in, width, spec.leaky_slope, rng)?);
            fan_in = width;
            if i == hidden {
                continue;
            }
            let norm = match spec.norm {
                Some(v) => {
                    let channels = match spec.feature_shape {
                        FeatureShape::Flat => width,
                        FeatureShape::Spatial { h, w } => width / (h * w),
                    };
                    let mut s = NormState::new(v, channels, params)?.with_key(i as u64);
                    if let Some(mode) = spec.mode {
                        s = s.with_mode(mode)?;
                    }
                    Some(s)
                }
                None => None,
            };
            norms.push(norm);
        }
        Ok(Self {
            spec,
            layers,
            norms,
        })
    }

    /// Weight and bias of every layer as graph leaves, interleaved
    /// `[w₀, b₀, w₁, b₁, …]`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        let mut vars = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            let (w, b) = if trainable {
                (g.param(l.w.clone()), g.param(l.b.clone()))
            } else {
                (g.constant(l.w.clone()), g.constant(l.b.clone()))
            };
            vars.push(w);
            vars.push(b);
        }
        vars
    }

    pub fn forward(
        &mut self,
        g: &mut Graph,
        params: &[Var],
        x: Var,
        phase: Phase,
        rng: &mut dyn RngCore,
    ) -> Result<DiscForward, GanError> {
        let batch = g.value(x).shape()[0];
        let last = self.layers.len() - 1;
        let mut h = x;
        let mut fwd = DiscForward {
            out: x,
            probes: Vec::new(),
            regs: Vec::new(),
            traces: Vec::new(),
        };
        for i in 0..=last {
            h = Linear::apply(g, h, params[2 * i], params[2 * i + 1])?;
            if i == last {
                break;
            }
            if let Some(state) = self.norms[i].as_mut() {
                let width = self.spec.layer_widths[i];
                let y = match self.spec.feature_shape {
                    FeatureShape::Flat => h,
                    FeatureShape::Spatial { h: sh, w: sw } => {
                        g.reshape(h, &[batch, width / (sh * sw), sh, sw])?
                    }
                };
                let lo = chain_layer_forward(
                    g,
                    y,
                    state,
                    LayerContext {
                        phase,
                        rng: &mut *rng,
                        frozen: None,
                    },
                )?;
                h = match self.spec.feature_shape {
                    FeatureShape::Flat => lo.out,
                    FeatureShape::Spatial { .. } => g.reshape(lo.out, &[batch, width])?,
                };
                fwd.regs.extend(lo.reg);
                fwd.traces.push(lo.trace);
            }
            fwd.probes.push(h);
            h = g.leaky_relu(h, self.spec.leaky_slope)?;
        }
        fwd.out = h;
        Ok(fwd)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn norm_states(&self) -> impl Iterator<Item = &NormState> {
        self.norms.iter().flatten()
    }

    pub fn norm_states_mut(&mut self) -> impl Iterator<Item = &mut NormState> {
        self.norms.iter_mut().flatten()
    }

    /// `p` of the first normalization layer; all layers share one controller.
    pub fn p(&self) -> f64 {
        self.norm_states().next().map_or(0.0, NormState::p)
    }

    /// Pulls the backward statistics accumulated on `g` into the layers.
    pub fn absorb(&mut self, g: &Graph) {
        for s in self.norm_states_mut() {
            s.absorb_backward(g);
        }
    }

    /// A critic view of the discriminator in evaluation mode.
    pub fn eval_critic<'a>(&'a mut self, rng: &'a mut dyn RngCore) -> EvalCritic<'a> {
        EvalCritic { d: self, rng }
    }
}

pub struct EvalCritic<'a> {
    d: &'a mut Discriminator,
    rng: &'a mut dyn RngCore,
}

impl Critic for EvalCritic<'_> {
    fn critic(&mut self, g: &mut Graph, x: Var) -> Result<CriticOutput, DiagError> {
        let params = self.d.bind(g, true);
        let fwd = self
            .d
            .forward(g, &params, x, Phase::Eval, &mut *self.rng)
            .map_err(|e| match e {
                GanError::Tensor(t) => DiagError::Tensor(t),
                GanError::Norm(n) => DiagError::Norm(n),
                GanError::Diag(d) => d,
                other => DiagError::InvalidArgument(other.to_string()),
            })?;
        Ok(CriticOutput {
            out: fwd.out,
            weights: params.iter().step_by(2).copied().collect(),
            probes: fwd.probes,
        })
    }
}

/// Leaky-ReLU MLP from latent codes to points, without normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub layers: Vec<Linear>,
    pub leaky_slope: f64,
}

impl Generator {
    /// `hidden` widths, then a linear output of width `out_dim`.
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self, GanError> {
        if latent_dim == 0 || out_dim == 0 || hidden.contains(&0) {
            return Err(GanError::InvalidConfig(
                "generator widths must be positive".into(),
            ));
        }
        let slope = 0.2;
        let mut layers = Vec::new();
        let mut fan_in = latent_dim;
        for &w in hidden.iter().chain([&out_dim]) {
            layers.push(Linear::init(fan_in, w, slope, rng)?);
            fan_in = w;
        }
        Ok(Self {
            layers,
            leaky_slope: slope,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        let mut vars = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            if trainable {
                vars.push(g.param(l.w.clone()));
                vars.push(g.param(l.b.clone()));
            } else {
                vars.push(g.constant(l.w.clone()));
                vars.push(g.constant(l.b.clone()));
            }
        }
        vars
    }

    pub fn forward(&self, g: &mut Graph, params: &[Var], z: Var) -> Result<Var, GanError> {
        let last = self.layers.len() - 1;
        let mut h = z;
        for i in 0..=last {
            h = Linear::apply(g, h, params[2 * i], params[2 * i + 1])?;
            if i < last {
                h = g.leaky_relu(h, self.leaky_slope)?;
            }
        }
        Ok(h)
    }

    /// Samples without recording gradients.
    pub fn sample(&self, z: &Tensor) -> Result<Tensor, GanError> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, &params, zv)?;
        Ok(g.value(out).clone())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update; `grads[i]` belongs to `params[i]`, `None` meaning
    /// a zero gradient.
    pub fn step(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Option<&Tensor>],
    ) -> Result<(), GanError> {
        if params.len() != grads.len() {
            return Err(GanError::InvalidConfig(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (param, grad)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = param.data().to_vec();
            for j in 0..data.len() {
                let gj = grad.map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            *param = Tensor::new(param.shape().to_vec(), data)?;
        }
        Ok(())
    }
}
