//! Bilevel strength learning: a virtual head step on the training batch, exact
//! second-order meta-gradients of a clean-set CE loss with respect to the
//! strength net and the class statistics, then the real step.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::losses::{ce_full, icda_loss_at, icda_terms, LossOutput};
use crate::model::{sgd_step, Forward, LinearHead, Model, SgdConfig, SgdState};
use crate::numerics::{axpy, dot, Matrix, Vector};
use crate::rng::Rng;
use crate::stats::{ClassStats, Covariance};
use crate::strength::{alpha_matrix, extract_characteristics, Characteristics, ClassEma, StrengthMatrix, StrengthNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// η₁, step of the virtual head update.
    pub inner_lr: f64,
    /// η₂, step for Ω, μ and Σ. Zero freezes all three.
    pub meta_lr: f64,
    /// m, meta samples per iteration.
    pub meta_batch: usize,
    /// Size of the meta split per class.
    pub meta_per_class: usize,
    pub ema_decay: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.1,
            meta_lr: 0.1,
            meta_batch: 32,
            meta_per_class: 10,
            ema_decay: 0.1,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::Config("meta.inner_lr must be positive".into()));
        }
        if !(self.meta_lr >= 0.0 && self.meta_lr.is_finite()) {
            return Err(Error::Config("meta.meta_lr must be non-negative".into()));
        }
        if self.meta_batch == 0 || self.meta_per_class == 0 {
            return Err(Error::Config("meta batch and meta split must be non-empty".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay <= 1.0) {
            return Err(Error::Config("meta.ema_decay must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Ω with its step sizes and the characteristic EMA tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    pub net: StrengthNet,
    pub cfg: MetaConfig,
    pub ema: ClassEma,
}

impl MetaState {
    pub fn new(cfg: MetaConfig, classes: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(MetaState {
            net: StrengthNet::init(rng),
            ema: ClassEma::new(classes, cfg.ema_decay),
            cfg,
        })
    }
}

/// Everything the inner problem holds fixed: features from the frozen
/// backbone, statistics, priors, the cosine matrix, λ and β.
#[derive(Clone, Copy, Debug)]
pub struct InnerProblem<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [usize],
    pub stats: &'a ClassStats,
    pub priors: &'a [f64],
    pub alpha: &'a Matrix,
    pub lambda: f64,
    pub beta: f64,
}

impl<'a> InnerProblem<'a> {
    pub fn strengths(&self, scalar: &[f64]) -> StrengthMatrix {
        StrengthMatrix::from_parts(self.alpha.clone(), scalar.to_vec().into())
    }

    pub fn loss(&self, head: &LinearHead, scalar: &[f64]) -> Result<LossOutput> {
        if scalar.len() != self.labels.len() {
            return Err(contract("one strength per sample"));
        }
        icda_loss_at(
            self.features,
            self.labels,
            head,
            self.stats,
            &self.strengths(scalar),
            self.priors,
            self.lambda,
            self.beta,
        )
    }

    pub fn with_stats<'b>(&self, stats: &'b ClassStats) -> InnerProblem<'b>
    where
        'a: 'b,
    {
        InnerProblem { stats, ..*self }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetaBatch<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [usize],
}

/// `head' = head − η₁ ∇_head L̄_s`. Also returns the inner loss output.
pub fn virtual_step(
    head: &LinearHead,
    problem: &InnerProblem,
    scalar: &[f64],
    inner_lr: f64,
) -> Result<(LinearHead, LossOutput)> {
    let out = problem.loss(head, scalar)?;
    let mut next = head.clone();
    next.add_scaled(-inner_lr, &out.head);
    Ok((next, out))
}

/// Plain CE of the meta batch under `head`.
pub fn meta_loss(head: &LinearHead, meta: &MetaBatch) -> Result<LossOutput> {
    if meta.labels.is_empty() {
        return Err(contract("empty meta batch"));
    }
    Ok(ce_full(meta.features, meta.labels, head))
}

/// Derivatives of the post-virtual-step meta loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradients {
    pub meta_loss: f64,
    /// With respect to each α_i.
    pub alpha: Vec<f64>,
    pub means: Vec<Vector>,
    /// Symmetric; diagonal in diagonal mode.
    pub covs: Vec<Covariance>,
}

/// `cov += s · sym(a bᵀ)`.
fn add_sym_outer(cov: &mut Covariance, s: f64, a: &[f64], b: &[f64]) {
    match cov {
        Covariance::Full(m) => {
            m.add_outer(0.5 * s, a, b);
            m.add_outer(0.5 * s, b, a);
        }
        Covariance::Diagonal(d) => {
            for ((v, x), y) in d.iter_mut().zip(a).zip(b) {
                *v += s * x * y;
            }
        }
    }
}

/// Exact meta-gradients through one virtual step.
///
/// With `v_c = ⟨g, ∇_head z_c⟩`, `g` the meta gradient at `head'` and `p` the
/// inner softmax weights, every parameter ψ entering `z` gives
/// `dML/dψ = −(η₁/N) Σ_i Σ_c [p_c (v_c − v̄) dz_c/dψ + p_c dv_c/dψ]`.
pub fn meta_gradients(
    head: &LinearHead,
    problem: &InnerProblem,
    scalar: &[f64],
    meta: &MetaBatch,
    inner_lr: f64,
) -> Result<MetaGradients> {
    let (virt, out) = virtual_step(head, problem, scalar, inner_lr)?;
    let outer = meta_loss(&virt, meta)?;
    let g = &outer.head;
    let strengths = problem.strengths(scalar);
    let terms = icda_terms(
        problem.labels,
        problem.stats,
        &strengths,
        problem.priors,
        problem.lambda,
        problem.beta,
    );
    let n = problem.labels.len();
    let (c, h) = (head.classes(), head.features());
    let mode = problem.stats.mode();
    let scale = -inner_lr / n as f64;
    let lambda = problem.lambda;

    let mut d_alpha = vec![0.0; n];
    let mut d_means = vec![Vector::zeros(h); c];
    let mut d_covs = vec![Covariance::zeros(mode, h); c];
    let mut v = vec![0.0; c];
    let mut live = vec![false; c];
    let mut dws = vec![vec![0.0; h]; c];
    let mut gds = vec![vec![0.0; h]; c];

    for (i, &y) in problem.labels.iter().enumerate() {
        let x = problem.features.row(i);
        let t = &terms[i];
        let p = out.weights.row(i);
        let mut v_bar = 0.0;
        for k in (0..c).filter(|&k| k != y) {
            for d in 0..h {
                dws[k][d] = head.w[(k, d)] - head.w[(y, d)];
                gds[k][d] = g.w[(k, d)] - g.w[(y, d)];
            }
            live[k] = !out.clamped[i * c + k];
            let mut arg = x.to_vec();
            if live[k] {
                if let Some(a) = &t.quad {
                    axpy(1.0, &a.mul_vec(&dws[k]), &mut arg);
                }
                if let Some(l) = &t.linear {
                    axpy(1.0, l.row(k), &mut arg);
                }
            }
            v[k] = dot(&gds[k], &arg) + g.b[k] - g.b[y];
            v_bar += p[k] * v[k];
        }
        let others = || (0..c).filter(move |&k| k != y);

        if problem.beta != 0.0 {
            let s: f64 = others().filter(|&k| live[k]).map(|k| p[k] * (v[k] - v_bar)).sum();
            d_alpha[i] = scale * problem.beta * s;
        }
        if lambda == 0.0 {
            continue;
        }
        let a_hat = strengths.alpha_hat.row(i);
        let mut m_i = Covariance::zeros(mode, h);
        for k in others().filter(|&k| live[k]) {
            let dv = v[k] - v_bar;
            let coef = lambda * a_hat[k] * p[k];
            if coef != 0.0 {
                axpy(scale * coef * dv, &dws[k], &mut d_means[k]);
                axpy(scale * coef, &gds[k], &mut d_means[k]);
            }
            add_sym_outer(&mut m_i, 0.5 * lambda * p[k] * dv, &dws[k], &dws[k]);
            add_sym_outer(&mut m_i, lambda * p[k], &gds[k], &dws[k]);
        }
        d_covs[y].add_scaled(scale, &m_i);
        for j in others() {
            if a_hat[j] != 0.0 {
                d_covs[j].add_scaled(scale * a_hat[j], &m_i);
            }
        }
    }

    Ok(MetaGradients {
        meta_loss: outer.loss,
        alpha: d_alpha,
        means: d_means,
        covs: d_covs,
    })
}

/// `Ω' = Ω − η₂ ∇_Ω ML`, chaining the α gradients through the net.
pub fn meta_update_omega(net: &StrengthNet, zeta: &Matrix, d_alpha: &[f64], meta_lr: f64) -> StrengthNet {
    let mut next = net.clone();
    if meta_lr != 0.0 {
        next.add_scaled(-meta_lr, &net.backward(zeta, d_alpha));
    }
    next
}

/// Gradient step on μ and Σ followed by PSD repair. Counts are unchanged.
pub fn meta_update_stats(stats: &ClassStats, grads: &MetaGradients, meta_lr: f64) -> ClassStats {
    let mut next = stats.clone();
    if meta_lr == 0.0 {
        return next;
    }
    for (mu, d) in next.means.iter_mut().zip(&grads.means) {
        axpy(-meta_lr, d, mu);
    }
    for (cov, d) in next.covs.iter_mut().zip(&grads.covs) {
        cov.add_scaled(-meta_lr, d);
        cov.psd_repair();
    }
    next
}

/// Full backbone and head step on the ICDA loss with the given strengths.
#[allow(clippy::too_many_arguments)]
pub fn real_step(
    model: &mut Model,
    fwd: &Forward,
    problem: &InnerProblem,
    scalar: &[f64],
    sgd: &mut SgdState,
    cfg: &SgdConfig,
    iteration: u64,
) -> Result<LossOutput> {
    let out = problem.loss(&model.head, scalar)?;
    let grad = model.grad_from_parts(&fwd.cache, out.head.clone(), &out.d_features)?;
    sgd_step(model, &grad, sgd, cfg, iteration);
    Ok(out)
}

/// Inputs of one bilevel iteration.
#[derive(Clone, Copy, Debug)]
pub struct MetaInputs<'a> {
    pub x: &'a Matrix,
    pub labels: &'a [usize],
    pub meta_x: &'a Matrix,
    pub meta_labels: &'a [usize],
    pub priors: &'a [f64],
    pub lambda: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaRecord {
    pub meta_loss: f64,
    pub mean_alpha: f64,
    pub lambda: f64,
    /// Inner loss output of the real step.
    pub out: LossOutput,
    pub features: Matrix,
    pub logits: Matrix,
    pub characteristics: Characteristics,
    /// `α_i` used by the real step.
    pub alpha: Vec<f64>,
}

/// One bilevel iteration: statistics update, virtual step, Ω update, μ/Σ
/// update, real step.
#[allow(clippy::too_many_arguments)]
pub fn meta_iteration(
    state: &mut MetaState,
    model: &mut Model,
    sgd: &mut SgdState,
    sgd_cfg: &SgdConfig,
    stats: &mut ClassStats,
    inputs: &MetaInputs,
    iteration: u64,
) -> Result<MetaRecord> {
    if inputs.meta_labels.is_empty() {
        return Err(contract("empty meta batch"));
    }
    let fwd = model.forward(inputs.x);
    stats.update(&fwd.features, inputs.labels)?;
    let chars = extract_characteristics(
        &fwd.features,
        &fwd.logits,
        inputs.labels,
        &model.head,
        inputs.priors,
        &state.ema,
    );
    let zeta = chars.squashed();
    let alpha = alpha_matrix(&fwd.features, &model.head, inputs.labels);
    let meta_features = model.features(inputs.meta_x);
    let meta = MetaBatch {
        features: &meta_features,
        labels: inputs.meta_labels,
    };

    let grads = {
        let problem = InnerProblem {
            features: &fwd.features,
            labels: inputs.labels,
            stats,
            priors: inputs.priors,
            alpha: &alpha,
            lambda: inputs.lambda,
            beta: inputs.beta,
        };
        let scalar = state.net.forward(&zeta);
        meta_gradients(&model.head, &problem, &scalar, &meta, state.cfg.inner_lr)?
    };
    state.net = meta_update_omega(&state.net, &zeta, &grads.alpha, state.cfg.meta_lr);
    *stats = meta_update_stats(stats, &grads, state.cfg.meta_lr);

    let scalar = state.net.forward(&zeta);
    let problem = InnerProblem {
        features: &fwd.features,
        labels: inputs.labels,
        stats,
        priors: inputs.priors,
        alpha: &alpha,
        lambda: inputs.lambda,
        beta: inputs.beta,
    };
    let out = real_step(model, &fwd, &problem, &scalar, sgd, sgd_cfg, iteration)?;
    state.ema.update(&chars.losses, &chars.margins, inputs.labels);
    let mean_alpha = scalar.iter().sum::<f64>() / scalar.len() as f64;
    Ok(MetaRecord {
        meta_loss: grads.meta_loss,
        mean_alpha,
        lambda: inputs.lambda,
        out,
        features: fwd.features,
        logits: fwd.logits,
        characteristics: chars,
        alpha: scalar.into_vec(),
    })
}

/// Full Meta-ICDA training run for one seed. The config must select
/// `meta_icda`; the meta split comes from the dataset pipeline.
pub fn run_meta_icda(cfg: &crate::harness::ExperimentConfig, seed: u64) -> Result<crate::harness::train::RunOutput> {
    if cfg.method != crate::losses::Method::MetaIcda {
        return Err(Error::Config(format!("run_meta_icda called with method {}", cfg.method)));
    }
    crate::harness::run_seed(cfg, seed)
}
