//! From-scratch multilayer perceptron regressing metric samples to a
//! positive-definite matrix function `M(x, x_d, theta_hat)`.
//!
//! The network outputs the packed lower-triangular factor `L`; the metric is
//! `out_scale^2 L L^T + eps_pd I`, positive definite by construction for
//! every input. Training is plain SGD with momentum, deterministic per seed.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::control::Metric;
use crate::dynamics::ParametricSystem;
use crate::lmi::jacobi_eigen;
use crate::synthesis::{
    sample_ancm_metric_warm, sample_ncm_metric_warm, Dataset, MetricSample, MetricWarmStart,
    SynthesisConfig, SynthesisError,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("training loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("checkpoint parse error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

#[derive(Debug, Clone)]
struct Dense {
    w: DMatrix<f64>,
    b: DVector<f64>,
    act: Activation,
}

impl Dense {
    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.w * x;
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        if self.act == Activation::Tanh {
            z.apply(|v| *v = v.tanh());
        }
        z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Mean-squared Frobenius error against the sampled metrics.
    Regression,
    /// Sum of ReLU'd worst eigenvalues of the contraction and bound LMIs
    /// evaluated with the network metric.
    ConstraintLoss,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; the Cholesky head makes the loss quartic
    /// in the weights, which plain SGD cannot survive unclipped.
    pub grad_clip: f64,
    pub seed: u64,
    pub mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch: 32,
            lr: 5e-3,
            lr_decay: 0.997,
            momentum: 0.9,
            grad_clip: 5.0,
            seed: 7,
            mode: LossMode::Regression,
        }
    }
}

/// MLP mapping `(x, x_d, theta_hat)` to a symmetric positive-definite
/// matrix.
pub struct MetricNet {
    n: usize,
    p: usize,
    layers: Vec<Dense>,
    eps_pd: f64,
    out_scale: f64,
    in_center: DVector<f64>,
    in_scale: DVector<f64>,
    train_lo: DVector<f64>,
    train_hi: DVector<f64>,
    seed: u64,
    extrapolations: AtomicU64,
}

impl Clone for MetricNet {
    fn clone(&self) -> Self {
        MetricNet {
            n: self.n,
            p: self.p,
            layers: self.layers.clone(),
            eps_pd: self.eps_pd,
            out_scale: self.out_scale,
            in_center: self.in_center.clone(),
            in_scale: self.in_scale.clone(),
            train_lo: self.train_lo.clone(),
            train_hi: self.train_hi.clone(),
            seed: self.seed,
            extrapolations: AtomicU64::new(self.extrapolations.load(Ordering::Relaxed)),
        }
    }
}

impl MetricNet {
    /// Fresh network with `depth` tanh hidden layers of `width` neurons.
    pub fn new(n: usize, p: usize, depth: usize, width: usize, seed: u64) -> Self {
        assert!(depth >= 1 && width >= 1);
        let input = 2 * n + p;
        let output = n * (n + 1) / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(depth + 1);
        let mut fan_in = input;
        for _ in 0..depth {
            layers.push(Self::init_layer(&mut rng, width, fan_in, Activation::Tanh));
            fan_in = width;
        }
        layers.push(Self::init_layer(&mut rng, output, fan_in, Activation::Linear));
        MetricNet {
            n,
            p,
            layers,
            eps_pd: 1e-4,
            out_scale: 1.0,
            in_center: DVector::zeros(input),
            in_scale: DVector::from_element(input, 1.0),
            train_lo: DVector::from_element(input, f64::NEG_INFINITY),
            train_hi: DVector::from_element(input, f64::INFINITY),
            seed,
            extrapolations: AtomicU64::new(0),
        }
    }

    fn init_layer(rng: &mut ChaCha8Rng, out: usize, inp: usize, act: Activation) -> Dense {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        // Small nonzero biases: an exactly-zero output is a saddle of the
        // L L^T head.
        Dense {
            w: DMatrix::from_fn(out, inp, |_, _| rng.gen_range(-limit..limit)),
            b: DVector::from_fn(out, |_, _| rng.gen_range(-0.1 * limit..0.1 * limit)),
            act,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn theta_dim(&self) -> usize {
        self.p
    }

    pub fn eps_pd(&self) -> f64 {
        self.eps_pd
    }

    pub fn out_scale(&self) -> f64 {
        self.out_scale
    }

    /// Number of evaluations that fell outside the training box.
    pub fn extrapolation_count(&self) -> u64 {
        self.extrapolations.load(Ordering::Relaxed)
    }

    fn pack_input(
        &self,
        x: &DVector<f64>,
        x_d: &DVector<f64>,
        theta_hat: Option<&DVector<f64>>,
    ) -> DVector<f64> {
        let mut z = DVector::zeros(2 * self.n + self.p);
        z.rows_mut(0, self.n).copy_from(x);
        z.rows_mut(self.n, self.n).copy_from(x_d);
        if self.p > 0 {
            let th = theta_hat.expect("network was trained with a parameter input");
            assert_eq!(th.len(), self.p);
            z.rows_mut(2 * self.n, self.p).copy_from(th);
        }
        z
    }

    fn normalize(&self, raw: &DVector<f64>) -> DVector<f64> {
        let mut z = raw - &self.in_center;
        z.component_div_assign(&self.in_scale);
        z
    }

    /// Raw network output (packed Cholesky entries) for a batch of
    /// normalized inputs, keeping the per-layer activations for backprop.
    fn forward_trace(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let out = layer.forward(acts.last().unwrap());
            acts.push(out);
        }
        acts
    }

    fn chol_from_packed(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n;
        let mut l = DMatrix::zeros(n, n);
        let mut at = 0;
        for i in 0..n {
            for j in 0..=i {
                l[(i, j)] = y[at];
                at += 1;
            }
        }
        l
    }

    fn metric_from_packed(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let l = self.chol_from_packed(y);
        let mut m = &l * l.transpose() * (self.out_scale * self.out_scale);
        for i in 0..self.n {
            m[(i, i)] += self.eps_pd;
        }
        m
    }

    /// Symmetric positive-definite metric at one input.
    pub fn forward_metric(
        &self,
        x: &DVector<f64>,
        x_d: &DVector<f64>,
        theta_hat: Option<&DVector<f64>>,
    ) -> DMatrix<f64> {
        let raw = self.pack_input(x, x_d, theta_hat);
        let inside = raw
            .iter()
            .zip(self.train_lo.iter().zip(self.train_hi.iter()))
            .all(|(&v, (&lo, &hi))| v >= lo && v <= hi);
        if !inside {
            self.extrapolations.fetch_add(1, Ordering::Relaxed);
        }
        let z = self.normalize(&raw);
        let cols = DMatrix::from_column_slice(z.len(), 1, z.as_slice());
        let acts = self.forward_trace(&cols);
        let y = acts.last().unwrap().column(0).into_owned();
        self.metric_from_packed(&y)
    }

    fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }
}

impl Metric for MetricNet {
    fn eval(
        &self,
        x: &DVector<f64>,
        x_d: &DVector<f64>,
        theta_hat: Option<&DVector<f64>>,
    ) -> DMatrix<f64> {
        self.forward_metric(x, x_d, theta_hat)
    }
}

struct Gradients {
    w: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
}

impl Gradients {
    fn zeros_like(net: &MetricNet) -> Self {
        Gradients {
            w: net.layers.iter().map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols())).collect(),
            b: net.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
        }
    }
}

/// Inputs packed column-wise plus per-sample targets.
struct Prepared {
    inputs: DMatrix<f64>,
    targets: Vec<DMatrix<f64>>,
}

fn prepare(net: &MetricNet, dataset: &[MetricSample]) -> Prepared {
    let cols = dataset.len();
    let mut inputs = DMatrix::zeros(2 * net.n + net.p, cols);
    let mut targets = Vec::with_capacity(cols);
    for (c, s) in dataset.iter().enumerate() {
        let raw = net.pack_input(&s.x, &s.x_d, s.theta_hat.as_ref());
        inputs.set_column(c, &net.normalize(&raw));
        targets.push(s.metric());
    }
    Prepared { inputs, targets }
}

/// Per-sample loss and gradient with respect to the packed output vector.
fn head_loss_grad(
    net: &MetricNet,
    y: &DVector<f64>,
    target: &DMatrix<f64>,
) -> (f64, DVector<f64>) {
    let l = net.chol_from_packed(y);
    let s2 = net.out_scale * net.out_scale;
    let mut m = &l * l.transpose() * s2;
    for i in 0..net.n {
        m[(i, i)] += net.eps_pd;
    }
    let err = &m - target;
    let loss = err.norm_squared();
    // d loss / d L = 4 s^2 (E L), restricted to the packed triangle.
    let gl = (&err * &l) * (4.0 * s2);
    let mut gy = DVector::zeros(y.len());
    let mut at = 0;
    for i in 0..net.n {
        for j in 0..=i {
            gy[at] = gl[(i, j)];
            at += 1;
        }
    }
    (loss, gy)
}

/// Data for constraint-as-loss training: per-sample SDC and input matrices
/// in metric form, and the metric eigenvalue band.
pub struct ConstraintCtx {
    pub a_mats: Vec<DMatrix<f64>>,
    pub brb_mats: Vec<DMatrix<f64>>,
    pub alpha: f64,
    pub m_lower: f64,
    pub m_upper: f64,
}

impl ConstraintCtx {
    /// Builds the per-sample `(A, B R^-1 B^T)` pairs at the sample points.
    pub fn from_dataset(
        psys: &ParametricSystem,
        cfg: &SynthesisConfig,
        dataset: &[MetricSample],
    ) -> Result<Self, SynthesisError> {
        let r_inv = cfg
            .r_weight
            .clone()
            .try_inverse()
            .expect("R is positive definite");
        let mut a_mats = Vec::with_capacity(dataset.len());
        let mut brb_mats = Vec::with_capacity(dataset.len());
        let mut nu_max = 0.0f64;
        let mut omega_hi = 0.0f64;
        for s in dataset {
            let sys = match &s.theta_hat {
                Some(t) => psys.system_at(t),
                None => psys.base.clone(),
            };
            let a = crate::dynamics::sdc_matrix(&sys, &s.x, &s.x_d, &cfg.u_d, cfg.quad_order)?;
            let b = sys.b_at(&s.x);
            brb_mats.push(&b * &r_inv * b.transpose());
            a_mats.push(a);
            nu_max = nu_max.max(s.nu);
            omega_hi = omega_hi.max(s.chi / s.nu);
        }
        Ok(ConstraintCtx {
            a_mats,
            brb_mats,
            alpha: cfg.rate(),
            m_lower: 1.0 / omega_hi,
            m_upper: nu_max,
        })
    }
}

/// Penalty and output-gradient for the constraint-as-loss mode at one
/// sample: ReLU'd worst eigenvalues of the contraction LMI in metric form
/// plus the eigenvalue band.
fn constraint_loss_grad(
    net: &MetricNet,
    y: &DVector<f64>,
    a: &DMatrix<f64>,
    brb: &DMatrix<f64>,
    alpha: f64,
    m_lower: f64,
    m_upper: f64,
) -> (f64, DVector<f64>) {
    let n = net.n;
    let l = net.chol_from_packed(y);
    let s2 = net.out_scale * net.out_scale;
    let mut m = &l * l.transpose() * s2;
    for i in 0..n {
        m[(i, i)] += net.eps_pd;
    }

    let mut loss = 0.0;
    let mut g_m = DMatrix::<f64>::zeros(n, n);

    // 2 sym(M A) - 2 M BRB M + 2 alpha M <= 0.
    let ma = &m * a;
    let s_contr = (&ma + ma.transpose()) - (&m * brb * &m) * 2.0 + &m * (2.0 * alpha);
    let eig = jacobi_eigen(&s_contr).expect("symmetric");
    let (mut idx, mut lam) = (0usize, f64::NEG_INFINITY);
    for (i, &v) in eig.values.iter().enumerate() {
        if v > lam {
            lam = v;
            idx = i;
        }
    }
    if lam > 0.0 {
        loss += lam;
        let v = eig.vectors.column(idx).into_owned();
        let av = a * &v;
        let pmv = brb * (&m * &v);
        let sym = |u: &DVector<f64>, w: &DVector<f64>| {
            (u * w.transpose() + w * u.transpose()) * 0.5
        };
        g_m += sym(&av, &v) * 2.0 - sym(&pmv, &v) * 4.0 + (&v * v.transpose()) * (2.0 * alpha);
    }

    // m_lower I <= M <= m_upper I.
    let mut hi = m.clone();
    for i in 0..n {
        hi[(i, i)] -= m_upper;
    }
    let eig = jacobi_eigen(&hi).expect("symmetric");
    let (mut idx, mut lam) = (0usize, f64::NEG_INFINITY);
    for (i, &v) in eig.values.iter().enumerate() {
        if v > lam {
            lam = v;
            idx = i;
        }
    }
    if lam > 0.0 {
        loss += lam;
        let v = eig.vectors.column(idx).into_owned();
        g_m += &v * v.transpose();
    }
    let mut lo = -m.clone();
    for i in 0..n {
        lo[(i, i)] += m_lower;
    }
    let eig = jacobi_eigen(&lo).expect("symmetric");
    let (mut idx, mut lam) = (0usize, f64::NEG_INFINITY);
    for (i, &v) in eig.values.iter().enumerate() {
        if v > lam {
            lam = v;
            idx = i;
        }
    }
    if lam > 0.0 {
        loss += lam;
        let v = eig.vectors.column(idx).into_owned();
        g_m -= &v * v.transpose();
    }

    // Chain through M = s^2 L L^T + eps I.
    let gl = ((&g_m + g_m.transpose()) * &l) * s2;
    let mut gy = DVector::zeros(y.len());
    let mut at = 0;
    for i in 0..n {
        for j in 0..=i {
            gy[at] = gl[(i, j)];
            at += 1;
        }
    }
    (loss, gy)
}

fn backprop(
    net: &MetricNet,
    acts: &[DMatrix<f64>],
    mut delta: DMatrix<f64>,
    grads: &mut Gradients,
) {
    for (li, layer) in net.layers.iter().enumerate().rev() {
        if layer.act == Activation::Tanh {
            let out = &acts[li + 1];
            for (d, o) in delta.iter_mut().zip(out.iter()) {
                *d *= 1.0 - o * o;
            }
        }
        grads.w[li] += &delta * acts[li].transpose();
        for col in delta.column_iter() {
            grads.b[li] += col;
        }
        if li > 0 {
            delta = layer.w.transpose() * delta;
        }
    }
}

fn batch_loss_grads(
    net: &MetricNet,
    prepared: &Prepared,
    indices: &[usize],
    ctx: Option<&ConstraintCtx>,
) -> (f64, Gradients) {
    let cols = indices.len();
    let mut batch = DMatrix::zeros(prepared.inputs.nrows(), cols);
    for (c, &i) in indices.iter().enumerate() {
        batch.set_column(c, &prepared.inputs.column(i));
    }
    let acts = net.forward_trace(&batch);
    let y_out = acts.last().unwrap();

    let mut total = 0.0;
    let mut delta = DMatrix::zeros(y_out.nrows(), cols);
    for (c, &i) in indices.iter().enumerate() {
        let y = y_out.column(c).into_owned();
        let (loss, gy) = match ctx {
            None => head_loss_grad(net, &y, &prepared.targets[i]),
            Some(ctx) => constraint_loss_grad(
                net,
                &y,
                &ctx.a_mats[i],
                &ctx.brb_mats[i],
                ctx.alpha,
                ctx.m_lower,
                ctx.m_upper,
            ),
        };
        total += loss;
        delta.set_column(c, &(gy / cols as f64));
    }
    let mut grads = Gradients::zeros_like(net);
    backprop(net, &acts, delta, &mut grads);
    (total / cols as f64, grads)
}

/// Fits the network by seeded SGD with momentum; returns the per-epoch
/// training loss curve.
pub fn train(
    net: &mut MetricNet,
    dataset: &[MetricSample],
    cfg: &TrainConfig,
    ctx: Option<&ConstraintCtx>,
) -> Result<Vec<f64>, NetError> {
    if dataset.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    if cfg.mode == LossMode::ConstraintLoss {
        assert!(ctx.is_some(), "constraint-loss mode needs sample matrices");
    }
    let use_ctx = if cfg.mode == LossMode::ConstraintLoss {
        ctx
    } else {
        None
    };

    // Normalization and output scale from the data.
    fit_normalization(net, dataset);

    let prepared = prepare(net, dataset);
    let n_samples = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut vel = Gradients::zeros_like(net);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.lr;

    for epoch in 0..cfg.epochs {
        // Fisher-Yates with the seeded stream.
        for i in (1..n_samples).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let (loss, mut grads) = batch_loss_grads(net, &prepared, chunk, use_ctx);
            epoch_loss += loss;
            batches += 1;
            let gnorm = {
                let mut s = 0.0;
                for li in 0..net.layers.len() {
                    s += grads.w[li].norm_squared() + grads.b[li].norm_squared();
                }
                s.sqrt()
            };
            if gnorm > cfg.grad_clip {
                let scale = cfg.grad_clip / gnorm;
                for li in 0..net.layers.len() {
                    grads.w[li] *= scale;
                    grads.b[li] *= scale;
                }
            }
            for li in 0..net.layers.len() {
                vel.w[li] = &vel.w[li] * cfg.momentum - &grads.w[li] * lr;
                vel.b[li] = &vel.b[li] * cfg.momentum - &grads.b[li] * lr;
                net.layers[li].w += &vel.w[li];
                net.layers[li].b += &vel.b[li];
            }
        }
        let mean = epoch_loss / batches as f64;
        if !mean.is_finite() {
            return Err(NetError::DivergedLoss { epoch });
        }
        curve.push(mean);
        lr *= cfg.lr_decay;
    }
    Ok(curve)
}

fn fit_normalization(net: &mut MetricNet, dataset: &[MetricSample]) {
    let dim = 2 * net.n + net.p;
    let mut lo = DVector::from_element(dim, f64::INFINITY);
    let mut hi = DVector::from_element(dim, f64::NEG_INFINITY);
    let mut lam_max = 0.0f64;
    for s in dataset {
        let raw = net.pack_input(&s.x, &s.x_d, s.theta_hat.as_ref());
        for i in 0..dim {
            lo[i] = lo[i].min(raw[i]);
            hi[i] = hi[i].max(raw[i]);
        }
        lam_max = lam_max.max(s.nu); // M <= nu I per sample
    }
    net.train_lo = lo.clone();
    net.train_hi = hi.clone();
    net.in_center = (&lo + &hi) * 0.5;
    net.in_scale = DVector::from_fn(dim, |i, _| ((hi[i] - lo[i]) * 0.5).max(1e-9));
    // Cholesky entries of targets are bounded by sqrt(lambda_max).
    net.out_scale = lam_max.max(net.eps_pd).sqrt();
}

/// Max relative disagreement between backprop and central finite
/// differences over a seeded subset of weights.
pub fn grad_check(net: &MetricNet, dataset: &[MetricSample], seed: u64) -> f64 {
    let prepared = prepare(net, dataset);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let (_, grads) = batch_loss_grads(net, &prepared, &indices, None);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    let n_probe = 30.min(net.n_params());
    for _ in 0..n_probe {
        let li = rng.gen_range(0..net.layers.len());
        let is_w = rng.gen_bool(0.9);
        let (r, c) = if is_w {
            (
                rng.gen_range(0..net.layers[li].w.nrows()),
                rng.gen_range(0..net.layers[li].w.ncols()),
            )
        } else {
            (rng.gen_range(0..net.layers[li].b.len()), 0)
        };
        let h = 1e-6;
        let orig = if is_w {
            probe.layers[li].w[(r, c)]
        } else {
            probe.layers[li].b[r]
        };
        let mut eval = |v: f64, probe: &mut MetricNet| {
            if is_w {
                probe.layers[li].w[(r, c)] = v;
            } else {
                probe.layers[li].b[r] = v;
            }
            let acts = probe.forward_trace(&prepared.inputs);
            let y_out = acts.last().unwrap();
            let mut total = 0.0;
            for (cidx, t) in prepared.targets.iter().enumerate() {
                let y = y_out.column(cidx).into_owned();
                total += head_loss_grad(probe, &y, t).0;
            }
            total / prepared.targets.len() as f64
        };
        let fp = eval(orig + h, &mut probe);
        let fm = eval(orig - h, &mut probe);
        eval(orig, &mut probe);
        let fd = (fp - fm) / (2.0 * h);
        let bp = if is_w {
            grads.w[li][(r, c)]
        } else {
            grads.b[li][r]
        };
        let rel = (fd - bp).abs() / (fd.abs().max(bp.abs()) + 1e-10);
        worst = worst.max(rel);
    }
    worst
}

/// Sup-norm learning errors against solver-exact metrics and metric
/// derivatives on held-out points, with the resulting effective rate.
#[derive(Debug, Clone)]
pub struct LearningErrorReport {
    /// `max ||Mnet - M||` over validation.
    pub eps_m: f64,
    /// `max ||dMnet_q - dM_q||` over validation, `q` in `{x, x_d}`.
    pub eps_dm: f64,
    /// `max(eps_m, eps_dm)`.
    pub eps_ell: f64,
    /// `alpha - rho_bar b_bar^2 eps_ell sqrt(chi)`.
    pub alpha_ncm: f64,
    pub alpha_ncm_positive: bool,
    pub chi_used: f64,
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Measures the empirical sup errors on validation samples. Derivative
/// targets come from central differences of fresh solver samples; this is a
/// lower bound of the true sup over the compact set.
pub fn estimate_learning_error(
    net: &MetricNet,
    psys: &ParametricSystem,
    cfg: &SynthesisConfig,
    validation: &[MetricSample],
    rho_bar: f64,
    b_bar: f64,
    chi: f64,
) -> Result<LearningErrorReport, NetError> {
    if validation.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    let fd = 1e-4;
    let mut eps_m = 0.0f64;
    let mut eps_dm = 0.0f64;
    let mut warm: Option<MetricWarmStart> = None;

    let exact = |x: &DVector<f64>,
                 xd: &DVector<f64>,
                 th: Option<&DVector<f64>>,
                 warm: &mut Option<MetricWarmStart>|
     -> Result<DMatrix<f64>, SynthesisError> {
        let s = match th {
            Some(t) => sample_ancm_metric_warm(psys, cfg, x, xd, t, warm)?,
            None => sample_ncm_metric_warm(&psys.base, cfg, x, xd, warm)?,
        };
        Ok(s.metric())
    };

    for s in validation {
        let th = s.theta_hat.as_ref();
        let m_net = net.forward_metric(&s.x, &s.x_d, th);
        let m_exact = s.metric();
        let diff = &m_net - &m_exact;
        eps_m = eps_m.max(spectral_norm(&diff));

        let e = &s.x - &s.x_d;
        let (dn_x, dn_xd) =
            crate::control::metric_derivatives(net, &s.x, &s.x_d, th, &e, 1e-5);

        // Exact derivative rows by central differences of solver samples.
        let n = s.x.len();
        let mut dx_exact = DMatrix::zeros(n, n);
        let mut dxd_exact = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut xp = s.x.clone();
            let mut xm = s.x.clone();
            xp[i] += fd;
            xm[i] -= fd;
            let dm = (exact(&xp, &s.x_d, th, &mut warm)? - exact(&xm, &s.x_d, th, &mut warm)?)
                / (2.0 * fd);
            dx_exact.set_row(i, &((dm * &e) * 0.5).transpose());

            let mut xdp = s.x_d.clone();
            let mut xdm = s.x_d.clone();
            xdp[i] += fd;
            xdm[i] -= fd;
            let dm = (exact(&s.x, &xdp, th, &mut warm)? - exact(&s.x, &xdm, th, &mut warm)?)
                / (2.0 * fd);
            dxd_exact.set_row(i, &((dm * &e) * 0.5).transpose());
        }
        eps_dm = eps_dm.max(spectral_norm(&(dn_x - dx_exact)));
        eps_dm = eps_dm.max(spectral_norm(&(dn_xd - dxd_exact)));
    }

    let eps_ell = eps_m.max(eps_dm);
    let alpha_ncm = cfg.alpha - rho_bar * b_bar * b_bar * eps_ell * chi.sqrt();
    Ok(LearningErrorReport {
        eps_m,
        eps_dm,
        eps_ell,
        alpha_ncm,
        alpha_ncm_positive: alpha_ncm > 0.0,
        chi_used: chi,
    })
}

impl MetricNet {
    /// Plain-text checkpoint: header plus weight rows at 17 significant
    /// digits, in layer order.
    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        use std::fmt::Write as _;
        let mut out = String::new();
        writeln!(out, "metric-net v1").unwrap();
        writeln!(out, "n {}", self.n).unwrap();
        writeln!(out, "p {}", self.p).unwrap();
        writeln!(out, "eps_pd {:.16e}", self.eps_pd).unwrap();
        writeln!(out, "out_scale {:.16e}", self.out_scale).unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        writeln!(out, "layers {}", self.layers.len()).unwrap();
        let vec_line = |out: &mut String, name: &str, v: &DVector<f64>| {
            write!(out, "{name}").unwrap();
            for x in v.iter() {
                write!(out, " {:.16e}", x).unwrap();
            }
            writeln!(out).unwrap();
        };
        vec_line(&mut out, "in_center", &self.in_center);
        vec_line(&mut out, "in_scale", &self.in_scale);
        vec_line(&mut out, "train_lo", &self.train_lo);
        vec_line(&mut out, "train_hi", &self.train_hi);
        for l in &self.layers {
            writeln!(
                out,
                "layer {} {} {}",
                l.w.nrows(),
                l.w.ncols(),
                match l.act {
                    Activation::Tanh => "tanh",
                    Activation::Linear => "linear",
                }
            )
            .unwrap();
            for i in 0..l.w.nrows() {
                write!(out, "w").unwrap();
                for j in 0..l.w.ncols() {
                    write!(out, " {:.16e}", l.w[(i, j)]).unwrap();
                }
                writeln!(out).unwrap();
            }
            vec_line(&mut out, "b", &l.b);
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MetricNet, NetError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let bad = |m: &str| NetError::Checkpoint(m.to_string());
        let mut next = |tag: &str| -> Result<Vec<String>, NetError> {
            let line = lines.next().ok_or_else(|| bad("truncated"))?;
            let mut parts = line.split_whitespace();
            let head = parts.next().ok_or_else(|| bad("empty line"))?;
            if head != tag {
                return Err(bad(&format!("expected '{tag}', got '{head}'")));
            }
            Ok(parts.map(|s| s.to_string()).collect())
        };
        let _ = next("metric-net")?;
        let n: usize = next("n")?[0].parse().map_err(|_| bad("n"))?;
        let p: usize = next("p")?[0].parse().map_err(|_| bad("p"))?;
        let eps_pd: f64 = next("eps_pd")?[0].parse().map_err(|_| bad("eps_pd"))?;
        let out_scale: f64 = next("out_scale")?[0].parse().map_err(|_| bad("out_scale"))?;
        let seed: u64 = next("seed")?[0].parse().map_err(|_| bad("seed"))?;
        let n_layers: usize = next("layers")?[0].parse().map_err(|_| bad("layers"))?;
        let parse_vec = |vals: Vec<String>| -> Result<DVector<f64>, NetError> {
            let xs: Result<Vec<f64>, _> = vals.iter().map(|v| v.parse::<f64>()).collect();
            Ok(DVector::from_vec(xs.map_err(|_| bad("float"))?))
        };
        let in_center = parse_vec(next("in_center")?)?;
        let in_scale = parse_vec(next("in_scale")?)?;
        let train_lo = parse_vec(next("train_lo")?)?;
        let train_hi = parse_vec(next("train_hi")?)?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let spec = next("layer")?;
            let rows: usize = spec[0].parse().map_err(|_| bad("rows"))?;
            let cols: usize = spec[1].parse().map_err(|_| bad("cols"))?;
            let act = match spec[2].as_str() {
                "tanh" => Activation::Tanh,
                "linear" => Activation::Linear,
                other => return Err(bad(&format!("activation '{other}'"))),
            };
            let mut w = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                let row = parse_vec(next("w")?)?;
                if row.len() != cols {
                    return Err(bad("row length"));
                }
                w.set_row(i, &row.transpose());
            }
            let b = parse_vec(next("b")?)?;
            layers.push(Dense { w, b, act });
        }
        Ok(MetricNet {
            n,
            p,
            layers,
            eps_pd,
            out_scale,
            in_center,
            in_scale,
            train_lo,
            train_hi,
            seed,
            extrapolations: AtomicU64::new(0),
        })
    }
}
