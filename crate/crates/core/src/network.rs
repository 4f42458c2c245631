//! One-hidden-layer regression networks as M-estimators.
//!
//! The prediction function is `eta(x) = a^T sigma(W x + c) + beta` with `h`
//! hidden units, trained by full-batch Adam on squared error. The fitted
//! network is wrapped as a [`FittedMEstimator`] so the IJ machinery applies
//! unchanged; the per-observation Hessian is assembled analytically from
//! the layer structure rather than by differencing.
//!
//! Parameters are packed as `[W row-major, c, a, beta]`, so
//! `p = h (d + 2) + 1`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::{Dataset, SeedSpec};
use crate::error::{Error, Result};
use crate::mest::{FittedMEstimator, MObjective};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

impl Activation {
    /// Value and first two derivatives at `t`. ReLU reports a zero second
    /// derivative everywhere and a subgradient of zero at the kink.
    #[inline]
    fn eval(self, t: f64) -> (f64, f64, f64) {
        match self {
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-t).exp());
                let sp = s * (1.0 - s);
                (s, sp, sp * (1.0 - 2.0 * s))
            }
            Activation::Relu => {
                if t > 0.0 {
                    (t, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
        }
    }
}

/// How the starting parameters are drawn.
#[derive(Debug, Clone, Copy)]
pub enum NetInit {
    /// Glorot draw from a dedicated seed, independent of the fit seed.
    Fixed(u64),
    /// Glorot draw from the seed passed to [`fit_network`].
    FromSeed,
}

#[derive(Debug, Clone, Copy)]
pub struct NetConfig {
    pub hidden_units: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub learning_rate: f64,
    pub init: NetInit,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden_units: 5,
            activation: Activation::Sigmoid,
            epochs: 1000,
            learning_rate: 0.01,
            init: NetInit::FromSeed,
        }
    }
}

impl NetConfig {
    fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 {
            return Err(Error::InvalidArgument("hidden_units must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// The squared-error objective of a one-hidden-layer network, phrased for
/// maximization: `m(theta, z) = -(y - eta(theta, x))^2`.
pub struct OneHiddenLayer {
    hidden: usize,
    dim: usize,
    activation: Activation,
}

impl OneHiddenLayer {
    pub fn new(hidden: usize, dim: usize, activation: Activation) -> Self {
        OneHiddenLayer { hidden, dim, activation }
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    #[inline]
    fn w_idx(&self, k: usize, j: usize) -> usize {
        k * self.dim + j
    }

    #[inline]
    fn c_idx(&self, k: usize) -> usize {
        self.hidden * self.dim + k
    }

    #[inline]
    fn a_idx(&self, k: usize) -> usize {
        self.hidden * (self.dim + 1) + k
    }

    #[inline]
    fn b_idx(&self) -> usize {
        self.hidden * (self.dim + 2)
    }

    /// Pre-activations `t_k = sum_j W_{k,j} x_j + c_k`.
    fn preact(&self, theta: &DVector<f64>, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for k in 0..self.hidden {
            let mut t = theta[self.c_idx(k)];
            for j in 0..self.dim {
                t += theta[self.w_idx(k, j)] * x[j];
            }
            out.push(t);
        }
    }

    fn eta(&self, theta: &DVector<f64>, x: &[f64]) -> f64 {
        let mut v = theta[self.b_idx()];
        for k in 0..self.hidden {
            let mut t = theta[self.c_idx(k)];
            for j in 0..self.dim {
                t += theta[self.w_idx(k, j)] * x[j];
            }
            v += theta[self.a_idx(k)] * self.activation.eval(t).0;
        }
        v
    }

    /// Gradient of `eta` in `theta`, written into `out`.
    fn eta_grad(&self, theta: &DVector<f64>, x: &[f64], out: &mut DVector<f64>) {
        for k in 0..self.hidden {
            let mut t = theta[self.c_idx(k)];
            for j in 0..self.dim {
                t += theta[self.w_idx(k, j)] * x[j];
            }
            let (s, sp, _) = self.activation.eval(t);
            let ak = theta[self.a_idx(k)];
            for j in 0..self.dim {
                out[self.w_idx(k, j)] = ak * sp * x[j];
            }
            out[self.c_idx(k)] = ak * sp;
            out[self.a_idx(k)] = s;
        }
        out[self.b_idx()] = 1.0;
    }
}

impl MObjective for OneHiddenLayer {
    fn param_dim(&self) -> usize {
        self.hidden * (self.dim + 2) + 1
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn nonsmooth(&self) -> bool {
        self.activation == Activation::Relu
    }

    fn value(&self, theta: &DVector<f64>, data: &Dataset, row: usize) -> f64 {
        let x = data.row(row);
        let r = data.y()[row] - self.eta(theta, &x);
        -r * r
    }

    fn score_into(
        &self,
        theta: &DVector<f64>,
        data: &Dataset,
        row: usize,
        out: &mut DVector<f64>,
    ) {
        let x = data.row(row);
        let r = data.y()[row] - self.eta(theta, &x);
        self.eta_grad(theta, &x, out);
        *out *= 2.0 * r;
    }

    fn hess_into(
        &self,
        theta: &DVector<f64>,
        data: &Dataset,
        row: usize,
        out: &mut DMatrix<f64>,
    ) {
        let x = data.row(row);
        let y = data.y()[row];
        let eta = self.eta(theta, &x);
        let r = y - eta;
        let p = self.param_dim();
        let mut g = DVector::zeros(p);
        self.eta_grad(theta, &x, &mut g);

        // hess m = -2 g g^T + 2 r hess_eta. hess_eta is block sparse: units
        // do not interact and the output bias row is zero.
        out.fill(0.0);
        out.ger(-2.0, &g, &g, 1.0);

        let two_r = 2.0 * r;
        for k in 0..self.hidden {
            let mut t = theta[self.c_idx(k)];
            for j in 0..self.dim {
                t += theta[self.w_idx(k, j)] * x[j];
            }
            let (_, sp, spp) = self.activation.eval(t);
            let ak = theta[self.a_idx(k)];
            let ck = self.c_idx(k);
            let akx = self.a_idx(k);

            for j in 0..self.dim {
                let wj = self.w_idx(k, j);
                for l in 0..self.dim {
                    out[(wj, self.w_idx(k, l))] += two_r * ak * spp * x[j] * x[l];
                }
                let wc = two_r * ak * spp * x[j];
                out[(wj, ck)] += wc;
                out[(ck, wj)] += wc;
                let wa = two_r * sp * x[j];
                out[(wj, akx)] += wa;
                out[(akx, wj)] += wa;
            }
            out[(ck, ck)] += two_r * ak * spp;
            let ca = two_r * sp;
            out[(ck, akx)] += ca;
            out[(akx, ck)] += ca;
        }
    }

    fn predict(&self, theta: &DVector<f64>, x: &[f64]) -> f64 {
        self.eta(theta, x)
    }

    fn predict_grad_into(&self, theta: &DVector<f64>, x: &[f64], out: &mut DVector<f64>) {
        self.eta_grad(theta, x, out);
    }
}

/// Train a one-hidden-layer network by full-batch Adam on squared error and
/// wrap it for IJ computation. Weights are Glorot-initialized, biases start
/// at zero.
pub fn fit_network(
    data: &Dataset,
    cfg: &NetConfig,
    seed: SeedSpec,
) -> Result<FittedMEstimator<OneHiddenLayer>> {
    cfg.validate()?;
    let d = data.dim();
    if d == 0 {
        return Err(Error::Empty("covariates"));
    }
    let h = cfg.hidden_units;
    let obj = OneHiddenLayer::new(h, d, cfg.activation);
    let p = obj.param_dim();
    let n = data.n();

    let mut rng = match cfg.init {
        NetInit::Fixed(s) => SeedSpec::root(s).rng(),
        NetInit::FromSeed => seed.rng(),
    };
    let mut theta = DVector::zeros(p);
    let w_bound = (6.0 / (d + h) as f64).sqrt();
    for k in 0..h {
        for j in 0..d {
            theta[obj.w_idx(k, j)] = rng.gen_range(-w_bound..w_bound);
        }
    }
    let a_bound = (6.0 / (h + 1) as f64).sqrt();
    for k in 0..h {
        theta[obj.a_idx(k)] = rng.gen_range(-a_bound..a_bound);
    }

    // Adam moments.
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m1: DVector<f64> = DVector::zeros(p);
    let mut m2: DVector<f64> = DVector::zeros(p);
    let mut grad: DVector<f64> = DVector::zeros(p);
    let mut g_eta: DVector<f64> = DVector::zeros(p);
    let mut preact = Vec::with_capacity(h);
    let mut x = vec![0.0; d];

    for epoch in 1..=cfg.epochs {
        // Mean squared-error gradient: -(2/n) sum r_i grad_eta_i.
        grad.fill(0.0);
        for i in 0..n {
            data.copy_row(i, &mut x);
            obj.preact(&theta, &x, &mut preact);
            let mut eta = theta[obj.b_idx()];
            for (k, &t) in preact.iter().enumerate() {
                eta += theta[obj.a_idx(k)] * cfg.activation.eval(t).0;
            }
            let r = data.y()[i] - eta;
            for (k, &t) in preact.iter().enumerate() {
                let (s, sp, _) = cfg.activation.eval(t);
                let ak = theta[obj.a_idx(k)];
                for j in 0..d {
                    g_eta[obj.w_idx(k, j)] = ak * sp * x[j];
                }
                g_eta[obj.c_idx(k)] = ak * sp;
                g_eta[obj.a_idx(k)] = s;
            }
            g_eta[obj.b_idx()] = 1.0;
            grad.axpy(-2.0 * r / n as f64, &g_eta, 1.0);
        }

        let bc1 = 1.0 - beta1.powi(epoch as i32);
        let bc2 = 1.0 - beta2.powi(epoch as i32);
        for k in 0..p {
            let g = grad[k];
            m1[k] = beta1 * m1[k] + (1.0 - beta1) * g;
            m2[k] = beta2 * m2[k] + (1.0 - beta2) * g * g;
            theta[k] -= cfg.learning_rate * (m1[k] / bc1) / ((m2[k] / bc2).sqrt() + eps);
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "parameters left the finite range at epoch {epoch}"
            )));
        }
    }

    FittedMEstimator::new(obj, theta, data)
}
