//! Per-cluster change classifiers.
//!
//! Two families: a nearest-neighbour classifier over the negatives with a
//! Gaussian distance-to-probability map, and a kernel SVM trained by SMO
//! whose outputs are Platt-calibrated on five-fold cross-validated decision
//! values. Training is bit-deterministic given the examples, config and
//! fold seed, which is what lets a compressed cluster be retrained exactly.

pub mod kernel;
pub mod platt;
pub mod smo;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::Descriptor;

pub use kernel::{eval_kernel, Kernel, KernelKind, KernelParams};
pub use platt::Platt;
pub use smo::{dual_objective, solve_dual, DualSolution, SmoParams};

pub const DEFAULT_SIGMA_D: f64 = 32.0;
pub const DEFAULT_C_REG: f64 = 1.0;
pub const DEFAULT_TOL: f64 = 1e-3;
pub const CV_FOLDS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Nn,
    Svm,
}

impl ClassifierKind {
    pub fn code(self) -> u8 {
        match self {
            ClassifierKind::Nn => 0,
            ClassifierKind::Svm => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ClassifierKind::Nn),
            1 => Ok(ClassifierKind::Svm),
            other => Err(Error::Config(format!("unknown classifier code {other}"))),
        }
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nn" => Ok(ClassifierKind::Nn),
            "svm" => Ok(ClassifierKind::Svm),
            other => Err(Error::Config(format!("unknown classifier '{other}'"))),
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::Nn => "nn",
            ClassifierKind::Svm => "svm",
        })
    }
}

/// Everything needed to (re)train a cluster classifier from its examples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub kernel: KernelKind,
    pub params: KernelParams,
    pub c_reg: f64,
    pub tol: f64,
    pub sigma_d: f64,
    /// Seed for the cross-validation fold split.
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn for_width(descriptor_bits: u32) -> Self {
        ClassifierConfig {
            kind: ClassifierKind::Svm,
            kernel: KernelKind::Rbf,
            params: KernelParams::for_width(descriptor_bits),
            c_reg: DEFAULT_C_REG,
            tol: DEFAULT_TOL,
            sigma_d: DEFAULT_SIGMA_D,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_reg > 0.0) || !(self.tol > 0.0) || !(self.sigma_d > 0.0) {
            return Err(Error::Config("C_reg, tol and sigma_d must be positive".into()));
        }
        if self.kernel == KernelKind::Poly && self.params.degree == 0 {
            return Err(Error::Config("polynomial degree must be at least 1".into()));
        }
        Ok(())
    }

    fn svm(&self) -> SvmConfig {
        SvmConfig {
            kernel: Kernel::new(self.kernel, self.params),
            c_reg: self.c_reg,
            tol: self.tol,
            cv_seed: self.seed,
            max_iter: None,
        }
    }
}

/// Nearest-neighbour change classifier: `p = 1 - exp(-d^2 / sigma_d^2)` with
/// `d` the Hamming distance to the closest negative.
#[derive(Clone, Debug, PartialEq)]
pub struct NnClassifier {
    negatives: Vec<Descriptor>,
    sigma_d: f64,
}

impl NnClassifier {
    pub fn new(negatives: Vec<Descriptor>, sigma_d: f64) -> Result<Self> {
        if negatives.is_empty() {
            return Err(Error::Training("NN classifier needs at least one negative".into()));
        }
        if !(sigma_d > 0.0) {
            return Err(Error::Config("sigma_d must be positive".into()));
        }
        Ok(NnClassifier { negatives, sigma_d })
    }

    pub fn nearest_distance(&self, q: &Descriptor) -> u32 {
        self.negatives.iter().map(|n| n.distance(q)).min().expect("non-empty")
    }

    pub fn prob_from_distance(&self, d: u32) -> f64 {
        let d = d as f64;
        1.0 - (-(d * d) / (self.sigma_d * self.sigma_d)).exp()
    }

    pub fn predict(&self, q: &Descriptor) -> f64 {
        self.prob_from_distance(self.nearest_distance(q))
    }

    pub fn negatives(&self) -> &[Descriptor] {
        &self.negatives
    }

    pub fn sigma_d(&self) -> f64 {
        self.sigma_d
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvmConfig {
    pub kernel: Kernel,
    pub c_reg: f64,
    pub tol: f64,
    pub cv_seed: u64,
    pub max_iter: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmClassifier {
    kernel: Kernel,
    support: Vec<Descriptor>,
    /// Signed dual coefficients `alpha_i y_i`, in support-vector order.
    coef: Vec<f64>,
    bias: f64,
    platt: Platt,
    c_reg: f64,
    objective: f64,
}

impl SvmClassifier {
    /// `f(q) = sum_i alpha_i y_i K(x_i, q) + b`, summed in support-vector order.
    pub fn decision(&self, q: &Descriptor) -> f64 {
        let mut acc = 0.0;
        for (sv, c) in self.support.iter().zip(&self.coef) {
            acc += c * self.kernel.eval(sv, q);
        }
        acc + self.bias
    }

    pub fn predict(&self, q: &Descriptor) -> f64 {
        self.platt.prob(self.decision(q))
    }

    pub fn support_vectors(&self) -> &[Descriptor] {
        &self.support
    }

    pub fn dual_coef(&self) -> &[f64] {
        &self.coef
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn platt(&self) -> Platt {
        self.platt
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn c_reg(&self) -> f64 {
        self.c_reg
    }

    pub fn dual_objective(&self) -> f64 {
        self.objective
    }
}

/// Dense Gram matrix, rows computed in parallel.
pub fn gram_matrix(kernel: &Kernel, xs: &[Descriptor]) -> Vec<f64> {
    let n = xs.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| xs.iter().map(|x| kernel.eval(&xs[i], x)).collect())
        .collect();
    rows.concat()
}

fn sub_gram(gram: &[f64], n: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * idx.len());
    for &i in idx {
        for &j in idx {
            out.push(gram[i * n + j]);
        }
    }
    out
}

/// Stratified fold ids: each class is shuffled with the seed and dealt
/// round-robin into `folds` folds.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0; labels.len()];
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (rank, i) in idx.into_iter().enumerate() {
            out[i] = rank % folds;
        }
    }
    out
}

/// Trains a soft-margin kernel SVM (change = +1) and calibrates it.
pub fn train_svm(positives: &[Descriptor], negatives: &[Descriptor], cfg: &SvmConfig) -> Result<SvmClassifier> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Training(format!(
            "SVM needs both classes ({} positives, {} negatives)",
            positives.len(),
            negatives.len()
        )));
    }
    let xs: Vec<Descriptor> = positives.iter().chain(negatives).cloned().collect();
    let labels: Vec<bool> = (0..xs.len()).map(|i| i < positives.len()).collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let n = xs.len();
    let gram = gram_matrix(&cfg.kernel, &xs);
    let params = SmoParams {
        c: cfg.c_reg,
        tol: cfg.tol,
        max_iter: cfg.max_iter,
    };
    let sol = solve_dual(&gram, &y, &params)?;

    // held-out decision values for calibration
    let fold = stratified_folds(&labels, CV_FOLDS, cfg.cv_seed);
    let mut dec = vec![0.0; n];
    for f in 0..CV_FOLDS {
        let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
        if test.is_empty() {
            continue;
        }
        let npos = train.iter().filter(|&&i| labels[i]).count();
        let nneg = train.len() - npos;
        if npos == 0 || nneg == 0 {
            let v = if npos > 0 { 1.0 } else if nneg > 0 { -1.0 } else { 0.0 };
            for &t in &test {
                dec[t] = v;
            }
            continue;
        }
        let sub_y: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let fs = solve_dual(&sub_gram(&gram, n, &train), &sub_y, &params)?;
        for &t in &test {
            let mut acc = 0.0;
            for (k, &i) in train.iter().enumerate() {
                if fs.alpha[k] != 0.0 {
                    acc += fs.alpha[k] * sub_y[k] * gram[i * n + t];
                }
            }
            dec[t] = acc + fs.bias;
        }
    }
    let platt = Platt::fit(&dec, &labels);

    let mut support = Vec::new();
    let mut coef = Vec::new();
    for i in 0..n {
        if sol.alpha[i] > 0.0 {
            support.push(xs[i].clone());
            coef.push(sol.alpha[i] * y[i]);
        }
    }
    Ok(SvmClassifier {
        kernel: cfg.kernel,
        support,
        coef,
        bias: sol.bias,
        platt,
        c_reg: cfg.c_reg,
        objective: sol.objective,
    })
}

/// A trained (decompressed) cluster classifier.
#[derive(Clone, Debug, PartialEq)]
pub enum LiveClassifier {
    Nn(NnClassifier),
    Svm(SvmClassifier),
}

impl LiveClassifier {
    /// Trains per `cfg`; falls back to NN whenever there are no positives.
    pub fn train(positives: &[Descriptor], negatives: &[Descriptor], cfg: &ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.kind == ClassifierKind::Nn || positives.is_empty() {
            return Ok(LiveClassifier::Nn(NnClassifier::new(negatives.to_vec(), cfg.sigma_d)?));
        }
        Ok(LiveClassifier::Svm(train_svm(positives, negatives, &cfg.svm())?))
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            LiveClassifier::Nn(_) => ClassifierKind::Nn,
            LiveClassifier::Svm(_) => ClassifierKind::Svm,
        }
    }
}

/// Probability in `[0, 1]` that `q` does not belong to the learned cluster.
pub fn predict_change_prob(c: &LiveClassifier, q: &Descriptor) -> f64 {
    match c {
        LiveClassifier::Nn(nn) => nn.predict(q),
        LiveClassifier::Svm(svm) => svm.predict(q),
    }
}
