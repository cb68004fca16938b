use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::Descriptor;

/// Kernel family. Descriptors are treated as 0/1 coordinate vectors, so
/// `<x, y> = popcount(x & y)` and `||x - y||^2 = hamming(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Sigmoid,
    #[serde(alias = "polynomial")]
    Poly,
    Rbf,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [KernelKind::Linear, KernelKind::Sigmoid, KernelKind::Poly, KernelKind::Rbf];

    pub fn code(self) -> u8 {
        match self {
            KernelKind::Linear => 0,
            KernelKind::Sigmoid => 1,
            KernelKind::Poly => 2,
            KernelKind::Rbf => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(KernelKind::Linear),
            1 => Ok(KernelKind::Sigmoid),
            2 => Ok(KernelKind::Poly),
            3 => Ok(KernelKind::Rbf),
            other => Err(Error::Config(format!("unknown kernel code {other}"))),
        }
    }
}

impl FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(KernelKind::Linear),
            "sigmoid" => Ok(KernelKind::Sigmoid),
            "poly" | "polynomial" => Ok(KernelKind::Poly),
            "rbf" => Ok(KernelKind::Rbf),
            other => Err(Error::Config(format!("unknown kernel '{other}'"))),
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Linear => "linear",
            KernelKind::Sigmoid => "sigmoid",
            KernelKind::Poly => "poly",
            KernelKind::Rbf => "rbf",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub gamma: f64,
    pub coef0: f64,
    pub degree: u32,
}

impl KernelParams {
    /// `gamma = 1/D`, `coef0 = 0`, `degree = 3`.
    pub fn for_width(descriptor_bits: u32) -> Self {
        KernelParams {
            gamma: 1.0 / descriptor_bits as f64,
            coef0: 0.0,
            degree: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub kind: KernelKind,
    pub params: KernelParams,
}

impl Kernel {
    pub fn new(kind: KernelKind, params: KernelParams) -> Self {
        Kernel { kind, params }
    }

    #[inline]
    pub fn eval(&self, x: &Descriptor, y: &Descriptor) -> f64 {
        let p = &self.params;
        match self.kind {
            KernelKind::Linear => x.dot(y) as f64,
            KernelKind::Poly => (p.gamma * x.dot(y) as f64 + p.coef0).powi(p.degree as i32),
            KernelKind::Sigmoid => (p.gamma * x.dot(y) as f64 + p.coef0).tanh(),
            KernelKind::Rbf => (-p.gamma * x.distance(y) as f64).exp(),
        }
    }
}

pub fn eval_kernel(kind: KernelKind, params: &KernelParams, x: &Descriptor, y: &Descriptor) -> Result<f64> {
    x.hamming(y)?;
    Ok(Kernel::new(kind, *params).eval(x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Descriptor::random(&mut rng, 256);
        let p = KernelParams::for_width(256);
        assert_eq!(eval_kernel(KernelKind::Rbf, &KernelParams { gamma: 3.7, ..p }, &x, &x).unwrap(), 1.0);
        let ones = Descriptor::ones(256);
        assert_eq!(eval_kernel(KernelKind::Linear, &p, &ones, &ones).unwrap(), 256.0);
        let zeros = Descriptor::zeros(256);
        let poly = KernelParams { gamma: 1.0 / 256.0, coef0: 0.0, degree: 3 };
        assert_eq!(eval_kernel(KernelKind::Poly, &poly, &zeros, &ones).unwrap(), 0.0);
    }

    #[test]
    fn sigmoid_and_rbf_values() {
        let mut a = Descriptor::zeros(256);
        let mut b = Descriptor::zeros(256);
        for i in 0..64 {
            a.flip_bit(i);
        }
        for i in 32..128 {
            b.flip_bit(i);
        }
        // <a,b> = 32, hamming = 32 + 64 = 96
        let p = KernelParams { gamma: 0.01, coef0: 0.5, degree: 2 };
        let sig = eval_kernel(KernelKind::Sigmoid, &p, &a, &b).unwrap();
        assert!((sig - (0.32f64 + 0.5).tanh()).abs() < 1e-15);
        let rbf = eval_kernel(KernelKind::Rbf, &p, &a, &b).unwrap();
        assert!((rbf - (-0.96f64).exp()).abs() < 1e-15);
        let poly = eval_kernel(KernelKind::Poly, &p, &a, &b).unwrap();
        assert!((poly - 0.82f64 * 0.82).abs() < 1e-15);
    }

    #[test]
    fn unknown_kind_is_a_config_error() {
        assert!(matches!(KernelKind::from_code(9), Err(Error::Config(_))));
        assert!(matches!("cubic".parse::<KernelKind>(), Err(Error::Config(_))));
        for k in KernelKind::ALL {
            assert_eq!(KernelKind::from_code(k.code()).unwrap(), k);
            assert_eq!(k.to_string().parse::<KernelKind>().unwrap(), k);
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let p = KernelParams::for_width(256);
        assert!(eval_kernel(KernelKind::Linear, &p, &Descriptor::zeros(256), &Descriptor::zeros(128)).is_err());
    }
}
