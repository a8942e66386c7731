//! Divergences between a predictive distribution P over K classes and the
//! uniform distribution U, in nats.
//!
//! * `Kl` : forward KL(U‖P) = −ln K − (1/K) Σ ln p_k, unbounded as any p_k → 0.
//! * `Rkl`: reverse KL(P‖U) = ln K − H(P), bounded by ln K.
//! * `Js` : Jensen–Shannon ½KL(U‖M) + ½KL(P‖M) with M = (U+P)/2, bounded by ln 2.
//!
//! Probabilities are floored at [`PROB_FLOOR`] inside the forward KL so the
//! value stays finite for one-hot predictions.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::log_softmax;

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    Kl,
    Rkl,
    Js,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 3] = [DivergenceKind::Kl, DivergenceKind::Rkl, DivergenceKind::Js];

    /// Supremum over all distributions, if finite.
    pub fn upper_bound(self, classes: usize) -> Option<f64> {
        match self {
            DivergenceKind::Kl => None,
            DivergenceKind::Rkl => Some((classes as f64).ln()),
            DivergenceKind::Js => Some(LN_2),
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::Rkl => "rkl",
            DivergenceKind::Js => "js",
        })
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(DivergenceKind::Kl),
            "rkl" => Ok(DivergenceKind::Rkl),
            "js" | "jsd" => Ok(DivergenceKind::Js),
            other => Err(Error::Config(format!("unknown divergence {other}"))),
        }
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.len() < 2 {
        return Err(Error::Domain("need at least two classes".into()));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain("probabilities must be finite and non-negative".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!("probabilities sum to {s}, not 1")));
    }
    Ok(())
}

/// Divergence of a probability vector from the uniform distribution.
pub fn divergence_to_uniform(kind: DivergenceKind, p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    let logp: Vec<f64> = p.iter().map(|&v| v.ln()).collect();
    Ok(from_log_probs(kind, p, &logp))
}

/// Same as [`divergence_to_uniform`] but from unnormalised logits, computed
/// in the log domain.
pub fn divergence_from_logits(kind: DivergenceKind, logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let logp: Vec<f64> = logits.iter().map(|l| l - lse).collect();
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    from_log_probs(kind, &p, &logp)
}

fn from_log_probs(kind: DivergenceKind, p: &[f64], logp: &[f64]) -> f64 {
    let k = p.len() as f64;
    let ln_k = k.ln();
    match kind {
        DivergenceKind::Kl => {
            let floor = PROB_FLOOR.ln();
            -ln_k - logp.iter().map(|&l| l.max(floor)).sum::<f64>() / k
        }
        DivergenceKind::Rkl => {
            let neg_entropy: f64 = p
                .iter()
                .zip(logp)
                .filter(|(&pi, _)| pi > 0.0)
                .map(|(&pi, &li)| pi * li)
                .sum();
            (ln_k + neg_entropy).max(0.0)
        }
        DivergenceKind::Js => {
            let u = 1.0 / k;
            let mut acc = 0.0;
            for (&pi, &li) in p.iter().zip(logp) {
                let m = 0.5 * (u + pi);
                let ln_m = m.ln();
                acc += 0.5 * u * (-ln_k - ln_m);
                if pi > 0.0 {
                    acc += 0.5 * pi * (li - ln_m);
                }
            }
            acc.clamp(0.0, LN_2)
        }
    }
}

/// Two-class divergence curve over P = (p, 1−p) for p on a symmetric grid in
/// [1e-6, 1 − 1e-6]. Odd resolutions include p = ½ exactly.
pub fn divergence_curve(kind: DivergenceKind, resolution: usize) -> Result<Vec<(f64, f64)>> {
    if resolution < 2 {
        return Err(Error::Config("curve resolution must be at least 2".into()));
    }
    let eps = 1e-6;
    let half_span = 0.5 - eps;
    (0..resolution)
        .map(|i| {
            let t = 2.0 * i as f64 / (resolution - 1) as f64 - 1.0;
            let p = 0.5 + half_span * t;
            let v = divergence_to_uniform(kind, &[p, 1.0 - p])?;
            Ok((p, v))
        })
        .collect()
}

/// Per-position divergence of `softmax(logits)` along `dim` from uniform.
/// The class dimension is removed from the output. Differentiable.
pub fn divergence_tensor(kind: DivergenceKind, logits: &Tensor, dim: usize) -> Result<Tensor> {
    let k = logits.dim(dim)?;
    let ln_k = (k as f64).ln();
    let logp = log_softmax(logits, dim)?;
    let out = match kind {
        DivergenceKind::Kl => {
            let clamped = logp.maximum(PROB_FLOOR.ln())?;
            clamped.mean(dim)?.affine(-1.0, -ln_k)?
        }
        DivergenceKind::Rkl => {
            let p = logp.exp()?;
            (p * &logp)?.sum(dim)?.affine(1.0, ln_k)?
        }
        DivergenceKind::Js => {
            let u = 1.0 / k as f64;
            let p = logp.exp()?;
            let ln_m = p.affine(0.5, 0.5 * u)?.log()?;
            // ½ Σ u (ln u − ln m) + ½ Σ p (ln p − ln m)
            let to_u = ln_m.affine(-1.0, -ln_k)?.sum(dim)?.affine(0.5 * u, 0.0)?;
            let to_p = (p * (logp - &ln_m)?)?.sum(dim)?.affine(0.5, 0.0)?;
            (to_u + to_p)?
        }
    };
    Ok(out)
}

/// Convenience wrapper for `(N, K)` logits.
pub fn divergence_rows(kind: DivergenceKind, logits: &Tensor) -> Result<Tensor> {
    let dim = logits.dims().len() - 1;
    divergence_tensor(kind, logits, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Direct evaluation of the textbook definitions, written independently of
    /// the log-domain implementation above.
    pub(crate) fn oracle(kind: DivergenceKind, p: &[f64]) -> f64 {
        let k = p.len() as f64;
        let u = vec![1.0 / k; p.len()];
        let kl = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| if x == 0.0 { 0.0 } else { x * (x / y).ln() })
                .sum()
        };
        match kind {
            DivergenceKind::Kl => {
                let pf: Vec<f64> = p.iter().map(|&x| x.max(PROB_FLOOR)).collect();
                kl(&u, &pf)
            }
            DivergenceKind::Rkl => kl(p, &u),
            DivergenceKind::Js => {
                let m: Vec<f64> = u.iter().zip(p).map(|(a, b)| 0.5 * (a + b)).collect();
                0.5 * kl(&u, &m) + 0.5 * kl(p, &m)
            }
        }
    }

    #[test]
    fn uniform_has_zero_divergence() {
        for k in 2..8 {
            let p = vec![1.0 / k as f64; k];
            for kind in DivergenceKind::ALL {
                assert!(divergence_to_uniform(kind, &p).unwrap().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_two_class_js() {
        let expected = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln())
            + 0.5 * (4.0f64 / 3.0).ln();
        let js = divergence_to_uniform(DivergenceKind::Js, &[1.0, 0.0]).unwrap();
        assert!((js - expected).abs() < 1e-12);
        assert!((js - 0.2157).abs() < 1e-4);
    }

    #[test]
    fn skewed_two_class_values() {
        let p = [0.9, 0.1];
        let kl = divergence_to_uniform(DivergenceKind::Kl, &p).unwrap();
        let rkl = divergence_to_uniform(DivergenceKind::Rkl, &p).unwrap();
        let js = divergence_to_uniform(DivergenceKind::Js, &p).unwrap();
        assert!((kl - 0.5108).abs() < 1e-4, "{kl}");
        assert!((rkl - 0.3681).abs() < 1e-4, "{rkl}");
        // oracle value for JS, frozen
        assert!((js - oracle(DivergenceKind::Js, &p)).abs() < 1e-12);
        assert!((js - 0.10174).abs() < 1e-4, "{js}");
    }

    #[test]
    fn unnormalised_input_is_rejected() {
        assert!(matches!(
            divergence_to_uniform(DivergenceKind::Js, &[0.5, 0.6]),
            Err(Error::Domain(_))
        ));
        assert!(divergence_to_uniform(DivergenceKind::Js, &[1.2, -0.2]).is_err());
    }

    #[test]
    fn curves() {
        let js = divergence_curve(DivergenceKind::Js, 201).unwrap();
        assert!(js.iter().all(|&(_, v)| v <= LN_2));
        for kind in DivergenceKind::ALL {
            let c = divergence_curve(kind, 201).unwrap();
            let mid = c[100];
            assert_eq!(mid.0, 0.5);
            assert_eq!(mid.1, 0.0);
            for i in 0..c.len() {
                assert!((c[i].1 - c[c.len() - 1 - i].1).abs() < 1e-9);
                assert!(c[i].1 >= 0.0);
            }
        }
        let kl = divergence_curve(DivergenceKind::Kl, 11).unwrap();
        assert!((kl.last().unwrap().0 - (1.0 - 1e-6)).abs() < 1e-15);
        assert!(kl.last().unwrap().1 > 5.0);
        assert!(divergence_curve(DivergenceKind::Kl, 1).is_err());
    }

    #[test]
    fn rkl_is_log_k_minus_entropy() {
        let p = [0.5, 0.25, 0.125, 0.125];
        let h: f64 = -p.iter().map(|x: &f64| x * x.ln()).sum::<f64>();
        let rkl = divergence_to_uniform(DivergenceKind::Rkl, &p).unwrap();
        assert!((rkl - (4f64.ln() - h)).abs() < 1e-12);
    }

    #[test]
    fn near_one_hot_kl_grows_while_js_stays_bounded() {
        let mut prev = 0.0;
        for e in [1e-2, 1e-4, 1e-6, 1e-8, 1e-10] {
            let p = [1.0 - e, e];
            let kl = divergence_to_uniform(DivergenceKind::Kl, &p).unwrap();
            let js = divergence_to_uniform(DivergenceKind::Js, &p).unwrap();
            assert!(kl > prev);
            assert!(js <= LN_2);
            prev = kl;
        }
        assert!(prev > 10.0 * LN_2);
    }

    #[test]
    fn tensor_matches_host() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-4.0..4.0)).collect();
        let t = Tensor::from_vec(logits.clone(), (5, 4), &Device::Cpu).unwrap();
        for kind in DivergenceKind::ALL {
            let got = divergence_rows(kind, &t).unwrap().to_vec1::<f64>().unwrap();
            for r in 0..5 {
                let want = divergence_from_logits(kind, &logits[r * 4..r * 4 + 4]);
                assert!((got[r] - want).abs() < 1e-12, "{kind} {} {}", got[r], want);
            }
        }
    }

    #[test]
    fn tensor_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for kind in DivergenceKind::ALL {
            let k = 5;
            let base: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v = Var::from_vec(base.clone(), (1, k), &Device::Cpu).unwrap();
            let y = divergence_rows(kind, v.as_tensor()).unwrap().sum_all().unwrap();
            let g = y.backward().unwrap();
            let grad = g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let h = 1e-6;
            for i in 0..k {
                let mut a = base.clone();
                let mut b = base.clone();
                a[i] += h;
                b[i] -= h;
                let fd = (divergence_from_logits(kind, &a) - divergence_from_logits(kind, &b)) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(1e-3);
                assert!(rel < 1e-4, "{kind} i={i}: fd {fd} vs {}", grad[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn js_bounded_and_symmetric(raw in proptest::collection::vec(0.0f64..1.0, 2..12)) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 1e-3);
            let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let js = divergence_to_uniform(DivergenceKind::Js, &p).unwrap();
            prop_assert!((0.0..=LN_2).contains(&js));
            // symmetry: JS(U, P) computed with the roles swapped
            let k = p.len() as f64;
            let u = vec![1.0 / k; p.len()];
            let m: Vec<f64> = u.iter().zip(&p).map(|(a, b)| 0.5 * (a + b)).collect();
            let kl = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).map(|(&x, &y)| if x == 0.0 { 0.0 } else { x * (x / y).ln() }).sum()
            };
            let swapped = 0.5 * kl(&p, &m) + 0.5 * kl(&u, &m);
            prop_assert!((js - swapped).abs() < 1e-12);
            let rkl = divergence_to_uniform(DivergenceKind::Rkl, &p).unwrap();
            prop_assert!(rkl <= k.ln() + 1e-12);
        }
    }
}
