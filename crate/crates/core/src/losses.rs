//! Adversarial and localization losses, as plain functions for reporting and
//! as graph builders for optimization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Scalar, Var};
use crate::raster::{PseudoMask, SoftMask};

/// Clamp applied to every probability before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Saturating,
    #[default]
    Nonsaturating,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_d1: f64,
    pub l_d2: f64,
    pub l_g_adv: f64,
    pub l_loc: f64,
    pub total_g: f64,
}

impl LossReport {
    pub fn new(l_d1: f64, l_d2: f64, l_g_adv: f64, l_loc: f64) -> Self {
        Self { l_d1, l_d2, l_g_adv, l_loc, total_g: l_g_adv + l_loc }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_d1, self.l_d2, self.l_g_adv, self.l_loc, self.total_g].iter().all(|v| v.is_finite())
    }
}

/// Diagnostic sum of every component.
pub fn combined_objective(r: &LossReport) -> f64 {
    r.l_g_adv + r.l_loc + r.l_d1 + r.l_d2
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn finite(name: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Loss(format!("{name} is empty")));
    }
    match xs.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::Loss(format!("{name} contains {v}"))),
        None => Ok(()),
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sum::<f64>() / n
}

/// `-[ln d(real) + ln(1 - d(fake))]`, each term batch-meaned.
pub fn loss_disc(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    finite("real probabilities", d_real)?;
    finite("fake probabilities", d_fake)?;
    Ok(-(mean(d_real.iter().map(|&p| clamp(p).ln())) + mean(d_fake.iter().map(|&p| (1.0 - clamp(p)).ln()))))
}

/// Loss of the positive discriminator: real `I_R` against the positive fake.
pub fn loss_d1(d1_real: &[f64], d1_fake: &[f64]) -> Result<f64> {
    loss_disc(d1_real, d1_fake)
}

/// Loss of the negative discriminator: real context tile against the negative fake.
pub fn loss_d2(d2_real: &[f64], d2_fake: &[f64]) -> Result<f64> {
    loss_disc(d2_real, d2_fake)
}

/// Mean binary cross entropy of `y_hat` against the pseudo label, capped at `rho`.
pub fn loss_loc(y_hat: &SoftMask, y_tilde: &PseudoMask, rho: f64) -> Result<f64> {
    if y_hat.height() != y_tilde.height() || y_hat.width() != y_tilde.width() {
        return Err(Error::Contract(format!(
            "prediction {}x{} vs pseudo label {}x{}",
            y_hat.height(),
            y_hat.width(),
            y_tilde.height(),
            y_tilde.width()
        )));
    }
    if !(rho > 0.0) {
        return Err(Error::Config(format!("rho must be positive, got {rho}")));
    }
    let bce = mean(y_hat.values().iter().zip(y_tilde.values()).map(|(&p, &t)| {
        let p = clamp(p as f64);
        if t {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    }));
    Ok(bce.min(rho))
}

/// Generator adversarial term plus `l_loc`. `d2_fake` is `None` when the
/// negative discriminator is disabled.
pub fn loss_g(d1_fake: &[f64], d2_fake: Option<&[f64]>, l_loc: f64, variant: LossVariant) -> Result<f64> {
    finite("d1 fake probabilities", d1_fake)?;
    if let Some(d2) = d2_fake {
        finite("d2 fake probabilities", d2)?;
    }
    if !l_loc.is_finite() {
        return Err(Error::Loss(format!("l_loc is {l_loc}")));
    }
    let term = |ps: &[f64]| match variant {
        LossVariant::Saturating => mean(ps.iter().map(|&p| (1.0 - clamp(p)).ln())),
        LossVariant::Nonsaturating => -mean(ps.iter().map(|&p| clamp(p).ln())),
    };
    Ok(term(d1_fake) + d2_fake.map_or(0.0, term) + l_loc)
}

/// Graph form of [`loss_disc`] on `N x 1` probability nodes.
pub fn disc_loss_node<T: Scalar>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let eps = T::from_f64_lossy(PROB_EPS);
    let a = g.ln_clamped(d_real, eps);
    let a = g.mean(a);
    let b = g.ln1m_clamped(d_fake, eps);
    let b = g.mean(b);
    let s = g.add(a, b)?;
    Ok(g.scale(s, -T::one()))
}

/// Graph form of the adversarial part of [`loss_g`].
pub fn gen_adv_node<T: Scalar>(g: &mut Graph<T>, d1_fake: Var, d2_fake: Option<Var>, variant: LossVariant) -> Result<Var> {
    let eps = T::from_f64_lossy(PROB_EPS);
    let term = |g: &mut Graph<T>, p: Var| {
        let l = match variant {
            LossVariant::Saturating => g.ln1m_clamped(p, eps),
            LossVariant::Nonsaturating => g.ln_clamped(p, eps),
        };
        let m = g.mean(l);
        match variant {
            LossVariant::Saturating => m,
            LossVariant::Nonsaturating => g.scale(m, -T::one()),
        }
    };
    let t1 = term(g, d1_fake);
    match d2_fake {
        Some(d2) => {
            let t2 = term(g, d2);
            g.add(t1, t2)
        }
        None => Ok(t1),
    }
}

/// Graph form of [`loss_loc`]; `target` holds the pseudo label as 0/1 values.
pub fn loc_loss_node<T: Scalar>(g: &mut Graph<T>, y_hat: Var, target: Vec<T>, rho: f64) -> Result<Var> {
    let bce = g.bce_mean(y_hat, target, T::from_f64_lossy(PROB_EPS))?;
    Ok(g.min_const(bce, T::from_f64_lossy(rho)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn discriminator_loss_examples() {
        let e = PROB_EPS;
        assert!(loss_d1(&[1.0 - e], &[e]).unwrap() < 1e-6);
        assert!((loss_d1(&[0.5], &[0.5]).unwrap() - 2.0 * LN2).abs() < 1e-12);
        let clamped = loss_d1(&[e], &[e]).unwrap();
        assert!((clamped - -(e.ln())).abs() < 1e-6 && (clamped - 16.118).abs() < 1e-2);
        assert_eq!(loss_d2(&[0.3, 0.8], &[0.1, 0.4]).unwrap(), loss_d1(&[0.3, 0.8], &[0.1, 0.4]).unwrap());
        assert!(loss_d1(&[0.0], &[1.0]).unwrap().is_finite());
        assert!(matches!(loss_d1(&[f64::NAN], &[0.5]), Err(Error::Loss(_))));
    }

    fn mask(vals: &[bool]) -> PseudoMask {
        PseudoMask::new(1, vals.len(), vals.to_vec()).unwrap()
    }

    fn soft(vals: &[f32]) -> SoftMask {
        SoftMask::new(1, vals.len(), vals.to_vec()).unwrap()
    }

    #[test]
    fn localization_loss_examples() {
        let y = mask(&[true, false, true, false]);
        let exact = soft(&[1.0, 0.0, 1.0, 0.0]);
        assert!(loss_loc(&exact, &y, 0.7).unwrap() < 1e-6);
        let half = soft(&[0.5; 4]);
        assert!((loss_loc(&half, &y, 1.0).unwrap() - LN2).abs() < 1e-9);
        assert_eq!(loss_loc(&half, &y, 0.5).unwrap(), 0.5);
        let wrong = soft(&[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(loss_loc(&wrong, &y, 1.0).unwrap(), 1.0);
        assert!(matches!(loss_loc(&soft(&[0.5; 3]), &y, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn generator_loss_examples() {
        let sat = loss_g(&[0.5], Some(&[0.5]), 0.0, LossVariant::Saturating).unwrap();
        assert!((sat + 2.0 * LN2).abs() < 1e-12);
        let ns = loss_g(&[0.5], Some(&[0.5]), 0.0, LossVariant::Nonsaturating).unwrap();
        assert!((ns - 2.0 * LN2).abs() < 1e-12);
        let base = loss_g(&[0.2, 0.9], Some(&[0.6, 0.3]), 0.0, LossVariant::Saturating).unwrap();
        let with = loss_g(&[0.2, 0.9], Some(&[0.6, 0.3]), 0.37, LossVariant::Saturating).unwrap();
        assert!((with - base - 0.37).abs() < 1e-12);
        let one = loss_g(&[0.5], None, 0.0, LossVariant::Nonsaturating).unwrap();
        assert!((one - LN2).abs() < 1e-12);
    }

    #[test]
    fn combined_objective_sums_parts() {
        assert_eq!(combined_objective(&LossReport::default()), 0.0);
        let r = LossReport::new(1.0, 2.0, 3.0, 0.5);
        assert_eq!(combined_objective(&r), 6.5);
        assert_eq!(r.total_g, 3.5);
    }

    #[test]
    fn graph_forms_agree_with_plain_forms() {
        let real = vec![0.9, 0.3, 0.6];
        let fake = vec![0.2, 0.7, 0.4];
        let mut g = Graph::<f64>::new();
        let r = g.leaf(Tensor::new(vec![3, 1], real.clone()));
        let f = g.leaf(Tensor::new(vec![3, 1], fake.clone()));
        let d = disc_loss_node(&mut g, r, f).unwrap();
        assert!((g.value(d).data()[0] - loss_d1(&real, &fake).unwrap()).abs() < 1e-12);
        for variant in [LossVariant::Saturating, LossVariant::Nonsaturating] {
            let a = gen_adv_node(&mut g, f, Some(r), variant).unwrap();
            let expect = loss_g(&fake, Some(&real), 0.0, variant).unwrap();
            assert!((g.value(a).data()[0] - expect).abs() < 1e-12);
        }
        let y = g.leaf(Tensor::new(vec![1, 1, 1, 3], real.clone()));
        let l = loc_loss_node(&mut g, y, vec![1.0, 0.0, 1.0], 0.7).unwrap();
        let plain = loss_loc(&soft(&[0.9, 0.3, 0.6]), &mask(&[true, false, true]), 0.7).unwrap();
        assert!((g.value(l).data()[0] - plain).abs() < 1e-7);
    }

    /// d/dp of each graph loss against central differences of the plain form.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let real = vec![0.8, 0.35];
        let fake = vec![0.25, 0.6];
        let h = 1e-5;
        let check = |analytic: f64, f: &dyn Fn(f64) -> f64, x: f64| {
            let numeric = (f(x + h) - f(x - h)) / (2.0 * h);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            assert!(err < 1e-4, "analytic {analytic} numeric {numeric}");
        };
        let mut g = Graph::<f64>::new();
        let r = g.leaf(Tensor::new(vec![2, 1], real.clone()));
        let f = g.leaf(Tensor::new(vec![2, 1], fake.clone()));
        let d = disc_loss_node(&mut g, r, f).unwrap();
        let grads = g.backward(d).unwrap();
        check(grads.get(r).unwrap().data()[0], &|x| loss_d1(&[x, real[1]], &fake).unwrap(), real[0]);
        check(grads.get(f).unwrap().data()[1], &|x| loss_d1(&real, &[fake[0], x]).unwrap(), fake[1]);
        for variant in [LossVariant::Saturating, LossVariant::Nonsaturating] {
            let mut g = Graph::<f64>::new();
            let f1 = g.leaf(Tensor::new(vec![2, 1], fake.clone()));
            let f2 = g.leaf(Tensor::new(vec![2, 1], real.clone()));
            let a = gen_adv_node(&mut g, f1, Some(f2), variant).unwrap();
            let grads = g.backward(a).unwrap();
            check(grads.get(f1).unwrap().data()[0], &|x| loss_g(&[x, fake[1]], Some(&real), 0.0, variant).unwrap(), fake[0]);
            check(grads.get(f2).unwrap().data()[1], &|x| loss_g(&fake, Some(&[real[0], x]), 0.0, variant).unwrap(), real[1]);
        }
        let mut g = Graph::<f64>::new();
        let y = g.leaf(Tensor::new(vec![1, 1, 1, 2], vec![0.4, 0.7]));
        let l = loc_loss_node(&mut g, y, vec![1.0, 0.0], 5.0).unwrap();
        let grads = g.backward(l).unwrap();
        let plain = |x: f64| -(x.ln() + (1.0 - 0.7f64).ln()) / 2.0;
        check(grads.get(y).unwrap().data()[0], &plain, 0.4);
    }

    proptest! {
        #[test]
        fn loc_loss_is_within_zero_and_rho(
            vals in proptest::collection::vec((0.0f32..=1.0, any::<bool>()), 1..64),
            rho in 0.01f64..5.0,
        ) {
            let (p, t): (Vec<f32>, Vec<bool>) = vals.into_iter().unzip();
            let l = loss_loc(&soft(&p), &mask(&t), rho).unwrap();
            prop_assert!((0.0..=rho).contains(&l));
        }

        #[test]
        fn disc_loss_is_permutation_invariant(
            pairs in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..16),
            rot in 0usize..16,
        ) {
            let (r, f): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let k = rot % r.len();
            let mut r2 = r.clone();
            r2.rotate_left(k);
            let mut f2 = f.clone();
            f2.reverse();
            let a = loss_d1(&r, &f).unwrap();
            let b = loss_d1(&r2, &f2).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
