//! Specular interface physics: reflection, refraction, total internal
//! reflection and the unpolarized Fresnel split, with reverse-mode adjoints.
//!
//! Directions follow the incidence-side convention: `omega_i` points away
//! from the surface toward where the light came from, and `n` is oriented
//! into the same hemisphere.

use crate::math::Vec3;

/// Mirror direction `2(ω·n)n − ω`.
pub fn reflect(omega_i: &Vec3, n: &Vec3) -> Vec3 {
    2.0 * omega_i.dot(n) * n - omega_i
}

/// Transmitted direction and `cos θ_t`, or `None` under total internal
/// reflection. `eta = eta_t / eta_i`.
pub fn refract(omega_i: &Vec3, n: &Vec3, eta_i: f64, eta_t: f64) -> Option<(Vec3, f64)> {
    let eta = eta_t / eta_i;
    let cos_i = omega_i.dot(n).clamp(0.0, 1.0);
    let k = 1.0 - (1.0 - cos_i * cos_i) / (eta * eta);
    if k < 0.0 {
        return None;
    }
    let cos_t = k.sqrt();
    Some((-omega_i / eta + (cos_i / eta - cos_t) * n, cos_t))
}

/// Unpolarized Fresnel reflectance and transmittance `(R, 1 − R)`.
pub fn fresnel(cos_i: f64, cos_t: f64, eta_i: f64, eta_t: f64) -> (f64, f64) {
    let rs = ratio(eta_i * cos_i, eta_t * cos_t);
    let rp = ratio(eta_i * cos_t, eta_t * cos_i);
    let r = (0.5 * (rs * rs + rp * rp)).clamp(0.0, 1.0);
    (r, 1.0 - r)
}

fn ratio(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        1.0
    } else {
        (a - b) / (a + b)
    }
}

/// Adjoint of [`reflect`]: returns `(∂/∂ω_i, ∂/∂n)`.
pub fn reflect_backward(omega_i: &Vec3, n: &Vec3, grad: &Vec3) -> (Vec3, Vec3) {
    let gn = grad.dot(n);
    let g_omega = 2.0 * gn * n - grad;
    let g_n = 2.0 * omega_i.dot(n) * grad + 2.0 * gn * omega_i;
    (g_omega, g_n)
}

/// Gradients flowing out of a refraction event.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RefractGrad {
    pub omega_i: Vec3,
    pub n: Vec3,
    pub eta_i: f64,
    pub eta_t: f64,
}

/// Adjoint of [`refract`] given upstream gradients on the direction and on
/// `cos θ_t`. Must only be called on a non-TIR configuration.
pub fn refract_backward(
    omega_i: &Vec3,
    n: &Vec3,
    eta_i: f64,
    eta_t: f64,
    grad_dir: &Vec3,
    grad_cos_t: f64,
) -> RefractGrad {
    let eta = eta_t / eta_i;
    let dot = omega_i.dot(n);
    let cos_i = dot.clamp(0.0, 1.0);
    let k = 1.0 - (1.0 - cos_i * cos_i) / (eta * eta);
    let cos_t = k.max(0.0).sqrt();

    let mut g_omega = -grad_dir / eta;
    let mut g_n = (cos_i / eta - cos_t) * grad_dir;
    let g_a = grad_dir.dot(n);
    let mut g_cos_i = g_a / eta;
    let g_cos_t = grad_cos_t - g_a;
    let mut g_eta = grad_dir.dot(omega_i) / (eta * eta) - g_a * cos_i / (eta * eta);
    if cos_t > 1e-12 {
        g_cos_i += g_cos_t * cos_i / (eta * eta * cos_t);
        g_eta += g_cos_t * (1.0 - cos_i * cos_i) / (eta * eta * eta * cos_t);
    }
    if dot > 0.0 && dot < 1.0 {
        g_omega += g_cos_i * n;
        g_n += g_cos_i * omega_i;
    }
    RefractGrad {
        omega_i: g_omega,
        n: g_n,
        eta_i: -g_eta * eta_t / (eta_i * eta_i),
        eta_t: g_eta / eta_i,
    }
}

/// Adjoint of the reflectance `R` in [`fresnel`]; returns gradients on
/// `(cos_i, cos_t, eta_i, eta_t)`.
pub fn fresnel_backward(cos_i: f64, cos_t: f64, eta_i: f64, eta_t: f64, grad_r: f64) -> [f64; 4] {
    let mut g = [0.0; 4];
    // (a − b)/(a + b) with a, b built from (scale_a · cos_a, scale_b · cos_b).
    let mut term = |a_scale: f64, a_cos: f64, ia: usize, ic_a: usize,
                    b_scale: f64, b_cos: f64, ib: usize, ic_b: usize| {
        let a = a_scale * a_cos;
        let b = b_scale * b_cos;
        let s = a + b;
        if s == 0.0 {
            return;
        }
        let r = (a - b) / s;
        let gr = grad_r * r;
        let ga = gr * 2.0 * b / (s * s);
        let gb = -gr * 2.0 * a / (s * s);
        g[ic_a] += ga * a_scale;
        g[ia] += ga * a_cos;
        g[ic_b] += gb * b_scale;
        g[ib] += gb * b_cos;
    };
    term(eta_i, cos_i, 2, 0, eta_t, cos_t, 3, 1);
    term(eta_i, cos_t, 2, 1, eta_t, cos_i, 3, 0);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_config(rng: &mut ChaCha8Rng) -> (Vec3, Vec3, f64, f64) {
        let n = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let (t1, _) = crate::math::orthonormal_basis(&n);
        let cos_i: f64 = rng.random_range(0.0..1.0);
        let sin_i = (1.0 - cos_i * cos_i).sqrt();
        let w = (cos_i * n + sin_i * t1).normalize();
        (w, n, rng.random_range(1.0..2.5), rng.random_range(1.0..2.5))
    }

    #[test]
    fn reflect_examples() {
        let z = Vec3::z();
        assert_eq!(reflect(&z, &z), z);
        let (s, c) = 0.6f64.sin_cos();
        let r = reflect(&Vec3::new(s, 0.0, c), &z);
        assert!((r - Vec3::new(-s, 0.0, c)).norm() < 1e-15);
    }

    #[test]
    fn reflect_negates_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (w, n, _, _) = random_config(&mut rng);
            let r = reflect(&w, &n);
            let wt = w - w.dot(&n) * n;
            let rt = r - r.dot(&n) * n;
            assert!((rt + wt).norm() < 1e-12);
            assert!((r.dot(&n) - w.dot(&n)).abs() < 1e-12);
            assert!((r.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn refract_normal_incidence() {
        let z = Vec3::z();
        for eta in [0.7, 1.0, 1.5, 2.4] {
            let (t, cos_t) = refract(&z, &z, 1.0, eta).unwrap();
            assert!((t + z).norm() < 1e-15);
            assert_eq!(cos_t, 1.0);
        }
    }

    #[test]
    fn refract_thirty_degrees() {
        let th = 30f64.to_radians();
        let w = Vec3::new(th.sin(), 0.0, th.cos());
        let (t, cos_t) = refract(&w, &Vec3::z(), 1.0, 1.5).unwrap();
        let theta_t = cos_t.acos();
        assert!((theta_t - (0.5f64 / 1.5).asin()).abs() < 1e-12);
        assert!((theta_t.to_degrees() - 19.471).abs() < 1e-3);
        assert!((t.norm() - 1.0).abs() < 1e-12);
        assert!(t.z < 0.0 && t.x < 0.0);
    }

    #[test]
    fn refract_tir_at_45_degrees() {
        let th = 45f64.to_radians();
        let w = Vec3::new(th.sin(), 0.0, th.cos());
        assert!(refract(&w, &Vec3::z(), 1.5, 1.0).is_none());
    }

    #[test]
    fn snell_residual_and_reciprocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut checked = 0;
        for _ in 0..10_000 {
            let (w, n, ei, et) = random_config(&mut rng);
            let Some((t, cos_t)) = refract(&w, &n, ei, et) else {
                continue;
            };
            checked += 1;
            assert!((t.norm() - 1.0).abs() < 1e-9);
            let sin_i = (w - w.dot(&n) * n).norm();
            let sin_t = (t - t.dot(&n) * n).norm();
            assert!((ei * sin_i - et * sin_t).abs() < 1e-12);
            assert!((cos_t + t.dot(&n)).abs() < 1e-12);
            if let Some((back, _)) = refract(&t, &-n, et, ei) {
                assert!((back - w).norm() < 1e-9);
            }
        }
        assert!(checked > 5000);
    }

    #[test]
    fn fresnel_examples() {
        let (r, t) = fresnel(1.0, 1.0, 1.0, 1.5);
        assert!((r - 0.04).abs() < 1e-15);
        assert!((t - 0.96).abs() < 1e-15);

        for c in [0.1, 0.5, 0.9] {
            let (r, t) = fresnel(c, c, 1.3, 1.3);
            assert!(r.abs() < 1e-15 && (t - 1.0).abs() < 1e-15);
        }

        let th: f64 = 1.5f64.atan();
        let w = Vec3::new(th.sin(), 0.0, th.cos());
        let (_, cos_t) = refract(&w, &Vec3::z(), 1.0, 1.5).unwrap();
        let cos_i = th.cos();
        let rp = ratio(cos_t, 1.5 * cos_i);
        assert!(rp.abs() < 1e-12);
        let rs = ratio(cos_i, 1.5 * cos_t);
        let (r, _) = fresnel(cos_i, cos_t, 1.0, 1.5);
        assert!((r - 0.5 * rs * rs).abs() < 1e-12);
        // ½ (5/13)² exactly.
        assert!((r - 25.0 / 338.0).abs() < 1e-12);
        assert!((r - 0.0742).abs() < 5e-4);
    }

    #[test]
    fn grazing_limit() {
        let c: f64 = 1e-6;
        let w = Vec3::new((1.0 - c * c).sqrt(), 0.0, c);
        let (_, cos_t) = refract(&w, &Vec3::z(), 1.0, 1.5).unwrap();
        assert!(fresnel(c, cos_t, 1.0, 1.5).0 > 0.99);
    }

    #[test]
    fn reflect_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, n, _, _) = random_config(&mut rng);
        let g = Vec3::new(0.3, -0.7, 0.2);
        let (gw, gn) = reflect_backward(&w, &n, &g);
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let fd_w = (g.dot(&reflect(&(w + e), &n)) - g.dot(&reflect(&(w - e), &n))) / (2.0 * h);
            let fd_n = (g.dot(&reflect(&w, &(n + e))) - g.dot(&reflect(&w, &(n - e)))) / (2.0 * h);
            assert!((fd_w - gw[k]).abs() < 1e-8);
            assert!((fd_n - gn[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn refract_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gd = Vec3::new(0.4, 0.1, -0.5);
        let gc = 0.7;
        let mut tested = 0;
        while tested < 50 {
            let (w, n, ei, et) = random_config(&mut rng);
            let Some((_, cos_t)) = refract(&w, &n, ei, et) else {
                continue;
            };
            let cos_i = w.dot(&n);
            if cos_t < 0.05 || cos_i < 0.01 || cos_i > 0.99 {
                continue;
            }
            tested += 1;
            let f = |w: &Vec3, n: &Vec3, ei: f64, et: f64| {
                let (t, ct) = refract(w, n, ei, et).unwrap();
                gd.dot(&t) + gc * ct
            };
            let g = refract_backward(&w, &n, ei, et, &gd, gc);
            let h = 1e-6;
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = h;
                let fd = (f(&(w + e), &n, ei, et) - f(&(w - e), &n, ei, et)) / (2.0 * h);
                assert!((fd - g.omega_i[k]).abs() < 1e-6, "{fd} {}", g.omega_i[k]);
                let fd = (f(&w, &(n + e), ei, et) - f(&w, &(n - e), ei, et)) / (2.0 * h);
                assert!((fd - g.n[k]).abs() < 1e-6);
            }
            let fd = (f(&w, &n, ei + h, et) - f(&w, &n, ei - h, et)) / (2.0 * h);
            assert!((fd - g.eta_i).abs() < 1e-6);
            let fd = (f(&w, &n, ei, et + h) - f(&w, &n, ei, et - h)) / (2.0 * h);
            assert!((fd - g.eta_t).abs() < 1e-6);
        }
    }

    #[test]
    fn fresnel_backward_matches_fd() {
        let args = [0.8, 0.6, 1.1, 1.6];
        let g = fresnel_backward(args[0], args[1], args[2], args[3], 1.0);
        let h = 1e-6;
        for k in 0..4 {
            let mut p = args;
            let mut m = args;
            p[k] += h;
            m[k] -= h;
            let fd = (fresnel(p[0], p[1], p[2], p[3]).0 - fresnel(m[0], m[1], m[2], m[3]).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "{k}: {fd} vs {}", g[k]);
        }
    }
}
