//! Double-exponential quadrature used as an oracle. It shares no code with
//! the library's adaptive Gauss-Kronrod integrator.

use std::f64::consts::FRAC_PI_2;

/// tanh-sinh rule on a finite interval.
pub fn tanh_sinh<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    let h = 1.0 / 256.0;
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    let mut sum = 0.0;
    let n = (4.0 / h) as i64;
    for i in -n..=n {
        let t = i as f64 * h;
        let s = FRAC_PI_2 * t.sinh();
        let x = s.tanh();
        let w = FRAC_PI_2 * t.cosh() / (s.cosh() * s.cosh());
        let xp = mid + half * x;
        if xp <= a || xp >= b || w == 0.0 {
            continue;
        }
        sum += w * f(xp);
    }
    sum * h * half
}

/// Integral of `f` over `(-inf, b]`, mapped with `x = b - scale * exp(pi/2 sinh t)`.
pub fn exp_sinh_left<F: Fn(f64) -> f64>(f: F, b: f64, scale: f64) -> f64 {
    exp_sinh_half(|u| f(b - scale * u)) * scale
}

/// Integral of `f` over `[a, inf)`.
pub fn exp_sinh_right<F: Fn(f64) -> f64>(f: F, a: f64, scale: f64) -> f64 {
    exp_sinh_half(|u| f(a + scale * u)) * scale
}

/// Whole real line, split at `center`.
pub fn exp_sinh_line<F: Fn(f64) -> f64>(f: F, center: f64, scale: f64) -> f64 {
    exp_sinh_left(&f, center, scale) + exp_sinh_right(&f, center, scale)
}

fn exp_sinh_half<G: Fn(f64) -> f64>(g: G) -> f64 {
    let h = 1.0 / 128.0;
    let n = (6.5 / h) as i64;
    let mut sum = 0.0;
    for i in -n..=n {
        let t = i as f64 * h;
        let u = (FRAC_PI_2 * t.sinh()).exp();
        let v = g(u) * u * FRAC_PI_2 * t.cosh();
        if v.is_finite() {
            sum += v;
        }
    }
    sum * h
}
