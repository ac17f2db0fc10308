//! Float math routed through `libm` so the crate builds without `std`.

#[inline(always)]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline(always)]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline(always)]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline(always)]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline(always)]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline(always)]
pub fn powf(x: f64, p: f64) -> f64 {
    libm::pow(x, p)
}

#[inline(always)]
pub fn powi(x: f64, mut k: i32) -> f64 {
    // Exponentiation by squaring, matching the partial-derivative formulas
    // used by the tape (deterministic, no powf detour for integer powers).
    let mut base = if k < 0 { 1.0 / x } else { x };
    if k < 0 {
        k = -k;
    }
    let mut acc = 1.0;
    while k > 0 {
        if k & 1 == 1 {
            acc *= base;
        }
        base *= base;
        k >>= 1;
    }
    acc
}

#[inline(always)]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

