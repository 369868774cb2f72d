//! Float math that works with and without `std`.
//!
//! `core` does not provide the transcendental functions, so every module
//! routes through these shims; with the `std` feature they forward to the
//! intrinsics, otherwise to `libm`. Results are identical on mainstream
//! targets (both lower to the same libm implementations).

macro_rules! shim1 {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[inline(always)]
        pub fn $name(x: f64) -> f64 {
            #[cfg(feature = "std")]
            {
                x.$name()
            }
            #[cfg(not(feature = "std"))]
            {
                libm::$name(x)
            }
        }
    };
}

shim1!(exp);
shim1!(sqrt);
shim1!(tanh);
shim1!(floor);
shim1!(sin);
shim1!(cos);

/// Natural logarithm.
#[inline(always)]
pub fn ln(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.ln()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::log(x)
    }
}

/// `x^y` for real exponents.
#[inline(always)]
pub fn powf(x: f64, y: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.powf(y)
    }
    #[cfg(not(feature = "std"))]
    {
        libm::pow(x, y)
    }
}

/// Absolute value.
#[inline(always)]
pub fn abs(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.abs()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::fabs(x)
    }
}

/// Inverse hyperbolic tangent.
#[inline(always)]
pub fn atanh(x: f64) -> f64 {
    // 0.5 * ln((1+x)/(1-x)); accurate enough for squashed-action inversion.
    0.5 * ln((1.0 + x) / (1.0 - x))
}

/// Wraps an angle to [-pi, pi).
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * core::f64::consts::PI;
    let x = theta + core::f64::consts::PI;
    let wrapped = x - two_pi * floor(x / two_pi);
    wrapped - core::f64::consts::PI
}

/// `ln(sum exp(v))` with max-subtraction so large logits never overflow.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return max;
    }
    let mut sum = 0.0;
    for &v in values {
        sum += exp(v - max);
    }
    max + ln(sum)
}

/// Shannon entropy of a (normalized) distribution in nats. Zero entries
/// contribute zero.
pub fn entropy(probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in probs {
        if p > 0.0 {
            h -= p * ln(p);
        }
    }
    h
}
