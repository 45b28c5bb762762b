//! Float formatting shared by every text and CSV output.

/// How floats are written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FloatFormat {
    /// Nine significant digits.
    #[default]
    Sig9,
    /// Shortest decimal that round-trips to the same `f64`.
    Raw,
}

impl FloatFormat {
    pub fn fmt(self, v: f64) -> String {
        match self {
            FloatFormat::Raw => format!("{v}"),
            FloatFormat::Sig9 => sig(v, 9),
        }
    }

    pub fn join(self, v: &[f64]) -> String {
        v.iter().map(|&x| self.fmt(x)).collect::<Vec<_>>().join(", ")
    }
}

/// `v` with `digits` significant digits, like C's `%g` with trailing zeros removed.
pub fn sig(v: f64, digits: usize) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        let m = trim(mantissa);
        return format!("{m}e{exp}");
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim(&format!("{v:.decimals$}")).to_string()
}

fn trim(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
