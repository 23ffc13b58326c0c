use std::fmt;

use serde::{Serialize, Serializer};

/// Exact ratio of two counts. Stays rational until rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Share {
    pub numerator: u64,
    pub denominator: u64,
}

impl Share {
    /// `None` when the denominator is zero: a share of nothing is undefined.
    pub fn new(numerator: u64, denominator: u64) -> Option<Self> {
        (denominator > 0).then_some(Share { numerator, denominator })
    }

    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    /// Cross-multiplied equality against `num/den`.
    pub fn equals(&self, num: u64, den: u64) -> bool {
        self.numerator as u128 * den as u128 == num as u128 * self.denominator as u128
    }

    /// Four significant digits, the rendering used in reports.
    pub fn render(&self) -> String {
        render_sig4(self.value())
    }
}

pub fn render_sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (3 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

impl fmt::Display for Share {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} ({})", self.numerator, self.denominator, self.render())
    }
}

impl Serialize for Share {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.value())
    }
}
