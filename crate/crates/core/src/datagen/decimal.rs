use std::fmt;

/// Exact decimal `mantissa · 10^-scale`, kept normalized (no trailing zeros).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decimal {
    mantissa: i128,
    scale: u32,
}

impl Decimal {
    pub fn new(mantissa: i128, scale: u32) -> Self {
        let mut d = Decimal { mantissa, scale };
        while d.scale > 0 && d.mantissa % 10 == 0 {
            d.mantissa /= 10;
            d.scale -= 1;
        }
        if d.mantissa == 0 {
            d.scale = 0;
        }
        d
    }

    pub fn integer(v: i128) -> Self {
        Decimal::new(v, 0)
    }

    /// Rounds `v` half-away-from-zero to `places` decimals.
    pub fn round_f64(v: f64, places: u32) -> Self {
        let scaled = (v * 10f64.powi(places as i32)).round();
        Decimal::new(scaled as i128, places)
    }

    pub fn mantissa(&self) -> i128 {
        self.mantissa
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn is_zero(&self) -> bool {
        self.mantissa == 0
    }

    pub fn is_negative(&self) -> bool {
        self.mantissa < 0
    }

    pub fn abs(self) -> Self {
        Decimal {
            mantissa: self.mantissa.abs(),
            ..self
        }
    }

    /// Significant decimal digits of the normalized mantissa.
    pub fn digits(&self) -> u32 {
        let m = self.mantissa.unsigned_abs();
        if m == 0 {
            1
        } else {
            m.ilog10() + 1
        }
    }

    fn rescale(self, scale: u32) -> i128 {
        self.mantissa * 10i128.pow(scale - self.scale)
    }

    pub fn to_f64(self) -> f64 {
        self.to_string().parse().expect("decimal strings parse as f64")
    }
}

impl std::ops::Neg for Decimal {
    type Output = Decimal;
    fn neg(self) -> Decimal {
        Decimal {
            mantissa: -self.mantissa,
            ..self
        }
    }
}

impl std::ops::Add for Decimal {
    type Output = Decimal;
    fn add(self, o: Decimal) -> Decimal {
        let s = self.scale.max(o.scale);
        Decimal::new(self.rescale(s) + o.rescale(s), s)
    }
}

impl std::ops::Sub for Decimal {
    type Output = Decimal;
    fn sub(self, o: Decimal) -> Decimal {
        self + (-o)
    }
}

impl std::ops::Mul for Decimal {
    type Output = Decimal;
    fn mul(self, o: Decimal) -> Decimal {
        Decimal::new(self.mantissa * o.mantissa, self.scale + o.scale)
    }
}

impl PartialOrd for Decimal {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Decimal {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let s = self.scale.max(other.scale);
        self.rescale(s).cmp(&other.rescale(s))
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.mantissa < 0 { "-" } else { "" };
        let m = self.mantissa.unsigned_abs();
        if self.scale == 0 {
            return write!(f, "{sign}{m}");
        }
        let p = 10u128.pow(self.scale);
        write!(
            f,
            "{sign}{}.{:0width$}",
            m / p,
            m % p,
            width = self.scale as usize
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_addition_sample() {
        let a = Decimal::new(-971810940335, 3);
        let b = Decimal::integer(612120);
        assert_eq!((a + b).to_string(), "-971198820.335");
        // The published answer -970586700.335 adds the second operand twice.
        assert_eq!((a + b + b).to_string(), "-970586700.335");
    }

    #[test]
    fn normalizes_and_formats() {
        assert_eq!(Decimal::new(500, 3).to_string(), "0.5");
        assert_eq!(Decimal::new(-5, 2).to_string(), "-0.05");
        assert_eq!(Decimal::new(0, 4).to_string(), "0");
        assert_eq!((Decimal::new(125, 2) * Decimal::new(4, 1)).to_string(), "0.5");
        assert_eq!(Decimal::new(12000, 0).digits(), 5);
        assert_eq!(Decimal::round_f64(0.0149, 2), Decimal::new(1, 2));
    }
}
