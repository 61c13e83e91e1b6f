//! Double-double ("dd") arithmetic: an unevaluated sum of two f64 values
//! giving roughly 32 significant decimal digits. Used as the
//! extended-precision reference when checking stabilized f64 code paths.

/// Extended-precision value represented as `hi + lo` with `|lo| <= ulp(hi)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

// ln(2) split into a double-double constant.
const LN2_HI: f64 = 6.931_471_805_599_453e-1;
const LN2_LO: f64 = 2.319_046_813_846_299_6e-17;

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let v = s - a;
    let e = (a - (s - v)) + (b - v);
    (s, e)
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let e = b - (s - a);
    (s, e)
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let e = a.mul_add(b, -p);
    (p, e)
}

impl Dd {
    pub fn from_f64(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn zero() -> Self {
        Dd { hi: 0.0, lo: 0.0 }
    }

    pub fn one() -> Self {
        Dd { hi: 1.0, lo: 0.0 }
    }

    /// Round to nearest f64.
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, other: Dd) -> Dd {
        let (s1, e1) = two_sum(self.hi, other.hi);
        let (s2, e2) = two_sum(self.lo, other.lo);
        let (s1, e1) = quick_two_sum(s1, e1 + s2);
        let (hi, lo) = quick_two_sum(s1, e1 + e2);
        Dd { hi, lo }
    }

    pub fn sub(self, other: Dd) -> Dd {
        self.add(other.neg())
    }

    pub fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn mul(self, other: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, other.hi);
        let e = e + (self.hi * other.lo + self.lo * other.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }

    pub fn div(self, other: Dd) -> Dd {
        let q1 = self.hi / other.hi;
        let r = self.sub(other.mul(Dd::from_f64(q1)));
        let q2 = r.hi / other.hi;
        let r = r.sub(other.mul(Dd::from_f64(q2)));
        let q3 = r.hi / other.hi;
        Dd::from_f64(q1).add(Dd::from_f64(q2)).add(Dd::from_f64(q3))
    }

    pub fn scale(self, k: f64) -> Dd {
        self.mul(Dd::from_f64(k))
    }

    pub fn sqrt(self) -> Dd {
        assert!(self.hi >= 0.0, "sqrt of negative dd");
        if self.hi == 0.0 {
            return Dd::zero();
        }
        // One Newton step on y = (y + x/y)/2 starting from the f64 root.
        let y = Dd::from_f64(self.hi.sqrt());
        let y = y.add(self.div(y)).scale(0.5);
        y.add(self.div(y)).scale(0.5)
    }

    /// exp(x) via argument reduction x = k*ln2 + r and a Taylor series in r.
    pub fn exp(self) -> Dd {
        if self.hi > 700.0 {
            panic!("dd exp overflow: {}", self.hi);
        }
        if self.hi < -746.0 {
            return Dd::zero();
        }
        let k = (self.hi / LN2_HI).round();
        let r = self.sub(Dd { hi: LN2_HI, lo: LN2_LO }.scale(k));
        let mut sum = Dd::one().add(r);
        let mut term = r;
        for n in 2..60 {
            term = term.mul(r).scale(1.0 / n as f64);
            sum = sum.add(term);
            if term.hi.abs() < 1e-40 * sum.hi.abs() {
                break;
            }
        }
        let scale = (k as i32).into();
        Dd {
            hi: sum.hi * f64::powi(2.0, scale),
            lo: sum.lo * f64::powi(2.0, scale),
        }
    }

    /// Natural log via two Newton corrections of the f64 estimate.
    pub fn ln(self) -> Dd {
        assert!(self.hi > 0.0, "ln of non-positive dd");
        let mut y = Dd::from_f64(self.hi.ln());
        for _ in 0..2 {
            // y <- y + x * exp(-y) - 1
            let correction = self.mul(y.neg().exp()).sub(Dd::one());
            y = y.add(correction);
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_ln_round_trip() {
        for &x in &[-14.2857, -3.0, -0.1, 0.0, 0.5, 1.0, 13.9, 28.57] {
            let e = Dd::from_f64(x).exp();
            let back = e.ln().to_f64();
            assert!((back - x).abs() <= 1e-14 * x.abs().max(1.0), "{x} -> {back}");
        }
    }

    #[test]
    fn exp_matches_f64_to_its_precision() {
        for &x in &[-10.0, -1.25, 0.3, 2.0, 14.0] {
            let dd = Dd::from_f64(x).exp().to_f64();
            let rel = (dd - x.exp()).abs() / x.exp();
            assert!(rel < 1e-15, "exp({x}): dd={dd} f64={}", x.exp());
        }
    }

    #[test]
    fn sqrt_is_exact_enough() {
        let v = Dd::from_f64(2.0).sqrt();
        let sq = v.mul(v).sub(Dd::from_f64(2.0));
        assert!(sq.to_f64().abs() < 1e-30);
    }

    #[test]
    fn div_identity() {
        let a = Dd::from_f64(std::f64::consts::PI);
        let b = Dd::from_f64(1.0 / 3.0);
        let q = a.div(b).mul(b).sub(a);
        assert!(q.to_f64().abs() < 1e-30);
    }
}
