//! Special functions: modified Bessel function of the second kind, the
//! gamma function and the standard normal distribution.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;

pub fn gamma(x: f64) -> f64 {
    statrs::function::gamma::gamma(x)
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

pub fn digamma(x: f64) -> f64 {
    statrs::function::gamma::digamma(x)
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Inverse standard normal CDF (Wichura's AS241, about 1e-16 relative).
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.080_928_730_122_7 * r + 33430.575_583_588_128) * r
                + 67265.770_927_008_700_853)
                * r
                + 45921.953_931_549_871_457)
                * r
                + 13731.693_765_509_461_125)
                * r
                + 1971.590_950_306_551_442_7)
                * r
                + 133.141_667_891_784_377_21)
                * r
                + 3.387_132_872_796_366_608)
            / (((((((5226.495_278_852_545_925 * r + 28729.085_735_721_942_674) * r
                + 39307.895_800_092_710_61)
                * r
                + 21213.794_301_586_595_867)
                * r
                + 5394.196_021_424_751_077_1)
                * r
                + 687.187_007_492_057_908_95)
                * r
                + 42.313_330_701_600_911_252)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        (((((((7.745_450_142_783_414_076_4e-4 * r + 0.022_723_844_989_269_184_583) * r
            + 0.241_780_725_177_450_611_77)
            * r
            + 1.270_458_252_452_368_382_58)
            * r
            + 3.647_848_324_763_204_605_04)
            * r
            + 5.769_497_221_460_691_405_5)
            * r
            + 4.630_337_846_156_545_295_9)
            * r
            + 1.423_437_110_749_683_577_34)
            / (((((((1.050_750_071_644_416_843_24e-9 * r + 5.475_938_084_995_344_946e-4)
                * r
                + 0.015_198_666_563_616_457_2)
                * r
                + 0.148_103_976_427_480_074_59)
                * r
                + 0.689_767_334_985_100_004_55)
                * r
                + 1.676_384_830_183_803_849_4)
                * r
                + 2.053_191_626_637_758_821_87)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((2.010_334_399_292_288_132_65e-7 * r + 2.711_555_568_743_487_578_15e-5)
            * r
            + 0.001_242_660_947_388_078_438_6)
            * r
            + 0.026_532_189_526_576_123_093)
            * r
            + 0.296_560_571_828_504_891_23)
            * r
            + 1.784_826_539_917_291_335_8)
            * r
            + 5.463_784_911_164_114_369_9)
            * r
            + 6.657_904_643_501_103_777_2)
            / (((((((2.044_263_103_389_939_785_64e-15 * r + 1.421_511_758_316_445_887_88e-7)
                * r
                + 1.846_318_317_510_054_681_89e-5)
                * r
                + 7.868_691_311_456_132_591e-4)
                * r
                + 0.014_875_361_290_850_615_025)
                * r
                + 0.136_929_880_922_735_805_31)
                * r
                + 0.599_832_206_555_887_937_69)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

fn chebyshev(coef: &[f64], x: f64) -> f64 {
    let y2 = 2.0 * x;
    let (mut d, mut dd) = (0.0, 0.0);
    for &c in coef[1..].iter().rev() {
        let sv = d;
        d = y2 * d - dd + c;
        dd = sv;
    }
    x * d - dd + 0.5 * coef[0]
}

/// Returns (gam1, gam2, 1/Γ(1+x), 1/Γ(1-x)) for |x| <= 1/2.
fn temme_gammas(x: f64) -> (f64, f64, f64, f64) {
    const C1: [f64; 7] = [
        -1.142_022_680_371_168e0,
        6.516_511_267_073_7e-3,
        3.087_090_173_086e-4,
        -3.470_626_964_9e-6,
        6.943_766_4e-9,
        3.677_95e-11,
        -1.356e-13,
    ];
    const C2: [f64; 8] = [
        1.843_740_587_300_905e0,
        -7.685_284_084_478_67e-2,
        1.271_927_136_654_6e-3,
        -4.971_736_704_2e-6,
        -3.312_611_98e-8,
        2.423_096e-10,
        -1.702e-13,
        -1.49e-15,
    ];
    let xx = 8.0 * x * x - 1.0;
    let gam1 = chebyshev(&C1, xx);
    let gam2 = chebyshev(&C2, xx);
    (gam1, gam2, gam2 - x * gam1, gam2 + x * gam1)
}

/// Modified Bessel function of the second kind `K_nu(x)` for real `nu` and
/// `x > 0`. Temme's series below `x = 2`, Steed's continued fraction above,
/// then upward recurrence in the order.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    if x.is_nan() || nu.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        return f64::INFINITY;
    }
    let nu = nu.abs();
    let nl = (nu + 0.5).floor() as usize;
    let xmu = nu - nl as f64;
    let xmu2 = xmu * xmu;
    let xi = 1.0 / x;
    let xi2 = 2.0 * xi;
    let (mut rkmu, mut rk1);
    if x < 2.0 {
        let x2 = 0.5 * x;
        let pimu = PI * xmu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = xmu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(xmu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let e = e.exp();
        let mut p = 0.5 * e / gampl;
        let mut q = 0.5 / (e * gammi);
        let mut c = 1.0;
        let d = x2 * x2;
        let mut sum1 = p;
        for i in 1..=MAX_ITER {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - xmu2);
            c *= d / fi;
            p /= fi - xmu;
            q /= fi + xmu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        rkmu = sum;
        rk1 = sum1 * xi2;
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - xmu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..=MAX_ITER {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh = (b * d - 1.0) * delh;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        h *= a1;
        rkmu = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        rk1 = rkmu * (xmu + x + 0.5 - h) * xi;
    }
    for i in 1..=nl {
        let next = (xmu + i as f64) * xi2 * rk1 + rkmu;
        rkmu = rk1;
        rk1 = next;
    }
    rkmu
}

/// Neumaier-compensated sum; the result does not depend on how the input was
/// partitioned for parallel evaluation as long as the order is fixed.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + compensated_sum(values.iter().map(|v| (v - max).exp())).ln()
}
