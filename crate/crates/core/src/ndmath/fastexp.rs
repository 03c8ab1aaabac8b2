//! Branch-free `exp` for non-positive arguments, written so the compiler can
//! vectorize the hot log-sum-exp loops. Accurate to a few ulp on
//! `[-708, 0]`; returns exactly 0 below that (including `-inf`).

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
// 1.5·2⁵²: adding it rounds to an integer held in the low mantissa bits.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;
const FLOOR: f64 = -708.0;

// 1/n! for n = 2..=12.
const C2: f64 = 1.0 / 2.0;
const C3: f64 = 1.0 / 6.0;
const C4: f64 = 1.0 / 24.0;
const C5: f64 = 1.0 / 120.0;
const C6: f64 = 1.0 / 720.0;
const C7: f64 = 1.0 / 5040.0;
const C8: f64 = 1.0 / 40320.0;
const C9: f64 = 1.0 / 362_880.0;
const C10: f64 = 1.0 / 3_628_800.0;
const C11: f64 = 1.0 / 39_916_800.0;
const C12: f64 = 1.0 / 479_001_600.0;

#[inline(always)]
pub fn exp_nonpos(x: f64) -> f64 {
    let keep = x >= FLOOR;
    let xc = if keep { x } else { FLOOR };
    let t = xc * LOG2E + ROUND_MAGIC;
    let k = t - ROUND_MAGIC;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    let p = C11 + r * C12;
    let p = C10 + r * p;
    let p = C9 + r * p;
    let p = C8 + r * p;
    let p = C7 + r * p;
    let p = C6 + r * p;
    let p = C5 + r * p;
    let p = C4 + r * p;
    let p = C3 + r * p;
    let p = C2 + r * p;
    let p = 1.0 + r * p;
    let p = 1.0 + r * p;
    // Low bits of t hold k (two's complement); shift them into the exponent.
    let bits = (t.to_bits().wrapping_add(1023)) << 52;
    let y = p * f64::from_bits(bits);
    if keep {
        y
    } else {
        0.0
    }
}

/// `Σ exp(xᵢ − shift)` for `xᵢ ≤ shift`, with eight independent partial
/// sums so the loop vectorizes.
pub fn sum_exp_shifted(xs: &[f64], shift: f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let tail: f64 = chunks
        .remainder()
        .iter()
        .map(|&x| exp_nonpos(x - shift))
        .sum();
    for c in chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a += exp_nonpos(x - shift);
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}
