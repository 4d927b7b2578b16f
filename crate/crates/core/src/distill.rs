//! Sifting and secret-key-rate bounds.

use serde::{Deserialize, Serialize};

use crate::error::{check_fraction, invalid, Error, Result};
use crate::receiver::detector_bit;
use crate::tagproc::CoincidenceRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillParams {
    /// Error-correction inefficiency relative to the Shannon limit.
    pub f: f64,
    /// Security parameter of the finite-key bound.
    pub epsilon: f64,
}

impl Default for DistillParams {
    fn default() -> Self {
        Self {
            f: 1.1,
            epsilon: 1e-10,
        }
    }
}

impl DistillParams {
    pub fn validate(&self) -> Result<()> {
        check_inefficiency(self.f)?;
        check_epsilon(self.epsilon)
    }
}

fn check_inefficiency(f: f64) -> Result<()> {
    if f.is_finite() && f >= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!(
            "error-correction inefficiency must be >= 1, got {f}"
        )))
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )))
    }
}

fn check_qber(qber: f64) -> Result<()> {
    if (0.0..=0.5).contains(&qber) {
        Ok(())
    } else {
        Err(invalid(format!("qber must lie in [0, 0.5], got {qber}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiftedKey {
    pub bits_a: Vec<bool>,
    pub bits_b: Vec<bool>,
    pub qber: f64,
    pub duration: f64,
}

impl SiftedKey {
    pub fn len(&self) -> usize {
        self.bits_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits_a.is_empty()
    }
}

/// Keeps matched-basis coincidences; the bit is the detector's outcome index.
pub fn sift(records: &[CoincidenceRecord], duration: f64) -> Result<SiftedKey> {
    let (bits_a, bits_b): (Vec<bool>, Vec<bool>) = records
        .iter()
        .filter(|r| r.bases_match())
        .map(|r| (detector_bit(r.detector_a), detector_bit(r.detector_b)))
        .unzip();
    if bits_a.is_empty() {
        return Err(Error::NoMatchedBasis);
    }
    let errors = bits_a.iter().zip(&bits_b).filter(|(a, b)| a != b).count();
    Ok(SiftedKey {
        qber: errors as f64 / bits_a.len() as f64,
        bits_a,
        bits_b,
        duration,
    })
}

/// `H2(p) = -p log2 p - (1-p) log2 (1-p)`, with `H2(0) = H2(1) = 0`.
pub fn binary_entropy(p: f64) -> Result<f64> {
    check_fraction("p", p)?;
    if p == 0.0 || p == 1.0 {
        return Ok(0.0);
    }
    let q = 1.0 - p;
    Ok(-p * p.log2() - q * q.log2())
}

/// Secret fraction with bit error equal to phase error, times the sifted rate.
pub fn asymptotic_rate(sifted_rate: f64, qber: f64, f: f64) -> Result<f64> {
    check_qber(qber)?;
    check_inefficiency(f)?;
    if !(sifted_rate.is_finite() && sifted_rate >= 0.0) {
        return Err(invalid(format!(
            "sifted rate must be >= 0, got {sifted_rate}"
        )));
    }
    Ok(sifted_rate * asymptotic_yield(qber, f)?)
}

/// Per-sifted-bit secret fraction `max(0, 1 - (1 + f) H2(qber))`.
pub fn asymptotic_yield(qber: f64, f: f64) -> Result<f64> {
    let h = binary_entropy(qber)?;
    Ok((1.0 - f * h - h).max(0.0))
}

/// Extractable secret bits from `n` sifted bits, with the phase error bounded
/// by a Hoeffding term `mu = sqrt(ln(2/eps) / 2n)`.
pub fn finite_key_length(n: u64, qber: f64, f: f64, epsilon: f64) -> Result<u64> {
    if n == 0 {
        return Err(invalid("n must be >= 1"));
    }
    check_qber(qber)?;
    check_inefficiency(f)?;
    check_epsilon(epsilon)?;
    let n_f = n as f64;
    let mu = ((2.0 / epsilon).ln() / (2.0 * n_f)).sqrt();
    let phase = binary_entropy((qber + mu).min(0.5))?;
    let leak = f * n_f * binary_entropy(qber)?;
    let length = n_f * (1.0 - phase) - leak - 2.0 * (1.0 / epsilon).log2();
    Ok(if length > 0.0 {
        length.floor() as u64
    } else {
        0
    })
}

const MAX_SEARCH_BITS: u64 = 1 << 40;

/// Smallest `n` with `finite_key_length(n) >= 1`.
pub fn required_raw_bits(qber: f64, f: f64, epsilon: f64) -> Result<u64> {
    check_qber(qber)?;
    check_inefficiency(f)?;
    check_epsilon(epsilon)?;
    if asymptotic_yield(qber, f)? <= 0.0 {
        return Err(Error::NoPositiveKey);
    }
    let positive = |n: u64| finite_key_length(n, qber, f, epsilon).map(|l| l >= 1);

    let mut hi = 1u64;
    while !positive(hi)? {
        if hi >= MAX_SEARCH_BITS {
            return Err(Error::NoPositiveKey);
        }
        hi = (hi * 2).min(MAX_SEARCH_BITS);
    }
    // positive(lo) is false or lo == 0.
    let mut lo = hi / 2;
    if lo == 0 || positive(lo)? {
        return Ok(hi.min(lo.max(1)));
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if positive(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Session-level key-rate summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    pub length_km_per_arm: f64,
    pub traffic_mbps: f64,
    pub sifted_bits: u64,
    pub duration_s: f64,
    pub sifted_rate: f64,
    pub qber: f64,
    pub asymptotic_secret_rate: f64,
    pub finite_secret_length: u64,
    /// `None` when no block length yields a key.
    pub n_required: Option<u64>,
    pub params: DistillParams,
}

impl KeyRateReport {
    pub const CSV_HEADER: &'static str =
        "length_km_per_arm,traffic_mbps,sifted_rate,qber,asymptotic_rate,finite_length,n_required";

    pub fn from_sifted(
        key: &SiftedKey,
        params: DistillParams,
        length_km_per_arm: f64,
        traffic_mbps: f64,
    ) -> Result<Self> {
        params.validate()?;
        if key.duration.is_nan() || key.duration <= 0.0 {
            return Err(invalid("sifted key duration must be > 0"));
        }
        let n = key.len() as u64;
        let sifted_rate = n as f64 / key.duration;
        // A qber above one half still means no key; clamp for the bounds.
        let qber = key.qber.min(0.5);
        let n_required = match required_raw_bits(qber, params.f, params.epsilon) {
            Ok(n) => Some(n),
            Err(Error::NoPositiveKey) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            length_km_per_arm,
            traffic_mbps,
            sifted_bits: n,
            duration_s: key.duration,
            sifted_rate,
            qber: key.qber,
            asymptotic_secret_rate: asymptotic_rate(sifted_rate, qber, params.f)?,
            finite_secret_length: if n == 0 {
                0
            } else {
                finite_key_length(n, qber, params.f, params.epsilon)?
            },
            n_required,
            params,
        })
    }

    /// One CSV row in [`Self::CSV_HEADER`] order. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn csv_row(&self) -> String {
        let n_required = match self.n_required {
            Some(n) => n.to_string(),
            None => "inf".to_owned(),
        };
        format!(
            "{},{},{},{},{},{},{}",
            self.length_km_per_arm,
            self.traffic_mbps,
            self.sifted_rate,
            self.qber,
            self.asymptotic_secret_rate,
            self.finite_secret_length,
            n_required
        )
    }
}
