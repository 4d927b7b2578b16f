//! CSV tables. Numbers are written with Rust's shortest round-trip
//! formatting, so parsing a file back gives the exact values.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use fiberqkd::distill::KeyRateReport;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::Result;

pub trait CsvRow {
    const HEADER: &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

macro_rules! csv_row {
    ($(#[$meta:meta])* $name:ident { $($field:ident : $ty:ty),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            $(pub $field: $ty,)*
        }

        impl CsvRow for $name {
            const HEADER: &'static [&'static str] = &[$(stringify!($field)),*];
            fn fields(&self) -> Vec<String> {
                vec![$(self.$field.to_string()),*]
            }
        }
    };
}

csv_row! {
    /// One session in the key-rate report schema. `n_required` is `inf`
    /// when no block length gives a key.
    ReportRow {
        length_km_per_arm: f64,
        traffic_mbps: f64,
        sifted_rate: f64,
        qber: f64,
        asymptotic_rate: f64,
        finite_length: u64,
        n_required: f64,
    }
}

impl From<&KeyRateReport> for ReportRow {
    fn from(r: &KeyRateReport) -> Self {
        Self {
            length_km_per_arm: r.length_km_per_arm,
            traffic_mbps: r.traffic_mbps,
            sifted_rate: r.sifted_rate,
            qber: r.qber,
            asymptotic_rate: r.asymptotic_secret_rate,
            finite_length: r.finite_secret_length,
            n_required: r.n_required.map_or(f64::INFINITY, |n| n as f64),
        }
    }
}

csv_row! {
    QberLengthRow {
        length_km_per_arm: f64,
        variant: String,
        traffic_mbps: f64,
        repetitions: u32,
        qber_mean: f64,
        qber_sem: f64,
        visibility_unfiltered_mean: f64,
        visibility_filtered_mean: f64,
        retained_fraction_mean: f64,
        analytic_qber: f64,
    }
}

csv_row! {
    SkrLengthRow {
        length_km_per_arm: f64,
        variant: String,
        traffic_mbps: f64,
        repetitions: u32,
        sifted_rate_mean: f64,
        sifted_rate_sem: f64,
        asymptotic_rate_mean: f64,
        asymptotic_rate_sem: f64,
        finite_length_mean: f64,
        finite_length_sem: f64,
        analytic_asymptotic_rate: f64,
    }
}

csv_row! {
    TrafficRow {
        length_km_per_arm: f64,
        traffic_mbps: f64,
        repetitions: u32,
        qber_mean: f64,
        qber_sem: f64,
        sifted_rate_mean: f64,
        sifted_rate_sem: f64,
        asymptotic_rate_mean: f64,
        asymptotic_rate_sem: f64,
    }
}

csv_row! {
    /// Closed-form operating point; no sampling, so no error bars.
    ExtrapolationRow {
        length_km_per_arm: f64,
        variant: String,
        pair_rate: f64,
        sifted_rate: f64,
        qber: f64,
        asymptotic_rate: f64,
    }
}

/// Writes a header line then one line per row.
pub fn emit_csv<R: CsvRow>(rows: &[R], path: &Path) -> Result<()> {
    let mut out = csv::Writer::from_writer(File::create(path)?);
    out.write_record(R::HEADER)?;
    for row in rows {
        out.write_record(row.fields())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<R>, csv::Error>>()?;
    Ok(rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
