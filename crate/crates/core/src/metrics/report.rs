use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cost and quality figures of one generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub flops: f64,
    pub size_bytes: f64,
    pub proxy_fid: f64,
}

/// Teacher and student figures with the three compression ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub input_shape: String,
    pub flop_convention: String,
    pub teacher: ModelStats,
    pub student: ModelStats,
    /// FLOPs ratio, teacher over student.
    pub r_s: f64,
    /// Size ratio, teacher over student.
    pub r_c: f64,
    /// Proxy-FID ratio, teacher over student.
    pub r_f: f64,
}

/// Builds the report; every statistic must be positive and finite.
pub fn compression_ratios(
    teacher: ModelStats,
    student: ModelStats,
    input_shape: impl Into<String>,
    flop_convention: impl Into<String>,
) -> Result<CompressionReport> {
    for (name, v) in [
        ("teacher flops", teacher.flops),
        ("student flops", student.flops),
        ("teacher size", teacher.size_bytes),
        ("student size", student.size_bytes),
        ("teacher proxy fid", teacher.proxy_fid),
        ("student proxy fid", student.proxy_fid),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::config(format!("{name} must be positive and finite, got {v}")));
        }
    }
    Ok(CompressionReport {
        input_shape: input_shape.into(),
        flop_convention: flop_convention.into(),
        r_s: teacher.flops / student.flops,
        r_c: teacher.size_bytes / student.size_bytes,
        r_f: teacher.proxy_fid / student.proxy_fid,
        teacher,
        student,
    })
}

const KEYS: [&str; 11] = [
    "input_shape",
    "flop_convention",
    "flops_teacher",
    "flops_student",
    "size_bytes_teacher",
    "size_bytes_student",
    "proxy_fid_teacher",
    "proxy_fid_student",
    "r_s",
    "r_c",
    "r_f",
];

impl CompressionReport {
    /// Flat `key = value` text record. Reals use the shortest exact form.
    pub fn to_record(&self) -> String {
        let vals = [
            self.input_shape.clone(),
            self.flop_convention.clone(),
            format!("{:?}", self.teacher.flops),
            format!("{:?}", self.student.flops),
            format!("{:?}", self.teacher.size_bytes),
            format!("{:?}", self.student.size_bytes),
            format!("{:?}", self.teacher.proxy_fid),
            format!("{:?}", self.student.proxy_fid),
            format!("{:?}", self.r_s),
            format!("{:?}", self.r_c),
            format!("{:?}", self.r_f),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(vals) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "compression report",
            reason,
        };
        let mut map = BTreeMap::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(bad(format!("unknown key `{k}`")));
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| bad(format!("missing key `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("`{k}` is not a number"))) };
        Ok(CompressionReport {
            input_shape: get("input_shape")?,
            flop_convention: get("flop_convention")?,
            teacher: ModelStats {
                flops: num("flops_teacher")?,
                size_bytes: num("size_bytes_teacher")?,
                proxy_fid: num("proxy_fid_teacher")?,
            },
            student: ModelStats {
                flops: num("flops_student")?,
                size_bytes: num("size_bytes_student")?,
                proxy_fid: num("proxy_fid_student")?,
            },
            r_s: num("r_s")?,
            r_c: num("r_c")?,
            r_f: num("r_f")?,
        })
    }
}

/// Plain-text comparison table, one row per labelled report.
pub fn render_table(rows: &[(String, CompressionReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>12} {:>11} {:>11} {:>7} {:>7} {:>7}",
        "variant", "MFLOPs", "size KiB", "proxy FID", "r_s", "r_c", "r_f"
    );
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>12.3} {:>11.2} {:>11.4} {:>7.2} {:>7.2} {:>7.3}",
            label,
            r.student.flops / 1e6,
            r.student.size_bytes / 1024.0,
            r.student.proxy_fid,
            r.r_s,
            r.r_c,
            r.r_f
        );
    }
    out
}
