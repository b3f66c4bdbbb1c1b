//! Fixtures shared by the integration suites.
#![allow(dead_code)]

use typedcsip::rng::StreamRng;

/// Published per-seed test macro-F1: seed, v2 on backbone R, v2 on backbone
/// S, v1 on backbone R, C2 on R, C2 on S.
pub const PER_SEED: [(u64, f64, f64, f64, f64, f64); 18] = [
    (838, 84.77, 84.56, 84.50, 82.73, 82.06),
    (1189, 83.31, 84.52, 84.17, 83.18, 82.89),
    (1277, 86.98, 84.87, 85.41, 83.80, 82.68),
    (1339, 83.17, 85.08, 84.91, 82.79, 84.60),
    (1584, 83.32, 85.85, 84.61, 82.85, 83.95),
    (1727, 84.75, 85.46, 86.41, 84.53, 82.73),
    (2502, 83.11, 83.08, 85.67, 82.63, 82.88),
    (3943, 84.77, 83.93, 83.79, 83.37, 85.25),
    (4202, 84.89, 85.11, 84.03, 83.94, 84.56),
    (4962, 84.53, 85.38, 84.74, 83.04, 83.70),
    (6607, 84.67, 86.71, 84.09, 84.82, 82.11),
    (7146, 84.45, 85.23, 84.88, 84.31, 82.41),
    (7516, 84.36, 84.48, 85.41, 84.25, 83.66),
    (7565, 84.89, 83.15, 84.53, 83.16, 83.46),
    (8176, 83.44, 84.02, 84.70, 83.88, 83.67),
    (8635, 84.29, 83.34, 84.61, 83.30, 82.09),
    (9329, 85.46, 83.47, 83.42, 83.43, 82.63),
    (9900, 84.98, 83.76, 84.27, 83.64, 83.50),
];

pub fn v2_r() -> Vec<(u64, f64, f64)> {
    PER_SEED.iter().map(|r| (r.0, r.1, r.4)).collect()
}

pub fn v2_s() -> Vec<(u64, f64, f64)> {
    PER_SEED.iter().map(|r| (r.0, r.2, r.5)).collect()
}

pub fn v1_r() -> Vec<(u64, f64, f64)> {
    PER_SEED.iter().map(|r| (r.0, r.3, r.4)).collect()
}

/// One planted log line and the exact text redaction must produce.
pub struct PlantedLine {
    pub line: String,
    pub expected: String,
    /// Metric values planted in the line.
    pub values: Vec<String>,
}

fn metric_value(rng: &mut StreamRng, allow_integer: bool) -> String {
    let sign = match rng.below(6) {
        0 => "-",
        1 => "+",
        _ => "",
    };
    let whole = rng.below(100);
    match rng.below(if allow_integer { 5 } else { 4 }) {
        0 => format!("{sign}{whole}.{:02}", rng.below(100)),
        1 => format!("{sign}{whole}.{:04}", rng.below(10_000)),
        2 => format!("{sign}0.{:03}", rng.below(1000)),
        3 => format!("{sign}{}.{}e-{}", 1 + rng.below(9), rng.below(10), 1 + rng.below(9)),
        _ => format!("{sign}{whole}"),
    }
}

/// Deterministic corpus of log lines with planted metric values.
///
/// Template markers: `{v}` metric value kept after its key, `{d}` decimal
/// metric value in a context without a key, `{p}` percentage (value and
/// sign both replaced), `{i}` bookkeeping integer that must survive.
pub fn planted_metric_lines(n: usize, seed: u64) -> Vec<PlantedLine> {
    const TEMPLATES: &[&str] = &[
        "epoch {i} done, val macro_f1={v}",
        "step {i}: loss={v}",
        "[eval] accuracy: {v} on {i} rows",
        "macro F1 {v} at epoch {i}",
        "seed={i} f1={v} best={v}",
        "precision={v} recall={v}",
        "val acc {p}",
        "delta: {v} (seed {i})",
        "score {v}",
        "Δ={d} pp vs baseline",
        "run {i} finished with {d} mean",
        "F1 of {v}",
        "mF1 {v}, epoch {i}",
        "batch {i} of {i} processed in {d}s",
        "[{i}] macro-F1 now {p}",
    ];
    let mut rng = StreamRng::new(seed);
    (0..n)
        .map(|_| {
            let t = TEMPLATES[rng.below(TEMPLATES.len() as u64) as usize];
            let (mut line, mut expected, mut values) = (String::new(), String::new(), Vec::new());
            let mut rest = t;
            while let Some(pos) = rest.find('{') {
                line.push_str(&rest[..pos]);
                expected.push_str(&rest[..pos]);
                let marker = &rest[pos..pos + 3];
                rest = &rest[pos + 3..];
                match marker {
                    "{i}" => {
                        let i = (1 + rng.below(5000)).to_string();
                        line.push_str(&i);
                        expected.push_str(&i);
                    }
                    "{v}" | "{d}" => {
                        let v = metric_value(&mut rng, marker == "{v}");
                        line.push_str(&v);
                        expected.push_str("[REDACTED]");
                        values.push(v);
                    }
                    "{p}" => {
                        let v = metric_value(&mut rng, true);
                        line.push_str(&format!("{v}%"));
                        expected.push_str("[REDACTED]");
                        values.push(v);
                    }
                    _ => unreachable!("unknown marker {marker}"),
                }
            }
            line.push_str(rest);
            expected.push_str(rest);
            PlantedLine { line, expected, values }
        })
        .collect()
}
