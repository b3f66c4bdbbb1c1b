use std::sync::LazyLock;

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    /// Environmental: retried on the same seed.
    Infra,
    /// Anything else: the seed is replaced by a backup.
    Training,
}

/// Out-of-memory, device-error and host-disconnect signatures. None of them
/// contains a digit, so no metric value can trigger a match.
pub const INFRA_PATTERNS: &[&str] = &[
    r"out of memory",
    r"\boom\b",
    r"outofmemoryerror",
    r"cannot allocate memory",
    r"\bmemoryerror\b",
    r"cuda error",
    r"cuda runtime error",
    r"cudnn_status_[a-z_]+",
    r"cublas_status_[a-z_]+",
    r"device-side assert",
    r"illegal memory access",
    r"nccl error",
    r"ecc error",
    r"connection reset",
    r"connection refused",
    r"broken pipe",
    r"host unreachable",
    r"no route to host",
    r"lost connection",
    r"host disconnected",
    r"node failure",
];

static INFRA: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(&format!("(?i){}", INFRA_PATTERNS.join("|"))).expect("infra patterns compile"));

pub fn classify_failure(log_text: &str) -> FailureKind {
    if INFRA.is_match(log_text) {
        FailureKind::Infra
    } else {
        FailureKind::Training
    }
}

pub const REDACTED: &str = "[REDACTED]";

/// Keys whose integer values are bookkeeping, not outcomes.
const BOOKKEEPING_KEYS: &[&str] = &[
    "seed", "epoch", "step", "attempt", "slot", "batch", "rank", "pid", "n", "rows", "retry", "run", "stage",
];

const NUM: &str = r"[-+]?(?:\d+(?:\.\d+)?|\.\d+)(?:[eE][-+]?\d+)?";

static METRIC: LazyLock<Regex> = LazyLock::new(|| {
    let metric_words = r"macro[_\- ]?f1|micro[_\- ]?f1|weighted[_\- ]?f1|mf1|f1|accuracy|acc|loss|precision|recall|auc|score|delta";
    let pattern = format!(
        concat!(
            r"(?P<key>\b[A-Za-z][\w.\-/]*)(?P<sep>\s*[=:]\s*)(?P<num>{num}%?)",
            r"|(?P<mkey>(?i:\b(?:{mw})))(?P<gap>\s+(?:(?i:of|is|was|at)\s+)?)(?P<mnum>{num}%?)",
            r"|(?P<pct>{num}\s*%)",
            r"|(?P<dec>[-+]?\d*\.\d+(?:[eE][-+]?\d+)?|\d+[eE][-+]?\d+)",
        ),
        num = NUM,
        mw = metric_words
    );
    Regex::new(&pattern).expect("metric pattern compiles")
});

/// Replaces metric values with [`REDACTED`]: values of `key=number` and
/// `key: number` pairs (integers under bookkeeping keys such as `seed` or
/// `epoch` are kept), numbers right after metric names, percentages, and
/// every decimal or scientific-notation numeral. Other text, including
/// plain integers, is preserved.
pub fn redact_metrics(line: &str) -> String {
    METRIC
        .replace_all(line, |c: &Captures<'_>| {
            if let Some(key) = c.name("key") {
                let num = &c["num"];
                let integer = num.bytes().all(|b| b.is_ascii_digit() || b == b'-' || b == b'+');
                if integer && BOOKKEEPING_KEYS.contains(&key.as_str().to_ascii_lowercase().as_str()) {
                    return c[0].to_owned();
                }
                format!("{}{}{REDACTED}", key.as_str(), &c["sep"])
            } else if let Some(mkey) = c.name("mkey") {
                format!("{}{}{REDACTED}", mkey.as_str(), &c["gap"])
            } else {
                REDACTED.to_owned()
            }
        })
        .into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_examples() {
        assert_eq!(classify_failure("RuntimeError: CUDA out of memory. Tried"), FailureKind::Infra);
        assert_eq!(classify_failure("NCCL error: unhandled system error"), FailureKind::Infra);
        assert_eq!(classify_failure("ssh: connect: No route to host"), FailureKind::Infra);
        assert_eq!(classify_failure("loss became NaN at step 412"), FailureKind::Training);
        assert_eq!(classify_failure("macro_f1=84.45"), FailureKind::Training);
        assert_eq!(classify_failure("room for improvement"), FailureKind::Training);
    }

    #[test]
    fn infra_patterns_are_digit_free() {
        assert!(INFRA_PATTERNS.iter().all(|p| !p.bytes().any(|b| b.is_ascii_digit())));
    }

    #[test]
    fn redaction_examples() {
        assert_eq!(
            redact_metrics("epoch 3 done, val macro_f1=84.45"),
            "epoch 3 done, val macro_f1=[REDACTED]"
        );
        assert_eq!(redact_metrics("seed 1277 started"), "seed 1277 started");
        assert_eq!(redact_metrics("seed=1277 epoch=2"), "seed=1277 epoch=2");
        assert_eq!(redact_metrics("acc 84.45%"), "acc [REDACTED]");
        assert_eq!(redact_metrics("macro F1 of 84"), "macro F1 of [REDACTED]");
        assert_eq!(redact_metrics("f1: 84"), "f1: [REDACTED]");
        assert_eq!(redact_metrics("Δ=+2.04 pp"), "Δ=[REDACTED] pp");
        assert_eq!(redact_metrics("grad norm 3.2e-4"), "grad norm [REDACTED]");
        assert_eq!(redact_metrics("wrote 696 rows"), "wrote 696 rows");
    }
}
