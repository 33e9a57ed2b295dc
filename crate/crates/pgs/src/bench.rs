//! Inference timing at several square input sizes.

use std::fmt::Write;
use std::time::Instant;

use pgs_core::config::PipelineConfig;
use pgs_core::feature_codec::random_image;
use pgs_core::params::ModelParameters;
use pgs_core::pipeline::forward;

use crate::error::{PgsError, Result};

pub const DEFAULT_SIZES: [usize; 3] = [256, 384, 512];

pub const REFERENCE_NOTE: &str = "reference GPU timings (NVIDIA A100): 0.094 / 0.198 / 0.464 s at 256 / 384 / 512";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    /// Mean wall-clock seconds of one `forward` call.
    pub seconds_per_image: f64,
}

/// Times `forward` on random `size × size` content/style pairs, `repeats` runs per size.
pub fn run_bench(
    params: &ModelParameters,
    cfg: &PipelineConfig,
    sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repeats == 0 || sizes.is_empty() {
        return Err(PgsError::Usage("bench needs at least one size and one repeat".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let content = random_image(size, size, seed);
        let style = random_image(size, size, seed.wrapping_add(1));
        let mut total = 0.0;
        for _ in 0..repeats {
            let start = Instant::now();
            forward(&content, &style, params, cfg)?;
            total += start.elapsed().as_secs_f64();
        }
        rows.push(BenchRow {
            size,
            seconds_per_image: total / repeats as f64,
        });
    }
    Ok(rows)
}

/// One `size seconds_per_image` row per size, then the reference note.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut out = String::from("size\tseconds_per_image\n");
    for r in rows {
        writeln!(out, "{}\t{:.6}", r.size, r.seconds_per_image).expect("string write");
    }
    writeln!(out, "# {REFERENCE_NOTE}").expect("string write");
    out
}

/// Parses a table written by [`format_table`].
pub fn parse_table(text: &str) -> Option<Vec<BenchRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    if lines.next()?.split_whitespace().collect::<Vec<_>>() != ["size", "seconds_per_image"] {
        return None;
    }
    lines
        .map(|l| {
            let mut parts = l.split_whitespace();
            let row = BenchRow {
                size: parts.next()?.parse().ok()?,
                seconds_per_image: parts.next()?.parse().ok()?,
            };
            parts.next().is_none().then_some(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip() {
        let rows = vec![
            BenchRow {
                size: 256,
                seconds_per_image: 0.5,
            },
            BenchRow {
                size: 512,
                seconds_per_image: 2.25,
            },
        ];
        let text = format_table(&rows);
        assert!(text.ends_with(&format!("# {REFERENCE_NOTE}\n")));
        assert_eq!(parse_table(&text).unwrap(), rows);
        assert!(parse_table("size seconds\n1 2\n").is_none());
    }
}
