//! Fixed-bin histograms of logged gradient factors, one per
//! (layer, epoch, part) cell, for external plotting.

use std::collections::BTreeMap;

use privlora_core::Part;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// One logged factor: a client's transmitted `A` or `B` for one adapted
/// weight after one local epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogEntry {
    pub client: usize,
    pub layer: usize,
    pub module: usize,
    pub epoch: usize,
    pub part: Part,
    pub values: Vec<f64>,
}

/// Parses a JSON-lines gradient log.
pub fn parse_log(bytes: &[u8]) -> Result<Vec<LogEntry>> {
    let mut out = Vec::new();
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let entry: LogEntry = serde_json::from_slice(line)
            .map_err(|e| CliError::config(format!("gradient log line {}: {e}", i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

/// Symmetric bins over `[-range, range]`. The count is odd so that zero
/// sits at the centre of the middle bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Binning {
    pub bins: usize,
    pub range: f64,
}

impl Binning {
    pub fn new(bins: usize, range: f64) -> Result<Self> {
        if bins == 0 || bins % 2 == 0 {
            return Err(CliError::config(format!("bin count must be odd, got {bins}")));
        }
        if !(range > 0.0) || !range.is_finite() {
            return Err(CliError::config(format!("histogram range must be positive, got {range}")));
        }
        Ok(Self { bins, range })
    }

    /// Range from the largest magnitude in the log, or 1 when it is all zero.
    pub fn fit(bins: usize, values: impl Iterator<Item = f64>) -> Result<Self> {
        let max = values.map(f64::abs).fold(0.0, f64::max);
        Self::new(bins, if max > 0.0 { max } else { 1.0 })
    }

    pub fn width(&self) -> f64 {
        2.0 * self.range / self.bins as f64
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let lo = -self.range + bin as f64 * self.width();
        (lo, lo + self.width())
    }

    /// Bin index, with out-of-range values clamped to the end bins.
    pub fn index(&self, x: f64) -> usize {
        let i = ((x + self.range) / self.width()).floor();
        (i.max(0.0) as usize).min(self.bins - 1)
    }

    pub fn counts(&self, values: impl Iterator<Item = f64>) -> Vec<u64> {
        let mut counts = vec![0u64; self.bins];
        for x in values {
            counts[self.index(x)] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramRow {
    pub layer: usize,
    pub epoch: usize,
    pub part: &'static str,
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    pub density: f64,
}

/// Histograms for every (layer, epoch, part) cell, pooling clients and
/// modules, on edges shared by all cells.
pub fn histograms(entries: &[LogEntry], binning: Binning) -> Vec<HistogramRow> {
    let mut cells: BTreeMap<(usize, usize, Part), Vec<u64>> = BTreeMap::new();
    for e in entries {
        let counts = cells.entry((e.layer, e.epoch, e.part)).or_insert_with(|| vec![0; binning.bins]);
        for (c, add) in counts.iter_mut().zip(binning.counts(e.values.iter().copied())) {
            *c += add;
        }
    }
    let mut rows = Vec::new();
    for ((layer, epoch, part), counts) in cells {
        let total: u64 = counts.iter().sum();
        for (bin, &count) in counts.iter().enumerate() {
            let (lower, upper) = binning.edges(bin);
            rows.push(HistogramRow {
                layer,
                epoch,
                part: part.as_str(),
                bin,
                lower,
                upper,
                count,
                density: if total == 0 { 0.0 } else { count as f64 / (total as f64 * binning.width()) },
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use privlora_core::accountant::normal::{cdf, quantile};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn entry(epoch: usize, part: Part, values: Vec<f64>) -> LogEntry {
        LogEntry {
            client: 0,
            layer: 0,
            module: 0,
            epoch,
            part,
            values,
        }
    }

    #[test]
    fn zeros_fill_only_the_centre_bin() {
        let b = Binning::fit(41, std::iter::repeat_n(0.0, 10)).unwrap();
        let rows = histograms(&[entry(0, Part::A, vec![0.0; 100])], b);
        let occupied: Vec<_> = rows.iter().filter(|r| r.count > 0).collect();
        assert_eq!(occupied.len(), 1);
        assert_eq!(occupied[0].bin, 20);
        assert!(occupied[0].lower < 0.0 && occupied[0].upper > 0.0);
    }

    #[test]
    fn even_bins_are_rejected() {
        assert!(Binning::new(40, 1.0).is_err());
        assert!(Binning::new(41, 0.0).is_err());
    }

    #[test]
    fn edges_are_shared_across_epochs() {
        let entries = [entry(0, Part::A, vec![0.5, -0.1]), entry(1, Part::A, vec![0.01, 0.02])];
        let b = Binning::fit(5, entries.iter().flat_map(|e| e.values.iter().copied())).unwrap();
        let rows = histograms(&entries, b);
        let e0: Vec<_> = rows.iter().filter(|r| r.epoch == 0).map(|r| (r.lower, r.upper)).collect();
        let e1: Vec<_> = rows.iter().filter(|r| r.epoch == 1).map(|r| (r.lower, r.upper)).collect();
        assert_eq!(e0, e1);
        assert_eq!(rows.iter().map(|r| r.count).sum::<u64>(), 4);
    }

    #[test]
    fn gaussian_sample_passes_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = Normal::new(0.0, 0.02).unwrap();
        let xs: Vec<f64> = (0..100_000).map(|_| d.sample(&mut rng)).collect();
        let b = Binning::new(41, 0.08).unwrap();
        let counts = b.counts(xs.iter().copied());
        let n = xs.len() as f64;
        let mut chi2 = 0.0;
        for (i, &c) in counts.iter().enumerate() {
            // End bins absorb the tails.
            let (lo, hi) = b.edges(i);
            let lo = if i == 0 { f64::NEG_INFINITY } else { lo };
            let hi = if i == b.bins - 1 { f64::INFINITY } else { hi };
            let expected = n * (cdf(hi / 0.02) - cdf(lo / 0.02));
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // Wilson-Hilferty upper 0.1% point for 40 degrees of freedom.
        let k = (b.bins - 1) as f64;
        let z = quantile(0.999);
        let critical = k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3);
        assert!(chi2 < critical, "chi2 {chi2} vs {critical}");
    }

    #[test]
    fn log_round_trips_through_json_lines() {
        let e = entry(2, Part::B, vec![1.5, -0.25]);
        let mut bytes = serde_json::to_vec(&e).unwrap();
        bytes.extend_from_slice(b"\n\n");
        bytes.extend(serde_json::to_vec(&e).unwrap());
        assert_eq!(parse_log(&bytes).unwrap(), vec![e.clone(), e]);
        assert!(parse_log(b"{\"client\": 1}").is_err());
    }
}
