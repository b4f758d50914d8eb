//! Upload volume of codec pretraining: raw recorded factors versus the two
//! statistics per cell of the (layer, module, epoch, part) grid.

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadModel {
    pub n: u64,
    pub r: u64,
    pub parts: u64,
    pub modules: u64,
    pub layers: u64,
    pub epochs: u64,
    pub bytes_per_scalar: u64,
}

impl PayloadModel {
    /// 4096-wide, 32-layer model with four adapted projections per layer,
    /// rank 8, 20 local epochs.
    pub const LLAMA: PayloadModel = PayloadModel {
        n: 4096,
        r: 8,
        parts: 2,
        modules: 4,
        layers: 32,
        epochs: 20,
        bytes_per_scalar: 8,
    };

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n", self.n),
            ("r", self.r),
            ("parts", self.parts),
            ("modules", self.modules),
            ("layers", self.layers),
            ("epochs", self.epochs),
            ("bytes_per_scalar", self.bytes_per_scalar),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(CliError::config(format!("payload field {name} must be at least 1"))),
            None => Ok(()),
        }
    }

    fn cells(&self) -> Result<u64> {
        [self.modules, self.layers, self.epochs]
            .iter()
            .try_fold(self.parts, |acc, &x| acc.checked_mul(x))
            .ok_or_else(|| CliError::config("payload counts overflow"))
    }

    pub fn compute(&self) -> Result<Payload> {
        self.validate()?;
        let overflow = || CliError::config("payload counts overflow");
        let cells = self.cells()?;
        let raw = self.n.checked_mul(self.r).and_then(|x| x.checked_mul(cells)).ok_or_else(overflow)?;
        let stats = cells.checked_mul(2).ok_or_else(overflow)?;
        Ok(Payload {
            raw_scalars: raw,
            stats_scalars: stats,
            raw_bytes: raw.checked_mul(self.bytes_per_scalar).ok_or_else(overflow)?,
            stats_bytes: stats.checked_mul(self.bytes_per_scalar).ok_or_else(overflow)?,
            ratio: stats as f64 / raw as f64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Payload {
    pub raw_scalars: u64,
    pub stats_scalars: u64,
    pub raw_bytes: u64,
    pub stats_bytes: u64,
    pub ratio: f64,
}

/// Scientific notation with three significant figures, e.g. `6.10e-5`.
pub fn sig3(x: f64) -> String {
    let s = format!("{x:.2e}");
    match s.split_once('e') {
        Some((mantissa, exp)) => format!("{mantissa}e{}", exp.parse::<i32>().unwrap_or(0)),
        None => s,
    }
}

impl Payload {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Row {
            mode: &'static str,
            scalars: u64,
            bytes: u64,
        }
        let mut out = crate::io::csv_bytes([
            Row {
                mode: "raw",
                scalars: self.raw_scalars,
                bytes: self.raw_bytes,
            },
            Row {
                mode: "stats",
                scalars: self.stats_scalars,
                bytes: self.stats_bytes,
            },
        ])?;
        out.extend_from_slice(format!("ratio,{},\n", sig3(self.ratio)).as_bytes());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_profile_counts() {
        let p = PayloadModel::LLAMA.compute().unwrap();
        assert_eq!(p.raw_scalars, 167_772_160);
        assert_eq!(p.stats_scalars, 10_240);
        assert_eq!(sig3(p.ratio), "6.10e-5");
    }

    #[test]
    fn unit_grid_has_four_statistics() {
        let m = PayloadModel {
            modules: 1,
            layers: 1,
            epochs: 1,
            ..PayloadModel::LLAMA
        };
        assert_eq!(m.compute().unwrap().stats_scalars, 4);
    }

    #[test]
    fn ratio_is_invariant_in_epochs() {
        let base = PayloadModel::LLAMA.compute().unwrap().ratio;
        for epochs in [1, 3, 77] {
            let m = PayloadModel { epochs, ..PayloadModel::LLAMA };
            assert_eq!(m.compute().unwrap().ratio, base);
        }
    }

    #[test]
    fn zero_fields_and_overflow_are_rejected() {
        assert!(PayloadModel { layers: 0, ..PayloadModel::LLAMA }.compute().is_err());
        assert!(PayloadModel { n: u64::MAX, ..PayloadModel::LLAMA }.compute().is_err());
    }

    #[test]
    fn sig3_formatting() {
        assert_eq!(sig3(6.103515625e-5), "6.10e-5");
        assert_eq!(sig3(1234.5), "1.23e3");
        assert_eq!(sig3(0.5), "5.00e-1");
    }
}
