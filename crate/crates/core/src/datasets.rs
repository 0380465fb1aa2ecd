//! Bundled example datasets.

use crate::data::RawDataset;
use crate::error::{invalid, Result};

const IRIS: &str = include_str!("../data/iris.csv");
const GALAXY: &str = include_str!("../data/galaxy.csv");
const MORTALITY: &str = include_str!("../data/mortality.csv");

pub const NAMES: [&str; 3] = ["iris", "galaxy", "mortality"];

/// Fisher's iris measurements, 150 × 4 (sepal length, sepal width, petal
/// length, petal width).
pub fn iris() -> RawDataset {
    parse(IRIS)
}

/// Velocities of 82 galaxies in the Corona Borealis region, in 1000 km/s.
pub fn galaxy() -> RawDataset {
    parse(GALAXY)
}

/// Daily death notices of women aged 80+ in The Times, 1910–1912: one row
/// per day (1096 days), counts 0–9.
pub fn mortality() -> RawDataset {
    parse(MORTALITY)
}

fn parse(text: &str) -> RawDataset {
    RawDataset::from_csv_reader(text.as_bytes(), true).expect("bundled data parses")
}

pub fn by_name(name: &str) -> Result<RawDataset> {
    match name {
        "iris" => Ok(iris()),
        "galaxy" => Ok(galaxy()),
        "mortality" => Ok(mortality()),
        _ => invalid(format!(
            "unknown bundled dataset '{name}' (expected one of {})",
            NAMES.join(", ")
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!((iris().len(), iris().dim()), (150, 4));
        assert_eq!((galaxy().len(), galaxy().dim()), (82, 1));
        assert_eq!((mortality().len(), mortality().dim()), (1096, 1));
        assert!(by_name("yeast").is_err());
    }
}
