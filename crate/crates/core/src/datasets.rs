//! Bundled example data.

use crate::error::Result;
use crate::model::{ModelSpec, SpecFile};
use crate::moments::DataMatrix;

/// Grant-White school subset of the Holzinger-Swineford (1939) ability data, N = 145, x1..x9.
pub const HOLZINGER_GRANT_WHITE_CSV: &str = include_str!("../data/holzinger_grant_white.csv");

/// Three-factor model (visual, textual, speed) with x9 also loading on visual.
pub const HOLZINGER_THREE_FACTOR_JSON: &str = include_str!("../data/holzinger_three_factor.json");

pub fn holzinger_grant_white() -> Result<DataMatrix> {
    DataMatrix::from_csv_reader(HOLZINGER_GRANT_WHITE_CSV.as_bytes())
}

pub fn holzinger_three_factor() -> Result<ModelSpec> {
    SpecFile::from_json(HOLZINGER_THREE_FACTOR_JSON)?.to_spec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_data_shape() {
        let x = holzinger_grant_white().unwrap();
        assert_eq!((x.n(), x.p()), (145, 9));
        let spec = holzinger_three_factor().unwrap();
        assert_eq!(spec.q(), 22);
        assert_eq!(spec.df(), 23);
        assert_eq!(spec.variables(), x.names());
    }
}
