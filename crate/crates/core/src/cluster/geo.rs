//! Geolocation bins: latitude/longitude rounded to a fixed number of decimals.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const DEFAULT_GEO_PRECISION: u32 = 3;
pub const MAX_GEO_PRECISION: u32 = 9;
const NO_GEO: &str = "no-geo";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeoError {
    #[error("coordinate out of range: lat {lat}, lon {lon}")]
    OutOfRangeCoordinate { lat: f64, lon: f64 },
    #[error("precision {0} exceeds {MAX_GEO_PRECISION}")]
    Precision(u32),
    #[error("malformed geo bin `{0}`")]
    Malformed(String),
}

/// A discretized location cell. Frames without a fix share [`GeoBin::NoGeo`].
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GeoBin {
    Cell { lat_key: String, lon_key: String },
    NoGeo,
}

impl GeoBin {
    /// Center coordinate of the cell.
    pub fn representative(&self) -> Option<(f64, f64, u32)> {
        match self {
            GeoBin::Cell { lat_key, lon_key } => {
                let precision = lat_key.split_once('.').map_or(0, |(_, f)| f.len() as u32);
                Some((lat_key.parse().ok()?, lon_key.parse().ok()?, precision))
            }
            GeoBin::NoGeo => None,
        }
    }
}

impl fmt::Display for GeoBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeoBin::Cell { lat_key, lon_key } => write!(f, "{lat_key},{lon_key}"),
            GeoBin::NoGeo => f.write_str(NO_GEO),
        }
    }
}

impl FromStr for GeoBin {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == NO_GEO {
            return Ok(GeoBin::NoGeo);
        }
        let (lat, lon) = s.split_once(',').ok_or_else(|| GeoError::Malformed(s.to_string()))?;
        let valid = |k: &str| k.parse::<f64>().is_ok_and(f64::is_finite);
        if !valid(lat) || !valid(lon) {
            return Err(GeoError::Malformed(s.to_string()));
        }
        Ok(GeoBin::Cell { lat_key: lat.to_string(), lon_key: lon.to_string() })
    }
}

impl Serialize for GeoBin {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GeoBin {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Rounds half away from zero to `precision` decimals and renders the keys.
pub fn geo_bin(lat: f64, lon: f64, precision: u32) -> Result<GeoBin, GeoError> {
    if precision > MAX_GEO_PRECISION {
        return Err(GeoError::Precision(precision));
    }
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(GeoError::OutOfRangeCoordinate { lat, lon });
    }
    Ok(GeoBin::Cell { lat_key: round_key(lat, precision), lon_key: round_key(lon, precision) })
}

/// Bins an optional fix; absent coordinates land in the sentinel bin.
pub fn geo_bin_opt(lat: Option<f64>, lon: Option<f64>, precision: u32) -> Result<GeoBin, GeoError> {
    match (lat, lon) {
        (Some(lat), Some(lon)) => geo_bin(lat, lon, precision),
        _ => Ok(GeoBin::NoGeo),
    }
}

fn round_key(x: f64, precision: u32) -> String {
    let scale = 10i64.pow(precision);
    // f64::round is half-away-from-zero; the integer form avoids "-0.000".
    let units = (x * scale as f64).round() as i64;
    let sign = if units < 0 { "-" } else { "" };
    let abs = units.unsigned_abs();
    let scale = scale as u64;
    if precision == 0 {
        format!("{sign}{abs}")
    } else {
        format!("{sign}{}.{:0width$}", abs / scale, abs % scale, width = precision as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cell(lat: &str, lon: &str) -> GeoBin {
        GeoBin::Cell { lat_key: lat.into(), lon_key: lon.into() }
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(geo_bin(42.3601, -71.0942, 3).unwrap(), cell("42.360", "-71.094"));
        assert_eq!(geo_bin(0.0, 0.0, 3).unwrap(), cell("0.000", "0.000"));
        assert_eq!(geo_bin(-0.0004, 0.0004, 3).unwrap(), cell("0.000", "0.000"));
        assert_eq!(geo_bin(-1.5, 2.5, 0).unwrap(), cell("-2", "3"));
        assert_eq!(geo_bin(90.0, -180.0, 2).unwrap(), cell("90.00", "-180.00"));
    }

    #[test]
    fn boundary_pairs() {
        // 0.0004 apart, both rounding to 42.360
        assert_eq!(geo_bin(42.3600, 0.0, 3).unwrap(), geo_bin(42.3604, 0.0, 3).unwrap());
        // 0.0004 apart straddling the half-millidegree
        assert_ne!(geo_bin(42.3603, 0.0, 3).unwrap(), geo_bin(42.3607, 0.0, 3).unwrap());
    }

    #[test]
    fn out_of_range() {
        assert!(matches!(geo_bin(91.0, 0.0, 3), Err(GeoError::OutOfRangeCoordinate { .. })));
        assert!(matches!(geo_bin(0.0, -180.5, 3), Err(GeoError::OutOfRangeCoordinate { .. })));
        assert!(matches!(geo_bin(f64::NAN, 0.0, 3), Err(GeoError::OutOfRangeCoordinate { .. })));
        assert!(matches!(geo_bin(0.0, 0.0, 12), Err(GeoError::Precision(12))));
    }

    #[test]
    fn string_form_round_trips() {
        let b = geo_bin(42.3601, -71.0942, 3).unwrap();
        assert_eq!(b.to_string(), "42.360,-71.094");
        assert_eq!("42.360,-71.094".parse::<GeoBin>().unwrap(), b);
        assert_eq!("no-geo".parse::<GeoBin>().unwrap(), GeoBin::NoGeo);
        assert!("nonsense".parse::<GeoBin>().is_err());
        assert_eq!(serde_json::to_string(&GeoBin::NoGeo).unwrap(), "\"no-geo\"");
        assert_eq!(geo_bin_opt(None, Some(1.0), 3).unwrap(), GeoBin::NoGeo);
    }

    proptest! {
        #[test]
        fn binning_the_representative_is_stable(lat in -90.0f64..=90.0, lon in -180.0f64..=180.0, p in 0u32..=6) {
            let b = geo_bin(lat, lon, p).unwrap();
            let (rlat, rlon, rp) = b.representative().unwrap();
            prop_assert_eq!(rp, p);
            prop_assert_eq!(geo_bin(rlat, rlon, p).unwrap(), b);
        }
    }
}
