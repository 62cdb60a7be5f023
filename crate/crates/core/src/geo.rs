//! Record coordinates and ground distance.

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Coordinate {
    /// Planar easting/northing in meters.
    Utm { easting: f64, northing: f64 },
    /// Latitude/longitude in degrees.
    LatLon { lat: f64, lon: f64 },
}

impl Coordinate {
    pub fn utm(easting: f64, northing: f64) -> Self {
        Coordinate::Utm { easting, northing }
    }

    pub fn lat_lon(lat: f64, lon: f64) -> Self {
        Coordinate::LatLon { lat, lon }
    }

    pub fn same_convention(&self, other: &Coordinate) -> bool {
        matches!(
            (self, other),
            (Coordinate::Utm { .. }, Coordinate::Utm { .. }) | (Coordinate::LatLon { .. }, Coordinate::LatLon { .. })
        )
    }
}

/// Meters between two points: Euclidean for UTM, haversine for lat/lon.
pub fn geo_distance(a: &Coordinate, b: &Coordinate) -> Result<f64> {
    match (*a, *b) {
        (
            Coordinate::Utm {
                easting: ea,
                northing: na,
            },
            Coordinate::Utm {
                easting: eb,
                northing: nb,
            },
        ) => Ok((ea - eb).hypot(na - nb)),
        (Coordinate::LatLon { lat: la, lon: oa }, Coordinate::LatLon { lat: lb, lon: ob }) => {
            let (p1, p2) = (la.to_radians(), lb.to_radians());
            let dp = p2 - p1;
            let dl = (ob - oa).to_radians();
            let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
            Ok(2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin())
        }
        _ => Err(Error::Domain("cannot mix UTM and lat/lon coordinates".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_and_haversine() {
        assert_eq!(
            geo_distance(&Coordinate::utm(0.0, 0.0), &Coordinate::utm(3.0, 4.0)).unwrap(),
            5.0
        );
        let p = Coordinate::lat_lon(45.1, 7.6);
        assert_eq!(geo_distance(&p, &p).unwrap(), 0.0);
        let d = geo_distance(&Coordinate::lat_lon(0.0, 0.0), &Coordinate::lat_lon(0.0, 0.001)).unwrap();
        // arc length of 0.001° on a great circle
        let want = EARTH_RADIUS_M * 0.001f64.to_radians();
        assert!((d - want).abs() < 1e-6);
        assert!((d - 111.19).abs() < 0.01);
        assert!(geo_distance(&p, &Coordinate::utm(0.0, 0.0)).is_err());
    }
}
