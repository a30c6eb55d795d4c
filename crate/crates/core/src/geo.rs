//! Small spherical-geometry helpers.

use serde::{Deserialize, Serialize};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        LatLon { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Great-circle distance in km on a sphere of radius 6371 km.
pub fn haversine_km(p1: LatLon, p2: LatLon) -> f64 {
    let phi1 = p1.lat.to_radians();
    let phi2 = p2.lat.to_radians();
    let dphi = (p2.lat - p1.lat).to_radians();
    let dlambda = (p2.lon - p1.lon).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

// pi/180 split into a double and its residual
const DEG_HI: f64 = 0.017453292519943295;
const DEG_LO: f64 = 2.9486522708701687e-19;

/// `(sin, cos)` of an angle in degrees within [-45, 45], with the degree to
/// radian conversion carried in two parts.
fn sincos_small(deg: f64) -> (f64, f64) {
    let hi = deg * DEG_HI;
    let lo = deg.mul_add(DEG_HI, -hi) + deg * DEG_LO;
    let (s, c) = hi.sin_cos();
    (s + c * lo, c - s * lo)
}

/// Cosine of an angle given in degrees.
///
/// Reduces to an octant first so that exact values such as `cos(60°) = 0.5`
/// and `cos(90°) = 0` come out exactly.
pub fn cos_deg(x: f64) -> f64 {
    let mut a = x % 360.0;
    if a > 180.0 {
        a -= 360.0;
    } else if a < -180.0 {
        a += 360.0;
    }
    let a = a.abs();
    if a <= 45.0 {
        sincos_small(a).1
    } else if a <= 135.0 {
        sincos_small(90.0 - a).0
    } else {
        -sincos_small(180.0 - a).1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_cosines() {
        assert_eq!(cos_deg(0.0), 1.0);
        assert_eq!(cos_deg(60.0), 0.5);
        assert_eq!(cos_deg(-60.0), 0.5);
        assert_eq!(cos_deg(90.0), 0.0);
        assert_eq!(cos_deg(180.0), -1.0);
        assert_eq!(cos_deg(120.0), -0.5);
    }

    #[test]
    fn cos_deg_tracks_std() {
        for i in -3600..=3600 {
            let d = i as f64 * 0.1;
            assert!((cos_deg(d) - d.to_radians().cos()).abs() < 1e-15, "{d}");
        }
    }
}
