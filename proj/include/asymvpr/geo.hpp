#pragma once

#include "asymvpr/core.hpp"

#include <algorithm>
#include <numbers>

namespace asymvpr {

inline constexpr double kEarthRadiusM = 6371000.0;

/// Great-circle distance in meters between two lat/lon geotags.
inline double haversine(const GeoTag& a, const GeoTag& b) {
  if (!a.has_coords() || !b.has_coords())
    throw Error(ErrorCode::MissingCoordinates, "haversine needs lat/lon on both sides");
  constexpr double rad = std::numbers::pi / 180.0;
  const double phi1 = *a.lat * rad;
  const double phi2 = *b.lat * rad;
  const double dphi = (*b.lat - *a.lat) * rad;
  const double dlambda = (*b.lon - *a.lon) * rad;
  const double s1 = std::sin(dphi / 2.0);
  const double s2 = std::sin(dlambda / 2.0);
  const double h = std::clamp(s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2, 0.0, 1.0);
  return 2.0 * kEarthRadiusM * std::asin(std::sqrt(h));
}

}  // namespace asymvpr
