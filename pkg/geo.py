"""Great-circle distances and query regions for GeoRSS-tagged entries."""
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

# Mean Earth radius in kilometers
EARTH_RADIUS_KM = 6371.0088

LatLon = Tuple[float, float]


def haversine_km(a: LatLon, b: LatLon) -> float:
    """Calculate the distance between two (lat, lon) points using the Haversine formula.

    Args:
        a, b: Coordinates in degrees

    Returns:
        Distance in kilometers
    """
    lat1, lon1 = a
    lat2, lon2 = b
    lat1_rad = math.radians(lat1)
    lat2_rad = math.radians(lat2)
    dlat = math.radians(lat2 - lat1)
    dlon = math.radians(lon2 - lon1)

    h = math.sin(dlat / 2) ** 2 + math.cos(lat1_rad) * math.cos(lat2_rad) * math.sin(dlon / 2) ** 2
    # Rounding can push h a hair above 1 for antipodal points
    c = 2 * math.asin(math.sqrt(min(1.0, h)))

    return EARTH_RADIUS_KM * c


def distance_matrix(points: Sequence[LatLon]) -> np.ndarray:
    """
    Pairwise Haversine distances for a list of (lat, lon) points.

    Returns:
        Symmetric (n, n) array of kilometers with a zero diagonal.
    """
    if not points:
        return np.zeros((0, 0), dtype=np.double)

    coords = np.radians(np.asarray(points, dtype=np.double))
    lat = coords[:, 0][:, np.newaxis]
    lon = coords[:, 1][:, np.newaxis]

    dlat = lat.T - lat
    dlon = lon.T - lon
    h = np.sin(dlat / 2) ** 2 + np.cos(lat) * np.cos(lat.T) * np.sin(dlon / 2) ** 2
    return EARTH_RADIUS_KM * 2 * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


@dataclass(frozen=True)
class Radius:
    """Circle of `km` kilometers around a center point."""
    lat: float
    lon: float
    km: float

    def contains(self, point: LatLon) -> bool:
        return haversine_km((self.lat, self.lon), point) <= self.km

    def to_text(self) -> str:
        return f"radius({format_number(self.lat)},{format_number(self.lon)},{format_number(self.km)})"


@dataclass(frozen=True)
class Box:
    """Latitude/longitude box, southwest corner first."""
    south: float
    west: float
    north: float
    east: float

    def contains(self, point: LatLon) -> bool:
        lat, lon = point
        if not (self.south <= lat <= self.north):
            return False
        if self.west <= self.east:
            return self.west <= lon <= self.east
        # Box crosses the antimeridian
        return lon >= self.west or lon <= self.east

    def to_text(self) -> str:
        return f"box({format_number(self.south)},{format_number(self.west)},{format_number(self.north)},{format_number(self.east)})"


def check_lat_lon(lat: float, lon: float) -> bool:
    """Return True when the pair lies inside WGS84 degree ranges."""
    return -90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0


def format_number(value: float) -> str:
    """Shortest text for a coordinate that parses back to the same float."""
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))
