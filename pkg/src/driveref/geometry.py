"""Coordinate frames and angle math for the driver-centred car frame.

Frames follow ISO 8855 (x forward, y left, z up). The car frame used
throughout the package has its origin behind the driver's seat, obtained
from the front-axle frame by a fixed translation. Angles are degrees at
the public API and radians internally.

Vectors are plain ``numpy`` arrays of shape ``(3,)``; most helpers also
accept stacked ``(..., 3)`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateVector, InvalidTransform

# WGS84 ellipsoid
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)

# front-axle frame -> driver frame
DRIVER_ORIGIN_OFFSET = np.array([2.0, -0.4, 0.0])

_EPS_NORM = 1e-12


class SphericalDir(NamedTuple):
    r: float
    yaw: float
    pitch: float


class EulerAngles(NamedTuple):
    yaw: float
    pitch: float
    roll: float = 0.0


class GeodeticCoord(NamedTuple):
    latitude: float
    longitude: float
    height: float = 0.0


def vec3(x, y=None, z=None) -> np.ndarray:
    if y is None:
        out = np.asarray(x, dtype=np.float64)
        if out.shape != (3,):
            raise ValueError(f"expected a 3-vector, got shape {out.shape}")
        return out
    return np.array([x, y, z], dtype=np.float64)


def wrap_degrees(angle):
    """Wrap an angle (or array of angles) in degrees into ``(-180, 180]``."""
    wrapped = np.mod(np.asarray(angle, dtype=np.float64) + 180.0, 360.0) - 180.0
    wrapped = np.where(wrapped == -180.0, 180.0, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n <= _EPS_NORM):
        raise DegenerateVector(f"cannot normalize vector with norm {float(np.min(n)):.3g}")
    return v / n


def angular_distance(u, v) -> float:
    """Angle in degrees between two nonzero vectors, in ``[0, 180]``.

    Works row-wise on stacked inputs and then returns an array.
    """
    cos = np.sum(normalize(u) * normalize(v), axis=-1)
    out = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    if np.ndim(out) == 0:
        return float(out)
    return out


def yaw_pitch(v):
    """Yaw and pitch in degrees of (stacked) vectors; yaw is 0 at the poles."""
    v = np.asarray(v, dtype=np.float64)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    horiz = np.hypot(x, y)
    r = np.hypot(horiz, z)
    if np.any(r <= _EPS_NORM):
        raise DegenerateVector("direction of a zero vector is undefined")
    pitch = np.degrees(np.arctan2(z, horiz))
    yaw = np.where(horiz > 0.0, np.degrees(np.arctan2(y, x)), 0.0)
    yaw = wrap_degrees(yaw)
    return yaw, pitch


def cartesian_to_spherical(v) -> SphericalDir:
    v = vec3(v)
    yaw, pitch = yaw_pitch(v)
    return SphericalDir(float(np.linalg.norm(v)), float(yaw), float(pitch))


def direction_from_angles(yaw, pitch):
    """Unit vectors for yaw/pitch in degrees (broadcasting)."""
    yaw_r = np.radians(yaw)
    pitch_r = np.radians(pitch)
    cp = np.cos(pitch_r)
    return np.stack([cp * np.cos(yaw_r), cp * np.sin(yaw_r), np.sin(pitch_r)], axis=-1)


def spherical_to_cartesian(s: SphericalDir) -> np.ndarray:
    if s.r < 0:
        raise ValueError("radius must be non-negative")
    return s.r * direction_from_angles(s.yaw, s.pitch)


def translate_to_driver_frame(p) -> np.ndarray:
    """Front-axle ISO 8855 coordinates -> driver-frame coordinates."""
    return np.asarray(p, dtype=np.float64) + DRIVER_ORIGIN_OFFSET


def translate_from_driver_frame(p) -> np.ndarray:
    return np.asarray(p, dtype=np.float64) - DRIVER_ORIGIN_OFFSET


def euler_to_direction(e: EulerAngles) -> np.ndarray:
    """Forward unit vector of a head pose. Roll spins about this axis, so it is ignored."""
    return direction_from_angles(e.yaw, e.pitch)


def euler_array_to_direction(euler_rad: np.ndarray) -> np.ndarray:
    """Vectorised variant taking ``(..., 3)`` yaw/pitch/roll in radians."""
    yaw, pitch = euler_rad[..., 0], euler_rad[..., 1]
    cp = np.cos(pitch)
    return np.stack([cp * np.cos(yaw), cp * np.sin(yaw), np.sin(pitch)], axis=-1)


# ---------------------------------------------------------------- geodesy

def geodetic_to_ecef(g: GeodeticCoord) -> np.ndarray:
    lat = math.radians(g.latitude)
    lon = math.radians(g.longitude)
    slat, clat = math.sin(lat), math.cos(lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * slat * slat)
    return np.array([
        (n + g.height) * clat * math.cos(lon),
        (n + g.height) * clat * math.sin(lon),
        (n * (1.0 - WGS84_E2) + g.height) * slat,
    ])


def ecef_to_geodetic(p) -> GeodeticCoord:
    """Inverse of :func:`geodetic_to_ecef` by fixed-point iteration on latitude."""
    x, y, z = (float(c) for c in vec3(p))
    lon = math.atan2(y, x)
    rho = math.hypot(x, y)
    if rho < 1e-9:
        lat = math.copysign(math.pi / 2, z) if z != 0 else 0.0
        return GeodeticCoord(math.degrees(lat), math.degrees(lon), abs(z) - WGS84_B)
    lat = math.atan2(z, rho * (1.0 - WGS84_E2))
    h = 0.0
    for _ in range(50):
        slat = math.sin(lat)
        n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * slat * slat)
        h = rho / math.cos(lat) - n
        new_lat = math.atan2(z, rho * (1.0 - WGS84_E2 * n / (n + h)))
        if abs(new_lat - lat) < 1e-15:
            lat = new_lat
            break
        lat = new_lat
    slat = math.sin(lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * slat * slat)
    # this form of the height stays accurate near the poles
    h = rho * math.cos(lat) + z * slat - WGS84_A * WGS84_A / n
    return GeodeticCoord(math.degrees(lat), math.degrees(lon), h)


def enu_rotation(lat_deg: float, lon_deg: float) -> np.ndarray:
    """Rows are the local east, north and up unit vectors in ECEF."""
    lat, lon = math.radians(lat_deg), math.radians(lon_deg)
    sl, cl = math.sin(lat), math.cos(lat)
    so, co = math.sin(lon), math.cos(lon)
    return np.array([
        [-so, co, 0.0],
        [-sl * co, -sl * so, cl],
        [cl * co, cl * so, sl],
    ])


@dataclass(frozen=True)
class AffineTransform:
    """``p_out = rotation @ p_in + translation`` with a proper rotation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3):
            raise InvalidTransform(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9, rtol=0.0):
            raise InvalidTransform("rotation matrix is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidTransform("rotation matrix has det != +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", vec3(self.translation))

    def apply(self, p) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "AffineTransform":
        rt = self.rotation.T
        return AffineTransform(rt, -rt @ self.translation)


def car_frame_transform(position: GeodeticCoord, heading: float) -> AffineTransform:
    """ECEF -> driver frame for a level car.

    ``position`` is the front-axle reference point and ``heading`` the compass
    bearing of the car's forward axis in degrees (clockwise from north).
    """
    origin = geodetic_to_ecef(position)
    enu = enu_rotation(position.latitude, position.longitude)
    h = math.radians(heading)
    # axle frame axes expressed in ENU: forward, left, up
    axle_in_enu = np.array([
        [math.sin(h), math.cos(h), 0.0],
        [-math.cos(h), math.sin(h), 0.0],
        [0.0, 0.0, 1.0],
    ])
    rot = axle_in_enu @ enu
    return AffineTransform(rot, DRIVER_ORIGIN_OFFSET - rot @ origin)


def ecef_to_car(p, car_pose) -> np.ndarray:
    """Map an ECEF point into the driver frame of ``car_pose``.

    ``car_pose`` needs ``position`` (GeodeticCoord) and ``heading`` attributes.
    """
    return car_frame_transform(car_pose.position, car_pose.heading).apply(p)


def car_to_ecef(p, car_pose) -> np.ndarray:
    return car_frame_transform(car_pose.position, car_pose.heading).inverse().apply(p)
