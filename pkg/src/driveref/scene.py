"""Referenceable objects, car poses, ground truth and hit testing.

A :class:`Scene` holds either the in-cabin areas of interest (AOIs, given
directly in the driver frame) or the outside landmarks (POIs, given as
geodetic cuboid corners and resolved into the driver frame per car pose).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DegenerateVector, InvalidScene, InvalidTarget, ParseError
from .geometry import (
    GeodeticCoord,
    car_frame_transform,
    ecef_to_geodetic,
    enu_rotation,
    geodetic_to_ecef,
    normalize,
    wrap_degrees,
    yaw_pitch,
)

COCKPIT = "cockpit"
ENVIRONMENT = "environment"
USE_CASES = (COCKPIT, ENVIRONMENT)

SCENE_FORMAT_VERSION = 1
SCENE_UNITS = {
    "corners": "meters, driver frame (x forward, y left, z up)",
    "geodetic_corners": "[latitude deg, longitude deg, WGS84 ellipsoidal height m]",
    "poses": "lat/lon in degrees, h in meters, heading in degrees clockwise from north",
}

Point = tuple[float, float, float]


@dataclass(frozen=True)
class CarPose:
    id: int
    position: GeodeticCoord
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "position", GeodeticCoord(*map(float, self.position)))
        heading = float(self.heading)
        if not -180.0 < heading <= 180.0:
            raise InvalidScene(f"pose {self.id}: heading {heading} outside (-180, 180]")
        object.__setattr__(self, "heading", heading)


@dataclass(frozen=True)
class TargetObject:
    """An AOI (driver-frame corners) or POI (geodetic corners)."""

    id: str
    kind: str
    corners: tuple[Point, ...] = ()
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("AOI", "POI"):
            raise InvalidTarget(f"target {self.id!r}: unknown kind {self.kind!r}")
        object.__setattr__(
            self, "corners", tuple(tuple(float(c) for c in p) for p in self.corners)
        )

    def validate(self) -> None:
        n = len(self.corners)
        if self.kind == "AOI" and n < 3:
            raise InvalidTarget(f"AOI {self.id!r} needs at least 3 corners, has {n}")
        if self.kind == "POI" and n != 8:
            raise InvalidTarget(f"POI {self.id!r} needs exactly 8 corners, has {n}")


@dataclass(frozen=True)
class AngularExtent:
    yaw_min: float
    yaw_max: float
    pitch_min: float
    pitch_max: float

    def __post_init__(self):
        if self.yaw_min > self.yaw_max or self.pitch_min > self.pitch_max:
            raise ValueError(f"inverted extent {self}")


@dataclass(frozen=True)
class Scene:
    use_case: str
    targets: tuple[TargetObject, ...]
    poses: tuple[CarPose, ...] = ()
    visibility: tuple[tuple[int, tuple[str, ...]], ...] = ()

    def __post_init__(self):
        if self.use_case not in USE_CASES:
            raise InvalidScene(f"unknown use case {self.use_case!r}")
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "poses", tuple(self.poses))
        vis = self.visibility
        if isinstance(vis, dict):
            vis = vis.items()
        vis = tuple(sorted((int(k), tuple(v)) for k, v in vis))
        object.__setattr__(self, "visibility", vis)

        ids = [t.id for t in self.targets]
        if len(set(ids)) != len(ids):
            raise InvalidScene("target ids are not unique")
        if len({p.id for p in self.poses}) != len(self.poses):
            raise InvalidScene("pose ids are not unique")
        for t in self.targets:
            t.validate()
        if self.use_case == COCKPIT:
            if self.poses or self.visibility:
                raise InvalidScene("cockpit scenes do not depend on car pose")
            if any(t.kind != "AOI" for t in self.targets):
                raise InvalidScene("cockpit scenes hold AOIs only")
        else:
            if any(t.kind != "POI" for t in self.targets):
                raise InvalidScene("environment scenes hold POIs only")
            pose_ids = {p.id for p in self.poses}
            for pid, tids in self.visibility:
                if pid not in pose_ids:
                    raise InvalidScene(f"visibility refers to unknown pose {pid}")
                unknown = set(tids) - set(ids)
                if unknown:
                    raise InvalidScene(f"visibility of pose {pid} lists unknown targets {sorted(unknown)}")

    def target(self, target_id: str) -> TargetObject:
        for t in self.targets:
            if t.id == target_id:
                return t
        raise InvalidTarget(f"no target {target_id!r} in {self.use_case} scene")

    def pose(self, pose_id: int) -> CarPose:
        for p in self.poses:
            if p.id == pose_id:
                return p
        raise InvalidScene(f"no car pose {pose_id} in scene")

    def visible(self, pose_id: Optional[int] = None) -> tuple[TargetObject, ...]:
        if self.use_case == COCKPIT:
            return self.targets
        if pose_id is None:
            raise InvalidScene("environment targets need a car pose")
        vis = dict(self.visibility)
        if pose_id not in vis:
            self.pose(pose_id)
            return self.targets
        return tuple(self.target(t) for t in vis[pose_id])

    def pairs(self) -> list[tuple[str, Optional[int]]]:
        """All referenceable (target id, pose id) combinations."""
        if self.use_case == COCKPIT:
            return [(t.id, None) for t in self.targets]
        return [(t.id, p.id) for p in self.poses for t in self.visible(p.id)]


# --------------------------------------------------------------- geometry

@lru_cache(maxsize=4096)
def _driver_corners(target: TargetObject, pose: Optional[CarPose]) -> np.ndarray:
    if not target.corners:
        raise InvalidTarget(f"target {target.id!r} has no corners")
    pts = np.array(target.corners, dtype=np.float64)
    if target.kind == "AOI":
        return pts
    if pose is None:
        raise InvalidTarget(f"POI {target.id!r} needs a car pose")
    tf = car_frame_transform(pose.position, pose.heading)
    ecef = np.array([geodetic_to_ecef(GeodeticCoord(*c)) for c in pts])
    return tf.apply(ecef)


def driver_frame_corners(target: TargetObject, pose: Optional[CarPose] = None) -> np.ndarray:
    return _driver_corners(target, pose).copy()


def centroid(target: TargetObject, pose: Optional[CarPose] = None) -> np.ndarray:
    return _driver_corners(target, pose).mean(axis=0)


def ground_truth_vector(target: TargetObject, pose: Optional[CarPose] = None) -> np.ndarray:
    """Unit vector from the driver-frame origin to the corner centroid."""
    c = centroid(target, pose)
    try:
        return normalize(c)
    except DegenerateVector as exc:
        raise InvalidTarget(f"target {target.id!r} centroid coincides with the origin") from exc


def angular_extent(target: TargetObject, pose: Optional[CarPose] = None) -> AngularExtent:
    """Yaw/pitch bounds of the corner directions.

    Yaw is measured relative to the centroid direction before taking the
    min/max, so targets straddling the rear +-180 deg seam stay contiguous.
    """
    pts = _driver_corners(target, pose)
    yaw, pitch = yaw_pitch(pts)
    c_yaw, _ = yaw_pitch(pts.mean(axis=0)) if np.linalg.norm(pts.mean(axis=0)) > 0 else (0.0, 0.0)
    rel = wrap_degrees(np.atleast_1d(yaw) - c_yaw)
    return AngularExtent(
        float(c_yaw + rel.min()),
        float(c_yaw + rel.max()),
        float(np.min(pitch)),
        float(np.max(pitch)),
    )


def hit_test(direction, extent: AngularExtent, tol_yaw: float = 2.0, tol_pitch: float = 1.0,
             inclusive: bool = False) -> bool:
    """True when the direction falls inside the extent widened by the tolerances.

    Bounds are strict unless ``inclusive`` is set.
    """
    yaw, pitch = yaw_pitch(np.asarray(direction, dtype=np.float64))
    yaw, pitch = float(yaw), float(pitch)
    mid = 0.5 * (extent.yaw_min + extent.yaw_max)
    yaw = mid + wrap_degrees(yaw - mid)
    lo_y, hi_y = extent.yaw_min - tol_yaw, extent.yaw_max + tol_yaw
    lo_p, hi_p = extent.pitch_min - tol_pitch, extent.pitch_max + tol_pitch
    if inclusive:
        return lo_y <= yaw <= hi_y and lo_p <= pitch <= hi_p
    return lo_y < yaw < hi_y and lo_p < pitch < hi_p


def resolve_nearest(direction, scene: Scene, pose_id: Optional[int] = None) -> str:
    """Id of the visible target whose ground truth is closest in cosine.

    Ties (cosine equal within 1e-12) go to the lexicographically smallest id.
    """
    if not scene.targets:
        raise InvalidScene("scene has no targets")
    d = normalize(np.asarray(direction, dtype=np.float64))
    pose = scene.pose(pose_id) if pose_id is not None and scene.use_case == ENVIRONMENT else None
    candidates = scene.visible(pose_id)
    if not candidates:
        raise InvalidScene(f"no targets visible from pose {pose_id}")
    best_id, best_cos = None, -math.inf
    for t in sorted(candidates, key=lambda t: t.id):
        cos = float(ground_truth_vector(t, pose) @ d)
        if cos > best_cos + 1e-12:
            best_id, best_cos = t.id, cos
    return best_id


# --------------------------------------------------------------- built-ins

# (name, centre xyz, size a, size b, plate orientation); vertical plates span
# y/z and face the driver, horizontal plates span x/y.
_AOI_LAYOUT = [
    ("gear_selector", (0.80, -0.35, 0.28), 0.12, 0.08, "horizontal"),
    ("controller_knob", (0.62, -0.33, 0.30), 0.08, 0.08, "horizontal"),
    ("console_switches", (0.98, -0.36, 0.36), 0.10, 0.16, "horizontal"),
    ("central_display", (1.25, -0.40, 0.70), 0.30, 0.15, "vertical"),
    ("climate_panel", (1.25, -0.40, 0.48), 0.22, 0.08, "vertical"),
    ("instrument_cluster", (1.20, 0.00, 0.62), 0.30, 0.12, "vertical"),
    ("passenger_vent", (1.30, -0.85, 0.58), 0.20, 0.06, "vertical"),
    ("hazard_button", (1.22, -0.32, 0.58), 0.05, 0.04, "vertical"),
    ("start_button", (0.90, -0.20, 0.42), 0.06, 0.05, "vertical"),
    ("light_switch", (1.05, 0.35, 0.40), 0.08, 0.08, "vertical"),
    ("wiper_lever", (1.00, 0.12, 0.38), 0.06, 0.06, "vertical"),
    ("window_controls", (0.55, 0.48, 0.42), 0.12, 0.06, "horizontal"),
]

# Car poses: front-axle reference point and compass heading.
_POSE_LAYOUT = [
    (1, 48.220446, 11.724796, 0.0),
    (2, 48.220363, 11.724800, -40.0),
    (3, 48.220333, 11.724782, 25.0),
    (4, 48.221293, 11.724942, -60.0),
]
_GROUND_HEIGHT = 510.0
_AXLE_HEIGHT = 0.35

# (name, footprint centre east/north of pose 1 [m], width east, depth north, height)
_POI_LAYOUT = [
    ("office_block", (45.0, 70.0), 20.0, 15.0, 15.0),
    ("radio_antenna", (-35.0, 95.0), 6.0, 6.0, 35.0),
    ("research_hall", (10.0, 140.0), 40.0, 20.0, 20.0),
    ("parking_deck", (-70.0, 60.0), 25.0, 20.0, 12.0),
    ("tower_building", (-20.0, 175.0), 15.0, 15.0, 30.0),
]

_VISIBILITY = {
    1: ("P1", "P2", "P3", "P4", "P5"),
    2: ("P1", "P2", "P3", "P4", "P5"),
    3: ("P1", "P2", "P3", "P4", "P5"),
    4: ("P2", "P4", "P5"),
}


def _aoi_corners(center, a, b, orientation) -> tuple[Point, ...]:
    cx, cy, cz = center
    if orientation == "vertical":
        offsets = [(0, a / 2, b / 2), (0, -a / 2, b / 2), (0, -a / 2, -b / 2), (0, a / 2, -b / 2)]
    else:
        offsets = [(a / 2, b / 2, 0), (a / 2, -b / 2, 0), (-a / 2, -b / 2, 0), (-a / 2, b / 2, 0)]
    return tuple((cx + dx, cy + dy, cz + dz) for dx, dy, dz in offsets)


def builtin_cockpit_scene() -> Scene:
    targets = [
        TargetObject(f"A{i:02d}", "AOI", _aoi_corners(c, a, b, o), name)
        for i, (name, c, a, b, o) in enumerate(_AOI_LAYOUT, start=1)
    ]
    return Scene(COCKPIT, tuple(targets))


def _builtin_poses() -> tuple[CarPose, ...]:
    return tuple(
        CarPose(pid, GeodeticCoord(lat, lon, _GROUND_HEIGHT + _AXLE_HEIGHT), heading)
        for pid, lat, lon, heading in _POSE_LAYOUT
    )


def _cuboid_geodetic(ref: GeodeticCoord, center_en, width, depth, height) -> tuple[Point, ...]:
    ref_ecef = geodetic_to_ecef(ref)
    rot = enu_rotation(ref.latitude, ref.longitude)
    ce, cn = center_en
    ground = _GROUND_HEIGHT - ref.height
    corners = []
    for up in (ground, ground + height):
        for de, dn in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            enu = np.array([ce + de * width / 2, cn + dn * depth / 2, up])
            g = ecef_to_geodetic(ref_ecef + rot.T @ enu)
            # 1e-9 deg ~ 0.1 mm; rounding keeps scene files short
            corners.append((round(g.latitude, 9), round(g.longitude, 9), round(g.height, 4)))
    return tuple(corners)


def builtin_environment_scene() -> Scene:
    poses = _builtin_poses()
    ref = poses[0].position
    targets = [
        TargetObject(f"P{i}", "POI", _cuboid_geodetic(ref, c, w, d, h), name)
        for i, (name, c, w, d, h) in enumerate(_POI_LAYOUT, start=1)
    ]
    return Scene(ENVIRONMENT, tuple(targets), poses, _VISIBILITY)


@lru_cache(maxsize=None)
def _builtin(use_case: str) -> Scene:
    if use_case == COCKPIT:
        return builtin_cockpit_scene()
    return builtin_environment_scene()


def default_scenes() -> dict[str, Scene]:
    """The built-in scene of every use case, keyed by use case."""
    return {uc: _builtin(uc) for uc in USE_CASES}


def builtin_scene(use_case: str) -> Scene:
    if use_case == COCKPIT:
        return builtin_cockpit_scene()
    if use_case == ENVIRONMENT:
        return builtin_environment_scene()
    raise InvalidScene(f"unknown use case {use_case!r}")


# --------------------------------------------------------------- files

def scene_to_dict(scene: Scene) -> dict:
    targets = []
    for t in scene.targets:
        key = "corners" if t.kind == "AOI" else "geodetic_corners"
        entry = {"id": t.id, "kind": t.kind, key: [list(c) for c in t.corners]}
        if t.name:
            entry["name"] = t.name
        targets.append(entry)
    return {
        "format_version": SCENE_FORMAT_VERSION,
        "units": SCENE_UNITS,
        "use_case": scene.use_case,
        "targets": targets,
        "poses": [
            {"id": p.id, "lat": p.position.latitude, "lon": p.position.longitude,
             "h": p.position.height, "heading": p.heading}
            for p in scene.poses
        ],
        "visibility": {str(pid): list(tids) for pid, tids in scene.visibility},
    }


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n")


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"{where}: missing field {key!r}")
    return obj[key]


def _points(raw, where: str) -> tuple[Point, ...]:
    if not isinstance(raw, list):
        raise ParseError(f"{where}: expected a list of points")
    pts = []
    for i, p in enumerate(raw):
        if not (isinstance(p, list) and len(p) == 3 and all(isinstance(v, (int, float)) for v in p)):
            raise ParseError(f"{where}[{i}]: expected [x, y, z] numbers, got {p!r}")
        pts.append(tuple(float(v) for v in p))
    return tuple(pts)


def scene_from_dict(data: dict) -> Scene:
    use_case = _require(data, "use_case", "scene")
    targets = []
    for i, raw in enumerate(_require(data, "targets", "scene")):
        where = f"targets[{i}]"
        tid = _require(raw, "id", where)
        kind = _require(raw, "kind", where)
        key = "corners" if kind == "AOI" else "geodetic_corners"
        corners = _points(_require(raw, key, where), f"{where}.{key}")
        try:
            targets.append(TargetObject(str(tid), kind, corners, raw.get("name", "")))
        except InvalidTarget as exc:
            raise ParseError(f"{where}: {exc}") from exc
    poses = []
    for i, raw in enumerate(data.get("poses", [])):
        where = f"poses[{i}]"
        try:
            poses.append(CarPose(
                int(_require(raw, "id", where)),
                GeodeticCoord(float(_require(raw, "lat", where)), float(_require(raw, "lon", where)),
                              float(_require(raw, "h", where))),
                float(_require(raw, "heading", where)),
            ))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"{where}: {exc}") from exc
    vis_raw = data.get("visibility", {})
    if not isinstance(vis_raw, dict):
        raise ParseError("visibility: expected an object mapping pose id -> target ids")
    try:
        visibility = {int(k): tuple(v) for k, v in vis_raw.items()}
        return Scene(use_case, tuple(targets), tuple(poses), visibility)
    except (InvalidScene, InvalidTarget, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"scene: {exc}") from exc


def load_scene(path) -> Scene:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return scene_from_dict(data)


def target_and_pose(scenes: dict, use_case: str, target_id: str,
                    pose_id: Optional[int] = None) -> tuple[TargetObject, Optional[CarPose]]:
    """Look up a labelled target (and car pose) in a use-case keyed scene map."""
    if use_case not in scenes:
        raise InvalidScene(f"no {use_case} scene loaded")
    scene = scenes[use_case]
    pose = scene.pose(pose_id) if use_case == ENVIRONMENT else None
    return scene.target(target_id), pose
