"""Referencing events: windowing, gap filling, tensors and JSONL persistence.

An event stores its 36 frames as a ``(36, 6, 3)`` float array in the fixed
feature order of :data:`FEATURES` plus a ``(36, 6)`` availability mask.
Unavailable cells hold NaN. Head orientation is stored as yaw/pitch/roll in
radians so the array can be fed to the models unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InsufficientFrames, InvalidSubject, ParseError
from .geometry import EulerAngles
from .scene import COCKPIT, ENVIRONMENT, USE_CASES

WINDOW = 36
FRAME_RATE_HZ = 45
FEATURES = ("finger_tip", "finger_dir", "eye_pos", "eye_dir", "head_pos", "head_euler")
DIRECTION_FEATURES = (1, 3)
MODALITIES = ("finger", "eye", "head")
MODALITY_FEATURES = {"finger": (0, 1), "eye": (2, 3), "head": (4, 5)}
DATASET_FORMAT_VERSION = 1
DATASET_UNITS = {
    "finger_tip": "m", "eye_pos": "m", "head_pos": "m",
    "finger_dir": "unit vector", "eye_dir": "unit vector",
    "head_euler": "rad (yaw, pitch, roll)",
}


def canonical_modalities(modalities: Iterable[str]) -> tuple[str, ...]:
    mods = set(modalities)
    unknown = mods - set(MODALITIES)
    if unknown:
        raise ValueError(f"unknown modalities {sorted(unknown)}")
    return tuple(m for m in MODALITIES if m in mods)


def feature_indices(modalities: Iterable[str]) -> list[int]:
    return [i for m in canonical_modalities(modalities) for i in MODALITY_FEATURES[m]]


@dataclass
class Frame:
    """One time step; ``None`` marks an unavailable feature."""

    finger_tip: Optional[np.ndarray] = None
    finger_dir: Optional[np.ndarray] = None
    eye_pos: Optional[np.ndarray] = None
    eye_dir: Optional[np.ndarray] = None
    head_pos: Optional[np.ndarray] = None
    head_euler: Optional[EulerAngles] = None

    @property
    def availability(self) -> np.ndarray:
        return np.array([getattr(self, f) is not None for f in FEATURES])

    def to_row(self) -> tuple[np.ndarray, np.ndarray]:
        values = np.full((6, 3), np.nan)
        for i, name in enumerate(FEATURES):
            v = getattr(self, name)
            if v is None:
                continue
            if name == "head_euler":
                v = np.radians(np.asarray(tuple(v), dtype=np.float64))
            values[i] = v
        return values, self.availability

    @classmethod
    def from_row(cls, values: np.ndarray, available: np.ndarray) -> "Frame":
        kw = {}
        for i, name in enumerate(FEATURES):
            if not available[i]:
                continue
            if name == "head_euler":
                kw[name] = EulerAngles(*np.degrees(values[i]).tolist())
            else:
                kw[name] = np.array(values[i], dtype=np.float64)
        return cls(**kw)


@dataclass(eq=False)
class ReferencingEvent:
    subject_id: str
    use_case: str
    target_id: str
    features: np.ndarray
    available: np.ndarray
    woz_index: int
    pose_id: Optional[int] = None
    hand: str = "right"
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.available = np.asarray(self.available, dtype=bool)
        self.flags = tuple(self.flags)
        self.validate()

    def validate(self) -> None:
        if self.features.shape != (WINDOW, 6, 3):
            raise ValueError(f"event features must be {(WINDOW, 6, 3)}, got {self.features.shape}")
        if self.available.shape != (WINDOW, 6):
            raise ValueError(f"availability must be {(WINDOW, 6)}, got {self.available.shape}")
        if not 0 <= self.woz_index < WINDOW:
            raise ValueError(f"woz_index {self.woz_index} outside the window")
        if self.use_case not in USE_CASES:
            raise ValueError(f"unknown use case {self.use_case!r}")
        if self.hand not in ("left", "right"):
            raise ValueError(f"unknown hand {self.hand!r}")
        if self.use_case == ENVIRONMENT and self.pose_id is None:
            raise ValueError("environment events need a car pose")

    @property
    def frames(self) -> list[Frame]:
        return [Frame.from_row(self.features[t], self.available[t]) for t in range(WINDOW)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReferencingEvent):
            return NotImplemented
        return (
            (self.subject_id, self.use_case, self.target_id, self.pose_id, self.hand,
             self.woz_index, self.flags)
            == (other.subject_id, other.use_case, other.target_id, other.pose_id, other.hand,
                other.woz_index, other.flags)
            and np.array_equal(self.available, other.available)
            and np.array_equal(self.features, other.features, equal_nan=True)
        )


def window_bounds(n_frames: int, woz_time: int) -> tuple[int, int]:
    """Start of the 36-frame window around ``woz_time`` and the trigger's index in it.

    The window is centred on the trigger (index 18) and clamped at the stream ends.
    """
    if n_frames < WINDOW:
        raise InsufficientFrames(f"need at least {WINDOW} frames, stream has {n_frames}")
    if not 0 <= woz_time < n_frames:
        raise InsufficientFrames(f"trigger frame {woz_time} outside stream of {n_frames} frames")
    start = min(max(woz_time - WINDOW // 2, 0), n_frames - WINDOW)
    return start, woz_time - start


def window_event(stream: Sequence[Frame], woz_time: int, **labels) -> ReferencingEvent:
    """Cut a :class:`ReferencingEvent` out of a longer frame stream.

    ``labels`` are the remaining event fields (subject_id, use_case, ...).
    """
    start, woz_index = window_bounds(len(stream), woz_time)
    rows = [f.to_row() for f in stream[start:start + WINDOW]]
    features = np.stack([r[0] for r in rows])
    available = np.stack([r[1] for r in rows])
    return ReferencingEvent(features=features, available=available, woz_index=woz_index, **labels)


def interpolate_series(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill rows of ``values`` (T, d) where ``mask`` is False.

    Interior gaps are linear between the nearest available neighbours, edge
    gaps hold the nearest available value.
    """
    t = np.arange(len(values))
    known = np.flatnonzero(mask)
    out = np.array(values, dtype=np.float64)
    missing = ~mask
    for c in range(out.shape[1]):
        out[missing, c] = np.interp(t[missing], known, out[known, c])
    return out


def interpolate_missing(event: ReferencingEvent) -> ReferencingEvent:
    """Return a copy with every gap filled.

    The availability mask keeps recording what was measured. A feature seen in
    fewer than two frames stays NaN and is flagged ``feature_unavailable``.
    """
    features = event.features.copy()
    flags = list(event.flags)
    for f, name in enumerate(FEATURES):
        mask = event.available[:, f]
        if mask.all():
            continue
        if mask.sum() < 2:
            flag = f"feature_unavailable:{name}"
            if flag not in flags:
                flags.append(flag)
            features[:, f] = np.nan
            continue
        filled = interpolate_series(features[:, f], mask)
        if f in DIRECTION_FEATURES:
            gap = ~mask
            filled[gap] /= np.linalg.norm(filled[gap], axis=1, keepdims=True)
        features[:, f] = filled
    return replace(event, features=features, flags=tuple(flags))


@dataclass
class FeatureTensor:
    """``(t, f, d)`` values with per-cell validity."""

    values: np.ndarray
    valid: np.ndarray
    features: tuple[str, ...] = FEATURES

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def model_input(self) -> np.ndarray:
        """Values with invalid cells zeroed."""
        return np.where(self.valid, self.values, 0.0)


def to_tensor(event: ReferencingEvent) -> FeatureTensor:
    values = event.features.copy()
    return FeatureTensor(values, np.isfinite(values))


def from_tensor(tensor: FeatureTensor, **labels) -> ReferencingEvent:
    if tensor.features != FEATURES:
        raise ValueError("only full six-feature tensors convert back to events")
    values = np.where(tensor.valid, tensor.values, np.nan)
    available = tensor.valid.all(axis=2)
    return ReferencingEvent(features=values, available=available, **labels)


def modality_slice(tensor: FeatureTensor, modalities: Iterable[str]) -> FeatureTensor:
    keep = [tensor.features.index(FEATURES[i]) for i in feature_indices(modalities)]
    return FeatureTensor(
        tensor.values[:, keep], tensor.valid[:, keep], tuple(tensor.features[i] for i in keep)
    )


def stack_inputs(events: Sequence[ReferencingEvent], modalities: Iterable[str] = MODALITIES) -> np.ndarray:
    """Model input batch ``(b, 36, 2 * n_modalities, 3)``; NaN cells become 0."""
    idx = feature_indices(modalities)
    if not events:
        return np.zeros((0, WINDOW, len(idx), 3))
    x = np.stack([e.features[:, idx] for e in events])
    return np.nan_to_num(x, nan=0.0)


# ----------------------------------------------------------------- datasets

@dataclass
class Dataset:
    events: list[ReferencingEvent] = field(default_factory=list)
    scene_ref: str = "builtin"
    split: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.events)

    def subjects(self) -> list[str]:
        return sorted({e.subject_id for e in self.events})

    def filter(self, use_case: Optional[str] = None, subjects: Optional[Iterable[str]] = None) -> "Dataset":
        subs = None if subjects is None else set(subjects)
        events = [
            e for e in self.events
            if (use_case is None or e.use_case == use_case) and (subs is None or e.subject_id in subs)
        ]
        return Dataset(events, self.scene_ref, dict(self.split))

    def __add__(self, other: "Dataset") -> "Dataset":
        ref = self.scene_ref if self.scene_ref == other.scene_ref else f"{self.scene_ref}+{other.scene_ref}"
        return Dataset(self.events + other.events, ref)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.scene_ref == other.scene_ref and self.split == other.split and self.events == other.events


def split_loso(dataset: Dataset, test_subject: str, val_subject: str) -> tuple[Dataset, Dataset, Dataset]:
    """Partition by subject into (train, validation, test)."""
    subjects = set(dataset.subjects())
    for s in (test_subject, val_subject):
        if s not in subjects:
            raise InvalidSubject(f"subject {s!r} not in dataset")
    if test_subject == val_subject:
        raise InvalidSubject("test and validation subject must differ")
    train = sorted(subjects - {test_subject, val_subject})
    meta = {"test": test_subject, "val": val_subject}
    return (
        replace(dataset.filter(subjects=train), split={**meta, "role": "train"}),
        replace(dataset.filter(subjects=[val_subject]), split={**meta, "role": "val"}),
        replace(dataset.filter(subjects=[test_subject]), split={**meta, "role": "test"}),
    )


def _encode_features(event: ReferencingEvent) -> list:
    rows = event.features.tolist()
    nan_cells = np.argwhere(np.isnan(event.features))
    for t, f, d in nan_cells:
        rows[t][f][d] = None
    return rows


def event_to_record(event: ReferencingEvent) -> dict:
    return {
        "subject_id": event.subject_id,
        "use_case": event.use_case,
        "target_id": event.target_id,
        "pose_id": event.pose_id,
        "hand": event.hand,
        "woz_index": event.woz_index,
        "flags": list(event.flags),
        "features": _encode_features(event),
        "available": event.available.tolist(),
    }


def event_from_record(rec: dict, where: str) -> ReferencingEvent:
    if not isinstance(rec, dict):
        raise ParseError(f"{where}: expected an object")
    for key in ("subject_id", "use_case", "target_id", "woz_index", "features", "available"):
        if key not in rec:
            raise ParseError(f"{where}: missing field {key!r}")
    name = f"{where} (subject {rec['subject_id']}, target {rec['target_id']})"
    feats, avail = rec["features"], rec["available"]
    if not isinstance(feats, list) or len(feats) != WINDOW:
        n = len(feats) if isinstance(feats, list) else "no"
        raise ParseError(f"{name}: expected {WINDOW} frames, got {n}")
    if not isinstance(avail, list) or len(avail) != WINDOW:
        raise ParseError(f"{name}: availability must have {WINDOW} rows")
    try:
        values = np.array(
            [[[np.nan if v is None else float(v) for v in cell] for cell in frame] for frame in feats],
            dtype=np.float64,
        )
        mask = np.array(avail, dtype=bool)
        return ReferencingEvent(
            subject_id=str(rec["subject_id"]),
            use_case=rec["use_case"],
            target_id=str(rec["target_id"]),
            features=values,
            available=mask,
            woz_index=int(rec["woz_index"]),
            pose_id=None if rec.get("pose_id") is None else int(rec["pose_id"]),
            hand=rec.get("hand", "right"),
            flags=tuple(rec.get("flags", ())),
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{name}: {exc}") from exc


def dataset_header(dataset: Dataset) -> dict:
    return {
        "format_version": DATASET_FORMAT_VERSION,
        "scene_ref": dataset.scene_ref,
        "frame_rate_hz": FRAME_RATE_HZ,
        "feature_order": list(FEATURES),
        "units": DATASET_UNITS,
        "split": dataset.split,
    }


def dumps_dataset(dataset: Dataset) -> str:
    lines = [json.dumps(dataset_header(dataset), sort_keys=True)]
    lines += [json.dumps(event_to_record(e), separators=(",", ":")) for e in dataset.events]
    return "\n".join(lines) + "\n"


def save_dataset(dataset: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(dataset))


def load_dataset(path) -> Dataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file, expected a header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line 1: {exc.msg}") from exc
    if not isinstance(header, dict) or header.get("format_version") != DATASET_FORMAT_VERSION:
        raise ParseError(f"{path}: line 1: unsupported or missing format_version")
    events = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc.msg}") from exc
        events.append(event_from_record(rec, f"{path}: line {lineno}, event {len(events)}"))
    return Dataset(events, header.get("scene_ref", "builtin"), header.get("split", {}))
