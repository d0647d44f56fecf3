"""Synthetic driver referencing events.

Each modality's direction at the trigger instant deviates from the ground
truth by a signed yaw and pitch offset. The unsigned offsets follow a gamma
distribution whose mean and standard deviation are the configured
population values; a Gaussian copula splits each draw into a per-subject
part and a per-event part, so drivers are consistently better or worse
without changing the population marginals. Around the trigger the pose
ramps in from a neutral posture, holds with a small random-walk wobble
(pinned to zero at the trigger frame) and retracts again. Tracking losses
are written as contiguous unavailable runs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import special, stats

from .errors import InvalidConfig, InvalidTarget, ParseError
from .events import WINDOW, Dataset, ReferencingEvent, window_bounds
from .geometry import direction_from_angles, yaw_pitch
from .scene import COCKPIT, ENVIRONMENT, USE_CASES, Scene, builtin_scene, ground_truth_vector

PAPER_COUNTS = {COCKPIT: 2514, ENVIRONMENT: 6590}
DESK_COUNTS = {COCKPIT: 450, ENVIRONMENT: 450}
SIGN_POLICIES = ("random", "positive", "negative", "hand")
_MAX_PITCH = 89.0


@dataclass(frozen=True)
class ModalityErrorModel:
    """Unsigned yaw/pitch deviation from ground truth at the trigger (degrees).

    ``*_bias_mean``/``*_bias_std`` are population moments of the unsigned
    deviation. The sign is drawn once per subject (``random``), fixed, or
    follows the pointing hand (``hand``: right hand +1, left hand -1), which
    mimics aiming along the eye-fingertip line with an arm offset sideways.
    ``frame_jitter_std`` is the per-frame step of the wobble away from the
    trigger pose.
    """

    yaw_bias_mean: float
    yaw_bias_std: float
    pitch_bias_mean: float
    pitch_bias_std: float
    frame_jitter_std: float = 0.5
    yaw_sign: str = "random"
    pitch_sign: str = "random"

    def __post_init__(self):
        for name in ("yaw_bias_mean", "yaw_bias_std", "pitch_bias_mean", "pitch_bias_std", "frame_jitter_std"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be non-negative")
        for name in ("yaw_sign", "pitch_sign"):
            if getattr(self, name) not in SIGN_POLICIES:
                raise InvalidConfig(f"{name} must be one of {SIGN_POLICIES}")

    def scaled(self, k: float) -> "ModalityErrorModel":
        return replace(
            self,
            yaw_bias_mean=self.yaw_bias_mean * k, yaw_bias_std=self.yaw_bias_std * k,
            pitch_bias_mean=self.pitch_bias_mean * k, pitch_bias_std=self.pitch_bias_std * k,
            frame_jitter_std=self.frame_jitter_std * k,
        )


@dataclass(frozen=True)
class DropoutRates:
    """Per-event probabilities of each tracking-loss cause."""

    hand_out_of_fov: float = 0.0
    arm_occludes_face: float = 0.0
    far_side_gaze_loss: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not 0.0 <= v <= 1.0:
                raise InvalidConfig(f"dropout rate {k}={v} outside [0, 1]")

    def scaled(self, k: float) -> "DropoutRates":
        return DropoutRates(*(min(1.0, v * k) for v in asdict(self).values()))

    def modality_rates(self) -> dict[str, float]:
        """Probability that each modality has at least one unavailable run."""
        return {
            "finger": self.hand_out_of_fov,
            "eye": 1.0 - (1.0 - self.arm_occludes_face) * (1.0 - self.far_side_gaze_loss),
            "head": self.arm_occludes_face,
        }


@dataclass(frozen=True)
class UseCasePriors:
    errors: dict
    left_hand_prob: float
    dropout: DropoutRates
    finger_pos_pitch_mean: float
    finger_pos_pitch_std: float
    # how strongly the finger-tip position follows the target
    finger_pos_yaw_gain: float
    finger_pos_yaw_noise: float
    finger_pos_pitch_corr: float


DEFAULT_PRIORS = {
    COCKPIT: UseCasePriors(
        errors={
            "finger": ModalityErrorModel(6.0, 5.0, 9.0, 7.0),
            "eye": ModalityErrorModel(14.0, 12.0, 54.7, 14.0, pitch_sign="negative"),
            "head": ModalityErrorModel(10.0, 8.0, 20.7, 8.0, pitch_sign="negative"),
        },
        left_hand_prob=0.23,
        dropout=DropoutRates(hand_out_of_fov=0.08, arm_occludes_face=0.05, far_side_gaze_loss=0.03),
        finger_pos_pitch_mean=29.0,
        finger_pos_pitch_std=5.4,
        finger_pos_yaw_gain=0.8,
        finger_pos_yaw_noise=5.0,
        finger_pos_pitch_corr=0.6,
    ),
    ENVIRONMENT: UseCasePriors(
        errors={
            "finger": ModalityErrorModel(30.3, 33.0, 26.3, 17.0, yaw_sign="hand", pitch_sign="positive"),
            "eye": ModalityErrorModel(5.0, 4.0, 4.0, 3.0),
            "head": ModalityErrorModel(6.0, 5.0, 5.0, 4.0),
        },
        left_hand_prob=0.12,
        dropout=DropoutRates(hand_out_of_fov=0.20, arm_occludes_face=0.10, far_side_gaze_loss=0.10),
        finger_pos_pitch_mean=40.0,
        finger_pos_pitch_std=6.8,
        finger_pos_yaw_gain=0.4,
        finger_pos_yaw_noise=10.0,
        finger_pos_pitch_corr=0.3,
    ),
}


@dataclass(frozen=True)
class Timing:
    ramp: int = 12
    hold: int = 12
    retract: int = 12


@dataclass(frozen=True)
class SubjectError:
    model: ModalityErrorModel
    yaw_sign: float
    pitch_sign: float
    yaw_latent: float
    pitch_latent: float


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: str
    errors: dict  # (use_case, modality) -> SubjectError
    left_hand_prob: dict  # use_case -> probability
    dropout: dict  # use_case -> DropoutRates
    timing: Timing
    eye_base: tuple[float, float, float]
    arm_reach: float
    subject_share: float = 0.75
    cross_modality_corr: float = 0.0
    priors: dict = field(default_factory=lambda: dict(DEFAULT_PRIORS))


@dataclass
class SimConfig:
    seed: int = 0
    n_subjects: int = 11
    cockpit_events: int = DESK_COUNTS[COCKPIT]
    environment_events: int = DESK_COUNTS[ENVIRONMENT]
    noise_scale: float = 1.0
    dropout_scale: float = 1.0
    subject_share: float = 0.75
    cross_modality_corr: float = 0.0
    priors: dict = field(default_factory=lambda: dict(DEFAULT_PRIORS))

    def __post_init__(self):
        if self.n_subjects < 1:
            raise InvalidConfig("n_subjects must be positive")
        if self.cockpit_events < 0 or self.environment_events < 0:
            raise InvalidConfig("event counts must be non-negative")
        if self.noise_scale < 0 or self.dropout_scale < 0:
            raise InvalidConfig("scales must be non-negative")
        if not 0.0 <= self.subject_share <= 1.0 or not 0.0 <= self.cross_modality_corr <= 1.0:
            raise InvalidConfig("subject_share and cross_modality_corr must lie in [0, 1]")

    @classmethod
    def for_scale(cls, scale: str, **kw) -> "SimConfig":
        counts = {"paper": PAPER_COUNTS, "desk": DESK_COUNTS}.get(scale)
        if counts is None:
            raise InvalidConfig(f"unknown scale {scale!r} (paper or desk)")
        return cls(cockpit_events=counts[COCKPIT], environment_events=counts[ENVIRONMENT], **kw)

    def events_for(self, use_case: str) -> int:
        return self.cockpit_events if use_case == COCKPIT else self.environment_events

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(config_to_dict(self), sort_keys=True).encode()).hexdigest()[:16]


def config_to_dict(cfg: SimConfig) -> dict:
    out = {k: v for k, v in asdict(cfg).items() if k != "priors"}
    out["priors"] = {
        uc: {
            **{k: v for k, v in asdict(p).items() if k not in ("errors", "dropout")},
            "dropout": asdict(p.dropout),
            "errors": {m: asdict(e) for m, e in p.errors.items()},
        }
        for uc, p in cfg.priors.items()
    }
    return out


def config_from_dict(data: dict) -> SimConfig:
    """Build a config; ``priors`` may override any subset of the defaults."""
    data = dict(data)
    raw_priors = data.pop("priors", {}) or {}
    known = {f for f in SimConfig.__dataclass_fields__ if f != "priors"}
    unknown = set(data) - known
    if unknown:
        raise ParseError(f"unknown simulator config fields {sorted(unknown)}")
    priors = dict(DEFAULT_PRIORS)
    try:
        for uc, over in raw_priors.items():
            if uc not in USE_CASES:
                raise ParseError(f"priors: unknown use case {uc!r}")
            base = priors[uc]
            over = dict(over)
            errors = dict(base.errors)
            for m, fields in over.pop("errors", {}).items():
                if m not in errors:
                    raise ParseError(f"priors.{uc}.errors: unknown modality {m!r}")
                errors[m] = replace(errors[m], **fields)
            dropout = replace(base.dropout, **over.pop("dropout", {}))
            priors[uc] = replace(base, errors=errors, dropout=dropout, **over)
        return SimConfig(**data, priors=priors)
    except TypeError as exc:
        raise ParseError(f"simulator config: {exc}") from exc


def load_sim_config(path) -> SimConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ParseError(f"{path}: expected a JSON object")
    return config_from_dict(data)


# ------------------------------------------------------------------ profiles

def _sign(rng: np.random.Generator, policy: str) -> float:
    if policy == "positive":
        return 1.0
    if policy == "negative":
        return -1.0
    if policy == "hand":
        return 0.0  # resolved per event from the pointing hand
    return 1.0 if rng.random() < 0.5 else -1.0


def sample_profile(rng: np.random.Generator, priors: Optional[dict] = None, subject_id: str = "S01",
                   subject_share: float = 0.75, cross_modality_corr: float = 0.0,
                   noise_scale: float = 1.0, dropout_scale: float = 1.0) -> SubjectProfile:
    """Draw one driver's error tendencies, handedness, timing and anatomy."""
    priors = DEFAULT_PRIORS if priors is None else priors
    errors, left, dropout = {}, {}, {}
    for uc in USE_CASES:
        p = priors[uc]
        for m in ("finger", "eye", "head"):
            model = p.errors[m].scaled(noise_scale)
            errors[(uc, m)] = SubjectError(
                model,
                _sign(rng, model.yaw_sign),
                _sign(rng, model.pitch_sign),
                float(rng.standard_normal()),
                float(rng.standard_normal()),
            )
        # handedness varies between drivers around the population rate
        a = 20.0 * p.left_hand_prob
        b = 20.0 * (1.0 - p.left_hand_prob)
        left[uc] = float(rng.beta(a, b)) if 0.0 < p.left_hand_prob < 1.0 else p.left_hand_prob
        dropout[uc] = p.dropout.scaled(dropout_scale)
    timing = Timing(*(int(v) for v in rng.integers(10, 15, size=3)))
    eye_base = (
        0.35 + 0.03 * float(rng.standard_normal()),
        0.02 * float(rng.standard_normal()),
        0.86 + 0.04 * float(rng.standard_normal()),
    )
    reach = 0.80 + 0.04 * float(rng.standard_normal())
    return SubjectProfile(subject_id, errors, left, dropout, timing, eye_base, reach,
                          subject_share, cross_modality_corr, dict(priors))


def _magnitude(mean: float, std: float, z: float) -> float:
    """Gamma quantile with the given moments at standard-normal score ``z``."""
    if mean <= 0.0:
        return 0.0
    if std <= 0.0:
        return mean
    shape = (mean / std) ** 2
    return float(stats.gamma.ppf(special.ndtr(z), shape, scale=std * std / mean))


# ------------------------------------------------------------------ events

@dataclass
class _SceneStats:
    pitch_mean: float
    pitch_std: float
    side_weight_mean: float = 1.0


def _side_weight(yaw: float) -> float:
    """Relative odds of losing the eyes when the head turns toward ``yaw``."""
    return 0.25 + (yaw / 45.0) ** 2


def _scene_stats(scene: Scene) -> _SceneStats:
    yaws, pitches = [], []
    for tid, pid in scene.pairs():
        pose = scene.pose(pid) if pid is not None else None
        y, p = yaw_pitch(ground_truth_vector(scene.target(tid), pose))
        yaws.append(float(y))
        pitches.append(float(p))
    pitches = np.array(pitches)
    std = float(pitches.std())
    side = float(np.mean([_side_weight(y) for y in yaws]))
    return _SceneStats(float(pitches.mean()), std if std > 0 else 1.0, side)


def _progress(n: int, ramp_start: int, timing: Timing) -> np.ndarray:
    """0 at rest, 1 while holding; smoothstep ramps in between."""
    t = np.arange(n, dtype=np.float64)
    up = np.clip((t - ramp_start + 1) / timing.ramp, 0.0, 1.0)
    down_start = ramp_start + timing.ramp + timing.hold
    down = np.clip((t - down_start + 1) / timing.retract, 0.0, 1.0)
    s = np.minimum(up, 1.0 - down)
    return s * s * (3.0 - 2.0 * s)


def _anchored_walk(rng: np.random.Generator, n: int, anchor: int, step: float) -> np.ndarray:
    """Random walk that is exactly zero at ``anchor``."""
    out = np.zeros(n)
    if step <= 0:
        return out
    steps = rng.normal(0.0, step, size=n)
    out[anchor + 1:] = np.cumsum(steps[anchor + 1:])
    out[:anchor] = np.cumsum(steps[:anchor][::-1])[::-1]
    return out


def _runs(rng: np.random.Generator, anchor: int, lo: int, hi: int) -> slice:
    length = int(rng.integers(lo, hi + 1))
    start = anchor - int(rng.integers(length // 4, 3 * length // 4 + 1))
    start = min(max(start, 0), WINDOW - length)
    return slice(start, start + length)


def simulate_event(profile: SubjectProfile, scene: Scene, target_id: str, pose_id: Optional[int],
                   rng: np.random.Generator, scene_stats: Optional[_SceneStats] = None) -> ReferencingEvent:
    use_case = scene.use_case
    target = scene.target(target_id)
    if use_case == ENVIRONMENT and pose_id is None:
        raise InvalidTarget("environment events need a car pose")
    pose = scene.pose(pose_id) if use_case == ENVIRONMENT else None
    gt = ground_truth_vector(target, pose)
    if gt[0] <= 0.0:
        raise InvalidTarget(f"target {target_id!r} lies behind the driver")
    gt_yaw, gt_pitch = (float(v) for v in yaw_pitch(gt))
    stats_ = scene_stats or _scene_stats(scene)

    timing = profile.timing
    pad = 12
    n = pad + timing.ramp + timing.hold + timing.retract + pad
    ramp_start = pad
    hold_start = ramp_start + timing.ramp
    woz_time = hold_start + int(rng.integers(2, max(3, timing.hold - 2)))
    start, woz = window_bounds(n, woz_time)
    s = _progress(n, ramp_start, timing)[start:start + WINDOW]

    left_p = profile.left_hand_prob[use_case]
    hand = "left" if rng.random() < left_p else "right"

    # signed trigger-instant deviations for each modality
    share = profile.subject_share
    corr = profile.cross_modality_corr
    shared = rng.standard_normal(2)
    dev = {}
    for m in ("finger", "eye", "head"):
        se = profile.errors[(use_case, m)]
        own = rng.standard_normal(2)
        ev = math.sqrt(corr) * shared + math.sqrt(1.0 - corr) * own
        z_yaw = math.sqrt(share) * se.yaw_latent + math.sqrt(1.0 - share) * ev[0]
        z_pitch = math.sqrt(share) * se.pitch_latent + math.sqrt(1.0 - share) * ev[1]
        yaw_sign = se.yaw_sign or (1.0 if hand == "right" else -1.0)
        pitch_sign = se.pitch_sign or (1.0 if hand == "right" else -1.0)
        dev[m] = (
            yaw_sign * _magnitude(se.model.yaw_bias_mean, se.model.yaw_bias_std, z_yaw),
            pitch_sign * _magnitude(se.model.pitch_bias_mean, se.model.pitch_bias_std, z_pitch),
        )

    def trajectory(m: str, neutral: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
        model = profile.errors[(use_case, m)].model
        yaw1 = gt_yaw + dev[m][0]
        pitch1 = float(np.clip(gt_pitch + dev[m][1], -_MAX_PITCH, _MAX_PITCH))
        yaw = (1.0 - s) * neutral[0] + s * yaw1
        pitch = (1.0 - s) * neutral[1] + s * pitch1
        yaw = yaw + _anchored_walk(rng, WINDOW, woz, model.frame_jitter_std)
        pitch = pitch + _anchored_walk(rng, WINDOW, woz, model.frame_jitter_std)
        yaw[woz], pitch[woz] = yaw1, pitch1
        return yaw, np.clip(pitch, -_MAX_PITCH, _MAX_PITCH)

    features = np.empty((WINDOW, 6, 3))
    side = 1.0 if hand == "left" else -1.0

    # finger
    fy, fp = trajectory("finger", (0.0, -20.0))
    features[:, 1] = direction_from_angles(fy, fp)
    p = profile.priors[use_case]
    z_t = (gt_pitch - stats_.pitch_mean) / stats_.pitch_std
    rho = p.finger_pos_pitch_corr
    pos_pitch = p.finger_pos_pitch_mean + p.finger_pos_pitch_std * (
        rho * z_t + math.sqrt(1.0 - rho * rho) * float(rng.standard_normal()))
    pos_yaw = p.finger_pos_yaw_gain * gt_yaw + side * 8.0 + p.finger_pos_yaw_noise * float(rng.standard_normal())
    reach = profile.arm_reach + 0.03 * float(rng.standard_normal())
    tip = reach * direction_from_angles(pos_yaw, pos_pitch)
    rest = np.array([0.85, side * 0.18, 0.40])
    features[:, 0] = (1.0 - s)[:, None] * rest + s[:, None] * tip
    features[:, 0] += rng.normal(0.0, 0.004, size=(WINDOW, 3))
    features[woz, 0] = tip

    # eye
    ey, ep = trajectory("eye", (0.0, -2.0))
    features[:, 3] = direction_from_angles(ey, ep)
    lean = 0.03 * np.array([math.cos(math.radians(gt_yaw)), math.sin(math.radians(gt_yaw)), 0.0])
    eye_pos = np.asarray(profile.eye_base) + s[:, None] * lean + rng.normal(0.0, 0.003, size=(WINDOW, 3))
    features[:, 2] = eye_pos

    # head: euler angles in radians, roll does not change the forward direction
    hy, hp = trajectory("head", (0.0, 0.0))
    roll = rng.normal(0.0, 3.0) + np.cumsum(rng.normal(0.0, 0.2, size=WINDOW))
    features[:, 5] = np.radians(np.stack([hy, hp, roll], axis=1))
    features[:, 4] = eye_pos + np.array([-0.08, 0.0, 0.02]) + rng.normal(0.0, 0.002, size=(WINDOW, 3))

    available = np.ones((WINDOW, 6), dtype=bool)
    rates = profile.dropout[use_case]
    # left-hand pointing leaves the gesture camera's view more often; the
    # split keeps the overall per-event rate at the configured value
    r = rates.hand_out_of_fov
    p_left = min(1.0, 2.0 * r)
    p_right = max(0.0, (r - left_p * p_left) / (1.0 - left_p)) if left_p < 1.0 else 0.0
    if rng.random() < (p_left if hand == "left" else p_right):
        available[_runs(rng, woz, 10, 20), 0:2] = False
    if rng.random() < rates.arm_occludes_face:
        available[_runs(rng, woz, 6, 14), 2:6] = False
    # the eye tracker loses the eyes for longer when the head turns far aside;
    # weights average to one over the scene's targets
    p_far = min(1.0, rates.far_side_gaze_loss * _side_weight(gt_yaw) / stats_.side_weight_mean)
    if rng.random() < p_far:
        available[_runs(rng, woz, 14, 24), 2:4] = False
    features[~available] = np.nan

    return ReferencingEvent(
        subject_id=profile.subject_id,
        use_case=use_case,
        target_id=target_id,
        features=features,
        available=available,
        woz_index=woz,
        pose_id=pose_id,
        hand=hand,
    )


def subject_ids(n: int) -> list[str]:
    return [f"S{i:02d}" for i in range(1, n + 1)]


def profiles_for(config: SimConfig) -> list[SubjectProfile]:
    out = []
    for i, sid in enumerate(subject_ids(config.n_subjects)):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7919, i]))
        out.append(sample_profile(rng, config.priors, sid, config.subject_share,
                                  config.cross_modality_corr, config.noise_scale, config.dropout_scale))
    return out


def generate_dataset(config: SimConfig, scenes: Optional[dict] = None) -> Dataset:
    """Deterministic dataset for ``config``; events cover every visible (target, pose) pair.

    The per-use-case total is spread over (subject, target, pose) cells as
    evenly as possible; leftover events go round-robin over subjects first.
    """
    scenes = scenes or {uc: builtin_scene(uc) for uc in USE_CASES}
    profiles = profiles_for(config)
    events = []
    for uc_index, uc in enumerate(USE_CASES):
        total = config.events_for(uc)
        if total == 0:
            continue
        scene = scenes[uc]
        st = _scene_stats(scene)
        pairs = scene.pairs()
        n_sub = len(profiles)
        # diagonal order: the first n_sub cells give every subject one event,
        # each on a different (target, pose) pair where possible
        cells = [(k % n_sub, pairs[(k // n_sub + k) % len(pairs)]) for k in range(n_sub * len(pairs))]
        base, extra = divmod(total, len(cells))
        per_cell = [base + (ci < extra) for ci in range(len(cells))]
        for si in range(n_sub):
            ordinal = 0
            for ci in range(si, len(cells), n_sub):
                tid, pid = cells[ci][1]
                for _ in range(per_cell[ci]):
                    rng = np.random.default_rng(np.random.SeedSequence([config.seed, uc_index, si, ordinal]))
                    events.append(simulate_event(profiles[si], scene, tid, pid, rng, st))
                    ordinal += 1
    return Dataset(events, scene_ref="builtin", split={})
