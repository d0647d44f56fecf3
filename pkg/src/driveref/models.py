"""The case classifier, the fusion regressor and two-stage inference.

Both networks take event windows ``(batch, 36, features, 3)``: time on the
height axis, the feature list on the width axis and xyz as channels. The
fusion model runs a small conv branch per modality, halves the time axis,
concatenates the branches along the feature axis and regresses a 3-vector.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DegenerateVector, InvalidConfig, ShapeError, StoreError
from .events import MODALITIES, WINDOW, ReferencingEvent, canonical_modalities, feature_indices, stack_inputs
from .scene import COCKPIT, ENVIRONMENT, USE_CASES, angular_extent, default_scenes, ground_truth_vector, \
    hit_test, resolve_nearest, target_and_pose

CASE_KEY = "case"
FUSION_WIDTH = 128
CASE_WIDTH = 64


class _Model:
    kind = ""

    def __init__(self):
        self._params: dict[str, ad.Tensor] = {}

    def _add(self, name: str, data: np.ndarray) -> ad.Tensor:
        t = ad.parameter(data)
        self._params[name] = t
        return t

    def _conv(self, rng, name: str, kh: int, kw: int, cin: int, cout: int) -> None:
        self._add(f"{name}.k", ad.he_uniform(rng, (kh, kw, cin, cout), kh * kw * cin))
        self._add(f"{name}.b", np.zeros(cout))

    def _apply_conv(self, x, name: str) -> ad.Tensor:
        return ad.relu(ad.conv2d(x, self._params[f"{name}.k"], self._params[f"{name}.b"]))

    def parameters(self) -> list[ad.Tensor]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, ad.Tensor]:
        return dict(self._params)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            raise StoreError("weight names do not match the architecture")
        for k, v in state.items():
            if v.shape != self._params[k].shape:
                raise StoreError(f"weight {k!r} has shape {v.shape}, expected {self._params[k].shape}")
            self._params[k].data = np.array(v, dtype=np.float64)

    @property
    def param_count(self) -> int:
        return ad.param_count(self)

    @property
    def fingerprint(self) -> str:
        arch = json.dumps(self.arch(), sort_keys=True)
        return f"{self.kind}-{hashlib.sha256(arch.encode()).hexdigest()[:16]}"

    def arch(self) -> dict:
        raise NotImplementedError

    def inputs(self, events: Sequence[ReferencingEvent]) -> np.ndarray:
        return stack_inputs(events, self.modalities)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        expected = (WINDOW, len(feature_indices(self.modalities)), 3)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"{self.kind} model expects (batch, {expected}), got {x.shape}")
        return x


class FusionModel(_Model):
    """Per-modality conv branches fused by a conv trunk into a 3-vector."""

    kind = "fusion"

    def __init__(self, modalities, width: int = FUSION_WIDTH, seed: int = 0):
        super().__init__()
        mods = canonical_modalities(modalities)
        if not mods:
            raise InvalidConfig("fusion model needs at least one modality")
        if width < 1:
            raise InvalidConfig("width must be positive")
        self.modalities = mods
        self.width = width
        self.seed = seed
        rng = np.random.default_rng(seed)
        for m in mods:
            self._conv(rng, f"{m}.conv1", 2, 2, 3, width)
            self._conv(rng, f"{m}.conv2", 2, 2, width, width)
        self._conv(rng, "trunk.conv1", 3, 3, width, width)
        self._conv(rng, "trunk.conv2", 3, 3, width, width)
        flat = (WINDOW // 2) * 2 * len(mods) * width
        self._add("out.w", rng.uniform(-1, 1, (flat, 3)) * math.sqrt(3.0 / flat))
        self._add("out.b", np.zeros(3))

    def arch(self) -> dict:
        return {"kind": self.kind, "modalities": list(self.modalities), "width": self.width}

    def forward(self, x: np.ndarray) -> ad.Tensor:
        x = self._check_input(x)
        branches = []
        for i, m in enumerate(self.modalities):
            h = self._apply_conv(x[:, :, 2 * i:2 * i + 2, :], f"{m}.conv1")
            h = self._apply_conv(h, f"{m}.conv2")
            branches.append(ad.avg_pool(h))
        h = ad.concat(branches, axis=2) if len(branches) > 1 else branches[0]
        h = self._apply_conv(h, "trunk.conv1")
        h = self._apply_conv(h, "trunk.conv2")
        return ad.dense(ad.flatten(h), self._params["out.w"], self._params["out.b"])


class CaseModel(_Model):
    """Two 3x3 conv layers, averaging over time and a sigmoid unit.

    Pooling only the time axis keeps track of which feature a response came
    from, which a global average would discard.

    Outputs the probability that the referenced object is outside the car.
    """

    kind = "case"

    def __init__(self, width: int = CASE_WIDTH, seed: int = 0, modalities=MODALITIES):
        super().__init__()
        mods = canonical_modalities(modalities)
        if not mods:
            raise InvalidConfig("case model needs at least one modality")
        if width < 1:
            raise InvalidConfig("width must be positive")
        self.modalities = mods
        self.width = width
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._conv(rng, "conv1", 3, 3, 3, width)
        self._conv(rng, "conv2", 3, 3, width, width)
        flat = len(feature_indices(mods)) * width
        self._add("out.w", ad.he_uniform(rng, (flat, 1), flat) * 0.5)
        self._add("out.b", np.zeros(1))

    def arch(self) -> dict:
        return {"kind": self.kind, "modalities": list(self.modalities), "width": self.width}

    def forward(self, x: np.ndarray) -> ad.Tensor:
        x = self._check_input(x)
        h = self._apply_conv(x, "conv1")
        h = self._apply_conv(h, "conv2")
        h = ad.flatten(ad.time_avg_pool(h))
        return ad.sigmoid(ad.dense(h, self._params["out.w"], self._params["out.b"]))


def build_fusion_model(modalities=MODALITIES, width: int = FUSION_WIDTH, seed: int = 0) -> FusionModel:
    return FusionModel(modalities, width, seed)


def build_case_model(width: int = CASE_WIDTH, seed: int = 0, modalities=MODALITIES) -> CaseModel:
    return CaseModel(width, seed, modalities)


def model_from_arch(arch: dict, seed: int = 0) -> _Model:
    kind = arch.get("kind")
    if kind == "fusion":
        return FusionModel(arch["modalities"], int(arch["width"]), seed)
    if kind == "case":
        return CaseModel(int(arch["width"]), seed, arch.get("modalities", MODALITIES))
    raise StoreError(f"unknown model kind {kind!r}")


# ------------------------------------------------------------------ targets

def ground_truths(events: Sequence[ReferencingEvent], scenes: Optional[dict] = None) -> np.ndarray:
    scenes = scenes or default_scenes()
    out = np.empty((len(events), 3))
    for i, e in enumerate(events):
        out[i] = ground_truth_vector(*target_and_pose(scenes, e.use_case, e.target_id, e.pose_id))
    return out


def case_labels(events: Sequence[ReferencingEvent]) -> np.ndarray:
    """1 for objects outside the car, 0 for cockpit elements."""
    return np.array([[1.0 if e.use_case == ENVIRONMENT else 0.0] for e in events])


def data_fingerprint(events: Sequence[ReferencingEvent]) -> str:
    h = hashlib.sha256()
    for e in events:
        h.update(f"{e.subject_id}|{e.use_case}|{e.target_id}|{e.pose_id}|{e.woz_index}".encode())
        h.update(np.nan_to_num(e.features, nan=0.0).tobytes())
    return h.hexdigest()[:16]


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 50
    lr0: float = 1e-3
    lr_factor: float = 0.5
    lr_patience: int = 5
    min_lr: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.lr0 <= 0:
            raise InvalidConfig("batch_size, epochs and lr0 must be positive")


@dataclass
class TrainResult:
    model: _Model
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    data_fingerprint: str = ""


def _loss(model: _Model, x: np.ndarray, y: np.ndarray) -> ad.Tensor:
    out = model.forward(x)
    if model.kind == "case":
        return ad.bce_loss(out, y)
    return ad.mad_loss(out, y)


def _targets(model: _Model, events, scenes) -> np.ndarray:
    return case_labels(events) if model.kind == "case" else ground_truths(events, scenes)


def evaluate_loss(model: _Model, x: np.ndarray, y: np.ndarray, chunk: int = 256) -> float:
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(x), chunk):
            total += _loss(model, x[i:i + chunk], y[i:i + chunk]).item() * len(x[i:i + chunk])
    return total / len(x)


def train(model: _Model, train_events: Sequence[ReferencingEvent], val_events: Sequence[ReferencingEvent],
          config: TrainConfig = TrainConfig(), scenes: Optional[dict] = None) -> TrainResult:
    """Mini-batch Adam; keeps the weights from the epoch with the lowest validation loss.

    The learning rate halves after ``lr_patience`` epochs without validation
    improvement. Events should already have their gaps interpolated.
    """
    train_events, val_events = list(train_events), list(val_events)
    if not train_events or not val_events:
        raise InvalidConfig("training and validation sets must be non-empty")
    overlap = {e.subject_id for e in train_events} & {e.subject_id for e in val_events}
    if overlap:
        raise InvalidConfig(f"subjects {sorted(overlap)} appear in both training and validation")
    x_tr, y_tr = model.inputs(train_events), _targets(model, train_events, scenes)
    x_va, y_va = model.inputs(val_events), _targets(model, val_events, scenes)

    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = ad.Adam(params, lr=config.lr0)
    sched = ad.PlateauSchedule(config.lr0, config.lr_factor, config.lr_patience, config.min_lr)
    result = TrainResult(model, data_fingerprint=data_fingerprint(train_events))
    best_state = model.state()
    n = len(x_tr)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            opt.zero_grad()
            loss = _loss(model, x_tr[idx], y_tr[idx])
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
        val = evaluate_loss(model, x_va, y_va)
        result.history.append({"epoch": epoch, "train_loss": running / n, "val_loss": val, "lr": opt.lr})
        if val < result.best_val_loss:
            result.best_val_loss, result.best_epoch = val, epoch
            best_state = model.state()
        opt.lr = sched.step(val)
    model.load_state(best_state)
    return result


# ------------------------------------------------------------------ inference

def raw_outputs(model: _Model, events, chunk: int = 256) -> np.ndarray:
    x = model.inputs(events)
    outs = []
    with ad.no_grad():
        for i in range(0, len(x), chunk):
            outs.append(model.forward(x[i:i + chunk]).data)
    return np.concatenate(outs) if outs else np.zeros((0, 3 if model.kind == "fusion" else 1))


def predict_direction(model: FusionModel, events):
    """Unit direction(s) for one event or a sequence of events."""
    single = isinstance(events, ReferencingEvent)
    raw = raw_outputs(model, [events] if single else list(events))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms < 1e-9):
        raise DegenerateVector("network output has (near) zero norm")
    out = raw / norms
    return out[0] if single else out


@dataclass(frozen=True)
class CasePrediction:
    use_case: str
    p_environment: float

    @property
    def p_cockpit(self) -> float:
        return 1.0 - self.p_environment


def case_probabilities(model: CaseModel, events) -> np.ndarray:
    return raw_outputs(model, list(events))[:, 0]


def predict_case(model: CaseModel, events, threshold: float = 0.5):
    single = isinstance(events, ReferencingEvent)
    probs = case_probabilities(model, [events] if single else events)
    preds = [CasePrediction(ENVIRONMENT if p >= threshold else COCKPIT, float(p)) for p in probs]
    return preds[0] if single else preds


# ------------------------------------------------------------------ storage

class WeightStore:
    """``{root}/{use_case}/{modalities}/weights.bin`` plus ``meta.json``.

    The case classifier lives under the ``case`` use-case key.
    """

    def __init__(self, root):
        self.root = Path(root)

    def entry_dir(self, use_case: str, modalities=MODALITIES) -> Path:
        if use_case not in USE_CASES and use_case != CASE_KEY:
            raise StoreError(f"unknown use case {use_case!r}")
        return self.root / use_case / "+".join(canonical_modalities(modalities))

    def has(self, use_case: str, modalities=MODALITIES) -> bool:
        return (self.entry_dir(use_case, modalities) / "weights.bin").is_file()

    def save(self, use_case: str, model: _Model, meta: Optional[dict] = None) -> Path:
        d = self.entry_dir(use_case, model.modalities)
        d.mkdir(parents=True, exist_ok=True)
        ad.save_weights(d / "weights.bin", model.state(), model.fingerprint)
        info = {"arch": model.arch(), "fingerprint": model.fingerprint, "param_count": model.param_count,
                **(meta or {})}
        (d / "meta.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
        return d

    def meta(self, use_case: str, modalities=MODALITIES) -> dict:
        path = self.entry_dir(use_case, modalities) / "meta.json"
        try:
            return json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise StoreError(f"{path}: cannot read metadata ({exc})") from exc

    def load(self, use_case: str, modalities=MODALITIES) -> _Model:
        d = self.entry_dir(use_case, modalities)
        if not (d / "weights.bin").is_file():
            raise StoreError(f"no weights for {use_case}/{d.name} in {self.root}")
        meta = self.meta(use_case, modalities)
        model = model_from_arch(meta.get("arch", {}))
        if model.fingerprint != meta.get("fingerprint"):
            raise StoreError(f"{d}: metadata fingerprint does not match its architecture")
        model.load_state(ad.load_weights(d / "weights.bin", model.fingerprint))
        return model


@dataclass(frozen=True)
class TwoStageResult:
    use_case: str
    p_environment: float
    direction: np.ndarray
    target_id: str
    hit: bool


def two_stage_predict(case_model: Optional[CaseModel], store: WeightStore, event: ReferencingEvent,
                      scenes: Optional[dict] = None, force_case: Optional[str] = None,
                      threshold: float = 0.5) -> TwoStageResult:
    """Classify inside/outside, regress with that use case's fusion weights, snap to a target.

    ``force_case`` skips the classifier. The hit flag is judged against the
    event's labelled target when it belongs to the chosen scene.
    """
    scenes = scenes or default_scenes()
    if force_case is not None:
        if force_case not in USE_CASES:
            raise InvalidConfig(f"unknown use case {force_case!r}")
        use_case, p_env = force_case, 1.0 if force_case == ENVIRONMENT else 0.0
    else:
        if case_model is None:
            raise InvalidConfig("a case model is needed unless the use case is forced")
        pred = predict_case(case_model, event, threshold)
        use_case, p_env = pred.use_case, pred.p_environment
    fusion = store.load(use_case, MODALITIES)
    direction = predict_direction(fusion, event)
    scene = scenes[use_case]
    pose_id = event.pose_id if use_case == ENVIRONMENT else None
    if use_case == ENVIRONMENT and pose_id is None:
        pose_id = scene.poses[0].id
    target_id = resolve_nearest(direction, scene, pose_id)
    hit = False
    if event.use_case == use_case:
        extent = angular_extent(*target_and_pose(scenes, use_case, event.target_id, pose_id))
        hit = hit_test(direction, extent)
    return TwoStageResult(use_case, p_env, direction, target_id, hit)
