import json

import numpy as np
import pytest

from driveref.errors import InsufficientFrames, InvalidSubject, ParseError
from driveref.events import (FEATURES, WINDOW, Dataset, Frame, ReferencingEvent, from_tensor, interpolate_missing,
                             load_dataset, modality_slice, save_dataset, split_loso, stack_inputs, to_tensor,
                             window_bounds, window_event)
from driveref.geometry import EulerAngles, normalize

LABELS = dict(subject_id="S01", use_case="cockpit", target_id="navigation")


def _frame(t):
    return Frame(
        finger_tip=np.array([0.3 + 0.01 * t, -0.2, 0.1]),
        finger_dir=normalize([1.0, 0.01 * t, -0.2]),
        eye_pos=np.array([0.0, 0.0, 0.05 * t]),
        eye_dir=normalize([1.0, -0.01 * t, 0.0]),
        head_pos=np.array([-0.08, 0.0, 0.02]),
        head_euler=EulerAngles(t, -1.0, 0.5),
    )


def _event(rng=None, drop=0.0):
    rng = rng or np.random.default_rng(0)
    t = np.arange(WINDOW, dtype=float)
    features = np.stack([t[:, None] * rng.normal(size=3) + rng.normal(size=3) for _ in range(6)], axis=1)
    available = rng.random((WINDOW, 6)) >= drop
    available[[0, -1]] = True
    features[~available] = np.nan
    return ReferencingEvent(features=features, available=available, woz_index=18, **LABELS), t


def test_window_examples():
    assert window_bounds(100, 50) == (32, 18)
    assert window_bounds(36, 10) == (0, 10)
    assert window_bounds(100, 3) == (0, 3)
    assert window_bounds(100, 95) == (64, 31)
    with pytest.raises(InsufficientFrames):
        window_bounds(20, 5)
    with pytest.raises(InsufficientFrames):
        window_bounds(40, 40)


def test_window_event_copies_frames():
    stream = [_frame(t) for t in range(100)]
    ev = window_event(stream, 50, **LABELS)
    assert ev.woz_index == 18
    np.testing.assert_array_equal(ev.features[0, 0], stream[32].finger_tip)
    np.testing.assert_allclose(ev.features[18, 5], np.radians([50.0, -1.0, 0.5]))
    assert ev.frames[18].head_euler.yaw == pytest.approx(50.0)
    with pytest.raises(InsufficientFrames):
        window_event(stream[:20], 5, **LABELS)


def test_event_shape_validation():
    with pytest.raises(ValueError):
        ReferencingEvent(features=np.zeros((35, 6, 3)), available=np.ones((35, 6), bool), woz_index=0, **LABELS)
    with pytest.raises(ValueError):
        ReferencingEvent(features=np.zeros((36, 6, 3)), available=np.ones((36, 6), bool), woz_index=36, **LABELS)


def test_interpolate_midpoint():
    ev, _ = _event()
    ev.features[:, 0] = 0.0
    ev.features[4, 0], ev.features[6, 0] = 1.0, 3.0
    ev.available[5, 0] = False
    ev.features[5, 0] = np.nan
    out = interpolate_missing(ev)
    np.testing.assert_allclose(out.features[5, 0], [2.0, 2.0, 2.0])
    assert not out.available[5, 0]


def test_interpolate_identity_without_gaps():
    ev, _ = _event()
    assert interpolate_missing(ev) == ev


def test_interpolate_linear_exact(rng):
    for _ in range(20):
        ev, t = _event(rng, drop=0.3)
        truth, _ = _event(np.random.default_rng(0))
        out = interpolate_missing(ev)
        # recompute the ramp directly from two known rows per feature
        for f in (0, 2, 4, 5):
            rows = np.flatnonzero(ev.available[:, f])
            a, b = rows[0], rows[-1]
            slope = (ev.features[b, f] - ev.features[a, f]) / (b - a)
            expected = ev.features[a, f] + (t[:, None] - a) * slope
            np.testing.assert_allclose(out.features[:, f], expected, atol=1e-9)


def test_interpolate_edges_hold_and_idempotent():
    ev, _ = _event()
    ev.available[:3, 2] = False
    ev.available[-2:, 2] = False
    ev.features[~ev.available] = np.nan
    out = interpolate_missing(ev)
    np.testing.assert_array_equal(out.features[0, 2], ev.features[3, 2])
    np.testing.assert_array_equal(out.features[-1, 2], ev.features[-3, 2])
    assert interpolate_missing(out) == out


def test_interpolate_renormalises_directions():
    ev, _ = _event()
    ev.features[:, 1] = [1.0, 0.0, 0.0]
    ev.features[10, 1] = [1.0, 0.0, 0.0]
    ev.features[12, 1] = [0.0, 1.0, 0.0]
    ev.available[11, 1] = False
    ev.features[11, 1] = np.nan
    out = interpolate_missing(ev)
    np.testing.assert_allclose(out.features[11, 1], normalize([1, 1, 0]))


def test_interpolate_flags_feature_unavailable():
    ev, _ = _event()
    ev.available[1:, 3] = False
    ev.features[~ev.available] = np.nan
    out = interpolate_missing(ev)
    assert "feature_unavailable:eye_dir" in out.flags
    assert np.isnan(out.features[:, 3]).all()
    assert np.isfinite(out.features[:, [0, 1, 2, 4, 5]]).all()
    assert np.all(stack_inputs([out])[0, :, 3] == 0.0)


def test_tensor_shapes_and_round_trip():
    ev, _ = _event(drop=0.2)
    tensor = to_tensor(ev)
    assert tensor.shape == (36, 6, 3)
    assert modality_slice(tensor, ["finger"]).shape == (36, 2, 3)
    sl = modality_slice(tensor, ["head", "eye"])
    assert sl.shape == (36, 4, 3) and sl.features == FEATURES[2:]
    back = from_tensor(tensor, woz_index=ev.woz_index, **LABELS)
    assert back == ev
    np.testing.assert_array_equal(tensor.values[tensor.valid], ev.features[np.isfinite(ev.features)])


def test_stack_inputs_order():
    ev, _ = _event()
    x = stack_inputs([ev, ev], ["head", "finger"])
    assert x.shape == (2, 36, 4, 3)
    np.testing.assert_array_equal(x[1, :, :2], ev.features[:, :2])
    np.testing.assert_array_equal(x[1, :, 2:], ev.features[:, 4:])


def _dataset(n_sub=4, per=3):
    rng = np.random.default_rng(3)
    events = []
    for s in range(n_sub):
        for _ in range(per):
            ev, _ = _event(rng, drop=0.1)
            ev.subject_id = f"S{s + 1:02d}"
            events.append(ev)
    return Dataset(events)


def test_dataset_round_trip(tmp_path, small_dataset):
    for ds in (_dataset(), small_dataset, Dataset([])):
        path = tmp_path / "d.jsonl"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back == ds
        for a, b in zip(ds.events, back.events):
            assert a.features.tobytes() == b.features.tobytes()


def test_truncated_event_names_the_event(tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset(_dataset(), path)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[2])
    rec["features"] = rec["features"][:35]
    lines[2] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as exc:
        load_dataset(path)
    msg = str(exc.value)
    assert "35" in msg and rec["subject_id"] in msg and rec["target_id"] in msg


def test_split_loso_partition():
    ds = _dataset(n_sub=11, per=2)
    train, val, test = split_loso(ds, "S03", "S04")
    assert len(train.subjects()) == 9
    assert len(train) + len(val) + len(test) == len(ds)
    assert set(train.subjects()) & set(val.subjects()) == set()
    assert set(train.subjects()) | {"S03", "S04"} == set(ds.subjects())
    assert test.subjects() == ["S03"] and val.subjects() == ["S04"]
    with pytest.raises(InvalidSubject):
        split_loso(ds, "S03", "S03")
    with pytest.raises(InvalidSubject):
        split_loso(ds, "S99", "S03")
