import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slotvsg.core import (
    AnnotationInvariantError,
    AnnotationParseError,
    AnnotationSchemaError,
    Box,
    FrameAnnotation,
    Instance,
    InstanceMask,
    MaskTube,
    Task,
    TaskMode,
    EvalMode,
    VideoAnnotation,
    annotation_from_dict,
    annotation_to_dict,
    box_from_mask,
    boxes_from_masks,
    dumps_annotation,
    load_video_annotation,
    rle_decode,
    rle_encode,
    save_video_annotation,
    validate_annotation,
)
from slotvsg.synthgen import WorldConfig, generate_world


def small_video(masks=True):
    m1 = np.zeros((4, 4), bool)
    m1[0, 0] = True
    m2 = np.zeros((4, 4), bool)
    m2[2:, 2:] = True
    inst = [
        Instance(1, "square", box_from_mask(m1), m1 if masks else None),
        Instance(2, "circle", box_from_mask(m2), m2 if masks else None),
    ]
    fr = FrameAnnotation(0, tuple(inst), ((1, "left-of", 2),))
    return VideoAnnotation("v", (fr,), ("square", "circle"), ("left-of",), (4, 4))


def test_single_pixel_box():
    m = np.zeros((4, 4), bool)
    m[0, 0] = True
    (b,) = boxes_from_masks([m])
    assert b.as_list() == [0.125, 0.125, 0.25, 0.25]


def test_empty_mask_names_object():
    with pytest.raises(ValueError, match="object 7"):
        boxes_from_masks([InstanceMask(np.zeros((4, 4), bool), 0, 7)])


def test_mask_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        boxes_from_masks([np.ones((3, 4), bool)], frame_size=(4, 4))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.data())
def test_box_from_mask_is_tight(h, w, data):
    mask = np.array(data.draw(st.lists(st.lists(st.booleans(), min_size=w, max_size=w), min_size=h, max_size=h)))
    if not mask.any():
        return
    x1, y1, x2, y2 = box_from_mask(mask).xyxy()
    ys, xs = np.nonzero(mask)
    assert np.isclose(x1, xs.min() / w) and np.isclose(x2, (xs.max() + 1) / w)
    assert np.isclose(y1, ys.min() / h) and np.isclose(y2, (ys.max() + 1) / h)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.data())
def test_rle_round_trip(h, w, data):
    bits = data.draw(st.lists(st.booleans(), min_size=h * w, max_size=h * w))
    mask = np.array(bits, bool).reshape(h, w)
    assert np.array_equal(rle_decode(rle_encode(mask), (h, w)), mask)


def test_box_problems():
    assert Box(0.5, 0.5, 0.2, 0.2).problems() == []
    assert Box(0.5, 0.5, 0.0, 0.2).problems()
    assert Box(0.95, 0.5, 0.2, 0.2).problems()


def test_mask_tube_requires_increasing_frames():
    m = np.ones((2, 2), bool)
    with pytest.raises(ValueError):
        MaskTube(1, (InstanceMask(m, 1, 1), InstanceMask(m, 0, 1)))
    with pytest.raises(ValueError):
        MaskTube(1, (InstanceMask(m, 0, 2),))


def test_validate_clean_video():
    assert validate_annotation(small_video()) == []


def test_validate_detects_dangling_and_unknown_relation():
    ann = small_video()
    fr = ann.frames[0]
    bad = FrameAnnotation(0, fr.instances, ((1, "left-of", 9), (1, "eats", 2), (1, "left-of", 1)))
    ann = VideoAnnotation("v", (bad,), ann.object_vocab, ann.relation_vocab, ann.frame_size)
    kinds = {v.kind for v in validate_annotation(ann)}
    assert {"dangling triplet", "unknown relation", "self relation"} <= kinds


def test_validate_detects_overlap_and_box_mismatch():
    ann = small_video()
    i1, i2 = ann.frames[0].instances
    overlapping = Instance(2, "circle", box_from_mask(i2.mask), i2.mask | i1.mask)
    wrong_box = Instance(1, "square", Box(0.5, 0.5, 0.5, 0.5), i1.mask)
    ann = VideoAnnotation("v", (FrameAnnotation(0, (wrong_box, overlapping), ()),), ann.object_vocab, (), (4, 4))
    kinds = {v.kind for v in validate_annotation(ann)}
    assert "mask overlap" in kinds and "box/mask mismatch" in kinds


def test_validate_detects_identity_drift():
    ann = small_video()
    i1, i2 = ann.frames[0].instances
    f1 = FrameAnnotation(1, (Instance(1, "circle", i1.box, i1.mask), i2), ())
    ann = VideoAnnotation("v", (ann.frames[0], f1), ann.object_vocab, ann.relation_vocab, (4, 4))
    assert "identity drift" in {v.kind for v in validate_annotation(ann)}


def test_load_errors_are_classified(tmp_path):
    p = tmp_path / "a.json"
    p.write_text("{not json")
    with pytest.raises(AnnotationParseError):
        load_video_annotation(p)
    p.write_text(json.dumps({"video_id": "x"}))
    with pytest.raises(AnnotationSchemaError):
        load_video_annotation(p)
    doc = annotation_to_dict(small_video())
    doc["frames"][0]["triplets"][0][2] = 99
    p.write_text(json.dumps(doc))
    with pytest.raises(AnnotationInvariantError):
        load_video_annotation(p)


def test_annotation_round_trip_random_worlds(tmp_path):
    for seed in range(20):
        _, ann = generate_world(WorldConfig(seed=seed, num_frames=4))
        path = tmp_path / f"{seed}.json"
        save_video_annotation(ann, path)
        back = load_video_annotation(path)
        assert back == ann
        assert dumps_annotation(back) == path.read_text()


def test_annotation_dict_round_trip_without_masks():
    ann = small_video(masks=False)
    assert annotation_from_dict(annotation_to_dict(ann)) == ann


def test_task_mode_requires_masks_for_pvsg():
    ann = small_video(masks=False)
    TaskMode(Task.DSGG, EvalMode.SGDET).check(ann)
    with pytest.raises(ValueError):
        TaskMode(Task.PVSG, EvalMode.SGDET).check(ann)
