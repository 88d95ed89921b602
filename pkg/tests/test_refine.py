import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from toolrefine.core import DimensionError, ImageDetections, load_detections, save_detections
from toolrefine.milnet import NetworkConfig, init_model
from toolrefine.refine import class_accuracy, refine_labels
from toolrefine.synth import SynthConfig, generate

CFG = NetworkConfig(feature_dim=8, num_classes=4, model_dim=8, num_heads=2, num_layers=1,
                    mlp_hidden_dim=8, ff_hidden_dim=8, seed=0)


def dataset(seed=0, n=15):
    return generate(SynthConfig(num_classes=4, feature_dim=8, num_images=n, max_instances_per_class=2,
                                box_jitter=0.1, seed=seed))


def test_empty_image_passes_through():
    assert refine_labels(init_model(CFG), [ImageDetections("e")]) == [ImageDetections("e")]


def test_refined_category_is_argmax():
    for det in refine_labels(init_model(CFG), dataset().detections):
        for p in det.proposals:
            assert p.refined_category == int(np.argmax(p.refined_probs))


def test_fixed_point_when_model_agrees_with_teacher():
    ds = dataset(1)
    model = init_model(CFG)
    refined = refine_labels(model, ds.detections)
    for det in refined:
        for p in det.proposals:
            if int(np.argmax(p.refined_probs)) == p.teacher_category:
                assert p.category == p.teacher_category


def test_dimension_mismatch_names_image():
    other = NetworkConfig(feature_dim=5, num_classes=4, model_dim=8, num_heads=2, num_layers=1)
    with pytest.raises(DimensionError, match="img000000"):
        refine_labels(init_model(other), dataset().detections)


def test_min_prob_filter_drops_low_confidence():
    refined = refine_labels(init_model(CFG), dataset().detections, min_prob=1.1)
    assert all(len(d) == 0 for d in refined)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000))
def test_boxes_and_counts_preserved(seed):
    ds = dataset(seed, n=8)
    refined = refine_labels(init_model(CFG), ds.detections)
    assert [d.image_id for d in refined] == [d.image_id for d in ds.detections]
    for before, after in zip(ds.detections, refined):
        assert len(before) == len(after)
        for p, q in zip(before.proposals, after.proposals):
            assert p.box == q.box and p.objectness == q.objectness and p.feature == q.feature


def test_refinement_is_deterministic():
    ds = dataset(2)
    model = init_model(CFG)
    assert refine_labels(model, ds.detections) == refine_labels(model, ds.detections)


def test_refine_save_load_refine_idempotent(tmp_path):
    ds = dataset(3)
    model = init_model(CFG)
    first = refine_labels(model, ds.detections)
    save_detections(tmp_path / "r.jsonl", first)
    again = refine_labels(model, load_detections(tmp_path / "r.jsonl", ds.manifest))
    assert [p.refined_category for d in first for p in d.proposals] == \
           [p.refined_category for d in again for p in d.proposals]


def test_class_accuracy_counts_matches():
    ds = dataset(4)
    assert class_accuracy(ds.detections, ds.true_categories) == 1.0
