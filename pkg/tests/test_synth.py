import numpy as np
import pytest

from toolrefine.cooccur import estimate_stats, pmi
from toolrefine.evaluation import evaluate
from toolrefine.refine import class_accuracy
from toolrefine.synth import SynthConfig, generate


def test_clean_teacher_is_perfect():
    ds = generate(SynthConfig(num_classes=4, num_images=50, confusable_pairs=((0, 1, 1.0),),
                              teacher_corruption_rate=0.0, box_jitter=0.0, seed=1))
    assert class_accuracy(ds.detections, ds.true_categories) == 1.0
    assert evaluate(ds.detections, ds.groundtruth, 4).map == 1.0


def test_boost_makes_pmi_positive():
    ds = generate(SynthConfig(num_classes=4, num_images=2000, presence_prob=0.2,
                              cooccur_boost=((0, 1, 0.9),), seed=2))
    assert pmi(estimate_stats(ds.labels, 4), 0, 1) > 0


def test_corruption_rate_is_honoured():
    cfg = SynthConfig(num_classes=2, num_images=1000, presence_prob=0.7, max_instances_per_class=2,
                      confusable_pairs=((0, 1, 1.0),), teacher_corruption_rate=0.3, seed=3)
    ds = generate(cfg)
    flags = [f for image in ds.corrupted for f in image][:2000]
    assert len(flags) == 2000
    assert abs(np.mean(flags) - 0.3) <= 0.03


def test_corruption_stays_within_pair():
    ds = generate(SynthConfig(num_classes=4, num_images=300, confusable_pairs=((0, 1, 1.0),),
                              teacher_corruption_rate=0.5, seed=4))
    for det, truth, flips in zip(ds.detections, ds.true_categories, ds.corrupted):
        for p, t, f in zip(det.proposals, truth, flips):
            if f:
                assert {p.category, t} == {0, 1}
            else:
                assert p.category == t


def test_generation_is_bit_reproducible():
    cfg = SynthConfig(num_images=40, box_jitter=0.1, teacher_corruption_rate=0.2,
                      confusable_pairs=((0, 1, 1.0),), seed=9)
    a, b = generate(cfg), generate(cfg)
    assert a.detections == b.detections and a.labels == b.labels and a.groundtruth == b.groundtruth


def test_labels_are_union_of_gt_classes():
    ds = generate(SynthConfig(num_images=200, max_instances_per_class=2, seed=5))
    for lab in ds.labels:
        classes = {g.category for g in ds.groundtruth[lab.image_id]}
        assert {k for k, v in enumerate(lab.labels) if v} == classes


def test_confusable_prototype_distance():
    ds = generate(SynthConfig(num_classes=4, feature_dim=8, prototype_separation=5.0,
                              confusable_pairs=((2, 3, 0.75),), num_images=1, seed=6))
    d = np.linalg.norm(ds.prototypes[2] - ds.prototypes[3])
    assert d == pytest.approx(0.75)
    assert np.linalg.norm(ds.prototypes[0] - ds.prototypes[1]) == pytest.approx(5.0)


def test_separable_features_admit_linear_probe():
    ds = generate(SynthConfig(num_classes=4, feature_dim=8, prototype_separation=8.0,
                              noise_sigma=0.3, num_images=400, seed=7))
    X = np.array([p.feature for d in ds.detections for p in d.proposals])
    y = np.array([t for truth in ds.true_categories for t in truth])
    # least-squares one-vs-rest probe
    A = np.hstack([X, np.ones((len(X), 1))])
    W, *_ = np.linalg.lstsq(A, np.eye(4)[y], rcond=None)
    assert ((A @ W).argmax(axis=1) == y).mean() >= 0.99


def test_every_image_has_an_object():
    ds = generate(SynthConfig(num_images=100, presence_prob=0.0, seed=8))
    assert all(len(d) >= 1 for d in ds.detections)


@pytest.mark.parametrize("kwargs", [
    dict(teacher_corruption_rate=1.5),
    dict(prototype_separation=0.0),
    dict(confusable_pairs=((0, 0, 1.0),)),
    dict(confusable_pairs=((0, 1, 1.0), (1, 2, 1.0))),
    dict(cooccur_boost=((0, 9, 0.5),)),
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SynthConfig(**kwargs)


def test_subset_keeps_alignment():
    ds = generate(SynthConfig(num_images=20, seed=10))
    sub = ds.subset([3, 7])
    assert [d.image_id for d in sub.detections] == ["img000003", "img000007"]
    assert sub.true_categories == [ds.true_categories[3], ds.true_categories[7]]
    assert set(sub.groundtruth) == {"img000003", "img000007"}
