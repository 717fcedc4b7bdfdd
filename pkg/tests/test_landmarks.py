import math

import numpy as np
import pytest

from planeagent.landmarks import (
    HeatmapSpec,
    LandmarkSet,
    LowConfidence,
    detect_landmarks,
    gaussian_heatmap,
    perturbed_oracle,
)
from planeagent.volume import LANDMARK_NAMES, Annotation, Pose, Volume, generate_phantom, phantom_annotation, random_pose


def errors(found: LandmarkSet, ann) -> np.ndarray:
    return np.linalg.norm(found.array() - ann.landmark_array(), axis=1)


def test_heatmap_peak_and_sigma():
    v = Volume(np.zeros((33, 33, 33)), 0.5)
    c = v.voxel_centers()[16, 16, 16]
    hm = gaussian_heatmap(v, c, HeatmapSpec(sigma=2.0)).voxels
    assert hm[16, 16, 16] == pytest.approx(1.0)
    # four voxels at 0.5 mm is one sigma
    assert hm[20, 16, 16] == pytest.approx(math.exp(-0.5), abs=1e-6)


def test_heatmap_integral_shift_invariant():
    v = Volume(np.zeros((64, 64, 64)), 0.5)
    c = v.voxel_centers()
    a = gaussian_heatmap(v, c[30, 31, 32]).voxels.sum(dtype=np.float64)
    b = gaussian_heatmap(v, c[33, 29, 34]).voxels.sum(dtype=np.float64)
    assert a == pytest.approx(b, rel=1e-5)


def test_heatmap_spec_validation():
    with pytest.raises(ValueError):
        HeatmapSpec(sigma=0.0)
    assert HeatmapSpec(2.0).radius_for(0.5) == 8
    with pytest.raises(ValueError):
        HeatmapSpec(2.0, radius=3).radius_for(0.5)
    with pytest.raises(ValueError):
        gaussian_heatmap(Volume(np.zeros((4, 4, 4))), [np.nan, 0, 0])


def test_noise_free_detection_within_one_voxel():
    for k, pose in enumerate([Pose(), Pose((20.0, -10.0, 15.0), (2.0, -1.0, 0.5), 0.95)]):
        v, ann = generate_phantom(k, pose, speckle=0.0)
        assert errors(detect_landmarks(v), ann).max() <= 0.5


def test_zero_volume_is_low_confidence():
    with pytest.raises(LowConfidence):
        detect_landmarks(Volume(np.zeros((96, 96, 96)), 0.5))


def test_detection_under_speckle_and_pose():
    # 100 seeded phantoms with random poses; each point within 2 mm in at least 95 of them
    ok = 0
    for seed in range(100):
        pose = random_pose(np.random.default_rng(10_000 + seed))
        v, ann = generate_phantom(seed, pose)
        ok += errors(detect_landmarks(v), ann).max() <= 2.0
    assert ok >= 95


def test_confidence_non_increasing_with_speckle():
    means = []
    for speckle in (0.0, 0.1, 0.2, 0.4):
        conf = []
        for seed in range(4):
            pose = random_pose(np.random.default_rng(seed))
            v, _ = generate_phantom(seed, pose, speckle=speckle)
            conf.extend(detect_landmarks(v).confidence.values())
        means.append(np.mean(conf))
    assert all(a >= b for a, b in zip(means, means[1:]))


def test_perturbed_oracle():
    ann = phantom_annotation(Pose((5.0, 5.0, 5.0)))
    exact = perturbed_oracle(ann, 0.0, 3)
    assert np.array_equal(exact.array(), ann.landmark_array())
    a, b = perturbed_oracle(ann, 2.0, 11), perturbed_oracle(ann, 2.0, 11)
    assert np.array_equal(a.array(), b.array())
    with pytest.raises(ValueError):
        perturbed_oracle(ann, -1.0, 0)


def test_perturbed_oracle_mean_displacement():
    ann = phantom_annotation()
    d = np.concatenate([errors(perturbed_oracle(ann, 2.0, s), ann) for s in range(3334)])[:10000]
    # the norm of a 3D isotropic Gaussian follows a chi(3) law with mean sigma * sqrt(8 / pi)
    assert np.mean(d) == pytest.approx(2.0 * math.sqrt(8 / math.pi), rel=0.05)


def test_landmark_set_rules_and_records():
    pts = {n: [float(i), 0.0, 0.0] for i, n in enumerate(LANDMARK_NAMES)}
    with pytest.raises(ValueError):
        LandmarkSet({"genu": [0, 0, 0]})
    with pytest.raises(ValueError):
        LandmarkSet({**pts, "genu": [np.inf, 0, 0]})
    s = LandmarkSet(pts, {"genu": 0.5})
    back = LandmarkSet.from_record(s.to_record())
    assert np.array_equal(back.array(), s.array()) and back.confidence["genu"] == 0.5
    # shares the annotation schema
    ann = Annotation.from_record({"landmarks": {n: [3.0 * i, 0, 0] for i, n in enumerate(LANDMARK_NAMES)}})
    assert np.array_equal(LandmarkSet.from_record(ann.to_record()).array(), ann.landmark_array())
