"""Tests for scene rendering, the twin fixture and the dataset directory format."""
import json
import os

import numpy as np
import pytest

from config import SpatialConfig
from errors import ChecksumError, DatasetVersionError, GenerationError, PreconditionError, TruncatedFileError
from geometry import Camera, DepthMap, mask_weighted_centroid, project_points, unproject
from scenegen import (MANIFEST_NAME, TWIN_TILT_DEG, SceneObject, SceneSpec, default_class_table,
                      generate_dataset, make_twin_scene, read_dataset, read_scene, render, twin_indices,
                      write_dataset)
from spatial import gt_candidates


def axis_camera():
    """At the origin, looking along +z."""
    return Camera(fx=30.0, fy=30.0, cx=16.0, cy=16.0, rotation=np.eye(3), translation=np.zeros(3))


def unit_sphere_spec(**overrides):
    values = dict(objects=[SceneObject("sphere", (0.0, 0.0, 2.0), 1.0, 1, 1)], cameras=[axis_camera()],
                  depth_noise=0.0, feature_noise=0.0, ground_plane=False)
    values.update(overrides)
    return SceneSpec(**values)


def assert_samples_equal(a, b):
    assert a.scene_id == b.scene_id
    assert len(a.views) == len(b.views)
    for va, vb in zip(a.views, b.views):
        assert np.array_equal(va.features, vb.features)
        assert np.array_equal(va.depth, vb.depth)
        assert np.array_equal(va.instance_ids, vb.instance_ids)
        assert np.array_equal(va.class_ids, vb.class_ids)
        assert va.camera.to_dict() == vb.camera.to_dict()
    assert [o.to_dict() for o in a.objects] == [o.to_dict() for o in b.objects]


def test_unit_sphere_center_depth():
    sample = render(unit_sphere_spec())
    view = sample.views[0]
    assert view.depth[16, 16] == 1.0
    assert view.instance_ids[16, 16] == 1
    assert view.instance_ids[0, 0] == 0
    assert view.depth[0, 0] == 20.0


def test_noiseless_depth_matches_ray_sphere_intersection():
    sample = render(unit_sphere_spec())
    camera = sample.views[0].camera
    dirs = camera.ray_directions()
    hit = sample.views[0].instance_ids == 1
    # |t d - c|^2 = 1 with c = (0, 0, 2)
    a = np.sum(dirs * dirs, axis=-1)
    b = -4.0 * dirs[..., 2]
    t = (-b - np.sqrt(b * b - 12.0 * a)) / (2.0 * a)
    assert np.max(np.abs(sample.views[0].depth[hit] - t[hit].astype(np.float32))) < 1e-6


def test_render_is_deterministic_per_seed():
    first = render(unit_sphere_spec(depth_noise=0.02, feature_noise=0.1, seed=4))
    second = render(unit_sphere_spec(depth_noise=0.02, feature_noise=0.1, seed=4))
    assert_samples_equal(first, second)
    other = render(unit_sphere_spec(depth_noise=0.02, feature_noise=0.1, seed=5))
    assert not np.array_equal(first.views[0].features, other.views[0].features)


def test_noisy_depth_stays_positive_and_unbiased():
    sample = render(unit_sphere_spec(depth_noise=0.05, seed=1))
    clean = render(unit_sphere_spec())
    ratio = sample.views[0].depth / clean.views[0].depth
    assert np.all(sample.views[0].depth > 0)
    assert abs(float(ratio.mean()) - 1.0) < 3 * 0.05 / np.sqrt(ratio.size)


def test_render_rejects_degenerate_specs():
    with pytest.raises(GenerationError):
        render(unit_sphere_spec(objects=[]))
    with pytest.raises(GenerationError):
        render(unit_sphere_spec(objects=[SceneObject("sphere", (0.0, 0.0, -3.0), 1.0, 1, 1)]))
    with pytest.raises(GenerationError):
        SceneObject("cone", (0.0, 0.0, 1.0), 1.0, 1, 1)


def test_twin_centroids_are_separation_apart(twin_scene):
    assert np.linalg.norm(twin_scene.object(1).center - twin_scene.object(2).center) == pytest.approx(3.0)
    view = twin_scene.views[0]
    points = unproject(view.camera, DepthMap(view.depth.astype(np.float64)))
    # visible-surface centroids sit a fraction of the radius in front of the centers
    centers = [mask_weighted_centroid((view.instance_ids == i).astype(np.float64), points) for i in (1, 2)]
    assert np.linalg.norm(centers[0] - centers[1]) == pytest.approx(3.0, abs=0.15)


def test_twins_differ_in_depth_from_the_reference_view(twin_scene):
    camera = twin_scene.views[0].camera
    left, near = (camera.to_camera_frame(twin_scene.object(i).center) for i in (1, 2))
    assert left[0] < near[0]
    assert left[2] - near[2] == pytest.approx(3.0 * np.sin(np.deg2rad(TWIN_TILT_DEG)))
    candidates = gt_candidates(twin_scene, [1, 2], 0)
    assert candidates[0].depth_at_centroid - candidates[1].depth_at_centroid > SpatialConfig().depth_tie


def test_twin_features_are_near_identical():
    sample = make_twin_scene(3.0, seed=2, feature_noise=0.1)
    means = []
    for instance in (1, 2):
        pixels = np.concatenate([v.features[v.instance_ids == instance] for v in sample.views])
        means.append(pixels.mean(axis=0))
    cosine = means[0] @ means[1] / (np.linalg.norm(means[0]) * np.linalg.norm(means[1]))
    assert cosine > 0.95
    assert sample.object(1).class_id == sample.object(2).class_id != sample.object(3).class_id


def test_twin_requires_positive_separation():
    with pytest.raises(PreconditionError):
        make_twin_scene(0.0)


def test_masks_partition_every_view(small_dataset):
    for sample in small_dataset:
        class_of = {o.instance_id: o.class_id for o in sample.objects}
        class_of[0] = 0
        for view in sample.views:
            expected = np.vectorize(class_of.get)(view.instance_ids)
            assert np.array_equal(expected, view.class_ids)


def test_cross_view_consistency(small_scene_defaults):
    sample = make_twin_scene(2.0, seed=1, depth_noise=0.0, feature_noise=0.0, defaults=small_scene_defaults)
    rng = np.random.default_rng(0)
    source, target = sample.views
    points = unproject(source.camera, DepthMap(source.depth.astype(np.float64)))
    ys, xs = np.nonzero(source.instance_ids > 0)
    picks = rng.choice(len(ys), size=min(100, len(ys)), replace=False)
    uvd, in_front = project_points(target.camera, points.points[ys[picks], xs[picks]])
    consistent = checked = 0
    for k, (u, v, z) in zip(picks, uvd):
        px, py = int(round(u)), int(round(v))
        if not (0 <= px < target.camera.width and 0 <= py < target.camera.height):
            continue
        checked += 1
        window = (slice(max(py - 1, 0), py + 2), slice(max(px - 1, 0), px + 2))
        same = target.instance_ids[window] == source.instance_ids[ys[k], xs[k]]
        occluded = target.depth[window] < z - 0.05
        consistent += bool(np.any(same | occluded))
    assert in_front.all()
    assert checked > 0 and consistent / checked >= 0.9


def test_generation_is_seeded_and_thread_independent(small_dataset_spec, small_dataset):
    for a, b in zip(small_dataset, generate_dataset(small_dataset_spec)):
        assert_samples_equal(a, b)
    for a, b in zip(small_dataset, generate_dataset(small_dataset_spec, workers=3)):
        assert_samples_equal(a, b)


def test_twin_indices_spread_over_dataset():
    assert twin_indices(50, 0.2) == sorted(set(twin_indices(50, 0.2)))
    assert len(twin_indices(50, 0.2)) == 10
    assert twin_indices(4, 0.0) == []


def test_dataset_round_trip(tmp_path, small_dataset):
    path = str(tmp_path / "data")
    write_dataset(path, small_dataset, seed=3)
    loaded = read_dataset(path)
    assert len(loaded) == len(small_dataset)
    for a, b in zip(small_dataset, loaded):
        assert_samples_equal(a, b)
    assert np.array_equal(loaded[0].class_table.vectors, small_dataset[0].class_table.vectors)
    assert_samples_equal(read_scene(path, 2), small_dataset[2])


def _manifest(path):
    with open(os.path.join(path, MANIFEST_NAME)) as f:
        return json.load(f)


def test_corrupt_payload_is_checksum_error(tmp_path, small_dataset):
    path = str(tmp_path / "data")
    write_dataset(path, small_dataset)
    entry = _manifest(path)["scenes"][0]["files"]["depth"]
    file_path = os.path.join(path, entry["path"])
    with open(file_path, "r+b") as f:
        first = f.read(1)
        f.seek(0)
        f.write(bytes([first[0] ^ 0xFF]))
    with pytest.raises(ChecksumError) as info:
        read_dataset(path)
    assert entry["path"] in str(info.value)


def test_truncated_payload(tmp_path, small_dataset):
    path = str(tmp_path / "data")
    write_dataset(path, small_dataset)
    entry = _manifest(path)["scenes"][1]["files"]["features"]
    with open(os.path.join(path, entry["path"]), "r+b") as f:
        f.truncate(entry["bytes"] - 4)
    with pytest.raises(TruncatedFileError):
        read_dataset(path)


def test_unknown_manifest_version(tmp_path, small_dataset):
    path = str(tmp_path / "data")
    write_dataset(path, small_dataset)
    manifest = _manifest(path)
    manifest["version"] = 99
    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f)
    with pytest.raises(DatasetVersionError):
        read_dataset(path)


def test_class_table_is_unit_rows():
    table = default_class_table(16)
    assert np.allclose(np.linalg.norm(table.vectors, axis=1), 1.0, atol=1e-6)
    assert table.index("sphere") == 1
