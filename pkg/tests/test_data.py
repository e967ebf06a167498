import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from oracles import boundary_oracle, flood_fill_labels
from quantseg.data import (
    ContainerError,
    SynthConfig,
    boundary,
    generate_synthetic,
    read_container,
    read_dataset,
    split_dataset,
    write_container,
    write_dataset,
)


def check_sample_invariants(s, cfg):
    c, h, w = s.image.shape
    assert (h, w) == tuple(cfg.size) and c == cfg.channels
    assert s.object_gt.shape == s.contour_gt.shape == s.instances.shape == (h, w)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert set(np.unique(s.object_gt)) <= {0, 1}
    np.testing.assert_array_equal(s.contour_gt, boundary_oracle(s.object_gt))
    np.testing.assert_array_equal(s.instances, flood_fill_labels(s.object_gt))
    lo, hi = cfg.objects_per_image
    assert lo <= s.instances.max() <= hi


def test_generation_deterministic():
    cfg = SynthConfig(n_images=3, seed=5)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.id == y.id
        assert x.instances.tobytes() == y.instances.tobytes()
    c = generate_synthetic(SynthConfig(n_images=3, seed=6))
    assert a[0].image.tobytes() != c[0].image.tobytes()


def test_clean_ellipses_boundary():
    cfg = SynthConfig(n_images=5, deformation=0.0, noise_sigma=0.0, seed=1)
    for s in generate_synthetic(cfg):
        np.testing.assert_array_equal(s.contour_gt, boundary_oracle(s.object_gt))
        # two intensities only when noise is off
        assert len(np.unique(s.image[0])) == 2


def test_invariant_sweep_40():
    cfg = SynthConfig(n_images=40, size=(64, 64), objects_per_image=(1, 3), seed=2)
    samples = generate_synthetic(cfg)
    assert len(samples) == 40 and len({s.id for s in samples}) == 40
    for s in samples:
        check_sample_invariants(s, cfg)


def test_objects_never_touch():
    for s in generate_synthetic(SynthConfig(n_images=10, objects_per_image=(3, 3), deformation=0.8, seed=4)):
        assert s.instances.max() == 3
        assert s.part == "B"


def test_config_validation():
    with pytest.raises(ValueError, match="32x32"):
        generate_synthetic(SynthConfig(size=(16, 64)))
    with pytest.raises(ValueError, match="deformation"):
        generate_synthetic(SynthConfig(deformation=1.5))


def test_placement_failure_is_reported():
    with pytest.raises(RuntimeError, match="1000 attempts"):
        generate_synthetic(SynthConfig(n_images=1, size=(32, 32), objects_per_image=(40, 40)))


def test_boundary_examples():
    m = np.zeros((5, 5), int)
    m[1:4, 1:4] = 1
    b = boundary(m)
    assert b.sum() == 8 and b[2, 2] == 0
    np.testing.assert_array_equal(boundary(np.ones((3, 3))), np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12), elements=st.integers(0, 1)))
def test_boundary_matches_oracle(m):
    np.testing.assert_array_equal(boundary(m), boundary_oracle(m))


def test_split_examples():
    items = list(range(10))
    a, b, c = split_dataset(items, (0.5, 0.2, 0.3), seed=0)
    assert (len(a), len(b), len(c)) == (5, 2, 3)
    assert sorted(a + b + c) == items
    assert split_dataset(items, (0.5, 0.2, 0.3), seed=0) == (a, b, c)
    t, v, e = split_dataset(items, (1, 0, 0), seed=3)
    assert sorted(t) == items and v == [] and e == []
    with pytest.raises(ValueError, match="sum to 1"):
        split_dataset(items, (0.5, 0.2, 0.2), seed=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 60), st.integers(0, 100), st.integers(0, 100), st.integers(0, 2**32))
def test_split_partition_property(n, x, y, seed):
    if x + y > 100:
        return
    fr = (x / 100, y / 100, 1 - (x + y) / 100)
    parts = split_dataset(list(range(n)), fr, seed)
    assert sorted(sum(parts, [])) == list(range(n))
    for f, p in zip(fr, parts):
        assert abs(len(p) - f * n) < 1 + 1e-9


def test_container_round_trip(tmp_path):
    g = np.random.default_rng(0)
    tensors = {
        "f": g.normal(size=(2, 3, 4, 5)),
        "u8": g.integers(0, 256, size=(7,)).astype(np.uint8),
        "u32": g.integers(0, 2**32, size=(3, 3), dtype=np.uint64).astype(np.uint32),
        "scalar": np.array(3.5),
        "empty": np.zeros((0, 4)),
    }
    write_container(tmp_path / "x.fcnt", tensors)
    back = read_container(tmp_path / "x.fcnt")
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(st.sampled_from([np.float64, np.uint8, np.uint32]), array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_container_round_trip_property(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("c") / "a.fcnt"
    write_container(path, {"a": arr})
    back = read_container(path)["a"]
    assert back.dtype == arr.dtype and back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_container_errors(tmp_path):
    p = tmp_path / "x.fcnt"
    write_container(p, {})
    assert read_container(p) == {}
    p.write_bytes(b"NOPE" + bytes(5))
    with pytest.raises(ContainerError, match="FCNT"):
        read_container(p)
    write_container(p, {"a": np.arange(6.0)})
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(ContainerError, match="truncated"):
        read_container(p)
    p.write_bytes(raw[:4] + bytes([9]) + raw[5:])
    with pytest.raises(ContainerError, match="version"):
        read_container(p)
    p.write_bytes(raw + b"x")
    with pytest.raises(ContainerError, match="trailing"):
        read_container(p)
    with pytest.raises(ContainerError, match="dtype"):
        write_container(p, {"a": np.zeros(2, dtype=np.int16)})


def test_container_layout_is_little_endian(tmp_path):
    p = tmp_path / "x.fcnt"
    write_container(p, {"ab": np.array([1], dtype=np.uint32)})
    assert p.read_bytes() == b"FCNT" + bytes([1]) + (1).to_bytes(4, "little") + (2).to_bytes(2, "little") + \
        b"ab" + bytes([2, 1]) + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")


def test_dataset_round_trip(tmp_path):
    samples = generate_synthetic(SynthConfig(n_images=3, seed=8, deformation=0.6))
    manifest = write_dataset(samples, tmp_path / "ds")
    back = read_dataset(manifest)
    assert [s.id for s in back] == [s.id for s in samples]
    for a, b in zip(samples, back):
        assert a.part == b.part == "B"
        assert a.image.tobytes() == b.image.tobytes()
        np.testing.assert_array_equal(a.instances, b.instances)
        np.testing.assert_array_equal(a.contour_gt, b.contour_gt)
