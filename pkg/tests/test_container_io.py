import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from numpy.testing import assert_array_equal

from profuse import container_io as cio
from profuse import synth
from profuse.scene_model import GaussianScene, ViewSet


def test_layout_of_small_f32_tensor(tmp_path):
    p = tmp_path / "t.pf"
    cio.write_tensor(p, "f32", [2, 2], [1, 2, 3, 4])
    raw = p.read_bytes()
    expected = b"PFTENSR1" + struct.pack("<II", 1, 2) + struct.pack("<QQ", 2, 2) + struct.pack("<4f", 1, 2, 3, 4)
    assert raw == expected
    assert len(raw) == 8 + 8 + 16 + 16


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.uint16, np.uint8]),
                  hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5)))
def test_round_trip_random_tensors(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("rt") / "a.pf"
    name = {np.dtype(np.float32): "f32", np.dtype(np.uint16): "u16", np.dtype(np.uint8): "u8"}[arr.dtype]
    cio.write_tensor(p, name, arr.shape, arr)
    dtype, shape, back = cio.read_tensor(p)
    assert dtype == name and shape == arr.shape
    assert back.tobytes() == arr.astype(arr.dtype.newbyteorder("<")).tobytes()


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.pf"
    cio.write_tensor(p, "f32", [4], np.arange(4))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(cio.PayloadShortError):
        cio.read_tensor(p)


def test_bad_magic_and_unknown_dtype(tmp_path):
    p = tmp_path / "t.pf"
    cio.write_tensor(p, "u8", [1], [7])
    raw = p.read_bytes()
    p.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(cio.BadMagicError):
        cio.read_tensor(p)
    p.write_bytes(raw[:8] + struct.pack("<I", 9) + raw[12:])
    with pytest.raises(cio.UnknownDtypeError):
        cio.read_tensor(p)


def test_shape_payload_mismatch_on_write(tmp_path):
    with pytest.raises(cio.ShapeMismatchError):
        cio.write_tensor(tmp_path / "t.pf", "f32", [3], [1, 2])


def test_write_is_byte_deterministic(tmp_path):
    recs = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.arange(3, dtype=np.uint16)}
    cio.write_records(tmp_path / "x.pf", "demo", recs, {"z": 1, "a": [1, 2]})
    cio.write_records(tmp_path / "y.pf", "demo", recs, {"a": [1, 2], "z": 1})
    assert (tmp_path / "x.pf").read_bytes() == (tmp_path / "y.pf").read_bytes()
    attrs, back = cio.read_records(tmp_path / "x.pf", "demo")
    assert attrs == {"a": [1, 2], "z": 1}
    assert_array_equal(back["b"], recs["b"])
    with pytest.raises(cio.FormatError):
        cio.read_records(tmp_path / "x.pf", "scene")


def test_scene_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(1)
    n = 5
    q = rng.normal(size=(n, 4))
    d = rng.normal(size=(n, 8))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d[3] = 0
    s = GaussianScene(rng.normal(size=(n, 3)), rng.uniform(0.01, 1, (n, 3)), q / np.linalg.norm(q, axis=1)[:, None],
                      rng.uniform(0, 1, n), rng.uniform(0, 1, (n, 3)), d, [True, True, True, False, True])
    cio.save_scene(tmp_path / "s.pf", s)
    back = cio.load_scene(tmp_path / "s.pf")
    for f in ("positions", "scales", "rotations", "opacities", "colors", "descriptors", "labeled"):
        assert getattr(back, f).tobytes() == getattr(s, f).tobytes(), f


@pytest.fixture
def two_view_dir(tmp_path):
    scene = synth.generate_scene(synth.SynthSpec(object_count=2, view_count=2, neighbors_k=1, seed=3))
    manifest = synth.write_scene(scene, tmp_path)
    return scene, manifest


def test_manifest_from_synth_loads(two_view_dir):
    scene, manifest = two_view_dir
    views, warps = cio.load_manifest(manifest)
    assert views.view_ids == [0, 1]
    for v in (0, 1):
        assert views.masks[v].mask_count == scene.views.masks[v].mask_count
        assert_array_equal(views.cameras[v].intrinsics, scene.views.cameras[v].intrinsics)
    assert sorted(w.pair for w in warps) == [(0, 1), (1, 0)]
    w = next(w for w in warps if w.pair == (0, 1)).load()
    ref = next(w for w in scene.warps if (w.src_view, w.dst_view) == (0, 1))
    assert_array_equal(w.warp, ref.warp)


def test_manifest_missing_mask_file_names_path(two_view_dir):
    _, manifest = two_view_dir
    (manifest.parent / "view001_masks.pf").unlink()
    with pytest.raises(cio.MissingFileError, match="view001_masks.pf"):
        cio.load_manifest(manifest)


def test_manifest_dimension_mismatch(two_view_dir):
    _, manifest = two_view_dir
    e = np.zeros((1, 32), np.float32)
    e[0, 0] = 1
    cio.save_array(manifest.parent / "view001_emb.pf", e)
    with pytest.raises(cio.DimensionMismatchError):
        cio.load_manifest(manifest)


def test_manifest_duplicate_view_rejected(two_view_dir):
    _, manifest = two_view_dir
    doc = json.loads(manifest.read_text())
    doc["views"][1]["id"] = doc["views"][0]["id"]
    manifest.write_text(json.dumps(doc))
    with pytest.raises(cio.ManifestError, match="duplicate"):
        cio.load_manifest(manifest)


def test_manifest_inputs_lists_every_file(two_view_dir):
    _, manifest = two_view_dir
    names = [p.name for p in cio.manifest_inputs(manifest)]
    assert names[0] == "manifest.json"
    assert "warp_000_001.pf" in names and "view000_emb.pf" in names
    assert all(p.is_file() for p in cio.manifest_inputs(manifest))
