import json

import numpy as np
import pytest
from PIL import Image

from ravoskit import io as rio
from ravoskit.synth import ObjectSpec, SceneSpec, generate


def scene():
    objs = [
        ObjectSpec(center=(0.3, 0.4), half_size=(0.12, 0.1), velocity=(0.01, 0.0)),
        ObjectSpec(center=(0.7, 0.6), half_size=(0.1, 0.1), shape="rect"),
    ]
    return SceneSpec(frames=4, objects=objs, H=16, W=20, noise=0.05, name="demo")


def test_indexed_png_roundtrip(tmp_path):
    lab = np.random.default_rng(0).integers(0, 5, (7, 9))
    rio.write_indexed_png(lab, tmp_path / "a.png")
    assert Image.open(tmp_path / "a.png").mode == "P"
    np.testing.assert_array_equal(rio.read_indexed_png(tmp_path / "a.png"), lab)


def test_png_rejects_large_ids(tmp_path):
    with pytest.raises(ValueError):
        rio.write_indexed_png(np.full((2, 2), 300), tmp_path / "x.png")


def test_rgb_masks_map_colors_to_ids(tmp_path):
    rgb = np.zeros((4, 4, 3), np.uint8)
    rgb[0, 0] = (128, 0, 0)
    rgb[3, 3] = (0, 128, 0)
    Image.fromarray(rgb).save(tmp_path / "m.png")
    lab = rio.read_indexed_png(tmp_path / "m.png")
    assert sorted(np.unique(lab)) == [0, 1, 2] and lab[0, 0] != lab[3, 3]


def test_export_and_load_roundtrip(tmp_path):
    frames = generate(scene(), 1)
    rio.export_sequence(frames, tmp_path, "demo")
    assert rio.list_sequences(tmp_path) == ["demo"]
    back = rio.load_sequence(tmp_path, "demo")
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.grid.keys, b.grid.keys)
        assert a.boxes == b.boxes
    side = json.loads((tmp_path / "Boxes" / "demo.json").read_text())
    assert len(side["frames"]) == 4 and set(side["frames"][0]["boxes"]) == {"1", "2"}


def test_load_from_images(tmp_path):
    rng = np.random.default_rng(2)
    (tmp_path / "Annotations" / "s").mkdir(parents=True)
    (tmp_path / "JPEGImages" / "s").mkdir(parents=True)
    for t in range(3):
        lab = np.zeros((64, 96), np.uint8)
        lab[16 + t:40 + t, 20:50] = 1
        rio.write_indexed_png(lab, tmp_path / "Annotations" / "s" / f"{t:05d}.png")
        img = rng.integers(0, 60, (64, 96, 3)).astype(np.uint8)
        img[lab == 1] = (220, 40, 40)
        Image.fromarray(img).save(tmp_path / "JPEGImages" / "s" / f"{t:05d}.png")
    frames = rio.load_sequence(tmp_path, "s", key_dim=16, stride=16)
    assert frames[0].grid.keys.shape == (4, 6, 16)
    assert frames[0].labels.shape == (4, 6) and frames[0].labels.max() == 1


def test_missing_inputs(tmp_path):
    with pytest.raises(FileNotFoundError):
        rio.list_sequences(tmp_path)
    (tmp_path / "Annotations" / "s").mkdir(parents=True)
    with pytest.raises(FileNotFoundError):
        rio.load_sequence(tmp_path, "s")


def test_atomic_write_leaves_no_temp(tmp_path):
    rio.atomic_write(tmp_path / "d" / "f.txt", "hello")
    rio.atomic_write(tmp_path / "d" / "g.bin", b"\x00\x01")
    assert sorted(p.name for p in (tmp_path / "d").iterdir()) == ["f.txt", "g.bin"]
    assert (tmp_path / "d" / "f.txt").read_text() == "hello"
