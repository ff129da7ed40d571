import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scasnet.data import (
    AUGMENTATIONS, CAR, CLASS_NAMES, ROAD, DataConfig, Patch, SceneSpec, apply_augmentation, augment,
    crop_patches, crop_starts, generate_scene, load_patches, load_split, read_pgm, read_ppm, write_dataset,
    write_pgm, write_ppm,
)
from scasnet.model import ConfigError

SMALL = dict(height=48, width=48)


def test_zero_shapes_all_background():
    spec = SceneSpec(**SMALL, buildings=(0, 0), roads=(0, 0), cars=(0, 0), vegetation=(0, 0), clutter=(0, 0))
    _, labels = generate_scene(spec)
    assert not labels.any()


def test_scene_deterministic():
    a = generate_scene(SceneSpec(**SMALL, seed=3))
    b = generate_scene(SceneSpec(**SMALL, seed=3))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    c = generate_scene(SceneSpec(**SMALL, seed=4))
    assert a[0].tobytes() != c[0].tobytes()


def test_scene_contract():
    image, labels = generate_scene(SceneSpec(seed=0))
    assert image.shape == (3, 128, 128) and image.dtype == np.float32
    assert labels.shape == (128, 128) and labels.dtype == np.uint8
    assert image.min() >= 0 and image.max() <= 1
    assert labels.max() < len(CLASS_NAMES)


@pytest.mark.parametrize("seed", range(5))
def test_every_requested_class_appears(seed):
    spec = SceneSpec(seed=seed, buildings=(2, 2), roads=(1, 1), cars=(2, 2), vegetation=(1, 1))
    _, labels = generate_scene(spec)
    assert set(np.unique(labels)) == set(range(len(CLASS_NAMES)))


def test_cars_sit_on_roads():
    from scipy import ndimage

    touching = total = 0
    for seed in range(6):
        _, labels = generate_scene(SceneSpec(seed=seed, clutter=(0, 0)))
        comps, n = ndimage.label(labels == CAR)
        road_nearby = ndimage.binary_dilation(labels == ROAD, iterations=2)
        for i in range(1, n + 1):
            total += 1
            touching += bool(road_nearby[comps == i].any())
    assert total > 0 and touching / total > 0.9


def test_clutter_is_background_off_road():
    base = dict(seed=2, cars=(0, 0))
    _, plain = generate_scene(SceneSpec(**base, clutter=(0, 0)))
    image, cluttered = generate_scene(SceneSpec(**base, clutter=(3, 3)))
    changed = cluttered != plain
    assert not np.any(cluttered[changed] != 0)
    assert not np.any(plain[changed] == ROAD)
    assert not np.any(cluttered == CAR)


def test_crop_count_example():
    assert len(crop_starts(1500, 400, 300)) == 5
    img = np.zeros((3, 1500, 1500), dtype=np.float32)
    lab = np.zeros((1500, 1500), dtype=np.uint8)
    assert len(crop_patches(img, lab, 400, 100)) == 25
    assert len(crop_patches(img[:, :400, :400], lab[:400, :400], 400, 100)) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 60), st.integers(8, 60), st.data())
def test_crops_cover_every_pixel(h, w, data):
    patch = data.draw(st.integers(4, min(h, w)))
    overlap = data.draw(st.integers(0, patch - 1))
    lab = np.zeros((h, w), dtype=np.uint8)
    hits = np.zeros((h, w), dtype=int)
    patches = crop_patches(np.zeros((3, h, w), dtype=np.float32), lab, patch, overlap)
    for p in patches:
        y, x = p.offset
        assert p.labels.shape == (patch, patch)
        hits[y:y + patch, x:x + patch] += 1
    assert hits.min() >= 1


def test_crop_interior_multiplicity():
    patch, overlap = 8, 4
    hits = np.zeros((40, 40), dtype=int)
    for p in crop_patches(np.zeros((3, 40, 40), dtype=np.float32), np.zeros((40, 40), dtype=np.uint8), patch, overlap):
        y, x = p.offset
        hits[y:y + patch, x:x + patch] += 1
    k = -(-patch // (patch - overlap))
    assert hits[patch:-patch, patch:-patch].min() >= k * k


@pytest.mark.parametrize("overlap", [-1, 8])
def test_crop_invalid_overlap(overlap):
    with pytest.raises(ValueError):
        crop_patches(np.zeros((3, 16, 16)), np.zeros((16, 16)), 8, overlap)


def test_augment_variants(rng):
    img = rng.random((3, 6, 6)).astype(np.float32)
    lab = rng.integers(0, 5, (6, 6)).astype(np.uint8)
    out = augment([Patch(img, lab), Patch(img, lab)])
    assert len(out) == 12
    assert [p.aug for p in out[:6]] == list(AUGMENTATIONS)
    hist = np.bincount(lab.ravel(), minlength=5)
    for p in out:
        assert np.array_equal(np.bincount(p.labels.ravel(), minlength=5), hist)
    hflip = out[1]
    assert np.array_equal(hflip.labels, lab[:, ::-1]) and np.array_equal(hflip.image, img[:, :, ::-1])
    assert np.array_equal(out[3].labels, np.rot90(lab))


def test_rotation_group_closure(rng):
    lab = rng.integers(0, 5, (5, 5))
    x = lab
    for _ in range(4):
        x = apply_augmentation(x, "rot90")
    assert np.array_equal(x, lab)
    assert np.array_equal(apply_augmentation(apply_augmentation(lab, "rot90"), "rot270"), lab)


def test_augment_rejects_non_square():
    with pytest.raises(ValueError):
        augment([Patch(np.zeros((3, 4, 6)), np.zeros((4, 6)))])


def test_netpbm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (3, 7, 5)).astype(np.float32) / 255
    write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n5 7\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    lab = rng.integers(0, 5, (7, 5)).astype(np.uint8)
    write_pgm(tmp_path / "b.pgm", lab)
    assert (tmp_path / "b.pgm").read_bytes().startswith(b"P5\n5 7\n255\n")
    assert np.array_equal(read_pgm(tmp_path / "b.pgm"), lab)
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "a.ppm")


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def tiny_data(**kw):
    return DataConfig(**{**dict(scene_size=32, train_scenes=2, val_scenes=1, test_scenes=1, patch_size=16, overlap=4), **kw})


def test_dataset_layout_and_determinism(tmp_path):
    cfg = tiny_data()
    m = write_dataset(cfg, tmp_path / "a")
    write_dataset(cfg, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert {k: len(v) for k, v in m["splits"].items()} == {"train": 2, "val": 1, "test": 1}
    # 32 px scene, 16 px patch, stride 12 -> 3 x 3 crops, 6 variants, 2 scenes
    assert len(m["patches"]["train"]) == 2 * 9 * 6
    assert json.loads((tmp_path / "a" / "manifest.json").read_text()) == m
    images, labels = load_patches(tmp_path / "a")
    assert images.shape == (108, 3, 16, 16) and labels.shape == (108, 16, 16)
    assert len(load_split(tmp_path / "a", "test")) == 1


def test_dataset_augments_train_only(tmp_path):
    m = write_dataset(tiny_data(), tmp_path)
    assert {e["aug"] for e in m["patches"]["train"]} == set(AUGMENTATIONS)
    assert set(m["patches"]) == {"train"}
    m = write_dataset(tiny_data(augment=False), tmp_path / "plain")
    assert len(m["patches"]["train"]) == 18


def test_zero_train_scenes_rejected(tmp_path):
    with pytest.raises(ConfigError):
        write_dataset(tiny_data(train_scenes=0), tmp_path)
