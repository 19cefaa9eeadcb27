import numpy as np
import pytest

from mole.data import (
    IMAGE_SIZE,
    SyntheticScene,
    gen_closeup,
    gen_scene,
    generate,
    load_dataset,
    make_dataset,
    save_dataset,
)
from mole.errors import ConfigError


def corner_pixels(img):
    c = 2
    return np.concatenate(
        [img[:c, :c].ravel(), img[:c, -c:].ravel(), img[-c:, :c].ravel(), img[-c:, -c:].ravel()]
    )


def center_disc(img, radius=5.0):
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    mask = np.hypot(xx - size / 2.0, yy - size / 2.0) < radius
    return img[mask]


class TestScene:
    def test_flags_and_kind(self):
        s = gen_scene(0)
        assert s.face_present and s.hand_present
        assert s.kind == "scene"
        assert s.image.shape == (IMAGE_SIZE, IMAGE_SIZE)

    def test_pixel_range(self):
        for seed in range(10):
            img = gen_scene(seed).image
            assert np.all(img >= -1.0) and np.all(img <= 1.0)

    def test_both_halves_carry_structure(self):
        half = IMAGE_SIZE // 2
        for seed in range(5):
            img = gen_scene(seed).image
            assert np.mean(np.abs(img[:, :half])) > 0.15
            assert np.mean(np.abs(img[:, half:])) > 0.15

    def test_determinism(self):
        assert gen_scene(7).image.tobytes() == gen_scene(7).image.tobytes()
        assert gen_scene(7).image.tobytes() != gen_scene(8).image.tobytes()


class TestCloseup:
    def test_face_glyph_beats_background(self):
        # glyph region (center disc) vs pure-noise corners
        for seed in range(10):
            img = gen_closeup("face_closeup", seed).image
            assert np.mean(np.abs(center_disc(img))) > 2.0 * np.mean(np.abs(corner_pixels(img)))

    def test_hand_stripes_fill_frame(self):
        for seed in range(10):
            img = gen_closeup("hand_closeup", seed).image
            assert np.mean(np.abs(img)) > 0.3

    def test_flags(self):
        f = gen_closeup("face_closeup", 0)
        h = gen_closeup("hand_closeup", 0)
        assert f.face_present and not f.hand_present
        assert h.hand_present and not h.face_present

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            gen_closeup("feet_closeup", 0)

    def test_determinism_and_stream_separation(self):
        a = gen_closeup("face_closeup", 3).image
        b = gen_closeup("face_closeup", 3).image
        c = gen_closeup("hand_closeup", 3).image
        d = gen_scene(3).image
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()
        assert a.tobytes() != d.tobytes()

    def test_kinds_are_separable_at_patch_level(self):
        # rings vs stripes should differ strongly in mean patch statistics
        faces = np.stack([gen_closeup("face_closeup", s).image for s in range(20)])
        hands = np.stack([gen_closeup("hand_closeup", s).image for s in range(20)])
        face_mean, hand_mean = faces.mean(axis=0), hands.mean(axis=0)
        # stripes average out across random angles/phases; rings share a center
        assert np.abs(face_mean).mean() > 1.5 * np.abs(hand_mean).mean()


class TestDataset:
    def test_make_dataset(self):
        scenes = make_dataset("face_closeup", 4, seed=10)
        assert len(scenes) == 4
        assert scenes[0].image.tobytes() == gen_closeup("face_closeup", 10).image.tobytes()
        assert scenes[3].image.tobytes() == gen_closeup("face_closeup", 13).image.tobytes()

    def test_make_dataset_validation(self):
        with pytest.raises(ConfigError):
            make_dataset("bogus", 3)
        with pytest.raises(ConfigError):
            make_dataset("scene", 0)

    def test_save_load_round_trip(self, tmp_path):
        scenes = make_dataset("scene", 3, seed=5)
        path = tmp_path / "scene.mole"
        save_dataset(scenes, "scene", path)
        assert path.exists() and path.with_suffix(".mole.json").exists()
        loaded = load_dataset(path)
        assert len(loaded) == 3
        for a, b in zip(scenes, loaded):
            assert a.image.tobytes() == b.image.tobytes()
            assert (a.kind, a.face_present, a.hand_present) == (b.kind, b.face_present, b.hand_present)

    def test_generate_dispatch(self):
        assert generate("scene", 1).kind == "scene"
        assert generate("hand_closeup", 1).kind == "hand_closeup"
