import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from mpox_cbam.data import (
    AugmentationSpec,
    Dataset,
    ImageSample,
    SplitSpec,
    apply_transform,
    augment,
    load_directory,
    resize_array,
    split,
    synth_generate,
    write_directory,
)
from mpox_cbam.errors import EmptyClass, FormatError, InvalidConfig, UnsupportedFormat
from mpox_cbam.imagefile import decode_png, decode_ppm, encode_png, encode_ppm, read_image


def ppm(pixels):
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode() + pixels.astype(np.uint8).tobytes()


def pil_png(img, **kw):
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG", **kw)
    return buf.getvalue()


def make_tree(root, n_pos, n_neg, size=(5, 4), seed=0):
    rng = np.random.default_rng(seed)
    for cls, n in (("Monkeypox", n_pos), ("Others", n_neg)):
        (root / cls).mkdir(parents=True)
        for i in range(n):
            img = rng.integers(0, 256, size=size + (3,), dtype=np.uint8)
            data = pil_png(img) if i % 2 else ppm(img)
            (root / cls / f"img{i}.{'png' if i % 2 else 'ppm'}").write_bytes(data)


def samples(n, size=4, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(tuple(ImageSample(rng.uniform(size=(3, size, size)), i % 2, f"s{i}") for i in range(n)))


class TestCodecs:
    def test_ppm_single_pixel(self, tmp_path):
        path = tmp_path / "red.ppm"
        path.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
        assert read_image(path).tolist() == [[[255, 0, 0]]]

    def test_ppm_comments_and_maxval(self):
        img = decode_ppm(b"P6 # c\n2 1 # w h\n15\n" + bytes([15, 0, 0, 0, 15, 0]))
        assert img.tolist() == [[[255, 0, 0], [0, 255, 0]]]

    def test_ppm_truncated(self):
        with pytest.raises(FormatError, match="offset"):
            decode_ppm(b"P6\n4 4\n255\n" + bytes(10))

    @pytest.mark.parametrize("mode", ["RGB", "RGBA"])
    @pytest.mark.parametrize("optimize", [False, True])
    def test_png_matches_pillow(self, mode, optimize):
        # Pillow's encoder picks adaptive filters, exercising all five row filters
        rng = np.random.default_rng(1)
        base = np.cumsum(rng.integers(0, 6, size=(13, 17, 4)), axis=1).astype(np.uint8)
        img = base if mode == "RGBA" else base[..., :3]
        data = pil_png(img, optimize=optimize)
        expected = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))
        assert np.array_equal(decode_png(data), expected)

    def test_png_encoder_readable_by_pillow(self):
        img = np.random.default_rng(2).integers(0, 256, size=(6, 9, 3), dtype=np.uint8)
        assert np.array_equal(np.asarray(Image.open(io.BytesIO(encode_png(img)))), img)
        assert np.array_equal(decode_png(encode_png(img)), img)

    def test_ppm_round_trip(self):
        img = np.random.default_rng(3).integers(0, 256, size=(4, 7, 3), dtype=np.uint8)
        assert np.array_equal(decode_ppm(encode_ppm(img)), img)

    def test_png_unsupported_variants(self):
        grey = pil_png(np.zeros((3, 3), dtype=np.uint8))
        with pytest.raises((UnsupportedFormat, FormatError)):
            decode_png(grey)

    def test_png_corrupt(self):
        data = pil_png(np.zeros((4, 4, 3), dtype=np.uint8))
        with pytest.raises(FormatError):
            decode_png(data[:40])

    def test_unknown_magic(self, tmp_path):
        path = tmp_path / "notes.txt"
        path.write_text("hello")
        with pytest.raises(UnsupportedFormat, match="notes.txt"):
            read_image(path)


class TestLoadDirectory:
    def test_counts_and_order(self, tmp_path):
        make_tree(tmp_path, 3, 2)
        ds = load_directory(tmp_path)
        assert len(ds) == 5
        assert [s.source_id for s in ds] == sorted(s.source_id for s in ds)
        assert ds.labels.tolist() == [1, 1, 1, 0, 0]
        assert ds.samples[0].pixels.shape == (3, 5, 4)
        assert all(0 <= s.pixels.min() and s.pixels.max() <= 1 for s in ds)

    def test_text_file_skipped(self, tmp_path):
        make_tree(tmp_path, 2, 2)
        (tmp_path / "Others" / "readme.txt").write_text("not an image")
        ds = load_directory(tmp_path)
        assert len(ds) == 4
        assert len(ds.skipped) == 1 and "readme.txt" in str(ds.skipped[0])
        with pytest.raises(UnsupportedFormat):
            load_directory(tmp_path, strict=True)

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="absent"):
            load_directory(tmp_path / "absent")

    def test_missing_class(self, tmp_path):
        (tmp_path / "Monkeypox").mkdir()
        with pytest.raises(FileNotFoundError, match="Others"):
            load_directory(tmp_path)

    def test_empty_class(self, tmp_path):
        make_tree(tmp_path, 2, 0)
        with pytest.raises(EmptyClass):
            load_directory(tmp_path)

    def test_synth_round_trip(self, tmp_path):
        ds = synth_generate(20, (12, 10), seed=4)
        paths = write_directory(ds, tmp_path)
        assert len(paths) == 20
        assert len(list((tmp_path / "Monkeypox").iterdir())) == 10
        back = load_directory(tmp_path)
        by_id = {s.source_id.rsplit(".", 1)[0]: s for s in back}
        for s in ds:
            assert np.array_equal(by_id[s.source_id].pixels, s.pixels)
            assert by_id[s.source_id].label == s.label


class TestResize:
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 12), st.integers(1, 12))
    @settings(max_examples=40, deadline=None)
    def test_constant(self, h, w, th, tw):
        out = resize_array(np.full((3, h, w), 0.5), th, tw)
        assert out.shape == (3, th, tw) and np.all(out == 0.5)

    def test_identity(self):
        img = np.random.default_rng(0).uniform(size=(3, 6, 5))
        assert np.array_equal(resize_array(img, 6, 5), img)

    def test_checkerboard_to_one(self):
        board = np.array([[0.0, 1.0], [1.0, 0.0]])[None].repeat(3, axis=0)
        assert np.allclose(resize_array(board, 1, 1), 0.5, atol=1e-15)

    def test_upsample_corners_and_midpoint(self):
        img = np.array([[0.0, 1.0]])[None]
        out = resize_array(img, 1, 4)[0, 0]
        # half-pixel centres map outputs to input x = -0.25, 0.25, 0.75, 1.25
        assert np.allclose(out, [0.0, 0.25, 0.75, 1.0])

    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_stays_in_range(self, th, tw, seed):
        img = np.random.default_rng(seed).uniform(size=(3, 7, 5))
        out = resize_array(img, th, tw)
        assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12

    def test_invalid(self):
        with pytest.raises(InvalidConfig):
            resize_array(np.zeros((3, 2, 2)), 0, 2)


class TestAugment:
    def test_hflip_doubles(self):
        ds = samples(10)
        out = augment(ds, AugmentationSpec(horizontal_flip=True))
        assert len(out) == 20 and out.samples[:10] == ds.samples
        assert out.labels.tolist() == ds.labels.tolist() * 2

    def test_count(self):
        spec = AugmentationSpec(True, True, (90, 270))
        assert spec.copies_per_image == 5
        assert len(augment(samples(6), spec)) == 30

    def test_flips_are_involutions(self):
        x = np.random.default_rng(0).uniform(size=(3, 4, 5))
        for name in ("hflip", "vflip"):
            assert np.array_equal(apply_transform(apply_transform(x, name), name), x)

    def test_rot180_is_both_flips(self):
        x = np.random.default_rng(1).uniform(size=(3, 4, 5))
        assert np.array_equal(apply_transform(x, "rot180"), apply_transform(apply_transform(x, "hflip"), "vflip"))

    def test_four_quarter_turns(self):
        x = np.random.default_rng(2).uniform(size=(3, 4, 4))
        y = x
        for _ in range(4):
            y = apply_transform(y, "rot90")
        assert np.array_equal(y, x)

    def test_invalid_rotation(self):
        with pytest.raises(InvalidConfig):
            AugmentationSpec(rotations=(45,))


class TestSplit:
    def test_balanced_hundred(self):
        train, test, val = split(samples(100), SplitSpec(seed=3))
        assert (len(train), len(test), len(val)) == (70, 10, 20)
        for part, n in ((train, 35), (test, 5), (val, 10)):
            assert part.labels.sum() == n

    def test_disjoint_exhaustive(self):
        ds = samples(37)
        parts = split(ds, SplitSpec(seed=1))
        ids = [s.source_id for p in parts for s in p]
        assert sorted(ids) == sorted(s.source_id for s in ds)

    def test_deterministic(self):
        a = split(samples(50), SplitSpec(seed=9))
        b = split(samples(50), SplitSpec(seed=9))
        assert a == b

    def test_fractions_validated(self):
        with pytest.raises(InvalidConfig):
            SplitSpec(0.5, 0.1, 0.1)

    def test_too_small(self):
        with pytest.raises(InvalidConfig):
            split(samples(4), SplitSpec())


class TestSynth:
    def test_balance_and_range(self):
        ds = synth_generate(200, (16, 16), seed=0)
        assert len(ds) == 200 and ds.labels.sum() == 100
        X, _ = ds.to_arrays()
        assert X.shape == (200, 3, 16, 16) and X.min() >= 0 and X.max() <= 1

    def test_deterministic(self):
        a, b = synth_generate(20, (8, 8), seed=5), synth_generate(20, (8, 8), seed=5)
        assert all(np.array_equal(x.pixels, y.pixels) and x.label == y.label for x, y in zip(a, b))

    @pytest.mark.parametrize("n", [0, 3, -2])
    def test_odd_or_empty(self, n):
        with pytest.raises(InvalidConfig):
            synth_generate(n)

    @pytest.mark.parametrize("seed", [0, 42, 7])
    def test_mean_pixel_separable(self, seed):
        X, y = synth_generate(200, (32, 32), seed=seed).to_arrays()
        means = X.mean(axis=(1, 2, 3))
        best = max(np.mean((means >= t) == (y == 1)) for t in np.unique(means))
        assert best >= 0.95
