import numpy as np
import pytest

from fgseg import data
from fgseg.data import (
    CODE_FOREGROUND,
    CODE_OUTSIDE_ROI,
    CODE_UNKNOWN,
    LabelMask,
    SynthConfig,
    crop_back,
    decode_label,
    encode_label,
    load_sequence,
    pad_labels,
    pad_to_multiple_of_4,
    read_frame,
    read_labels,
    synth_sequence,
    temporal_range,
    to_tensor,
    write_mask,
    write_prob_map,
    read_prob_map,
    write_synth_dataset,
)
from fgseg.netpbm import read_netpbm, write_pgm, write_ppm


# netpbm codecs ---------------------------------------------------------

def test_pgm_roundtrip_8bit(tmp_path):
    rng = np.random.default_rng(40)
    img = rng.integers(0, 256, size=(9, 13), dtype=np.uint8)
    p = tmp_path / "x.pgm"
    write_pgm(p, img)
    assert np.array_equal(read_netpbm(p), img)


def test_pgm_roundtrip_16bit(tmp_path):
    rng = np.random.default_rng(41)
    img = rng.integers(0, 65536, size=(5, 7), dtype=np.uint16)
    p = tmp_path / "x.pgm"
    write_pgm(p, img)
    back = read_netpbm(p)
    assert back.dtype == np.uint16
    assert np.array_equal(back, img)


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(42)
    img = rng.integers(0, 256, size=(6, 4, 3), dtype=np.uint8)
    p = tmp_path / "x.ppm"
    write_ppm(p, img)
    assert np.array_equal(read_netpbm(p), img)


def test_netpbm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5 # magic\n# a comment line\n2 # width\n 2\n255\n\x01\x02\x03\x04")
    img = read_netpbm(p)
    assert np.array_equal(img, np.array([[1, 2], [3, 4]], dtype=np.uint8))


def test_netpbm_truncated_and_bad_magic(tmp_path):
    p = tmp_path / "t.pgm"
    p.write_bytes(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(ValueError, match="truncated"):
        read_netpbm(p)
    p.write_bytes(b"P3\n1 1\n255\n0")
    with pytest.raises(ValueError, match="magic"):
        read_netpbm(p)


def test_rewrite_is_byte_identical(tmp_path):
    rng = np.random.default_rng(43)
    img = rng.integers(0, 256, size=(8, 8), dtype=np.uint8)
    a, b = tmp_path / "a.pgm", tmp_path / "b.pgm"
    write_pgm(a, img)
    write_pgm(b, read_netpbm(a))
    assert a.read_bytes() == b.read_bytes()


# labels ----------------------------------------------------------------

def test_decode_all_foreground():
    m = decode_label(np.full((4, 4), 255, dtype=np.uint8))
    assert m.foreground.all() and m.valid.all()


def test_decode_code_semantics():
    raw = np.array([[0, 50, 85], [170, 255, 0]], dtype=np.uint8)
    m = decode_label(raw)
    assert m.background[0, 0] and m.background[0, 1]  # shadow folds into bg
    assert not m.valid[0, 2] and not m.valid[1, 0]    # both void codes
    assert m.foreground[1, 1]
    assert m.counts() == (1, 3)


def test_decode_rejects_unknown_codes():
    raw = np.array([[0, 99]], dtype=np.uint8)
    with pytest.raises(ValueError, match="99"):
        decode_label(raw)


def test_label_roundtrip_identity():
    raw = np.array([[0, 50, 85, 170, 255]], dtype=np.uint8)
    m = decode_label(raw)
    assert np.array_equal(encode_label(m), raw)
    again = decode_label(encode_label(m))
    assert np.array_equal(again.raw, m.raw)


# tensors and padding ---------------------------------------------------

def test_to_tensor_gray_replicates_channels():
    img = np.arange(6, dtype=np.uint8).reshape(2, 3)
    t = to_tensor(img)
    assert t.shape == (3, 2, 3) and t.dtype == np.float32
    assert np.array_equal(t[0], t[2])


def test_to_tensor_color_is_channel_major():
    img = np.zeros((2, 3, 3), dtype=np.uint8)
    img[:, :, 1] = 200
    t = to_tensor(img)
    assert t.shape == (3, 2, 3)
    assert np.all(t[1] == 200.0) and np.all(t[0] == 0.0)


def test_pad_already_aligned_is_identity():
    img = np.zeros((3, 240, 320), dtype=np.float32)
    padded, extents = pad_to_multiple_of_4(img)
    assert padded.shape == img.shape and extents == (240, 320)


def test_pad_and_crop_roundtrip():
    rng = np.random.default_rng(44)
    img = rng.uniform(0, 255, size=(3, 240, 321)).astype(np.float32)
    padded, extents = pad_to_multiple_of_4(img)
    assert padded.shape == (3, 240, 324)
    assert np.array_equal(crop_back(padded, extents), img)
    # reflected columns mirror the interior, not repeat the edge
    assert np.array_equal(padded[:, :, 321], img[:, :, 319])


def test_pad_labels_fills_void():
    m = LabelMask(np.full((5, 6), 255, dtype=np.uint8))
    padded, extents = pad_labels(m, 4)
    assert padded.shape == (8, 8) and extents == (5, 6)
    assert (padded.raw[5:, :] == CODE_OUTSIDE_ROI).all()
    assert (padded.raw[:, 6:] == CODE_OUTSIDE_ROI).all()
    assert padded.valid.sum() == 30


# synthetic scenes ------------------------------------------------------

def test_synth_static_object_constant_frames():
    cfg = SynthConfig(n_frames=4, n_objects=1, speed=0.0, noise=0.0, seed=5)
    frames = synth_sequence(cfg)
    f0, g0 = frames[0]
    for f, g in frames[1:]:
        assert np.array_equal(f, f0)
        assert np.array_equal(g.raw, g0.raw)


def test_synth_same_seed_identical():
    cfg = SynthConfig(n_frames=3, seed=9)
    a = synth_sequence(cfg)
    b = synth_sequence(cfg)
    for (fa, ga), (fb, gb) in zip(a, b):
        assert np.array_equal(fa, fb) and np.array_equal(ga.raw, gb.raw)


def test_synth_rect_pixel_count_matches_area():
    cfg = SynthConfig(n_frames=6, n_objects=1, object_size=10, seed=3)
    for frame, labels in synth_sequence(cfg):
        assert int(labels.foreground.sum()) == 100
        # halo is the 8-neighborhood ring: recompute it from the mask
        fg = labels.foreground
        ring = data._dilate8(fg) & ~fg
        assert np.array_equal(labels.raw == CODE_UNKNOWN, ring)
        assert frame.shape == (3, 64, 64)
        assert frame.min() >= 0.0 and frame.max() <= 255.0


def test_synth_config_validation():
    with pytest.raises(ValueError, match="multiples of 4"):
        SynthConfig(width=66)
    with pytest.raises(ValueError, match="object_size"):
        SynthConfig(object_size=1)
    with pytest.raises(ValueError, match="fit"):
        SynthConfig(width=16, height=16, object_size=15)


# sequence loading ------------------------------------------------------

def test_synth_dataset_roundtrip(tmp_path):
    cfg = SynthConfig(n_frames=10, seed=1)
    root = write_synth_dataset(cfg, tmp_path / "scene")
    handle = load_sequence(root)
    assert len(handle) == 10
    assert handle.temporal_roi == (1, 10)
    assert handle.roi is not None and handle.roi.all()
    assert temporal_range(handle) == (0, 10)

    frames = synth_sequence(cfg)
    f0 = read_frame(handle, 0)
    assert f0.shape == (3, 64, 64)
    # ppm stores rounded uint8, so compare against the rounded original
    assert np.array_equal(f0, np.rint(frames[0][0]).astype(np.float32))
    g0 = read_labels(handle, 0)
    assert np.array_equal(g0.raw, frames[0][1].raw)


def test_load_sequence_missing_groundtruth(tmp_path):
    (tmp_path / "seq" / "input").mkdir(parents=True)
    with pytest.raises(FileNotFoundError, match="groundtruth"):
        load_sequence(tmp_path / "seq")


def test_load_sequence_count_mismatch(tmp_path):
    root = write_synth_dataset(SynthConfig(n_frames=3, seed=0), tmp_path / "s")
    (root / "groundtruth" / "gt000003.pgm").unlink()
    with pytest.raises(ValueError, match="3 frames but 2"):
        load_sequence(root)


def test_temporal_roi_parse(tmp_path):
    root = write_synth_dataset(SynthConfig(n_frames=5, seed=0), tmp_path / "s")
    (root / "temporalROI.txt").write_text("470 1700\n")
    assert load_sequence(root).temporal_roi == (470, 1700)
    (root / "temporalROI.txt").write_text("x y\n")
    with pytest.raises(ValueError, match="two integers"):
        load_sequence(root)


def test_roi_mask_forces_void(tmp_path):
    root = write_synth_dataset(SynthConfig(n_frames=2, seed=2), tmp_path / "s")
    roi = np.full((64, 64), 255, dtype=np.uint8)
    roi[:, 32:] = 0
    write_pgm(root / "ROI.pgm", roi)
    handle = load_sequence(root)
    labels = read_labels(handle, 0)
    assert (labels.raw[:, 32:] == CODE_OUTSIDE_ROI).all()
    assert not labels.valid[:, 32:].any()


def test_unknown_extension_reports_readers(tmp_path):
    p = tmp_path / "f.xyz"
    p.write_bytes(b"")
    with pytest.raises(ValueError, match="no reader"):
        data.load_image(p)


# outputs ---------------------------------------------------------------

def test_write_mask_strict_threshold(tmp_path):
    p_hi = np.full((1, 4, 4), 0.81, dtype=np.float32)
    m = write_mask(p_hi, 0.8, tmp_path / "hi.pgm")
    assert np.all(m == 255)
    p_eq = np.full((1, 4, 4), 0.8, dtype=np.float32)
    m = write_mask(p_eq, 0.8, tmp_path / "eq.pgm")
    assert np.all(m == 0)


def test_write_mask_readback(tmp_path):
    rng = np.random.default_rng(45)
    probs = rng.uniform(0, 1, size=(1, 8, 8)).astype(np.float32)
    path = tmp_path / "m.pgm"
    m = write_mask(probs, 0.5, path)
    assert np.array_equal(read_netpbm(path), m)
    assert np.array_equal(data.read_mask(path), m > 127)


def test_write_mask_threshold_validated(tmp_path):
    with pytest.raises(ValueError, match="threshold"):
        write_mask(np.zeros((1, 2, 2)), 1.0, tmp_path / "x.pgm")


def test_prob_map_roundtrip(tmp_path):
    rng = np.random.default_rng(46)
    probs = rng.uniform(0, 1, size=(1, 6, 6)).astype(np.float32)
    path = tmp_path / "p.pgm"
    write_prob_map(probs, path)
    back = read_prob_map(path)
    assert back.shape == (6, 6)
    assert np.max(np.abs(back - probs[0])) <= 0.5 / 65535.0 + 1e-9
