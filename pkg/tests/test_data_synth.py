import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from umad.data_synth import (DatasetManifest, DegradationSpec, FlowField, FrameSequence, ManifestEntry,
                             block_quantize, crop_patches, degrade, downsample, generate_synthetic_sequence,
                             load_manifest, load_sequences, quantization_levels, read_flow_file, read_frames,
                             render_sequence, sample_training_window, save_manifest, valid_targets, write_flow_file,
                             write_flows, write_frames)
from umad.errors import FormatError
from umad.flow import warp


def test_static_scene_has_zero_flow():
    for tex in ("checker", "noise", "sprites"):
        seq, flows = generate_synthetic_sequence(0, 4, 32, 32, texture=tex)
        assert all(np.all(f.u == 0) and np.all(f.v == 0) for f in flows)
        assert np.array_equal(seq.frames[0], seq.frames[3])


def test_translation_flow_is_constant():
    seq, flows = generate_synthetic_sequence(3, 7, 64, 64, shift=(2, 0), texture="checker")
    assert len(flows) == 6 and seq.frames.shape == (7, 64, 64, 3)
    for f in flows:
        assert np.all(f.u == 2) and np.all(f.v == 0)


def test_invalid_dimensions():
    with pytest.raises(ValueError):
        generate_synthetic_sequence(0, 1, 32, 32)
    with pytest.raises(ValueError):
        generate_synthetic_sequence(0, 4, 32, 32, shift=(8, 0))
    with pytest.raises(ValueError):
        generate_synthetic_sequence(0, 4, 32, 32, texture="plaid")


def _blob_texture(centres, sigma=1.5):
    def tex(x, y):
        out = np.zeros(x.shape + (1,))
        for cx, cy in centres:
            out[..., 0] += np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma ** 2))
        return out

    return tex


def _centroid(img, around, r=5):
    x0, y0 = int(round(around[0])), int(round(around[1]))
    ys, xs = np.mgrid[y0 - r:y0 + r + 1, x0 - r:x0 + r + 1]
    w = img[ys, xs]
    return np.array([(w * xs).sum() / w.sum(), (w * ys).sum() / w.sum()])


def test_rotation_flow_matches_marker_tracking():
    H = W = 64
    c = np.array([(W - 1) / 2, (H - 1) / 2])
    theta = math.radians(5.0)
    # markers placed so they appear in frame 1 at known integer-ish spots
    spots1 = [np.array([20.0, 20.0]), np.array([44.0, 24.0]), np.array([30.0, 45.0]), np.array([47.0, 42.0])]
    R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    tex_pts = [c + R @ (p - c) for p in spots1]  # texture coordinate seen at p in frame 1
    frames, flows = render_sequence(_blob_texture(tex_pts), 2, H, W, rotation=5.0)
    for p in spots1:
        p1 = _centroid(frames[1, ..., 0], p)
        # in frame 0 the texture point sits at c + (tex - c)
        q = c + (R @ (p - c))
        p0 = _centroid(frames[0, ..., 0], q)
        tracked = p0 - p1
        yi, xi = int(round(p1[1])), int(round(p1[0]))
        gt = np.array([flows[0].u[yi, xi], flows[0].v[yi, xi]])
        analytic = R @ (p1 - c) - (p1 - c)
        assert np.allclose(tracked, analytic, atol=0.05)
        assert np.allclose(gt, R @ (np.array([xi, yi]) - c) - (np.array([xi, yi]) - c), atol=1e-12)


def test_translation_warp_consistency():
    for d in [(1.5, -0.5), (2, 1), (-0.25, 0.75)]:
        seq, flows = generate_synthetic_sequence(5, 3, 48, 48, shift=d, texture="noise")
        b = 2 * math.ceil(max(abs(d[0]), abs(d[1])))
        for t in range(2):
            f = torch.from_numpy(seq.frames[t]).permute(2, 0, 1)[None]
            fl = torch.from_numpy(flows[t].as_array()).permute(2, 0, 1)[None]
            w = warp(f, fl)[0].permute(1, 2, 0).numpy()
            err = np.abs(w - seq.frames[t + 1])[b:-b, b:-b].mean()
            assert err < 1e-3


def test_identity_degradation_bit_exact():
    seq, _ = generate_synthetic_sequence(0, 3, 16, 16)
    out = degrade(seq, DegradationSpec(), 7)
    assert np.array_equal(out.frames, seq.frames)
    assert out.frames is not seq.frames


def test_noise_std_monte_carlo():
    seq = FrameSequence(np.full((4, 64, 64, 3), 0.5))
    out = degrade(seq, DegradationSpec(noise_sigma=0.1), 3)
    std = (out.frames - 0.5).std()
    assert out.frames.size >= 10_000
    assert 0.08 <= std <= 0.12


def test_degrade_deterministic_and_clamped():
    seq, _ = generate_synthetic_sequence(1, 3, 16, 16)
    spec = DegradationSpec(0.3, 0.8, 0.5, 0.2)
    a, b = degrade(seq, spec, 11), degrade(seq, spec, 11)
    assert np.array_equal(a.frames, b.frames)
    assert a.frames.min() >= 0 and a.frames.max() <= 1
    assert a.frames.shape == seq.frames.shape


def test_block_quantizer_by_hand():
    seq, _ = generate_synthetic_sequence(2, 1 + 1, 16, 16, texture="checker")
    q = 0.25
    levels = quantization_levels(q)
    assert levels == 18  # floor(2 + 15.5 + 0.5)
    out = block_quantize(seq.frames, q)
    tile = seq.frames[0, 0:8, 0:8, 0]
    mean = tile.mean()
    step_m = 1.0 / (levels - 1)
    mq = round(mean / step_m) * step_m
    step_r = 2.0 / (levels - 1)
    expected = mq + (-1 + np.round((tile - mean + 1) / step_r) * step_r)
    assert np.allclose(out[0, 0:8, 0:8, 0], expected, atol=1e-12)
    # each block takes only a few distinct values from the quantised grid
    assert len(np.unique(np.round(out[0, 0:8, 0:8, 0], 12))) <= 4


def test_degradation_spec_parse_and_validate():
    s = DegradationSpec.parse("noise=0.05,blur=0.5,q=0.5,flicker=0.02")
    assert (s.noise_sigma, s.blur_sigma, s.quality_q, s.flicker_amp) == (0.05, 0.5, 0.5, 0.02)
    assert DegradationSpec.parse("").is_identity
    with pytest.raises(ValueError, match="blur"):
        DegradationSpec.parse("noise=0.1,blur=abc")
    with pytest.raises(ValueError, match="q"):
        DegradationSpec.parse("q=0")
    with pytest.raises(ValueError, match="sharpen"):
        DegradationSpec.parse("sharpen=1")


def test_crop_patches():
    seq, _ = generate_synthetic_sequence(0, 2, 64, 64)
    one = crop_patches(seq, 64, 17)
    assert len(one) == 1 and np.array_equal(one[0][0].frames, seq.frames)
    four = crop_patches(seq, 32, 32)
    assert len(four) == 4
    rebuilt = np.zeros_like(seq.frames)
    for patch, w in four:
        rebuilt[:, w["y0"]:w["y0"] + 32, w["x0"]:w["x0"] + 32] = patch.frames
    assert np.array_equal(rebuilt, seq.frames)
    with pytest.raises(ValueError):
        crop_patches(seq, 65, 8)


@settings(max_examples=25, deadline=None)
@given(H=st.integers(8, 40), W=st.integers(8, 40), size=st.integers(1, 8), stride=st.integers(1, 9))
def test_crop_windows_cover_frame(H, W, size, stride):
    seq = FrameSequence(np.zeros((1, H, W, 1)))
    cover = np.zeros((H, W), bool)
    for _, w in crop_patches(seq, size, stride):
        cover[w["y0"]:w["y0"] + size, w["x0"]:w["x0"] + size] = True
    assert cover.all()


def test_downsample():
    img = np.random.default_rng(0).random((16, 16, 3))
    assert np.array_equal(downsample(img, 1), img)
    const = np.full((20, 24, 3), 0.37)
    for f in (2, 3, 4):
        assert np.allclose(downsample(const, f), 0.37, atol=1e-6)
    with pytest.raises(ValueError):
        downsample(img, 0)


def test_downsample_ramp_matches_analytic_sampling():
    H, W = 32, 32
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    ramp = 0.01 * xs + 0.02 * ys + 0.1
    out = downsample(ramp, 2)
    assert out.shape == (16, 16)
    i = np.arange(16)
    centre = 2 * i + 0.5  # input coordinate of output sample centres
    expected = 0.01 * centre[None, :] + 0.02 * centre[:, None] + 0.1
    assert np.allclose(out[3:-3, 3:-3], expected[3:-3, 3:-3], atol=1e-9)


def test_training_window_bounds():
    clean, _ = generate_synthetic_sequence(0, 10, 16, 16)
    deg = degrade(clean, DegradationSpec(noise_sigma=0.05), 0)
    assert valid_targets(10, 7, 2) == [6, 7]
    w = sample_training_window((deg, clean), 8, L=7, K=1)
    assert w.input_frames.shape[0] == 7 and w.post_frames.shape[0] == 1
    assert np.array_equal(w.post_frames[0], deg.frames[9])
    assert np.array_equal(w.target_frame, clean.frames[8])
    assert w.priors.frame_index == 8
    assert w.global_frame.shape == (4, 4, 3)
    with pytest.raises(IndexError):
        sample_training_window((deg, clean), 9, L=7, K=1)
    with pytest.raises(IndexError):
        sample_training_window((deg, clean), 5, L=7, K=1)


def test_flow_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    f = FlowField(rng.normal(size=(5, 7)).astype(np.float32), rng.normal(size=(5, 7)).astype(np.float32))
    write_flow_file(tmp_path / "a.flo", f)
    g = read_flow_file(tmp_path / "a.flo")
    assert np.array_equal(g.u, f.u) and np.array_equal(g.v, f.v)


def test_flow_file_size_and_hand_bytes(tmp_path):
    write_flow_file(tmp_path / "one.flo", FlowField(np.array([[2.0]]), np.array([[-1.0]])))
    assert (tmp_path / "one.flo").stat().st_size == 20
    raw = (struct.pack("<f", 202021.25) + struct.pack("<ii", 2, 1)
           + struct.pack("<ffff", 1.5, -2.0, 0.25, 3.0))
    (tmp_path / "hand.flo").write_bytes(raw)
    g = read_flow_file(tmp_path / "hand.flo")
    assert g.u.tolist() == [[1.5, 0.25]] and g.v.tolist() == [[-2.0, 3.0]]


def test_flow_file_errors(tmp_path):
    (tmp_path / "bad.flo").write_bytes(struct.pack("<f", 1.0) + struct.pack("<ii", 1, 1) + b"\0" * 8)
    with pytest.raises(FormatError):
        read_flow_file(tmp_path / "bad.flo")
    raw = struct.pack("<f", 202021.25) + struct.pack("<ii", 2, 2) + b"\0" * 8
    (tmp_path / "short.flo").write_bytes(raw)
    with pytest.raises(FormatError):
        read_flow_file(tmp_path / "short.flo")


def test_frame_round_trip(tmp_path):
    seq, _ = generate_synthetic_sequence(0, 3, 16, 16)
    write_frames(tmp_path / "f", seq)
    back = read_frames(tmp_path / "f")
    assert np.abs(back.frames - seq.frames).max() <= 1 / 255 + 1e-12


def test_manifest_round_trip_and_validation(tmp_path):
    clean, flows = generate_synthetic_sequence(0, 3, 16, 16, shift=(1, 0))
    deg = degrade(clean, DegradationSpec(noise_sigma=0.02), 0)
    write_frames(tmp_path / "c", clean)
    write_frames(tmp_path / "d", deg)
    write_flows(tmp_path / "fl", flows)
    spec = DegradationSpec(noise_sigma=0.02)
    save_manifest(tmp_path / "m.json", DatasetManifest([ManifestEntry("c", "d", 3, 16, 16, spec, "fl")]))
    m = load_manifest(tmp_path / "m.json")
    assert m.entries[0].degradation == spec
    seqs = load_sequences(m)
    assert len(seqs[0].flows) == 2 and np.all(seqs[0].flows[0].u == 1)
    save_manifest(tmp_path / "bad.json", DatasetManifest([ManifestEntry("c", "d", 4, 16, 16, spec)]))
    with pytest.raises(FormatError):
        load_manifest(tmp_path / "bad.json")
    save_manifest(tmp_path / "gone.json", DatasetManifest([ManifestEntry("nope", "d", 3, 16, 16, spec)]))
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "gone.json")
