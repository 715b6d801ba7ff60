import numpy as np
import pytest

from corpus import FragmentMeta
from exceptions import DimensionError, ValidationError
from frontend import (
    FeatureMatrix,
    Waveform,
    add_deltas,
    apply_cmvn,
    compute_cmvn_stats,
    compute_mfcc,
    corpus_features,
    extract_pitch,
    pitch_histogram,
    read_feature_archive,
    speed_perturb,
    splice,
    write_feature_archive,
    write_wav,
)


def _sine(freq, seconds=1.0, rate=16000, amplitude=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return Waveform(amplitude * np.sin(2 * np.pi * freq * t), rate)


def _voiced_median(wave):
    track = extract_pitch(wave)
    return float(np.median(track.voiced_f0()))


def test_mfcc_frame_count_and_dimension():
    feats = compute_mfcc(_sine(440.0))
    assert feats.frames.shape == (98, 13)
    assert feats.stage == "I"
    assert np.all(np.isfinite(feats.frames))


def test_mfcc_rejects_audio_shorter_than_a_window():
    with pytest.raises(ValidationError):
        compute_mfcc(Waveform(np.zeros(100), 16000))


def test_cmvn_normalizes_each_dimension(rng):
    f = FeatureMatrix(3.0 + 2.0 * rng.standard_normal((500, 5)))
    out = apply_cmvn(f, compute_cmvn_stats(f))
    assert np.allclose(out.frames.mean(0), 0.0, atol=1e-10)
    assert np.allclose(out.frames.var(0), 1.0, atol=1e-8)


def test_cmvn_ignores_shift_and_scale(rng):
    f = FeatureMatrix(rng.standard_normal((200, 4)) * [1.0, 2.0, 0.5, 3.0])
    reference = apply_cmvn(f, compute_cmvn_stats(f)).frames
    shifted = FeatureMatrix(f.frames + np.array([5.0, -3.0, 0.25, 100.0]))
    scaled = FeatureMatrix(f.frames * np.array([0.1, 4.0, 2.0, 7.5]))
    for g in (shifted, scaled):
        np.testing.assert_allclose(apply_cmvn(g, compute_cmvn_stats(g)).frames, reference, atol=1e-8)


def test_cmvn_needs_two_frames_and_matching_dimension(rng):
    one = FeatureMatrix(rng.standard_normal((1, 3)))
    with pytest.raises(ValidationError):
        apply_cmvn(one, compute_cmvn_stats(one))
    f = FeatureMatrix(rng.standard_normal((10, 3)))
    with pytest.raises(DimensionError):
        apply_cmvn(f, compute_cmvn_stats(FeatureMatrix(rng.standard_normal((10, 4)))))


def test_cmvn_floors_constant_dimension(log_messages):
    f = FeatureMatrix(np.column_stack([np.arange(10.0), np.ones(10)]))
    out = apply_cmvn(f, compute_cmvn_stats(f))
    assert np.all(np.isfinite(out.frames))
    assert np.allclose(out.frames[:, 1], 0.0)
    assert any("floored" in m for m in log_messages)


def test_deltas_of_a_ramp():
    f = FeatureMatrix(np.arange(20.0)[:, None])
    out = add_deltas(f)
    assert out.stage == "II"
    assert out.frames.shape == (20, 3)
    assert np.allclose(out.frames[2:-2, 1], 1.0)
    assert np.allclose(out.frames[4:-4, 2], 0.0)


def test_deltas_only_on_static_features(rng):
    f = add_deltas(FeatureMatrix(rng.standard_normal((10, 2))))
    with pytest.raises(ValidationError):
        add_deltas(f)


def test_splice_replicates_edges(rng):
    f = FeatureMatrix(rng.standard_normal((6, 2)))
    out = splice(f, 2, 1)
    assert out.stage == "IV"
    assert out.frames.shape == (6, 8)
    assert np.array_equal(out.frames[0, :2], f.frames[0])
    assert np.array_equal(out.frames[0, 2:4], f.frames[0])
    assert np.array_equal(out.frames[3, :2], f.frames[1])
    assert np.array_equal(out.frames[3, 6:], f.frames[4])
    assert np.array_equal(out.frames[5, 6:], f.frames[5])


def test_pitch_of_a_sine():
    assert _voiced_median(_sine(220.0)) == pytest.approx(220.0, rel=0.02)


def test_silence_is_unvoiced():
    track = extract_pitch(Waveform(np.zeros(16000), 16000))
    assert not track.voiced.any()
    assert np.all(track.f0 == 0.0)


@pytest.mark.parametrize("alpha", [0.9, 1.1])
def test_speed_perturbation_scales_length_and_pitch(alpha):
    wave = _sine(200.0)
    out = speed_perturb(wave, alpha)
    assert len(out) == int(np.floor(len(wave) / alpha + 0.5))
    assert out.sample_rate == wave.sample_rate
    assert _voiced_median(out) == pytest.approx(200.0 * alpha, rel=0.02)


@pytest.mark.parametrize("alpha", [0.9, 1.1])
def test_speed_perturbation_round_trip(alpha):
    wave = _sine(200.0)
    back = speed_perturb(speed_perturb(wave, alpha), 1.0 / alpha)
    assert abs(len(back) - len(wave)) <= 1
    n = min(len(back), len(wave))
    inner = slice(n // 10, n - n // 10)
    assert np.max(np.abs(back.samples[:n][inner] - wave.samples[:n][inner])) < 0.05


def test_speed_perturbation_identity_and_invalid_factor():
    wave = _sine(200.0, seconds=0.1)
    assert np.array_equal(speed_perturb(wave, 1.0).samples, wave.samples)
    with pytest.raises(ValidationError):
        speed_perturb(wave, 0.0)


def test_pitch_histogram_bins_and_mode():
    histogram = pitch_histogram([101.0, 104.0, 109.9, 215.0, 0.0, np.nan], bin_width=10.0)
    assert histogram.bins == ((100.0, 110.0, 3), (210.0, 220.0, 1))
    assert histogram.total == 4
    assert histogram.mode() == pytest.approx(105.0)
    assert pitch_histogram([]).mode() is None
    with pytest.raises(ValidationError):
        pitch_histogram([100.0], bin_width=0.0)


def test_feature_archive_preserves_matrices(tmp_path, rng):
    features = {
        "a": FeatureMatrix(rng.standard_normal((7, 3))),
        "b": FeatureMatrix(rng.standard_normal((4, 3)), stage="II"),
    }
    back = read_feature_archive(write_feature_archive(tmp_path / "feats.ark", features))
    assert list(back) == ["a", "b"]
    assert back["b"].stage == "II"
    assert np.allclose(back["a"].frames, features["a"].frames, atol=1e-6)


def test_singer_cmvn_pools_fragments_of_one_singer(tmp_path):
    fragments = []
    for k, freq in enumerate((300.0, 500.0)):
        path = write_wav(_sine(freq, seconds=0.5, amplitude=0.3 + 0.2 * k), tmp_path / f"f{k}.wav")
        fragments.append(FragmentMeta(f"f{k}", "song", "alice", ("pop",), "train", path, ("LA",), 0.5))
    pooled = corpus_features(fragments, cmvn="singer")
    frames = np.vstack([pooled[f.fragment_id].frames for f in fragments])
    assert np.allclose(frames.mean(0), 0.0, atol=1e-8)
    assert not np.allclose(pooled["f0"].frames.mean(0), 0.0, atol=1e-3)
    with pytest.raises(ValidationError):
        corpus_features(fragments, cmvn="global")


@pytest.mark.parametrize("kind", ["noise", "silence", "clipped"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mfcc_is_finite_for_degenerate_audio(kind, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(400, 8000))
    if kind == "noise":
        samples = rng.uniform(-1.0, 1.0, n)
    elif kind == "silence":
        samples = np.zeros(n)
    else:
        samples = np.clip(5.0 * np.sin(2 * np.pi * rng.uniform(50, 2000) * np.arange(n) / 16000), -1.0, 1.0)
    feats = compute_mfcc(Waveform(samples, 16000))
    assert feats.num_frames >= 1
    assert np.all(np.isfinite(feats.frames))
