from pathlib import Path

import numpy as np
import pytest

from adapt import (
    AdaptationLevel,
    FmllrStats,
    FmllrTransform,
    accumulate_fmllr_stats,
    adapt_features,
    apply_fmllr,
    compose,
    estimate_fmllr,
    group_key,
    invert,
    read_transforms,
    sat_retrain,
    write_transforms,
)
from am import GmmState, TrainingUtterance, log_likelihoods
from corpus import FragmentMeta
from decoder import DecodeConfig, build_decode_graph, compile_training_graph, decode, viterbi_align
from exceptions import DimensionError, ValidationError
from frontend import FeatureMatrix
from lm import TextCorpus, train_trigram
from score import score_corpus
from synthetic import known_model, random_affine, random_lexicon, random_sentences, sample_utterance


def _fragment(fragment_id, song, singer="singer", genres=("pop",)):
    return FragmentMeta(fragment_id, song, singer, genres, "test", Path(f"{fragment_id}.wav"), (), 1.0)


def _pdf_gamma(pdfs, num_pdfs):
    gamma = np.zeros((len(pdfs), num_pdfs))
    gamma[np.arange(len(pdfs)), pdfs] = 1.0
    return gamma


def _aligned_loglik(model, frames, pdfs):
    return float(log_likelihoods(model, frames)[np.arange(len(pdfs)), pdfs].sum())


def _mild_affine(dim, rng, scale, offset):
    A = np.eye(dim) + scale * rng.standard_normal((dim, dim)) / np.sqrt(dim)
    return FmllrTransform(np.hstack([A, offset * rng.standard_normal((dim, 1))]))


def test_transform_shape_and_singularity_checks():
    with pytest.raises(DimensionError):
        FmllrTransform(np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        FmllrTransform(np.zeros((2, 3)))


def test_transform_algebra(rng):
    t1 = FmllrTransform(random_affine(4, rng))
    t2 = FmllrTransform(random_affine(4, rng))
    frames = FeatureMatrix(rng.standard_normal((30, 4)))
    both = apply_fmllr(compose(t2, t1), frames)
    assert both.stage == "III"
    assert np.allclose(both.frames, apply_fmllr(t2, apply_fmllr(t1, frames)).frames)
    assert np.allclose(compose(invert(t1), t1).matrix, FmllrTransform.identity(4).matrix)
    with pytest.raises(DimensionError):
        apply_fmllr(t1, rng.standard_normal((5, 3)))


def test_transforms_file(tmp_path, rng):
    transforms = {"song1": FmllrTransform(random_affine(3, rng), "song1", 812.0), "song2": FmllrTransform.identity(3)}
    back = read_transforms(write_transforms(transforms, tmp_path / "transforms.txt"))
    assert list(back) == ["song1", "song2"]
    assert back["song1"].frames == 812.0
    assert np.allclose(back["song1"].matrix, transforms["song1"].matrix)


@pytest.mark.parametrize(
    "level, expected",
    [("fragment", "f1"), ("song", "s1"), ("singer", "alice"), ("genre", "rock"), ("pooled", "all")],
)
def test_group_keys(level, expected):
    assert group_key(_fragment("f1", "s1", "alice", ("rock", "pop")), level) == expected
    assert AdaptationLevel(level).value == level


def test_recovers_a_random_affine_corruption():
    rng = np.random.default_rng(2024)
    model = known_model(dim=5, seed=4)
    pdfs = rng.integers(model.num_pdfs, size=20_000)
    clean = FeatureMatrix(np.vstack([model.states[k].means[0] for k in pdfs]) + rng.standard_normal((len(pdfs), 5)))
    corruption = FmllrTransform(random_affine(5, rng, max_condition=10.0))
    assert np.linalg.cond(corruption.A) < 10.0
    corrupted = apply_fmllr(corruption, clean)
    stats = accumulate_fmllr_stats(model, corrupted, _pdf_gamma(pdfs, model.num_pdfs))
    estimate = estimate_fmllr(stats)
    assert estimate.frames == pytest.approx(len(pdfs))
    assert np.max(np.abs(compose(estimate, corruption).matrix - FmllrTransform.identity(5).matrix)) < 0.05
    assert all(b >= a - 1e-6 * abs(a) for a, b in zip(estimate.trace, estimate.trace[1:]))

    ll_clean = _aligned_loglik(model, clean.frames, pdfs)
    ll_corrupt = _aligned_loglik(model, corrupted.frames, pdfs)
    ll_adapted = _aligned_loglik(model, apply_fmllr(estimate, corrupted).frames, pdfs)
    assert (ll_adapted - ll_corrupt) / (ll_clean - ll_corrupt) >= 0.9


def test_low_occupancy_falls_back_to_identity(model, rng, log_messages):
    pdfs = rng.integers(model.num_pdfs, size=50)
    frames = rng.standard_normal((50, model.dim))
    stats = accumulate_fmllr_stats(model, frames, _pdf_gamma(pdfs, model.num_pdfs))
    estimate = estimate_fmllr(stats, group="tiny")
    assert np.array_equal(estimate.matrix, FmllrTransform.identity(model.dim).matrix)
    assert any("using identity" in m for m in log_messages)
    assert isinstance(stats + FmllrStats.zeros(model.dim), FmllrStats)


def test_statistics_add_over_frames(model, rng):
    pdfs = rng.integers(model.num_pdfs, size=60)
    frames = rng.standard_normal((60, model.dim))
    gamma = _pdf_gamma(pdfs, model.num_pdfs)
    whole = accumulate_fmllr_stats(model, frames, gamma)
    parts = accumulate_fmllr_stats(model, frames[:25], gamma[:25]) + accumulate_fmllr_stats(
        model, frames[25:], gamma[25:]
    )
    np.testing.assert_allclose(parts.G, whole.G, atol=1e-10)
    np.testing.assert_allclose(parts.K, whole.K, atol=1e-10)
    assert parts.beta == pytest.approx(whole.beta)
    assert whole.beta == pytest.approx(60.0)


def test_single_frame_statistics_by_hand(model):
    model = model.copy()
    k = 3
    mean, var = np.array([1.0, -2.0, 0.5, 3.0]), np.array([0.5, 2.0, 4.0, 1.0])
    model.states[k] = GmmState(np.ones(1), mean[None, :], var[None, :])
    x = np.array([[0.2, 1.0, -1.5, 2.0]])
    stats = accumulate_fmllr_stats(model, x, _pdf_gamma([k], model.num_pdfs))
    xi = np.append(x[0], 1.0)
    assert stats.beta == 1.0
    for i in range(model.dim):
        np.testing.assert_allclose(stats.G[i], np.outer(xi, xi) / var[i], atol=1e-12)
        np.testing.assert_allclose(stats.K[i], mean[i] / var[i] * xi, atol=1e-12)


def test_sat_objective_never_decreases(model, lexicon, rng):
    utterances, fragments = {}, []
    for s in range(2):
        corruption = _mild_affine(model.dim, rng, 0.3, 1.0)
        for k in range(3):
            fragment_id = f"s{s}_f{k}"
            words = random_sentences(lexicon, 1, rng, (5, 7))[0]
            feats, _ = sample_utterance(model, lexicon, words, rng)
            alignment = viterbi_align(compile_training_graph(words, lexicon, model), feats, model)
            utterances[fragment_id] = TrainingUtterance(apply_fmllr(corruption, feats).frames, alignment=alignment)
            fragments.append(_fragment(fragment_id, f"song{s}"))
    trained, transforms, trace = sat_retrain(model, utterances, fragments, "song", rounds=4)
    assert sorted(transforms) == ["song0", "song1"]
    assert len(trace) == 4
    for before, after in zip(trace, trace[1:]):
        assert after >= before - 1e-6 * abs(before)
    assert trained.num_pdfs == model.num_pdfs


def test_finer_adaptation_levels_decode_better():
    rng = np.random.default_rng(31)
    model = known_model(dim=4, seed=9, forward=0.4)
    lexicon = random_lexicon(model.phones, 20, rng)
    sentences = random_sentences(lexicon, 300, rng, (9, 11))
    lm = train_trigram(TextCorpus(tuple(sentences)))
    fragments, features, transcripts, aligned_pdfs = [], {}, {}, {}
    for s in range(3):
        song_corruption = _mild_affine(model.dim, rng, 0.5, 1.5)
        for k in range(3):
            fragment_id = f"song{s}_frag{k}"
            words = sentences[3 * s + k]
            feats, _ = sample_utterance(model, lexicon, words, rng)
            corruption = compose(_mild_affine(model.dim, rng, 0.15, 0.4), song_corruption)
            features[fragment_id] = apply_fmllr(corruption, feats)
            transcripts[fragment_id] = words
            fragments.append(_fragment(fragment_id, f"song{s}"))
    assert min(f.num_frames for f in features.values()) > 200
    for fragment_id, words in transcripts.items():
        alignment = viterbi_align(compile_training_graph(words, lexicon, model), features[fragment_id], model)
        aligned_pdfs[fragment_id] = [model.pdf_id(*info) for info in alignment.frame_info]

    graph = build_decode_graph(lexicon, lm, model)
    cfg = DecodeConfig(beam=50.0, max_active=5000, acoustic_scale=1.0)
    wer, loglik = {}, {}
    for level in ("fragment", "song", "pooled"):
        adapted, transforms = adapt_features(model, lexicon, features, transcripts, fragments, level)
        assert len(transforms) == {"fragment": 9, "song": 3, "pooled": 1}[level]
        hyps = {k: decode(graph, f, model, cfg).words for k, f in adapted.items()}
        wer[level] = score_corpus(transcripts, hyps).wer
        loglik[level] = sum(
            _aligned_loglik(model, adapted[k].frames, aligned_pdfs[k]) + len(aligned_pdfs[k]) * transforms[key].log_det()
            for k, key in ((fr.fragment_id, group_key(fr, level)) for fr in fragments)
        )
    assert wer["fragment"] <= wer["song"] <= wer["pooled"]
    assert loglik["fragment"] >= loglik["song"] >= loglik["pooled"]
