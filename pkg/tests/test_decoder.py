import math

import numpy as np
import pytest

from am import GmmState, HmmStateInfo, log_likelihoods, scale_self_loops
from decoder import (
    DecodeConfig,
    StaticGraph,
    build_decode_graph,
    compile_training_graph,
    decode,
    equal_align,
    segment_frames,
    viterbi_align,
    write_hypotheses,
    write_trace,
)
from exceptions import AlignmentInfeasibleError, LexiconError, ValidationError
from frontend import FeatureMatrix
from lexicon import Lexicon, extend_prolonged_vowels
from lm import TextCorpus, train_trigram
from score import score_corpus
from synthetic import known_model, random_lexicon, random_sentences, sample_utterance, transcript_states

UNPRUNED = DecodeConfig(beam=math.inf, max_active=math.inf, acoustic_scale=1.0)


def _random_graph(rng, model):
    keys = sorted(model.mono_pdf)
    num_states = int(rng.integers(3, 201))
    graph = StaticGraph()
    graph.add_state()
    for _ in range(1, num_states):
        if rng.random() < 0.65:
            phone, pos = keys[int(rng.integers(len(keys)))]
            graph.add_state(HmmStateInfo(phone, pos))
        else:
            graph.add_state()

    def trans():
        if rng.random() < 0.5:
            return None
        phone, pos = keys[int(rng.integers(len(keys)))]
        return (phone, pos, "self" if rng.random() < 0.5 else "fwd")

    for src in range(num_states):
        for _ in range(int(rng.integers(1, 4))):
            dst = int(rng.integers(num_states))
            if not graph.is_emitting(dst) and dst <= src:
                continue
            graph.add_arc(src, dst, lm=-float(rng.exponential()), trans=trans())
        if graph.is_emitting(src) and rng.random() < 0.5:
            graph.add_arc(src, src, lm=-float(rng.exponential()), trans=trans())
    for state in range(1, num_states):
        if rng.random() < 0.2:
            graph.set_final(state, -float(rng.exponential()))
    graph.set_final(num_states - 1, -float(rng.exponential()))
    return graph


def _oracle(graph, ll, model, acoustic_scale=1.0):
    """Exhaustive frame-synchronous dynamic programme: (score, emitting state path) or None."""
    pdfs = [model.pdf_id(*info) if info is not None else -1 for info in graph.infos]

    def weight(arc):
        return arc.lm + (model.transition_logprob(*arc.trans) if arc.trans else 0.0)

    def closure(best):
        for s in range(graph.num_states):
            if s not in best:
                continue
            for arc in graph.out_arcs(s):
                if graph.is_emitting(arc.dst):
                    continue
                cand = best[s][0] + weight(arc)
                if arc.dst not in best or cand > best[arc.dst][0]:
                    best[arc.dst] = (cand, best[s][1])
        return best

    best = closure({graph.start: (0.0, ())})
    for t in range(len(ll)):
        nxt = {}
        for s, (score, path) in best.items():
            for arc in graph.out_arcs(s):
                if not graph.is_emitting(arc.dst):
                    continue
                cand = score + weight(arc) + acoustic_scale * ll[t, pdfs[arc.dst]]
                if arc.dst not in nxt or cand > nxt[arc.dst][0]:
                    nxt[arc.dst] = (cand, path + (arc.dst,))
        best = closure(nxt)
    finals = [(best[s][0] + w, best[s][1]) for s, w in graph.finals.items() if s in best]
    return max(finals) if finals else None


def test_decoder_and_aligner_match_exhaustive_search():
    rng = np.random.default_rng(99)
    model = known_model(dim=2, seed=3, separation=1.0)
    feasible = 0
    for _ in range(500):
        graph = _random_graph(rng, model)
        feats = FeatureMatrix(rng.standard_normal((int(rng.integers(1, 51)), model.dim)))
        expected = _oracle(graph, log_likelihoods(model, feats), model)
        hyp = decode(graph, feats, model, UNPRUNED)
        if expected is None:
            assert hyp.failed
            with pytest.raises(AlignmentInfeasibleError):
                viterbi_align(graph, feats, model)
            continue
        feasible += 1
        score, path = expected
        infos = tuple(graph.info(s) for s in path)
        assert not hyp.failed
        assert hyp.score == pytest.approx(score, abs=1e-6)
        assert hyp.segments == segment_frames(path, infos)
        alignment = viterbi_align(graph, feats, model)
        assert alignment.score == pytest.approx(score, abs=1e-6)
        assert tuple(alignment.frame_states) == path
    assert feasible > 20


def test_hypothesis_score_decomposes():
    rng = np.random.default_rng(17)
    model = known_model(dim=2, seed=3, separation=1.0)
    cfg = DecodeConfig(beam=math.inf, max_active=math.inf, acoustic_scale=0.3)
    checked = 0
    while checked < 30:
        graph = _random_graph(rng, model)
        feats = FeatureMatrix(rng.standard_normal((int(rng.integers(1, 31)), model.dim)))
        ll = log_likelihoods(model, feats)
        expected = _oracle(graph, ll, model, acoustic_scale=cfg.acoustic_scale)
        if expected is None:
            continue
        checked += 1
        score, path = expected
        pdfs = graph.pdf_array(model)
        hyp = decode(graph, feats, model, cfg)
        assert hyp.score == pytest.approx(score, abs=1e-6)
        assert hyp.acoustic == pytest.approx(sum(ll[t, pdfs[s]] for t, s in enumerate(path)), abs=1e-6)
        assert hyp.score == pytest.approx(cfg.acoustic_scale * hyp.acoustic + hyp.lm + hyp.transition, abs=1e-6)


def test_decoded_lm_graph_score_decomposes(model, lexicon, rng):
    sentences = random_sentences(lexicon, 50, rng)
    graph = build_decode_graph(lexicon, train_trigram(TextCorpus(tuple(sentences))), model)
    cfg = DecodeConfig(beam=30.0, max_active=2000, acoustic_scale=0.1)
    for words in sentences[:3]:
        feats, _ = sample_utterance(model, lexicon, words, rng)
        hyp = decode(graph, feats, model, cfg)
        assert not hyp.failed
        assert hyp.lm < 0 and hyp.transition < 0
        assert hyp.score == pytest.approx(0.1 * hyp.acoustic + hyp.lm + hyp.transition, abs=1e-6)


def test_self_loop_scaling_lengthens_aligned_vowel(model, phones):
    vowel_mean = np.zeros(model.dim)
    consonant_mean = np.eye(model.dim)[0]
    model = model.copy()
    for pos in range(model.num_states("A")):
        model.states[model.pdf_id("A", pos)] = GmmState(np.ones(1), vowel_mean[None, :], np.ones((1, model.dim)))
    for pos in range(model.num_states("K")):
        model.states[model.pdf_id("K", pos)] = GmmState(np.ones(1), consonant_mean[None, :], np.ones((1, model.dim)))
    # 40 frames gliding from the vowel to the consonant: the boundary is set by the transition costs
    glide = vowel_mean + ((np.arange(40) + 0.5) / 40)[:, None] * (consonant_mean - vowel_mean)
    feats = FeatureMatrix(np.vstack([np.tile(vowel_mean, (10, 1)), glide, np.tile(consonant_mean, (10, 1))]))
    lexicon = Lexicon({"AK": [("A", "K")]}, phones)
    durations = []
    for r in (1.0, 0.9, 0.8):
        scaled = scale_self_loops(model, r)
        graph = compile_training_graph(("AK",), lexicon, scaled, silence_prob=0.0)
        alignment = viterbi_align(graph, feats, scaled)
        durations.append(sum(info.phone == "A" for info in alignment.frame_info))
    assert durations == [30, 34, 37]


def test_training_graph_checks_inputs(model, lexicon):
    with pytest.raises(LexiconError):
        compile_training_graph(("NOTAWORD",), lexicon, model)
    with pytest.raises(ValidationError):
        compile_training_graph(lexicon.words()[:1], lexicon, model, silence_prob=1.5)


def test_forced_alignment_recovers_sampled_states(model, lexicon, rng):
    words = random_sentences(lexicon, 1, rng, (4, 4))[0]
    feats, truth = sample_utterance(model, lexicon, words, rng)
    alignment = viterbi_align(compile_training_graph(words, lexicon, model), feats, model)
    found = [model.pdf_id(*info) for info in alignment.frame_info]
    assert len(found) == feats.num_frames
    assert np.mean(np.array(found) == np.array(truth)) > 0.95
    assert tuple(w for w, _ in alignment.words) == tuple(words)
    assert alignment.segments[0][1] == 0
    assert alignment.segments[-1][2] == feats.num_frames


def test_alignment_needs_enough_frames(model, lexicon):
    words = lexicon.words()[:2]
    graph = compile_training_graph(words, lexicon, model)
    minimum = sum(model.num_states(p) for w in words for p in lexicon.base_pronunciation(w))
    with pytest.raises(AlignmentInfeasibleError):
        viterbi_align(graph, FeatureMatrix(np.zeros((minimum - 1, model.dim))), model)
    with pytest.raises(AlignmentInfeasibleError):
        equal_align(graph, minimum - 1)


def test_equal_alignment_spreads_frames_uniformly(model, lexicon):
    words = lexicon.words()[:2]
    graph = compile_training_graph(words, lexicon, model)
    states = len(transcript_states(model, lexicon, words, edge_silence=False))
    alignment = equal_align(graph, 3 * states)
    assert len(alignment.frame_states) == 3 * states
    assert np.all(np.bincount(alignment.frame_states)[np.unique(alignment.frame_states)] == 3)
    assert tuple(w for w, _ in alignment.words) == tuple(words)


def test_decoding_sampled_speech_is_exact():
    rng = np.random.default_rng(11)
    model = known_model(seed=5)
    lexicon = random_lexicon(model.phones, 20, rng)
    sentences = random_sentences(lexicon, 200, rng)
    lm = train_trigram(TextCorpus(tuple(sentences)))
    graph = build_decode_graph(lexicon, lm, model)
    cfg = DecodeConfig(beam=50.0, max_active=5000, acoustic_scale=1.0)
    refs, hyps = {}, {}
    for k, words in enumerate(sentences[:8]):
        feats, _ = sample_utterance(model, lexicon, words, rng)
        refs[f"u{k}"] = words
        hyps[f"u{k}"] = decode(graph, feats, model, cfg).words
    assert score_corpus(refs, hyps).wer == 0.0


def test_narrow_beam_can_strand_the_search(model, log_messages):
    good, bad = ("A", 0), ("K", 0)
    graph = StaticGraph()
    start = graph.add_state()
    dead_end = graph.add_state(HmmStateInfo(*good))
    survivor = graph.add_state(HmmStateInfo(*bad))
    final = graph.add_state()
    graph.add_arc(start, dead_end)
    graph.add_arc(start, survivor)
    graph.add_arc(dead_end, dead_end)
    graph.add_arc(survivor, survivor)
    graph.add_arc(survivor, final)
    graph.set_final(final)
    frames = np.repeat(model.states[model.pdf_id(*good)].means, 5, axis=0)
    feats = FeatureMatrix(frames)
    stranded = decode(graph, feats, model, DecodeConfig(beam=0.01, max_active=100, acoustic_scale=1.0))
    assert stranded.failed
    assert stranded.words == ()
    assert any("Search failure" in m for m in log_messages)
    assert not decode(graph, feats, model, UNPRUNED).failed


@pytest.mark.parametrize("kwargs", [{"beam": 0.0}, {"acoustic_scale": -1.0}, {"max_active": 0}])
def test_decode_config_validation(kwargs):
    values = {"beam": 10.0, "max_active": 100, "acoustic_scale": 0.1}
    values.update(kwargs)
    with pytest.raises(ValidationError):
        DecodeConfig(**values)


def test_words_outside_the_lm_are_not_decodable(model, lexicon, log_messages):
    words = lexicon.words()
    lm = train_trigram(TextCorpus(((words[0], words[1]),)))
    graph = build_decode_graph(lexicon, lm, model)
    assert graph.words == frozenset(words[:2])
    assert any("not decodable" in m for m in log_messages)
    with pytest.raises(ValidationError):
        build_decode_graph(lexicon, train_trigram(TextCorpus((("ELSEWHERE",),))), model)


def test_hypothesis_and_trace_files(tmp_path, model, lexicon, rng):
    words = lexicon.words()
    sentences = random_sentences(lexicon, 50, rng)
    lm = train_trigram(TextCorpus(tuple(sentences)))
    feats, _ = sample_utterance(model, lexicon, sentences[0], rng)
    hyp = decode(build_decode_graph(lexicon, lm, model), feats, model, DecodeConfig(50.0, 5000, 1.0))
    hyps = {"frag1": hyp}
    text = write_hypotheses(hyps, tmp_path / "hyp.txt").read_text(encoding="utf-8")
    assert text == "frag1 " + " ".join(hyp.words) + "\n"
    rows = write_trace(hyps, tmp_path / "trace.tsv").read_text(encoding="utf-8").splitlines()
    assert rows[0].split("\t")[:4] == ["fragment_id", "word", "start_s", "end_s"]
    assert len(rows) == 1 + len(hyp.words)
    starts = [float(r.split("\t")[2]) for r in rows[1:]]
    assert starts == sorted(starts)
    assert set(hyp.words) <= set(words)


def _steady_vowel_model():
    model = known_model(seed=21, forward=0.9)
    for vowel in model.vowels:
        for pos in range(1, model.num_states(vowel)):
            model.states[model.pdf_id(vowel, pos)] = model.states[model.pdf_id(vowel, 0)].copy()
    return model


def test_prolonged_vowel_lexicon_reduces_filler_insertions():
    rng = np.random.default_rng(8)
    model = _steady_vowel_model()
    words = random_lexicon(model.phones, 15, rng)
    entries = dict(words.entries)
    entries.update({"AH": [("A",)], "OH": [("O",)]})
    lexicon = Lexicon(entries, model.phones)
    fillers = {"A": "AH", "O": "OH"}
    sentences = random_sentences(words, 300, rng)
    lm_text = []
    for sentence in sentences:
        padded = []
        for w in sentence:
            padded.append(w)
            last = words.base_pronunciation(w)[-1]
            if last in fillers and rng.random() < 0.5:
                padded.append(fillers[last])
        lm_text.append(tuple(padded))
    lm = train_trigram(TextCorpus(tuple(lm_text)))
    test = {}
    for k, sentence in enumerate(sentences[:12]):
        feats, _ = sample_utterance(model, words, sentence, rng, vowel_stretch=(3.0, 6.0))
        test[f"u{k}"] = (sentence, feats)
    cfg = DecodeConfig(beam=60.0, max_active=20000, acoustic_scale=1.0)

    def wer(lex, am):
        graph = build_decode_graph(lex, lm, am)
        hyps = {k: decode(graph, f, am, cfg).words for k, (_, f) in test.items()}
        report = score_corpus({k: s for k, (s, _) in test.items()}, hyps)
        return report.wer, report.words.insertions

    base_wer, base_ins = wer(lexicon, model)
    extended = extend_prolonged_vowels(lexicon)
    ext_wer, ext_ins = wer(extended, model)
    scaled_wer, _ = wer(extended, scale_self_loops(model, 0.9))
    assert base_ins > 0
    assert ext_ins < base_ins
    assert ext_wer < base_wer
    assert scaled_wer <= ext_wer


def test_prolonged_vowel_lexicon_never_lowers_the_best_score():
    rng = np.random.default_rng(4)
    model = _steady_vowel_model()
    lexicon = random_lexicon(model.phones, 10, rng)
    extended = extend_prolonged_vowels(lexicon)
    gains = []
    for words in random_sentences(lexicon, 6, rng, (2, 3)):
        feats, _ = sample_utterance(model, lexicon, words, rng, vowel_stretch=(3.0, 6.0))
        base = viterbi_align(compile_training_graph(words, lexicon, model), feats, model)
        ext = viterbi_align(compile_training_graph(words, extended, model), feats, model)
        assert ext.score >= base.score - 1e-9
        gains.append(ext.score - base.score)
    assert max(gains) > 0
