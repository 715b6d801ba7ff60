"""Synthetic corpora: a known HMM-GMM with sampled features, and sine-tone "singing" audio."""

from pathlib import Path

import numpy as np
from loguru import logger

from am import AcousticModel, GmmState, sample_dwell, sample_frames
from config import CONFIG
from corpus import CorpusManifest, FragmentMeta, save_manifest
from exceptions import ValidationError
from frontend import FeatureMatrix, Waveform, write_wav
from lexicon import Lexicon, Phone, write_lexicon, write_phone_table

VOWELS = ("A", "E", "I", "O", "U")
CONSONANTS = ("K", "M", "N", "S", "T")
SILENCE = "SIL"
GENRES = ("pop", "rock", "folk", "soul")


def phone_inventory(vowels=VOWELS, consonants=CONSONANTS, silence=SILENCE):
    phones = {silence: Phone(silence, is_silence=True)}
    phones.update({v: Phone(v, is_vowel=True) for v in vowels})
    phones.update({c: Phone(c) for c in consonants})
    return phones


def known_model(
    phones=None,
    dim=6,
    seed=0,
    separation=3.0,
    forward=CONFIG.INITIAL_FORWARD_PROB,
    states_per_phone=CONFIG.STATES_PER_PHONE,
    silence_states=CONFIG.SILENCE_STATES,
):
    """Monophone model with unit-variance Gaussians at random, well separated means."""
    phones = phone_inventory() if phones is None else phones
    rng = np.random.default_rng(seed)
    fwd, states, mono_pdf = {}, [], {}
    for symbol, phone in phones.items():
        n = silence_states if phone.is_silence else states_per_phone
        fwd[symbol] = np.full(n, forward)
        for pos in range(n):
            mono_pdf[(symbol, pos)] = len(states)
            mean = separation * rng.standard_normal(dim)
            states.append(GmmState(np.ones(1), mean[None, :], np.ones((1, dim))))
    return AcousticModel(dict(phones), fwd, states, np.full(dim, 1e-3), "monophone", mono_pdf)


def random_lexicon(phones, num_words, rng, pattern="CVCV"):
    """Distinct pronunciations of a fixed consonant/vowel pattern, so word boundaries are unambiguous."""
    vowels = [s for s, p in phones.items() if p.is_vowel]
    consonants = [s for s, p in phones.items() if not p.is_vowel and not p.is_silence]
    capacity = np.prod([len(vowels) if c == "V" else len(consonants) for c in pattern])
    if num_words > capacity:
        raise ValidationError(f"pattern {pattern} allows only {capacity} distinct words")
    prons = []
    while len(prons) < num_words:
        pron = tuple(rng.choice(vowels) if c == "V" else rng.choice(consonants) for c in pattern)
        pron = tuple(str(p) for p in pron)
        if pron not in prons:
            prons.append(pron)
    entries = {f"W{i:03d}": [pron] for i, pron in enumerate(prons)}
    return Lexicon(entries, dict(phones))


def random_sentences(lexicon, count, rng, length=(3, 6)):
    words = lexicon.words()
    return [
        tuple(str(w) for w in rng.choice(words, size=int(rng.integers(length[0], length[1] + 1))))
        for _ in range(count)
    ]


def transcript_states(model, lexicon, words, edge_silence=True):
    """HMM state infos (phone, pos, left, right) along the base pronunciations of a transcript."""
    silence = lexicon.silence
    infos = []
    if edge_silence:
        infos += [(silence, pos, "", "") for pos in range(model.num_states(silence))]
    for word in words:
        pron = lexicon.base_pronunciation(word)
        for j, phone in enumerate(pron):
            left = pron[j - 1] if j > 0 else silence
            right = pron[j + 1] if j + 1 < len(pron) else silence
            infos += [(phone, pos, left, right) for pos in range(model.num_states(phone))]
    if edge_silence:
        infos += [(silence, pos, "", "") for pos in range(model.num_states(silence))]
    return infos


def _stretch(rng, vowel_stretch):
    if isinstance(vowel_stretch, (tuple, list)):
        return float(rng.uniform(*vowel_stretch))
    return float(vowel_stretch)


def sample_utterance(model, lexicon, words, rng, vowel_stretch=1.0, edge_silence=True):
    """Features drawn along a transcript; vowel dwell times are multiplied by the stretch factor.

    Returns (FeatureMatrix, pdf sequence).
    """
    pdfs = []
    for phone, pos, left, right in transcript_states(model, lexicon, words, edge_silence):
        dwell = int(sample_dwell(model, phone, pos, 1, rng)[0])
        if model.phones[phone].is_vowel:
            dwell = max(1, int(round(dwell * _stretch(rng, vowel_stretch))))
        pdfs.extend([model.pdf_id(phone, pos, left, right)] * dwell)
    return FeatureMatrix(sample_frames(model, pdfs, rng)), pdfs


def sample_corpus(
    model,
    lexicon,
    rng,
    songs=4,
    fragments_per_song=3,
    test_songs=1,
    words=(3, 6),
    vowel_stretch=1.0,
    test_vowel_stretch=None,
):
    """Feature-level corpus: one singer per song, the last `test_songs` songs form the test split.

    Returns (manifest, features by fragment_id).
    """
    fragments, features = [], {}
    for s in range(songs):
        split = "test" if s >= songs - test_songs else "train"
        stretch = vowel_stretch if split == "train" or test_vowel_stretch is None else test_vowel_stretch
        for k in range(fragments_per_song):
            fragment_id = f"song{s:02d}_frag{k:02d}"
            transcript = random_sentences(lexicon, 1, rng, words)[0]
            feats, _ = sample_utterance(model, lexicon, transcript, rng, stretch)
            features[fragment_id] = feats
            fragments.append(
                FragmentMeta(
                    fragment_id=fragment_id,
                    song_id=f"song{s:02d}",
                    singer_id=f"singer{s:02d}",
                    genres=(GENRES[s % len(GENRES)],),
                    split=split,
                    audio_path=Path(f"{fragment_id}.wav"),
                    transcript=transcript,
                    duration=feats.num_frames * feats.frame_shift,
                )
            )
    return CorpusManifest(tuple(fragments)), features


def random_affine(dim, rng, max_condition=10.0, offset_scale=0.5):
    """d x (d+1) affine map whose linear part has condition number below max_condition."""
    q1, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    q2, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    spread = np.sqrt(max_condition) * 0.95
    singular = np.exp(rng.uniform(-np.log(spread) / 2, np.log(spread) / 2, size=dim))
    A = q1 @ np.diag(singular) @ q2
    b = offset_scale * rng.standard_normal(dim)
    return np.hstack([A, b[:, None]])


def tone_table(phones, base=280.0, step=170.0):
    """Two formant-like frequencies per phone; silence maps to None."""
    table, k = {}, 0
    for symbol, phone in phones.items():
        if phone.is_silence:
            table[symbol] = None
            continue
        table[symbol] = (base + step * k, 1100.0 + 1.7 * step * k)
        k += 1
    return table


def _segment(freqs, seconds, sample_rate, rng, voiced, singer_scale):
    n = max(1, int(round(seconds * sample_rate)))
    t = np.arange(n) / sample_rate
    if freqs is None:
        return 0.003 * rng.standard_normal(n)
    f1, f2 = (f * singer_scale for f in freqs)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    sig = 0.3 * np.sin(2 * np.pi * f1 * t + phase[0]) + 0.15 * np.sin(2 * np.pi * f2 * t + phase[1])
    if not voiced:
        sig = 0.5 * sig + 0.05 * rng.standard_normal(n)
    fade = min(n // 4, int(0.005 * sample_rate))
    if fade > 0:
        ramp = np.hanning(2 * fade)
        sig[:fade] *= ramp[:fade]
        sig[-fade:] *= ramp[fade:]
    return sig


def render_transcript(
    lexicon,
    words,
    rng,
    tones,
    sample_rate=CONFIG.SAMPLE_RATE,
    vowel_s=0.18,
    consonant_s=0.08,
    silence_s=0.15,
    vowel_stretch=1.0,
    singer_scale=1.0,
):
    parts = [_segment(None, silence_s, sample_rate, rng, True, 1.0)]
    for i, word in enumerate(words):
        for phone in lexicon.base_pronunciation(word):
            if lexicon.is_vowel(phone):
                seconds = vowel_s * _stretch(rng, vowel_stretch)
                parts.append(_segment(tones[phone], seconds, sample_rate, rng, True, singer_scale))
            else:
                parts.append(_segment(tones[phone], consonant_s, sample_rate, rng, False, singer_scale))
        if i + 1 < len(words) and rng.random() < CONFIG.SILENCE_PROB:
            parts.append(_segment(None, silence_s, sample_rate, rng, True, 1.0))
    parts.append(_segment(None, silence_s, sample_rate, rng, True, 1.0))
    return Waveform(np.concatenate(parts), sample_rate)


EXPERIMENT_TEMPLATE = """\
[experiment]
name = {name}
seed = {seed}
manifest = manifest.tsv
lexicon = lexicon.txt
phones = phones.txt
lm_text = lyrics.txt
output_dir = exp
cmvn = utterance
stages = train_mono, realign, train_lm, decode, score

[train_mono]
iterations = 6

[train_lm]
order = 3

[decode]
beam = {beam}
max_active = {max_active}
acoustic_scale = {acoustic_scale}
"""


def write_synthetic_corpus(
    directory,
    seed=0,
    train_singers=3,
    test_singers=1,
    songs_per_singer=2,
    fragments_per_song=2,
    vocabulary=20,
    words=(3, 5),
    test_vowel_stretch=1.0,
    extra_sentences=40,
):
    """Writes audio, manifest, phone table, lexicon, lyrics and an experiment config; returns their paths."""
    directory = Path(directory)
    rng = np.random.default_rng(seed)
    phones = phone_inventory()
    lexicon = random_lexicon(phones, vocabulary, rng)
    tones = tone_table(phones)
    fragments = []
    singers = [("train", f"tr{i:02d}") for i in range(train_singers)]
    singers += [("test", f"te{i:02d}") for i in range(test_singers)]
    for split, singer in singers:
        scale = float(rng.uniform(0.94, 1.06))
        for s in range(songs_per_singer):
            song = f"{singer}_song{s}"
            genres = (GENRES[len(fragments) % len(GENRES)],)
            if rng.random() < 0.3:
                genres += (GENRES[(len(fragments) + 1) % len(GENRES)],)
            for k in range(fragments_per_song):
                fragment_id = f"{song}_f{k}"
                transcript = random_sentences(lexicon, 1, rng, words)[0]
                stretch = test_vowel_stretch if split == "test" else 1.0
                wave = render_transcript(lexicon, transcript, rng, tones, vowel_stretch=stretch, singer_scale=scale)
                path = write_wav(wave, directory / "audio" / f"{fragment_id}.wav")
                fragments.append(
                    FragmentMeta(fragment_id, song, singer, genres, split, Path(path), transcript, wave.duration)
                )
    manifest = CorpusManifest(tuple(fragments))
    lyrics = [fr.transcript for fr in fragments] + random_sentences(lexicon, extra_sentences, rng, words)
    paths = {
        "manifest": save_manifest(manifest, directory / "manifest.tsv"),
        "phones": write_phone_table(phones, directory / "phones.txt"),
        "lexicon": write_lexicon(lexicon, directory / "lexicon.txt"),
        "lyrics": directory / "lyrics.txt",
        "config": directory / "experiment.ini",
    }
    paths["lyrics"].write_text("".join(" ".join(s).lower() + "\n" for s in lyrics), encoding="utf-8")
    paths["config"].write_text(
        EXPERIMENT_TEMPLATE.format(
            name="synthetic",
            seed=seed,
            beam=CONFIG.BEAM,
            max_active=CONFIG.MAX_ACTIVE,
            acoustic_scale=CONFIG.ACOUSTIC_SCALE,
        ),
        encoding="utf-8",
    )
    train, test = manifest.counts()
    logger.info(f"Synthetic corpus in {directory}: {train} train / {test} test fragments, {vocabulary} words")
    return paths
