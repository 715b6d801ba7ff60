import configparser
import json
import pickle
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from loguru import logger

from adapt import (
    AdaptationLevel,
    adapt_features,
    apply_fmllr,
    estimate_group_transforms,
    group_key,
    sat_retrain,
    write_transforms,
)
from am import TrainingUtterance, build_triphone_tying, em_iteration, flat_start, save_model, split_mixtures
from am import scale_self_loops as scale_model_loops
from config import CONFIG
from corpus import CorpusManifest, load_manifest, save_manifest, validate_durations
from decoder import (
    DecodeConfig,
    build_decode_graph,
    compile_training_graph,
    decode,
    equal_align,
    viterbi_align,
    write_hypotheses,
    write_trace,
)
from exceptions import (
    AlignmentInfeasibleError,
    ConfigError,
    LexiconError,
    SingalignRuntimeError,
    StageError,
    ValidationError,
)
from frontend import add_deltas, corpus_features, read_wav, speed_perturb, splice, write_wav
from lexicon import extend_prolonged_vowels, load_lexicon, write_lexicon
from lm import (
    KneserNeyConfig,
    TextCorpus,
    normalize_lyrics,
    perplexity,
    prune,
    read_arpa,
    train_trigram,
    write_arpa,
    write_corpus,
)
from score import score_corpus, write_report
from state_manager import StateManager
from utils import file_sha256, parallel_map, text_sha256

STAGE_NAMES = (
    "train_mono",
    "realign",
    "train_tri",
    "splice",
    "fmllr",
    "sat",
    "augment",
    "extend_lexicon",
    "scale_self_loops",
    "train_lm",
    "decode",
    "score",
)

REQUIRES = {
    "realign": ("model",),
    "train_tri": ("model", "alignments"),
    "splice": ("model", "alignments"),
    "fmllr": ("model", "alignments"),
    "sat": ("model", "alignments", "fmllr"),
    "scale_self_loops": ("model",),
    "decode": ("model", "lm"),
    "score": ("decode",),
}

PROVIDES = {
    "train_mono": ("model", "alignments"),
    "train_tri": ("model", "alignments"),
    "splice": ("model", "alignments"),
    "fmllr": ("fmllr",),
    "train_lm": ("lm",),
    "decode": ("decode",),
}

TRAINING_STAGES = ("train_mono", "realign", "train_tri", "splice", "fmllr", "sat")

RESULT_COLUMNS = ("experiment", "step", "stages", "ref_words", "sub", "del", "ins", "wer", "per")

_TOP_LEVEL_COMMA = re.compile(r",(?![^(]*\))")
_STAGE_ITEM = re.compile(r"([a-z_]+)\s*(?:\(([^()]*)\))?")
_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


@dataclass(frozen=True)
class StageSpec:
    name: str
    args: tuple = ()

    @property
    def label(self):
        return f"{self.name}({','.join(self.args)})" if self.args else self.name


@dataclass(frozen=True)
class ExperimentConfig:
    """A parsed experiment file.

    No stage draws random numbers, so `seed` only keys the ledger and the input hash:
    changing it reruns every stage and reproduces the same artifacts.
    """

    path: Path
    name: str
    seed: int
    stages: tuple
    params: dict
    manifest: Path
    lexicon: Path
    phones: Path
    output_dir: Path
    lm_text: Path = None
    lm: Path = None
    cmvn: str = "utterance"
    silence_prob: float = CONFIG.SILENCE_PROB
    jobs: int = CONFIG.JOBS

    def get(self, section, key, default, kind=float):
        raw = self.params.get(section, {}).get(key)
        if raw is None:
            return default
        try:
            if kind is bool:
                if raw.lower() in _TRUE:
                    return True
                if raw.lower() in _FALSE:
                    return False
                raise ValueError(raw)
            return kind(raw)
        except ValueError as e:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}") from e

    @property
    def config_hash(self):
        return text_sha256(json.dumps(self.params, sort_keys=True))

    def stage_signature(self, spec):
        return f"{spec.label}|{json.dumps(self.params.get(spec.name, {}), sort_keys=True)}"

    def input_hash(self, manifest=None):
        parts = [f"seed={self.seed}", f"cmvn={self.cmvn}", f"silence_prob={self.silence_prob!r}"]
        for path in (self.manifest, self.lexicon, self.phones, self.lm_text, self.lm):
            parts.append(f"{path}:{file_sha256(path)}" if path is not None else "-")
        if manifest is not None:
            parts += [f"{fr.fragment_id}:{file_sha256(fr.audio_path)}" for fr in manifest.fragments]
        return text_sha256("\n".join(parts))


@dataclass
class PipelineState:
    manifest: CorpusManifest
    lexicon: object
    base_lexicon: object
    features: dict
    lm: object = None
    model: object = None
    alignments: dict = field(default_factory=dict)
    fmllr_level: str = None
    transforms: dict = field(default_factory=dict)
    hypotheses: dict = None
    results: list = field(default_factory=list)
    history: list = field(default_factory=list)
    generation: int = 0


def parse_stages(text):
    stages = []
    for item in _TOP_LEVEL_COMMA.split(text):
        item = item.strip()
        if not item:
            continue
        match = _STAGE_ITEM.fullmatch(item)
        if match is None:
            raise ConfigError(f"cannot parse stage '{item}'")
        name, args = match.group(1), match.group(2)
        if name not in STAGE_NAMES:
            raise ConfigError(f"unknown stage '{name}'; known stages: {', '.join(STAGE_NAMES)}")
        args = tuple(a.strip() for a in args.split(",") if a.strip()) if args else ()
        stages.append(StageSpec(name, args))
    if not stages:
        raise ConfigError("experiment declares no stages")
    return tuple(stages)


def validate_stages(stages, lm_available=False):
    have = {"model": False, "alignments": False, "lm": lm_available, "decode": False, "fmllr": False}
    spliced = scaled = False
    for i, spec in enumerate(stages, start=1):
        missing = [r for r in REQUIRES.get(spec.name, ()) if not have[r]]
        if missing:
            raise ConfigError(f"stage {i} '{spec.label}' needs {', '.join(missing)} from an earlier stage")
        if spec.name == "augment" and have["model"]:
            raise ConfigError(f"stage {i} 'augment' must run before acoustic model training")
        if spec.name in ("train_tri", "splice") and have["fmllr"]:
            raise ConfigError(f"stage {i} '{spec.label}' changes the feature space after fmllr")
        if spec.name in TRAINING_STAGES and scaled:
            raise ConfigError(f"stage {i} '{spec.label}' would retrain the decode-time model after scale_self_loops")
        scaled = scaled or spec.name == "scale_self_loops"
        if spec.name == "splice":
            if spliced:
                raise ConfigError(f"stage {i}: features are already spliced")
            spliced = True
        for provided in PROVIDES.get(spec.name, ()):
            have[provided] = True


def _resolve(base, value):
    if not value:
        return None
    path = Path(value)
    return path if path.is_absolute() else (base / path).resolve()


def load_experiment_config(path, jobs=None, oracle=False):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"experiment config not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    if "experiment" not in parser:
        raise ConfigError(f"{path}: missing [experiment] section")
    exp = parser["experiment"]
    if "seed" not in exp:
        raise ConfigError(f"{path}: [experiment] seed is required")
    try:
        seed = int(exp["seed"])
        silence_prob = float(exp.get("silence_prob", CONFIG.SILENCE_PROB))
        jobs = int(exp.get("jobs", CONFIG.JOBS)) if jobs is None else int(jobs)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e
    base = path.parent.resolve()
    for key in ("manifest", "lexicon", "phones"):
        if not exp.get(key):
            raise ConfigError(f"{path}: [experiment] {key} is required")
    params = {section: dict(parser[section]) for section in parser.sections()}
    if oracle:
        params.setdefault("decode", {})["oracle"] = "true"
    config = ExperimentConfig(
        path=path,
        name=exp.get("name", path.stem),
        seed=seed,
        stages=parse_stages(exp.get("stages", "")),
        params=params,
        manifest=_resolve(base, exp["manifest"]),
        lexicon=_resolve(base, exp["lexicon"]),
        phones=_resolve(base, exp["phones"]),
        output_dir=_resolve(base, exp.get("output_dir", "exp")),
        lm_text=_resolve(base, exp.get("lm_text")),
        lm=_resolve(base, exp.get("lm")),
        cmvn=exp.get("cmvn", "utterance"),
        silence_prob=silence_prob,
        jobs=max(1, jobs),
    )
    if config.cmvn not in ("utterance", "singer"):
        raise ConfigError(f"{path}: cmvn must be 'utterance' or 'singer', got '{config.cmvn}'")
    for label, p in (("manifest", config.manifest), ("lexicon", config.lexicon), ("phones", config.phones)):
        if not p.exists():
            raise ConfigError(f"{path}: {label} file not found: {p}")
    names = [s.name for s in config.stages]
    if "train_lm" in names and (config.lm_text is None or not config.lm_text.exists()):
        raise ConfigError(f"{path}: train_lm needs an existing lm_text file")
    if config.lm is not None and not config.lm.exists():
        raise ConfigError(f"{path}: language model not found: {config.lm}")
    validate_stages(config.stages, lm_available=config.lm is not None)
    for spec in config.stages:
        stage_arguments(spec, config)
    return config


def _speed_factors(values):
    factors = []
    for v in values:
        if v == "3fold":
            factors.extend(CONFIG.SPEED_FACTORS_3FOLD)
        elif v == "5fold":
            factors.extend(CONFIG.SPEED_FACTORS_5FOLD)
        else:
            factors.append(float(v))
    return tuple(factors)


def stage_arguments(spec, config):
    """Typed arguments of one stage; inline call arguments take precedence over the stage's section."""
    name, args = spec.name, spec.args
    try:
        if name == "fmllr":
            level = args[0] if args else config.get("fmllr", "level", "fragment", str)
            return {"level": AdaptationLevel(level).value}
        if name == "sat":
            rounds = int(args[0]) if args else config.get("sat", "rounds", 2, int)
            if rounds < 1:
                raise ValueError(f"sat needs at least one round, got {rounds}")
            return {"rounds": rounds}
        if name == "augment":
            values = args or tuple(config.get("augment", "factors", "3fold", str).split(","))
            factors = _speed_factors(v.strip() for v in values)
            if len(set(factors)) != len(factors):
                raise ValueError(f"duplicate speed factors {factors}")
            if any(f <= 0 for f in factors):
                raise ValueError(f"speed factors must be positive, got {factors}")
            return {"factors": factors}
        if name == "extend_lexicon":
            max_vowels = int(args[0]) if args else config.get(name, "max_vowels", CONFIG.MAX_PROLONGED_VOWELS, int)
            return {"max_vowels": max_vowels}
        if name == "scale_self_loops":
            r = float(args[0]) if args else config.get(name, "r", CONFIG.SELF_LOOP_SCALE)
            if r <= 0:
                raise ValueError(f"self-loop scale must be positive, got {r}")
            return {"r": r, "vowels_only": config.get(name, "vowels_only", True, bool)}
        if name == "splice":
            if args and len(args) != 2:
                raise ValueError("splice takes (left, right)")
            left, right = (int(a) for a in args) if args else (CONFIG.SPLICE_LEFT, CONFIG.SPLICE_RIGHT)
            return {"left": left, "right": right}
        if name == "train_tri":
            return {"leaves": int(args[0]) if args else config.get(name, "leaves", 2000, int)}
        if args:
            raise ValueError(f"stage '{name}' takes no inline arguments")
        return {}
    except ValueError as e:
        raise ConfigError(f"stage '{spec.label}': {e}") from e


def augment_corpus(manifest, factors, audio_dir, split="train"):
    """Adds one speed-perturbed copy of every training fragment per factor other than 1."""
    if split != "train":
        raise ValidationError(f"only the train split may be augmented, got '{split}'")
    factors = tuple(float(a) for a in factors)
    if len(set(factors)) != len(factors):
        raise ValidationError(f"duplicate speed factors {factors}")
    extras = [a for a in factors if a != 1.0]
    if not extras:
        return manifest
    originals = manifest.split("train")
    new = []
    for alpha in extras:
        for fr in originals:
            fragment_id = f"{fr.fragment_id}#sp{alpha:g}"
            wave = speed_perturb(read_wav(fr.audio_path), alpha)
            path = write_wav(wave, Path(audio_dir) / f"{fragment_id}.wav")
            new.append(replace(fr, fragment_id=fragment_id, audio_path=Path(path), duration=wave.duration))
    logger.info(f"Speed perturbation {extras}: {len(originals)} -> {len(originals) + len(new)} train fragments")
    return CorpusManifest(manifest.fragments + tuple(new), manifest.sample_rate)


def prepare_state(config):
    manifest = load_manifest(config.manifest)
    validate_durations(manifest)
    lexicon = load_lexicon(config.lexicon, config.phones)
    oov = lexicon.oov(w.upper() for fr in manifest.fragments for w in fr.transcript)
    if oov:
        logger.warning(f"{len(oov)} transcript word(s) missing from the lexicon: {', '.join(oov[:10])}")
    features = corpus_features(manifest.fragments, cmvn=config.cmvn, jobs=config.jobs)
    lm = read_arpa(config.lm) if config.lm is not None else None
    return PipelineState(manifest, lexicon, lexicon, features, lm)


def _train_fragments(state):
    return [fr for fr in state.manifest.split("train") if fr.fragment_id in state.features]


def _adapted(state, fragment):
    feats = state.features[fragment.fragment_id]
    if state.transforms:
        t = state.transforms.get(group_key(fragment, state.fmllr_level))
        if t is not None:
            return apply_fmllr(t, feats)
    return feats


def _training_utterances(state, adapted=True):
    out = {}
    for fr in _train_fragments(state):
        alignment = state.alignments.get(fr.fragment_id)
        if alignment is None:
            continue
        feats = _adapted(state, fr) if adapted else state.features[fr.fragment_id]
        out[fr.fragment_id] = TrainingUtterance(feats.frames, alignment=alignment)
    return out


def _align_job(job):
    model, lexicon, fragment_id, transcript, feats, silence_prob, equal = job
    try:
        graph = compile_training_graph(transcript, lexicon, model, silence_prob)
        return equal_align(graph, feats.num_frames) if equal else viterbi_align(graph, feats, model)
    except (AlignmentInfeasibleError, LexiconError) as e:
        logger.warning(f"Alignment of {fragment_id} failed: {e}")
        return None


def _realign(state, config, equal=False):
    fragments = _train_fragments(state)
    jobs = [
        (state.model, state.lexicon, fr.fragment_id, fr.transcript, _adapted(state, fr), config.silence_prob, equal)
        for fr in fragments
    ]
    results = parallel_map(_align_job, jobs, config.jobs)
    state.alignments = {fr.fragment_id: a for fr, a in zip(fragments, results) if a is not None}
    if not state.alignments:
        raise SingalignRuntimeError("no training fragment could be aligned")
    state.generation += 1
    kind = "equal" if equal else "Viterbi"
    logger.info(f"Alignment generation {state.generation} ({kind}): {len(state.alignments)}/{len(fragments)} fragments")


def _train_iterations(state, config, model, section):
    iterations = config.get(section, "iterations", CONFIG.EM_ITERATIONS, int)
    realign_every = config.get(section, "realign_every", 1, int)
    num_gauss = config.get(section, "num_gauss", 0, int)
    for it in range(iterations):
        utts = list(_training_utterances(state).values())
        model, ll = em_iteration(model, utts, config.jobs)
        frames = sum(len(u.features) for u in utts)
        logger.info(f"{section} iteration {it + 1}/{iterations}: {ll / max(frames, 1):.4f} per frame")
        current = sum(s.num_components for s in model.states)
        if num_gauss > current and it == iterations // 2:
            model = split_mixtures(model, num_gauss)
        state.model = model
        if realign_every > 0 and it + 1 < iterations and (it + 1) % realign_every == 0:
            _realign(state, config)
    return model


def _run_train_mono(state, args, config, workdir, tag):
    fragments = _train_fragments(state)
    state.model = flat_start(state.lexicon.phones, [_adapted(state, fr) for fr in fragments])
    _realign(state, config, equal=True)
    _train_iterations(state, config, state.model, "train_mono")
    _realign(state, config)
    return [save_model(state.model, workdir / "final.mdl", tag, config.config_hash)]


def _retrain_triphone(state, config, workdir, tag, leaves):
    fragments = _train_fragments(state)
    mono = flat_start(state.lexicon.phones, [_adapted(state, fr) for fr in fragments])
    utts = list(_training_utterances(state).values())
    mono, _ = em_iteration(mono, utts, config.jobs)
    tri = build_triphone_tying(mono, utts, max_leaves=leaves)
    state.model = tri
    _train_iterations(state, config, tri, "train_tri")
    _realign(state, config)
    return [save_model(state.model, workdir / "final.mdl", tag, config.config_hash)]


def _run_realign(state, args, config, workdir, tag):
    _realign(state, config)
    path = workdir / "alignments.tsv"
    with open(path, "w", encoding="utf-8") as f:
        for fragment_id in sorted(state.alignments):
            segments = state.alignments[fragment_id].segments
            f.write(fragment_id + "\t" + " ".join(f"{p}:{s}-{e}" for p, s, e in segments) + "\n")
    return [path]


def _run_train_tri(state, args, config, workdir, tag):
    if any(f.stage == "I" for f in state.features.values()):
        state.features = {k: add_deltas(f) if f.stage == "I" else f for k, f in state.features.items()}
    return _retrain_triphone(state, config, workdir, tag, args["leaves"])


def _run_splice(state, args, config, workdir, tag):
    state.features = {k: splice(f, args["left"], args["right"]) for k, f in state.features.items()}
    return _retrain_triphone(state, config, workdir, tag, config.get("train_tri", "leaves", 2000, int))


def _run_fmllr(state, args, config, workdir, tag):
    utts = _training_utterances(state, adapted=False)
    state.transforms = estimate_group_transforms(state.model, utts, _train_fragments(state), args["level"])
    state.fmllr_level = args["level"]
    _realign(state, config)
    return [write_transforms(state.transforms, workdir / "train_transforms.txt")]


def _run_sat(state, args, config, workdir, tag):
    utts = _training_utterances(state, adapted=False)
    fragments = _train_fragments(state)
    model, transforms, trace = sat_retrain(state.model, utts, fragments, state.fmllr_level, args["rounds"], config.jobs)
    state.model, state.transforms = model, transforms
    _realign(state, config)
    trace_path = workdir / "sat_objective.tsv"
    trace_path.write_text(
        "round\tobjective\n" + "".join(f"{i + 1}\t{v:.6f}\n" for i, v in enumerate(trace)), encoding="utf-8"
    )
    return [
        trace_path,
        write_transforms(state.transforms, workdir / "train_transforms.txt"),
        save_model(state.model, workdir / "final.mdl", tag, config.config_hash),
    ]


def _run_augment(state, args, config, workdir, tag):
    state.manifest = augment_corpus(state.manifest, args["factors"], workdir / "audio")
    state.features = corpus_features(state.manifest.fragments, cmvn=config.cmvn, jobs=config.jobs)
    return [save_manifest(state.manifest, workdir / "manifest.tsv")]


def _run_extend_lexicon(state, args, config, workdir, tag):
    state.lexicon = extend_prolonged_vowels(state.lexicon, args["max_vowels"])
    return [write_lexicon(state.lexicon, workdir / "lexicon.txt")]


def _run_scale_self_loops(state, args, config, workdir, tag):
    state.model = scale_model_loops(state.model, args["r"], args["vowels_only"])
    return [save_model(state.model, workdir / "final.mdl", tag, config.config_hash)]


def _run_train_lm(state, args, config, workdir, tag):
    stops = [p for p in config.get("train_lm", "stop_patterns", "", str).split(",") if p.strip()]
    corpus = normalize_lyrics(config.lm_text.read_text(encoding="utf-8"), stops, config.lm_text.stem)
    order = config.get("train_lm", "order", CONFIG.LM_ORDER, int)
    lm = train_trigram(corpus, KneserNeyConfig(order, config.jobs))
    threshold = config.get("train_lm", "prune", 0.0)
    if threshold > 0:
        lm = prune(lm, threshold)
    state.lm = lm
    arpa = write_arpa(lm, workdir / "lm.arpa")
    normalized = write_corpus(corpus, workdir / "corpus.txt")
    test = [tuple(w.upper() for w in fr.transcript) for fr in state.manifest.split("test") if fr.transcript]
    stats_path = workdir / "lm_stats.tsv"
    lines = ["order\tngrams\tppl\toov_rate"]
    counts = ",".join(str(c) for c in lm.counts())
    if test:
        stats = perplexity(lm, TextCorpus(tuple(test), "test"))
        lines.append(f"{lm.order}\t{counts}\t{stats['ppl']:.4f}\t{100.0 * stats['oov_rate']:.4f}")
        logger.info(f"LM perplexity on test transcripts {stats['ppl']:.2f}, OOV {100.0 * stats['oov_rate']:.2f}%")
    else:
        lines.append(f"{lm.order}\t{counts}\t-\t-")
    stats_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [arpa, normalized, stats_path]


def _decode_job(job):
    graph, feats, model, cfg = job
    return decode(graph, feats, model, cfg)


def _decode_all(graph, features, model, cfg, jobs):
    ids = sorted(features)
    hyps = parallel_map(_decode_job, [(graph, features[i], model, cfg) for i in ids], jobs)
    return dict(zip(ids, hyps))


def _run_decode(state, args, config, workdir, tag):
    cfg = DecodeConfig(
        beam=config.get("decode", "beam", CONFIG.BEAM),
        max_active=config.get("decode", "max_active", CONFIG.MAX_ACTIVE),
        acoustic_scale=config.get("decode", "acoustic_scale", CONFIG.ACOUSTIC_SCALE),
    )
    graph = build_decode_graph(state.lexicon, state.lm, state.model, config.silence_prob)
    test = [fr for fr in state.manifest.split("test") if fr.fragment_id in state.features]
    feats = {fr.fragment_id: state.features[fr.fragment_id] for fr in test}
    hyps = _decode_all(graph, feats, state.model, cfg, config.jobs)
    artifacts = []
    if state.fmllr_level:
        oracle = config.get("decode", "oracle", False, bool)
        transcripts = {fr.fragment_id: fr.transcript if oracle else hyps[fr.fragment_id].words for fr in test}
        logger.info(f"Test-time fMLLR ({state.fmllr_level}, {'oracle' if oracle else 'two-pass'} supervision)")
        adapted, transforms = adapt_features(
            state.model, state.lexicon, feats, transcripts, test, state.fmllr_level, config.silence_prob
        )
        hyps = _decode_all(graph, adapted, state.model, cfg, config.jobs)
        artifacts.append(write_transforms(transforms, workdir / "test_transforms.txt"))
    failed = sorted(k for k, h in hyps.items() if h.failed)
    if failed:
        logger.warning(f"{len(failed)} fragment(s) produced no hypothesis: {', '.join(failed[:10])}")
    state.hypotheses = hyps
    shift = next(iter(feats.values())).frame_shift if feats else CONFIG.SHIFT_S
    artifacts.append(write_hypotheses(hyps, workdir / "hyp.txt"))
    artifacts.append(write_trace(hyps, workdir / "trace.tsv", shift))
    return artifacts


def _run_score(state, args, config, workdir, tag):
    hyps = state.hypotheses
    refs = {k: state.manifest[k].transcript for k in hyps}
    report = score_corpus(
        refs,
        {k: h.words for k, h in hyps.items()},
        state.manifest,
        state.base_lexicon,
        {k: h.word_phones for k, h in hyps.items()},
    )
    write_report(report, workdir)
    w = report.words
    state.results.append(
        {
            "experiment": config.name,
            "step": tag,
            "stages": " > ".join(state.history),
            "ref_words": w.ref_length,
            "sub": w.substitutions,
            "del": w.deletions,
            "ins": w.insertions,
            "wer": f"{report.wer:.2f}",
            "per": "-" if report.per is None else f"{report.per:.2f}",
        }
    )
    logger.info(f"{tag}: WER {report.wer:.2f}% over {w.ref_length} words")
    return [workdir / "summary.tsv", workdir / "utterances.tsv", workdir / "alignments.txt"]


STAGES = {
    "train_mono": _run_train_mono,
    "realign": _run_realign,
    "train_tri": _run_train_tri,
    "splice": _run_splice,
    "fmllr": _run_fmllr,
    "sat": _run_sat,
    "augment": _run_augment,
    "extend_lexicon": _run_extend_lexicon,
    "scale_self_loops": _run_scale_self_loops,
    "train_lm": _run_train_lm,
    "decode": _run_decode,
    "score": _run_score,
}


def _save_snapshot(state, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        pickle.dump(state, f, protocol=pickle.HIGHEST_PROTOCOL)
    return path


def _load_snapshot(path):
    try:
        with open(path, "rb") as f:
            return pickle.load(f)
    except (OSError, pickle.UnpicklingError, EOFError) as e:
        raise SingalignRuntimeError(f"cannot restore pipeline state from {path}: {e}") from e


def write_results(rows, path):
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(RESULT_COLUMNS) + "\n")
        for row in rows:
            f.write("\t".join(str(row[c]) for c in RESULT_COLUMNS) + "\n")
    return path


def run_pipeline(config_path, jobs=None, force=False, oracle=False):
    config = load_experiment_config(config_path, jobs, oracle)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    ledger = StateManager(out / "ledger.json")
    ledger.set("experiment", {"name": config.name, "seed": config.seed, "config_hash": config.config_hash})
    key = config.input_hash(load_manifest(config.manifest))
    names = [f"{i + 1:02d}_{spec.name}" for i, spec in enumerate(config.stages)]
    logger.info(f"Experiment '{config.name}' (seed {config.seed}): {len(names)} stage(s) -> {out}")
    state, snapshot, ran = None, None, 0
    for i, spec in enumerate(config.stages):
        name = names[i]
        key = text_sha256(key + "\n" + config.stage_signature(spec))
        workdir = out / name
        snap = workdir / "state.pkl"
        if not force and ledger.is_current(name, key):
            logger.info(f"Stage {name} ({spec.label}) unchanged; skipped")
            state, snapshot = None, snap
            continue
        if state is None:
            state = _load_snapshot(snapshot) if snapshot is not None else prepare_state(config)
        ledger.forget_from(names[i:])
        workdir.mkdir(parents=True, exist_ok=True)
        logger.info(f"Stage {name}: {spec.label}")
        try:
            artifacts = STAGES[spec.name](state, stage_arguments(spec, config), config, workdir, name)
        except Exception as e:
            logger.error(f"Stage {name} ({spec.label}) failed: {e}; partial outputs kept in {workdir}")
            raise StageError(name, e) from e
        state.history.append(spec.label)
        artifacts.append(_save_snapshot(state, snap))
        ledger.record_stage(name, key, config.config_hash, artifacts)
        snapshot, ran = snap, ran + 1
    if state is None:
        state = _load_snapshot(snapshot)
    results = write_results(state.results, out / "results.tsv")
    logger.info(f"Experiment '{config.name}' finished: {ran} stage(s) run, {len(names) - ran} skipped; {results}")
    return out
