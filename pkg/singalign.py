import argparse
import pickle
import sys
from pathlib import Path

from loguru import logger

from am import dump_model_text, load_model, save_model, scale_self_loops
from config import CONFIG
from corpus import load_manifest, save_manifest, screen_songs
from decoder import DecodeConfig, build_decode_graph, decode, write_hypotheses, write_trace
from exceptions import SingalignError, ValidationError
from frontend import (
    add_deltas,
    corpus_features,
    dump_feature_archive,
    extract_pitch,
    pitch_histogram,
    read_feature_archive,
    read_wav,
    splice,
    write_feature_archive,
    write_histogram,
)
from lexicon import extend_prolonged_vowels, load_lexicon, write_lexicon
from lm import (
    KneserNeyConfig,
    normalize_lyrics,
    perplexity,
    prune,
    read_arpa,
    read_corpus,
    train_trigram,
    write_arpa,
    write_corpus,
)
from pipeline import run_pipeline
from score import group_rates, read_transcripts, score_corpus, write_report
from synthetic import write_synthetic_corpus


def configure_logging(level=CONFIG.LOGGING_LEVEL, log_file=CONFIG.LOG_FILE):
    logger.remove()
    logger.add(sys.stderr, level=level, format="{time:HH:mm:ss} | {level: <8} | {message}")
    if log_file:
        logger.add(log_file, level="DEBUG", rotation="10 MB", retention=5)


def cmd_run(args):
    out = run_pipeline(args.config, jobs=args.jobs, force=args.force, oracle=args.oracle)
    print(out / "results.tsv")


def cmd_synth(args):
    paths = write_synthetic_corpus(
        args.out,
        seed=args.seed,
        vocabulary=args.vocabulary,
        test_vowel_stretch=args.test_vowel_stretch,
    )
    print(paths["config"])


def cmd_features(args):
    manifest = load_manifest(args.manifest)
    fragments = manifest.split(args.split) if args.split else list(manifest.fragments)
    features = corpus_features(fragments, cmvn=args.cmvn, jobs=args.jobs)
    if args.deltas:
        features = {k: add_deltas(f) for k, f in features.items()}
    if args.splice:
        features = {k: splice(f, *args.splice) for k, f in features.items()}
    write_feature_archive(args.out, features)
    if args.text:
        Path(args.text).write_text(dump_feature_archive(args.out), encoding="utf-8")
    logger.info(f"Wrote {len(features)} feature matrices to {args.out}")


def cmd_pitch(args):
    if args.manifest:
        manifest = load_manifest(args.manifest)
        fragments = manifest.split(args.split) if args.split else manifest.fragments
        paths = [fr.audio_path for fr in fragments]
    else:
        paths = args.audio
    if not paths:
        raise ValidationError("pitch needs --manifest or at least one audio file")
    values = []
    for path in paths:
        values.extend(extract_pitch(read_wav(path)).voiced_f0().tolist())
    histogram = pitch_histogram(values, args.bin_width)
    write_histogram(histogram, args.out)
    mode = histogram.mode()
    mode = "n/a" if mode is None else f"{mode:g} Hz"
    logger.info(f"Pitch histogram over {histogram.total} voiced frames, mode {mode}")


def cmd_mkgraph(args):
    lexicon = load_lexicon(args.lexicon, args.phones)
    graph = build_decode_graph(lexicon, read_arpa(args.lm), load_model(args.model), args.silence_prob)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "wb") as f:
        pickle.dump(graph, f, protocol=pickle.HIGHEST_PROTOCOL)


def cmd_decode(args):
    model = load_model(args.model)
    with open(args.graph, "rb") as f:
        graph = pickle.load(f)
    cfg = DecodeConfig(args.beam, args.max_active, args.acoustic_scale)
    features = read_feature_archive(args.features)
    hyps = {key: decode(graph, feats, model, cfg) for key, feats in features.items()}
    write_hypotheses(hyps, args.out)
    if args.trace:
        shift = next(iter(features.values())).frame_shift if features else CONFIG.SHIFT_S
        write_trace(hyps, args.trace, shift)
    failed = sum(h.failed for h in hyps.values())
    logger.info(f"Decoded {len(hyps)} utterance(s), {failed} search failure(s)")


def cmd_score(args):
    refs = read_transcripts(args.ref)
    hyps = read_transcripts(args.hyp)
    manifest = load_manifest(args.manifest) if args.manifest else None
    if args.per_genre and manifest is None:
        raise ValidationError("--per-genre needs --manifest")
    lexicon = load_lexicon(args.lexicon, args.phones) if args.lexicon else None
    report = score_corpus(refs, hyps, manifest if args.per_genre else None, lexicon)
    if args.out:
        write_report(report, args.out)
    print(f"WER {report.wer:.2f}% ({report.words.errors}/{report.words.ref_length})")
    if report.per is not None:
        print(f"PER {report.per:.2f}%")
    for genre, sub in report.genres.items():
        print(f"  {genre}: WER {sub.wer:.2f}% over {len(sub.utterances)} fragment(s)")


def cmd_lm_train(args):
    text = Path(args.text).read_text(encoding="utf-8")
    corpus = normalize_lyrics(text, args.stop_pattern or (), Path(args.text).stem)
    if args.corpus_out:
        write_corpus(corpus, args.corpus_out)
    lm = train_trigram(corpus, KneserNeyConfig(args.order, args.jobs))
    if args.prune:
        lm = prune(lm, args.prune)
    write_arpa(lm, args.out)


def cmd_lm_prune(args):
    write_arpa(prune(read_arpa(args.lm), args.threshold), args.out)


def cmd_lm_ppl(args):
    lm = read_arpa(args.lm)
    if args.normalized:
        corpus = read_corpus(args.text, "test")
    else:
        corpus = normalize_lyrics(Path(args.text).read_text(encoding="utf-8"), source="test")
    stats = perplexity(lm, corpus)
    print(f"ppl {stats['ppl']:.4f}\toov_rate {100.0 * stats['oov_rate']:.4f}%\ttokens {stats['token_count']}")


def cmd_lexicon_extend(args):
    lexicon = load_lexicon(args.lexicon, args.phones)
    write_lexicon(extend_prolonged_vowels(lexicon, args.max_vowels), args.out)


def cmd_am_scale_loops(args):
    model = scale_self_loops(load_model(args.model), args.r, vowels_only=not args.all_phones)
    save_model(model, args.out, stage=f"scale_self_loops({args.r:g})")


def cmd_am_dump(args):
    text = dump_model_text(load_model(args.model))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")


def cmd_screen(args):
    manifest = load_manifest(args.manifest)
    refs = read_transcripts(args.ref)
    hyps = read_transcripts(args.hyp)
    report = score_corpus(refs, hyps)
    kept = screen_songs(manifest, group_rates(report, manifest, "song_id"), args.max_wer)
    save_manifest(kept, args.out)
    logger.info(f"Screening kept {len(kept)}/{len(manifest)} fragments")


class SingalignArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the invalid-input code; 2 stays reserved for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ValidationError.exit_code, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = SingalignArgumentParser(prog="singalign", description="GMM-HMM toolkit for sung lyrics recognition")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--force", action="store_true", help="rerun every stage")
    p.add_argument("--oracle", action="store_true", help="reference transcripts supervise test-time fMLLR")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="write a synthetic sine-tone corpus and experiment config")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocabulary", type=int, default=20)
    p.add_argument("--test-vowel-stretch", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="MFCC + CMVN features for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--cmvn", choices=("utterance", "singer"), default="utterance")
    p.add_argument("--deltas", action="store_true")
    p.add_argument("--splice", type=int, nargs=2, metavar=("LEFT", "RIGHT"))
    p.add_argument("--text", help="also write a text dump")
    p.add_argument("--jobs", type=int, default=CONFIG.JOBS)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("pitch", help="pitch histogram of audio files")
    p.add_argument("audio", nargs="*")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--bin-width", type=float, default=CONFIG.PITCH_BIN_HZ)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pitch)

    p = sub.add_parser("mkgraph", help="build a decoding graph")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--phones", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--silence-prob", type=float, default=CONFIG.SILENCE_PROB)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mkgraph)

    p = sub.add_parser("decode", help="decode a feature archive")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.add_argument("--beam", type=float, default=CONFIG.BEAM)
    p.add_argument("--max-active", type=int, default=CONFIG.MAX_ACTIVE)
    p.add_argument("--acoustic-scale", type=float, default=CONFIG.ACOUSTIC_SCALE)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="WER/PER of hypotheses against references")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--manifest")
    p.add_argument("--per-genre", action="store_true")
    p.add_argument("--lexicon")
    p.add_argument("--phones")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    lm = sub.add_parser("lm", help="language model tools").add_subparsers(dest="lm_command", required=True)
    p = lm.add_parser("train")
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--order", type=int, default=CONFIG.LM_ORDER)
    p.add_argument("--prune", type=float, default=0.0)
    p.add_argument("--stop-pattern", action="append")
    p.add_argument("--corpus-out", help="also write the normalized corpus")
    p.add_argument("--jobs", type=int, default=CONFIG.JOBS)
    p.set_defaults(func=cmd_lm_train)
    p = lm.add_parser("prune")
    p.add_argument("--lm", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lm_prune)
    p = lm.add_parser("ppl")
    p.add_argument("--lm", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--normalized", action="store_true", help="text is already one normalized sentence per line")
    p.set_defaults(func=cmd_lm_ppl)

    lex = sub.add_parser("lexicon", help="lexicon tools").add_subparsers(dest="lexicon_command", required=True)
    p = lex.add_parser("extend")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--phones", required=True)
    p.add_argument("--max-vowels", type=int, default=CONFIG.MAX_PROLONGED_VOWELS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lexicon_extend)

    am = sub.add_parser("am", help="acoustic model tools").add_subparsers(dest="am_command", required=True)
    p = am.add_parser("scale-loops")
    p.add_argument("--model", required=True)
    p.add_argument("--r", type=float, default=CONFIG.SELF_LOOP_SCALE)
    p.add_argument("--all-phones", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_am_scale_loops)
    p = am.add_parser("dump", help="text dump of a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_am_dump)

    p = sub.add_parser("screen", help="drop songs whose first-pass WER is too high")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--max-wer", type=float, default=95.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_screen)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging("DEBUG" if args.verbose else CONFIG.LOGGING_LEVEL)
    try:
        args.func(args)
    except SingalignError as e:
        logger.error(str(e))
        return e.exit_code
    except FileNotFoundError as e:
        logger.error(f"Missing file: {e.filename}")
        return ValidationError.exit_code
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        return 2
    except KeyboardInterrupt:
        logger.info("KeyboardInterrupt received, shutting down.")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
