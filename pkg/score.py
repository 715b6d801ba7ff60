from dataclasses import dataclass, field
from pathlib import Path

from loguru import logger

from exceptions import ValidationError
from lexicon import collapse_prolonged


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_length: int = 0

    def __add__(self, other):
        return ErrorCounts(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.ref_length + other.ref_length,
        )

    @property
    def errors(self):
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self):
        if self.ref_length == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return 100.0 * self.errors / self.ref_length


@dataclass(frozen=True)
class EditAlignment:
    counts: ErrorCounts
    pairs: tuple

    def __iter__(self):
        yield self.counts.substitutions
        yield self.counts.deletions
        yield self.counts.insertions
        yield self.pairs


@dataclass(frozen=True)
class UtteranceScore:
    fragment_id: str
    words: ErrorCounts
    alignment: tuple
    phones: ErrorCounts = None


@dataclass(frozen=True)
class EvalReport:
    utterances: tuple
    words: ErrorCounts
    phones: ErrorCounts = None
    genres: dict = field(default_factory=dict)

    @property
    def wer(self):
        return self.words.rate

    @property
    def per(self):
        return None if self.phones is None else self.phones.rate


def edit_align(ref, hyp):
    """Levenshtein alignment minimizing (errors, insertions + deletions); ties prefer S, then I, then D."""
    ref, hyp = tuple(ref), tuple(hyp)
    n, m = len(ref), len(hyp)
    big = n + m + 1
    gap = big + 1
    a = [r.casefold() for r in ref]
    b = [h.casefold() for h in hyp]
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for j in range(1, m + 1):
        cost[0][j] = j * gap
    for i in range(1, n + 1):
        cost[i][0] = i * gap
        row, prev = cost[i], cost[i - 1]
        for j in range(1, m + 1):
            diag = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else big)
            row[j] = min(diag, row[j - 1] + gap, prev[j] + gap)
    pairs = []
    i, j = n, m
    s = d = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + (0 if a[i - 1] == b[j - 1] else big):
            tag = "C" if a[i - 1] == b[j - 1] else "S"
            s += tag == "S"
            pairs.append((ref[i - 1], hyp[j - 1], tag))
            i, j = i - 1, j - 1
        elif j > 0 and cost[i][j] == cost[i][j - 1] + gap:
            ins += 1
            pairs.append((None, hyp[j - 1], "I"))
            j -= 1
        else:
            d += 1
            pairs.append((ref[i - 1], None, "D"))
            i -= 1
    pairs.reverse()
    return EditAlignment(ErrorCounts(s, d, ins, n), tuple(pairs))


def reference_phones(words, lexicon):
    phones = []
    for word in words:
        word = word.upper()
        if word not in lexicon:
            logger.warning(f"Reference word '{word}' has no pronunciation; skipped for PER")
            continue
        phones.extend(lexicon.base_pronunciation(word))
    return tuple(phones)


def hypothesis_phones(word_phones, lexicon):
    """Decoded phones per word, silence dropped and prolonged vowels collapsed inside each word."""
    out = []
    for phones in word_phones:
        out.extend(collapse_prolonged([p for p in phones if p != lexicon.silence], lexicon))
    return tuple(out)


def score_corpus(refs, hyps, manifest=None, lexicon=None, hyp_phones=None):
    missing_ref = sorted(set(hyps) - set(refs))
    if missing_ref:
        raise ValidationError(f"hypotheses without reference: {', '.join(missing_ref)}")
    missing_hyp = sorted(set(refs) - set(hyps))
    if missing_hyp:
        raise ValidationError(f"references without hypothesis: {', '.join(missing_hyp)}")
    utterances = []
    for fragment_id in sorted(refs):
        alignment = edit_align(refs[fragment_id], hyps[fragment_id])
        phones = None
        if lexicon is not None:
            if hyp_phones is not None and fragment_id in hyp_phones:
                hyp_seq = hypothesis_phones(hyp_phones[fragment_id], lexicon)
            else:
                hyp_seq = reference_phones(hyps[fragment_id], lexicon)
            phones = edit_align(reference_phones(refs[fragment_id], lexicon), hyp_seq).counts
        utterances.append(UtteranceScore(fragment_id, alignment.counts, alignment.pairs, phones))
    report = _pool(utterances, lexicon is not None)
    if manifest is not None:
        by_genre = {}
        for utt in utterances:
            if utt.fragment_id in manifest:
                for genre in manifest[utt.fragment_id].genres:
                    by_genre.setdefault(genre, []).append(utt)
        report = EvalReport(
            report.utterances,
            report.words,
            report.phones,
            {genre: _pool(utts, lexicon is not None) for genre, utts in sorted(by_genre.items())},
        )
    return report


def _pool(utterances, with_phones):
    words = ErrorCounts()
    phones = ErrorCounts() if with_phones else None
    for utt in utterances:
        words = words + utt.words
        if with_phones:
            phones = phones + utt.phones
    return EvalReport(tuple(utterances), words, phones)


def render_alignment(pairs):
    ref_row, hyp_row, tag_row = [], [], []
    for ref, hyp, tag in pairs:
        ref, hyp = ref if ref is not None else "*", hyp if hyp is not None else "*"
        width = max(len(ref), len(hyp), 1)
        ref_row.append(ref.ljust(width))
        hyp_row.append(hyp.ljust(width))
        tag_row.append(("" if tag == "C" else tag).ljust(width))
    return "\n".join(["REF: " + " ".join(ref_row), "HYP: " + " ".join(hyp_row), "     " + " ".join(tag_row)])


def _format_rate(counts):
    return "-" if counts is None else f"{counts.rate:.2f}"


def write_report(report, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = [("all", report)] + list(report.genres.items())
    with open(directory / "summary.tsv", "w", encoding="utf-8") as f:
        f.write("scope\tutterances\tref_words\tsub\tdel\tins\twer\tper\n")
        for scope, r in rows:
            w = r.words
            f.write(
                f"{scope}\t{len(r.utterances)}\t{w.ref_length}\t{w.substitutions}\t{w.deletions}\t{w.insertions}"
                f"\t{_format_rate(w)}\t{_format_rate(r.phones)}\n"
            )
    with open(directory / "utterances.tsv", "w", encoding="utf-8") as f:
        f.write("fragment_id\tref_words\tsub\tdel\tins\twer\tper\n")
        for utt in report.utterances:
            w = utt.words
            f.write(
                f"{utt.fragment_id}\t{w.ref_length}\t{w.substitutions}\t{w.deletions}\t{w.insertions}"
                f"\t{_format_rate(w)}\t{_format_rate(utt.phones)}\n"
            )
    with open(directory / "alignments.txt", "w", encoding="utf-8") as f:
        for utt in report.utterances:
            f.write(f"{utt.fragment_id}\n{render_alignment(utt.alignment)}\n\n")
    return directory


def read_transcripts(path):
    transcripts = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] in transcripts:
            raise ValidationError(f"{path}:{lineno}: duplicate id '{parts[0]}'")
        transcripts[parts[0]] = tuple(parts[1:])
    return transcripts


def group_rates(report, manifest, key="song_id"):
    """Pooled WER per manifest attribute (song, singer), e.g. for screening songs."""
    groups = {}
    for utt in report.utterances:
        group = getattr(manifest[utt.fragment_id], key)
        groups[group] = groups.get(group, ErrorCounts()) + utt.words
    return {group: counts.rate for group, counts in sorted(groups.items())}
