import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

from loguru import logger

from config import CONFIG
from exceptions import ArpaFormatError, ValidationError
from utils import parallel_map

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
NEVER = -99.0

BRACKETED = re.compile(r"\[[^\]]*\]")
WORD = re.compile(r"[^\W_]+(?:'[^\W_]+)*")
DISCOUNT_FLOOR = 0.01


@dataclass(frozen=True)
class TextCorpus:
    sentences: tuple
    source: str = "lyrics"

    def __post_init__(self):
        sentences = tuple(tuple(s) for s in self.sentences)
        if any(not s for s in sentences):
            raise ValidationError(f"corpus '{self.source}' contains an empty sentence")
        object.__setattr__(self, "sentences", sentences)

    def __len__(self):
        return len(self.sentences)

    @property
    def num_tokens(self):
        return sum(len(s) for s in self.sentences)


@dataclass(frozen=True)
class KneserNeyConfig:
    order: int = CONFIG.LM_ORDER
    jobs: int = 1


@dataclass
class NgramModel:
    order: int
    probs: list
    backoffs: list = field(default_factory=list)

    def __post_init__(self):
        if self.order < 1 or len(self.probs) != self.order:
            raise ValidationError(f"model of order {self.order} needs {self.order} probability tables")
        while len(self.backoffs) < self.order:
            self.backoffs.append({})

    @property
    def vocab(self):
        return {g[0] for g in self.probs[0]}

    @property
    def predictable(self):
        return sorted(w for w in self.vocab if w not in (BOS, UNK))

    def counts(self):
        return [len(t) for t in self.probs]

    @cached_property
    def children(self):
        """history -> ((word, log10 prob), ...) for every explicit n-gram."""
        out = defaultdict(list)
        for table in self.probs:
            for ngram, logp in table.items():
                out[ngram[:-1]].append((ngram[-1], logp))
        return {h: tuple(sorted(v)) for h, v in out.items()}

    def in_vocab(self, word):
        return (word,) in self.probs[0] and word not in (BOS, UNK)

    def backoff(self, history):
        if not history:
            return 0.0
        return self.backoffs[len(history) - 1].get(tuple(history), 0.0)

    def score(self, word, context=()):
        """log10 P(word | context) with ARPA backoff; None for out-of-vocabulary words."""
        if (word,) not in self.probs[0]:
            return None
        context = tuple(context)[-(self.order - 1) :] if self.order > 1 else ()
        total = 0.0
        while True:
            logp = self.probs[len(context)].get(context + (word,))
            if logp is not None:
                return total + logp
            total += self.backoff(context)
            context = context[1:]

    def sentence_logprob(self, words):
        context = (BOS,)
        logprob, scored, oov = 0.0, 0, 0
        for word in tuple(words) + (EOS,):
            if word != EOS and not self.in_vocab(word):
                oov += 1
            else:
                logprob += self.score(word, context)
                scored += 1
            context = (context + (word,))[-max(self.order - 1, 1) :]
        return logprob, scored, oov

    def copy(self):
        return NgramModel(self.order, [dict(t) for t in self.probs], [dict(t) for t in self.backoffs])


def normalize_lyrics(raw, stop_patterns=(), source="lyrics"):
    stops = [re.compile(p, re.IGNORECASE) for p in stop_patterns]
    sentences = []
    for line in raw.splitlines():
        line = BRACKETED.sub(" ", line)
        for pattern in stops:
            line = pattern.sub(" ", line)
        tokens = WORD.findall(line.upper())
        if tokens:
            sentences.append(tuple(tokens))
    if not sentences:
        logger.warning(f"Normalized corpus '{source}' is empty")
    return TextCorpus(tuple(sentences), source)


def write_corpus(corpus, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(" ".join(s) + "\n" for s in corpus.sentences), encoding="utf-8")
    return path


def read_corpus(path, source=None):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return TextCorpus(tuple(tuple(line.split()) for line in lines if line.split()), source or Path(path).stem)


def count_ngrams(job):
    sentences, order = job
    counts = Counter()
    for sentence in sentences:
        padded = (BOS,) + tuple(sentence) + (EOS,)
        for n in range(1, order + 1):
            for i in range(len(padded) - n + 1):
                counts[padded[i : i + n]] += 1
    return counts


def _split_orders(raw, order):
    by_order = [dict() for _ in range(order)]
    for ngram, count in raw.items():
        by_order[len(ngram) - 1][ngram] = count
    return by_order


def _adjusted_counts(by_order):
    """Raw counts at the top order and for <s>-initial n-grams, continuation counts elsewhere."""
    order = len(by_order)
    adjusted = [None] * order
    adjusted[order - 1] = dict(by_order[order - 1])
    for n in range(order - 1, 0, -1):
        continuation = Counter(g[1:] for g in by_order[n])
        adjusted[n - 1] = {
            g: (c if g[0] == BOS else continuation[g]) for g, c in by_order[n - 1].items() if g != (BOS,)
        }
    adjusted[0].pop((BOS,), None)
    return adjusted


def _discounts(counts):
    """Modified KN D1, D2, D3+; None when some count-of-count n1..n4 is missing."""
    coc = Counter(c for c in counts.values() if c <= 4)
    nk = [coc.get(k, 0) for k in range(1, 5)]
    if not any(nk):
        # every count is above four: nothing is rare, discount as little as allowed
        return [DISCOUNT_FLOOR] * 3
    if min(nk) == 0:
        return None
    y = nk[0] / (nk[0] + 2.0 * nk[1])
    discounts = []
    for k in range(1, 4):
        d = k - (k + 1) * y * nk[k] / nk[k - 1]
        discounts.append(min(max(d, DISCOUNT_FLOOR), float(k)))
    return discounts


def _discount(discounts, count):
    return discounts[min(count, 3) - 1]


def _add_one_table(raw_counts, words):
    """(c(h, w) + 1) / (c(h) + V) for every predictable word after every seen history."""
    totals = defaultdict(int)
    for g, c in raw_counts.items():
        totals[g[:-1]] += c
    size = len(words)
    return {h + (w,): (raw_counts.get(h + (w,), 0) + 1) / (total + size) for h, total in totals.items() for w in words}


def train_trigram(corpus, cfg=KneserNeyConfig()):
    if not len(corpus):
        raise ValidationError("cannot train a language model on an empty corpus")
    order = cfg.order
    shards = [corpus.sentences[i :: max(cfg.jobs, 1)] for i in range(max(cfg.jobs, 1))]
    raw = sum(parallel_map(count_ngrams, [(s, order) for s in shards], cfg.jobs), Counter())
    by_order = _split_orders(raw, order)
    adjusted = _adjusted_counts(by_order)
    words = sorted(g[0] for g in adjusted[0])

    linear = []
    backoffs = [dict() for _ in range(order)]
    for n in range(1, order + 1):
        counts = adjusted[n - 1]
        discounts = _discounts(counts)
        if discounts is None:
            logger.warning(f"Too few counts for order-{n} discount estimation; using add-one smoothing")
            observed = {g: c for g, c in by_order[n - 1].items() if g != (BOS,)}
            table = _add_one_table(observed, words)
            if n > 1:
                for h in {g[:-1] for g in observed}:
                    backoffs[n - 2][h] = 0.0
            linear.append(table)
            continue
        totals, mass = defaultdict(int), defaultdict(float)
        for g, c in counts.items():
            totals[g[:-1]] += c
            mass[g[:-1]] += _discount(discounts, c)
        gamma = {h: mass[h] / totals[h] for h in totals}
        table = {}
        if n == 1:
            uniform = 1.0 / len(counts)
            for g, c in counts.items():
                table[g] = (c - _discount(discounts, c)) / totals[()] + gamma[()] * uniform
        else:
            lower = linear[n - 2]
            for g, c in counts.items():
                table[g] = (c - _discount(discounts, c)) / totals[g[:-1]] + gamma[g[:-1]] * lower[g[1:]]
            for h, value in gamma.items():
                backoffs[n - 2][h] = math.log10(value)
        linear.append(table)

    probs = [{g: math.log10(p) for g, p in sorted(t.items())} for t in linear]
    probs[0][(BOS,)] = NEVER
    probs[0][(UNK,)] = NEVER
    model = NgramModel(order, probs, backoffs)
    logger.info(f"Trained {order}-gram model on {len(corpus)} sentences: counts {model.counts()}")
    return model


def _history_prob(model, history):
    logp = 0.0
    for i, word in enumerate(history):
        if i == 0 and word == BOS:
            continue
        logp += model.score(word, history[:i])
    return 10.0**logp


def entropy_increase(model):
    """Relative entropy (nats) caused by removing each n-gram of order >= 2 alone."""
    deltas = {}
    for n in range(2, model.order + 1):
        by_history = defaultdict(list)
        for g in model.probs[n - 1]:
            by_history[g[:-1]].append(g)
        for h, grams in by_history.items():
            lower = h[1:]
            p_seen = sum(10.0 ** model.probs[n - 1][g] for g in grams)
            q_seen = sum(10.0 ** model.score(g[-1], lower) for g in grams)
            num = max(1.0 - p_seen, 0.0)
            den = max(1.0 - q_seen, 0.0)
            bow = 10.0 ** model.backoff(h)
            p_h = _history_prob(model, h)
            for g in grams:
                p = 10.0 ** model.probs[n - 1][g]
                q = 10.0 ** model.score(g[-1], lower)
                new_bow = (num + p) / (den + q)
                delta = p * (math.log(new_bow * q) - math.log(p))
                if num > 0:
                    delta += num * (math.log(new_bow) - math.log(bow))
                deltas[g] = -p_h * delta
    return deltas


def _recompute_backoffs(model):
    for n in range(1, model.order):
        children = defaultdict(list)
        for g in model.probs[n]:
            children[g[:-1]].append(g[-1])
        table = {}
        for h, words in children.items():
            num = 1.0 - sum(10.0 ** model.probs[n][h + (w,)] for w in words)
            den = 1.0 - sum(10.0 ** model.score(w, h[1:]) for w in words)
            table[h] = math.log10(max(num, 1e-12) / max(den, 1e-12))
        model.backoffs[n - 1] = table
        model.__dict__.pop("children", None)
    return model


def prune_ngrams(model, removed):
    """Drops the given n-grams (order >= 2) unless they are histories of kept longer n-grams."""
    removed = set(removed)
    probs = [dict(t) for t in model.probs]
    for n in range(model.order, 1, -1):
        kept_histories = {g[:-1] for g in probs[n]} if n < model.order else set()
        for g in list(probs[n - 1]):
            if g in removed and g not in kept_histories:
                del probs[n - 1][g]
    pruned = NgramModel(model.order, probs, [dict(t) for t in model.backoffs])
    return _recompute_backoffs(pruned)


def prune(model, threshold):
    if threshold < 0:
        raise ValidationError(f"pruning threshold must be >= 0, got {threshold}")
    if threshold == 0:
        return model.copy()
    deltas = entropy_increase(model)
    pruned = prune_ngrams(model, [g for g, d in deltas.items() if d < threshold])
    logger.info(f"Pruned with threshold {threshold:g}: counts {model.counts()} -> {pruned.counts()}")
    return pruned


def perplexity(model, test):
    logprob, scored, oov = 0.0, 0, 0
    for sentence in test.sentences:
        lp, n, o = model.sentence_logprob(sentence)
        logprob += lp
        scored += n
        oov += o
    tokens = test.num_tokens
    ppl = 10.0 ** (-logprob / scored) if scored else float("inf")
    return {
        "ppl": ppl,
        "oov_rate": oov / tokens if tokens else 0.0,
        "oov_count": oov,
        "token_count": tokens,
        "logprob": logprob,
    }


def probability_mass(model, history):
    return sum(10.0 ** model.score(w, history) for w in model.predictable)


def write_arpa(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n\\data\\\n")
        for n, table in enumerate(model.probs, start=1):
            f.write(f"ngram {n}={len(table)}\n")
        for n, table in enumerate(model.probs, start=1):
            f.write(f"\n\\{n}-grams:\n")
            backoffs = model.backoffs[n - 1] if n < model.order else {}
            for g in sorted(table):
                line = f"{table[g]:.7f}\t{' '.join(g)}"
                if g in backoffs:
                    line += f"\t{backoffs[g]:.7f}"
                f.write(line + "\n")
        f.write("\n\\end\\\n")
    return path


def read_arpa(path):
    lines = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [line for line in lines if line]
    if "\\data\\" not in lines:
        raise ArpaFormatError(f"{path}: missing \\data\\ section")
    pos = lines.index("\\data\\") + 1
    declared = {}
    while pos < len(lines) and lines[pos].startswith("ngram "):
        n, count = lines[pos][len("ngram ") :].split("=")
        declared[int(n)] = int(count)
        pos += 1
    if not declared or sorted(declared) != list(range(1, len(declared) + 1)):
        raise ArpaFormatError(f"{path}: malformed ngram count header")
    order = len(declared)
    probs = [dict() for _ in range(order)]
    backoffs = [dict() for _ in range(order)]
    current = None
    for line in lines[pos:]:
        if line == "\\end\\":
            break
        match = re.fullmatch(r"\\(\d+)-grams:", line)
        if match:
            current = int(match.group(1))
            if current not in declared:
                raise ArpaFormatError(f"{path}: undeclared section {line}")
            continue
        if current is None:
            raise ArpaFormatError(f"{path}: entry outside any n-gram section: {line}")
        parts = line.split()
        if len(parts) not in (current + 1, current + 2):
            raise ArpaFormatError(f"{path}: malformed {current}-gram line: {line}")
        try:
            ngram = tuple(parts[1 : current + 1])
            probs[current - 1][ngram] = float(parts[0])
            if len(parts) == current + 2:
                backoffs[current - 1][ngram] = float(parts[-1])
        except ValueError as e:
            raise ArpaFormatError(f"{path}: bad number in line: {line}") from e
    else:
        raise ArpaFormatError(f"{path}: missing \\end\\ marker")
    for n, count in declared.items():
        if len(probs[n - 1]) != count:
            raise ArpaFormatError(f"{path}: ngram {n}={count} declared but {len(probs[n - 1])} entries found")
    return NgramModel(order, probs, backoffs)
