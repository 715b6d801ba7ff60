from dataclasses import dataclass
from itertools import product
from pathlib import Path

from loguru import logger

from config import CONFIG
from exceptions import LexiconError

PHONE_CLASSES = ("vowel", "consonant", "silence")


@dataclass(frozen=True)
class Phone:
    symbol: str
    is_vowel: bool = False
    is_silence: bool = False

    @property
    def kind(self):
        if self.is_silence:
            return "silence"
        return "vowel" if self.is_vowel else "consonant"


@dataclass(frozen=True)
class Lexicon:
    entries: dict
    phones: dict

    def __post_init__(self):
        silences = [p.symbol for p in self.phones.values() if p.is_silence]
        if len(silences) != 1:
            raise LexiconError(f"phone table needs exactly one silence phone, found {len(silences)}")
        entries = {}
        for word, prons in self.entries.items():
            prons = tuple(tuple(p) for p in prons)
            if not prons or any(not p for p in prons):
                raise LexiconError(f"word '{word}' has no pronunciation")
            for pron in prons:
                unknown = [ph for ph in pron if ph not in self.phones]
                if unknown:
                    raise LexiconError(f"word '{word}' uses undeclared phone(s): {', '.join(unknown)}")
            entries[word] = prons
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, word):
        return word in self.entries

    def __getitem__(self, word):
        return self.entries[word]

    @property
    def silence(self):
        return next(p.symbol for p in self.phones.values() if p.is_silence)

    def words(self):
        return tuple(self.entries)

    def is_vowel(self, symbol):
        return self.phones[symbol].is_vowel

    def vowel_count(self, pron):
        return sum(1 for ph in pron if self.phones[ph].is_vowel)

    def base_pronunciation(self, word):
        return self.entries[word][0]

    def oov(self, words):
        return sorted({w for w in words if w not in self.entries})


def load_phone_table(path):
    phones = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 2 or parts[1] not in PHONE_CLASSES:
                raise LexiconError(f"{Path(path).name}:{lineno}: expected 'PHONE vowel|consonant|silence'")
            symbol, kind = parts
            if symbol in phones:
                raise LexiconError(f"{Path(path).name}:{lineno}: duplicate phone declaration '{symbol}'")
            phones[symbol] = Phone(symbol, kind == "vowel", kind == "silence")
    return phones


def load_lexicon(lexicon_path, phones_path):
    phones = load_phone_table(phones_path)
    entries = {}
    with open(lexicon_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            word, pron = parts[0].upper(), tuple(parts[1:])
            if not pron:
                raise LexiconError(f"{Path(lexicon_path).name}:{lineno}: word '{word}' has no pronunciation")
            undeclared = [ph for ph in pron if ph not in phones]
            if undeclared:
                raise LexiconError(
                    f"{Path(lexicon_path).name}:{lineno}: undeclared phone(s) {', '.join(undeclared)} in '{word}'"
                )
            prons = entries.setdefault(word, [])
            if pron in prons:
                logger.warning(f"Duplicate pronunciation for '{word}' removed: {' '.join(pron)}")
                continue
            prons.append(pron)
    lexicon = Lexicon(entries, phones)
    logger.info(f"Loaded lexicon: {len(lexicon)} words over {len(phones)} phones")
    return lexicon


def write_lexicon(lexicon, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for word, prons in lexicon.entries.items():
            for pron in prons:
                f.write(f"{word}\t{' '.join(pron)}\n")
    return path


def write_phone_table(phones, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{p.symbol}\t{p.kind}\n" for p in phones.values()), encoding="utf-8")
    return path


def _vowel_variants(lexicon, pron):
    options = [((ph,), (ph, ph)) if lexicon.is_vowel(ph) else ((ph,),) for ph in pron]
    for choice in product(*options):
        yield tuple(ph for group in choice for ph in group)


def extend_prolonged_vowels(lexicon, max_vowels=CONFIG.MAX_PROLONGED_VOWELS):
    entries = {}
    for word, prons in lexicon.entries.items():
        variants = []
        for pron in prons:
            if lexicon.vowel_count(pron) > max_vowels:
                variants.append(pron)
            else:
                variants.extend(_vowel_variants(lexicon, pron))
        entries[word] = list(dict.fromkeys(variants))
    extended = Lexicon(entries, lexicon.phones)
    before = sum(len(p) for p in lexicon.entries.values())
    after = sum(len(p) for p in extended.entries.values())
    logger.info(f"Extended lexicon: {before} -> {after} pronunciations (max_vowels={max_vowels})")
    return extended


def collapse_prolonged(phones, lexicon):
    """Drops every vowel that immediately repeats the previous phone."""
    out = []
    for ph in phones:
        if out and ph == out[-1] and lexicon.is_vowel(ph):
            continue
        out.append(ph)
    return tuple(out)
