from dataclasses import dataclass, field
from pathlib import Path

import soundfile as sf
from loguru import logger

from config import CONFIG
from exceptions import ManifestError

SPLITS = ("train", "test")


@dataclass(frozen=True)
class FragmentMeta:
    fragment_id: str
    song_id: str
    singer_id: str
    genres: tuple
    split: str
    audio_path: Path
    transcript: tuple
    duration: float

    def __post_init__(self):
        if not self.genres:
            raise ManifestError(f"fragment {self.fragment_id} has no genre label")
        if self.split not in SPLITS:
            raise ManifestError(f"fragment {self.fragment_id}: unknown split '{self.split}'")
        if not self.duration > 0:
            raise ManifestError(f"fragment {self.fragment_id}: non-positive duration {self.duration}")


@dataclass(frozen=True)
class CorpusManifest:
    fragments: tuple
    sample_rate: int = CONFIG.SAMPLE_RATE
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for fragment in self.fragments:
            if fragment.fragment_id in index:
                raise ManifestError(f"duplicate fragment_id '{fragment.fragment_id}'")
            index[fragment.fragment_id] = fragment
        object.__setattr__(self, "_index", index)
        overlap = singer_overlap(self.fragments)
        if overlap:
            raise ManifestError(f"singer overlap between train and test: {', '.join(sorted(overlap))}")

    def __len__(self):
        return len(self.fragments)

    def __getitem__(self, fragment_id):
        return self._index[fragment_id]

    def __contains__(self, fragment_id):
        return fragment_id in self._index

    def split(self, name):
        return [f for f in self.fragments if f.split == name]

    def counts(self):
        return tuple(len(self.split(name)) for name in SPLITS)


def singer_overlap(fragments):
    train = {f.singer_id for f in fragments if f.split == "train"}
    test = {f.singer_id for f in fragments if f.split == "test"}
    return train & test


def _parse_line(line, lineno, base_dir):
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 7:
        raise ManifestError(f"line {lineno}: expected 7 tab-separated fields, got {len(parts)}")
    fragment_id, song_id, singer_id, genres, split, audio_path = (p.strip() for p in parts[:6])
    transcript = tuple(" ".join(parts[6:]).split())
    if not fragment_id or not song_id or not singer_id:
        raise ManifestError(f"line {lineno}: empty identifier field")
    genre_list = []
    for genre in genres.split(","):
        genre = genre.strip()
        if genre and genre not in genre_list:
            genre_list.append(genre)
    path = Path(audio_path)
    if not path.is_absolute():
        path = base_dir / path
    path = path.resolve()
    return fragment_id, song_id, singer_id, tuple(genre_list), split, path, transcript


def load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    fragments = []
    sample_rate = None
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fragment_id, song_id, singer_id, genres, split, audio_path, transcript = _parse_line(
                line, lineno, path.parent
            )
            if fragment_id in seen:
                raise ManifestError(f"line {lineno}: duplicate fragment_id '{fragment_id}'")
            seen.add(fragment_id)
            if not audio_path.exists():
                raise ManifestError(f"line {lineno}: missing audio file {audio_path}")
            try:
                info = sf.info(str(audio_path))
            except RuntimeError as e:
                raise ManifestError(f"line {lineno}: unreadable audio {audio_path}: {e}") from e
            if sample_rate is None:
                sample_rate = info.samplerate
            elif info.samplerate != sample_rate:
                raise ManifestError(
                    f"line {lineno}: sample rate {info.samplerate} differs from corpus rate {sample_rate}"
                )
            fragments.append(
                FragmentMeta(
                    fragment_id=fragment_id,
                    song_id=song_id,
                    singer_id=singer_id,
                    genres=genres,
                    split=split,
                    audio_path=audio_path,
                    transcript=transcript,
                    duration=info.frames / info.samplerate,
                )
            )
    manifest = CorpusManifest(tuple(fragments), sample_rate or CONFIG.SAMPLE_RATE)
    train, test = manifest.counts()
    logger.info(f"Loaded manifest {path.name}: {train} train / {test} test fragments")
    return manifest


def save_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("# fragment_id\tsong_id\tsinger_id\tgenres\tsplit\taudio_path\ttranscript\n")
        for fr in manifest.fragments:
            fields = [
                fr.fragment_id,
                fr.song_id,
                fr.singer_id,
                ",".join(fr.genres),
                fr.split,
                str(Path(fr.audio_path).resolve()),
                " ".join(fr.transcript),
            ]
            f.write("\t".join(fields) + "\n")
    return path


def validate_durations(manifest, min_s=CONFIG.MIN_FRAGMENT_S, max_s=CONFIG.MAX_FRAGMENT_S):
    warnings = []
    for fr in manifest.fragments:
        try:
            info = sf.info(str(fr.audio_path))
        except RuntimeError as e:
            raise ManifestError(f"unreadable audio for {fr.fragment_id}: {e}") from e
        duration = info.frames / info.samplerate
        if duration < min_s or duration > max_s:
            message = f"{fr.fragment_id}: duration {duration:.2f}s outside [{min_s}, {max_s}]"
            logger.warning(message)
            warnings.append(message)
    return warnings


def screen_songs(manifest, song_wer, max_wer=95.0):
    dropped = sorted(song for song, wer in song_wer.items() if wer > max_wer)
    for song in dropped:
        logger.info(f"Screening drops song {song} (WER {song_wer[song]:.2f}% > {max_wer}%)")
    drop = set(dropped)
    kept = tuple(f for f in manifest.fragments if f.song_id not in drop)
    return CorpusManifest(kept, manifest.sample_rate)
