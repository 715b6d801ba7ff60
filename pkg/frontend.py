from collections import Counter
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import soundfile as sf
from loguru import logger
from scipy.fft import dct
from scipy.signal import resample

from config import CONFIG
from exceptions import DimensionError, ValidationError
from utils import frame_signal, parallel_map

STAGES = ("I", "II", "III", "IV")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValidationError(f"waveform must be mono, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValidationError(f"invalid sample rate {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValidationError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureMatrix:
    frames: np.ndarray
    frame_shift: float = CONFIG.SHIFT_S
    stage: str = "I"

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise DimensionError(f"feature matrix must be 2-D, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValidationError("feature matrix contains non-finite values")
        if self.stage not in STAGES:
            raise ValidationError(f"unknown feature stage '{self.stage}'")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass
class CmvnStats:
    sum: np.ndarray
    sumsq: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, dim):
        return cls(np.zeros(dim), np.zeros(dim), 0)

    def accumulate(self, frames):
        frames = np.asarray(frames, dtype=np.float64)
        return CmvnStats(self.sum + frames.sum(axis=0), self.sumsq + (frames**2).sum(axis=0), self.count + len(frames))

    def merge(self, other):
        return CmvnStats(self.sum + other.sum, self.sumsq + other.sumsq, self.count + other.count)

    @property
    def dim(self):
        return len(self.sum)

    def mean(self):
        return self.sum / self.count

    def variance(self):
        mean = self.mean()
        return np.maximum(self.sumsq / self.count - mean**2, 0.0)


@dataclass(frozen=True)
class MfccConfig:
    window_s: float = CONFIG.WINDOW_S
    shift_s: float = CONFIG.SHIFT_S
    num_mel: int = CONFIG.NUM_MEL
    num_ceps: int = CONFIG.NUM_CEPS
    use_energy: bool = True
    preemphasis: float = CONFIG.PREEMPHASIS
    low_freq: float = 20.0
    high_freq: float = 0.0
    log_floor: float = CONFIG.LOG_FLOOR


@dataclass(frozen=True)
class PitchConfig:
    fmin: float = CONFIG.PITCH_FMIN
    fmax: float = CONFIG.PITCH_FMAX
    window_s: float = CONFIG.PITCH_WINDOW_S
    shift_s: float = CONFIG.PITCH_SHIFT_S
    voicing_threshold: float = CONFIG.PITCH_VOICING_THRESHOLD
    silence_rms: float = CONFIG.PITCH_SILENCE_RMS


@dataclass(frozen=True)
class PitchTrack:
    f0: np.ndarray
    voiced: np.ndarray
    frame_shift: float

    def voiced_f0(self):
        return self.f0[self.voiced]


@dataclass(frozen=True)
class PitchHistogram:
    bin_width: float
    bins: tuple = field(default_factory=tuple)

    @property
    def total(self):
        return sum(count for _, _, count in self.bins)

    def mode(self):
        if not self.bins:
            return None
        low, high, _ = max(self.bins, key=lambda b: (b[2], -b[0]))
        return 0.5 * (low + high)

    def to_tsv(self):
        lines = ["bin_low\tbin_high\tcount"]
        lines += [f"{low:g}\t{high:g}\t{count}" for low, high, count in self.bins]
        return "\n".join(lines) + "\n"


def read_wav(path):
    try:
        samples, sample_rate = sf.read(str(path), dtype="float64", always_2d=False)
    except RuntimeError as e:
        raise ValidationError(f"unreadable audio {path}: {e}") from e
    return Waveform(samples, sample_rate)


def write_wav(waveform, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.clip(waveform.samples, -1.0, 1.0), waveform.sample_rate, subtype="PCM_16")
    return path


def hz_to_mel(hz):
    return 1127.0 * np.log(1.0 + np.asarray(hz) / 700.0)


@lru_cache(maxsize=16)
def mel_filterbank(num_mel, nfft, sample_rate, low_freq, high_freq):
    high_freq = high_freq or sample_rate / 2.0
    if not 0 <= low_freq < high_freq <= sample_rate / 2.0:
        raise ValidationError(f"invalid mel range [{low_freq}, {high_freq}] for rate {sample_rate}")
    mel_points = np.linspace(hz_to_mel(low_freq), hz_to_mel(high_freq), num_mel + 2)
    bin_freqs = np.fft.rfftfreq(nfft, d=1.0 / sample_rate)
    bin_mels = hz_to_mel(bin_freqs)
    bank = np.zeros((num_mel, len(bin_freqs)))
    for m in range(num_mel):
        left, center, right = mel_points[m : m + 3]
        rising = (bin_mels - left) / (center - left)
        falling = (right - bin_mels) / (right - center)
        bank[m] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def compute_mfcc(w, cfg=MfccConfig()):
    if not cfg.window_s > cfg.shift_s > 0:
        raise ValidationError(f"need window_s > shift_s > 0, got {cfg.window_s}, {cfg.shift_s}")
    frame_len = int(round(cfg.window_s * w.sample_rate))
    shift = int(round(cfg.shift_s * w.sample_rate))
    if len(w) < frame_len:
        raise ValidationError(f"audio of {len(w)} samples is shorter than one {frame_len}-sample window")
    frames = frame_signal(w.samples, frame_len, shift)
    frames = frames - frames.mean(axis=1, keepdims=True)
    # per-frame pre-emphasis keeps frames independent of their neighbours
    frames[:, 1:] = frames[:, 1:] - cfg.preemphasis * frames[:, :-1]
    frames[:, 0] *= 1.0 - cfg.preemphasis
    log_energy = np.log(np.maximum((frames**2).sum(axis=1), cfg.log_floor))
    frames = frames * np.hamming(frame_len)
    nfft = 1 << (frame_len - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, nfft)) ** 2
    bank = mel_filterbank(cfg.num_mel, nfft, w.sample_rate, cfg.low_freq, cfg.high_freq)
    log_mel = np.log(np.maximum(power @ bank.T, cfg.log_floor))
    ceps = dct(log_mel, type=2, norm="ortho", axis=1)[:, : cfg.num_ceps]
    if cfg.use_energy:
        ceps[:, 0] = log_energy
    return FeatureMatrix(ceps, cfg.shift_s, "I")


def compute_cmvn_stats(f):
    return CmvnStats.zeros(f.dim).accumulate(f.frames)


def apply_cmvn(f, stats, var_floor=CONFIG.CMVN_VAR_FLOOR):
    if stats.count < 2:
        raise ValidationError(f"CMVN stats need at least 2 frames, got {stats.count}")
    if stats.dim != f.dim:
        raise DimensionError(f"CMVN stats dimension {stats.dim} != feature dimension {f.dim}")
    mean = stats.mean()
    var = stats.variance()
    floored = var < var_floor
    if floored.any():
        logger.warning(f"CMVN variance floored in dimensions {np.flatnonzero(floored).tolist()}")
        var = np.maximum(var, var_floor)
    return replace(f, frames=(f.frames - mean) / np.sqrt(var))


def _clamped_delta(x, window):
    num = len(x)
    idx = np.arange(num)
    out = np.zeros_like(x)
    for n in range(1, window + 1):
        out += n * (x[np.minimum(idx + n, num - 1)] - x[np.maximum(idx - n, 0)])
    return out / (2.0 * sum(n * n for n in range(1, window + 1)))


def add_deltas(f, window=CONFIG.DELTA_WINDOW):
    if f.stage != "I":
        raise ValidationError(f"deltas are computed on stage I features, got stage {f.stage}")
    delta = _clamped_delta(f.frames, window)
    delta2 = _clamped_delta(delta, window)
    return FeatureMatrix(np.hstack([f.frames, delta, delta2]), f.frame_shift, "II")


def splice(f, left=CONFIG.SPLICE_LEFT, right=CONFIG.SPLICE_RIGHT):
    if left < 0 or right < 0:
        raise ValidationError(f"splice context must be non-negative, got {left}, {right}")
    idx = np.arange(f.num_frames)
    blocks = [f.frames[np.clip(idx + k, 0, f.num_frames - 1)] for k in range(-left, right + 1)]
    return FeatureMatrix(np.hstack(blocks), f.frame_shift, "IV")


def speed_perturb(w, alpha):
    if not alpha > 0:
        raise ValidationError(f"speed factor must be positive, got {alpha}")
    if alpha == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    num_out = int(np.floor(len(w) / alpha + 0.5))
    samples = resample(w.samples, num_out) if num_out > 0 else np.zeros(0)
    return Waveform(np.clip(samples, -1.0, 1.0), w.sample_rate)


def _normalized_acf(frames, nfft):
    spectrum = np.fft.rfft(frames, nfft)
    acf = np.fft.irfft(np.abs(spectrum) ** 2, nfft)[..., : frames.shape[-1]]
    return acf


def extract_pitch(w, cfg=PitchConfig()):
    nyquist = w.sample_rate / 2.0
    if not 0 < cfg.fmin < cfg.fmax <= nyquist:
        raise ValidationError(f"need 0 < fmin < fmax <= {nyquist}, got {cfg.fmin}, {cfg.fmax}")
    frame_len = int(round(cfg.window_s * w.sample_rate))
    shift = int(round(cfg.shift_s * w.sample_rate))
    samples = w.samples
    if len(samples) < frame_len:
        samples = np.pad(samples, (0, frame_len - len(samples)))
    frames = frame_signal(samples, frame_len, shift)
    frames = frames - frames.mean(axis=1, keepdims=True)
    rms = np.sqrt((frames**2).mean(axis=1))

    window = np.hanning(frame_len)
    nfft = 1 << (2 * frame_len - 1).bit_length()
    acf = _normalized_acf(frames * window, nfft)
    window_acf = _normalized_acf(window, nfft)
    window_acf = window_acf / window_acf[0]

    min_lag = max(2, int(np.floor(w.sample_rate / cfg.fmax)))
    max_lag = min(int(np.ceil(w.sample_rate / cfg.fmin)), frame_len // 2)
    f0 = np.zeros(len(frames))
    voiced = np.zeros(len(frames), dtype=bool)
    if max_lag <= min_lag:
        return PitchTrack(f0, voiced, cfg.shift_s)

    lags = np.arange(min_lag - 1, max_lag + 2)
    for i in range(len(frames)):
        if rms[i] < cfg.silence_rms or acf[i, 0] <= 0:
            continue
        r = acf[i, lags] / acf[i, 0] / window_acf[lags]
        inner = r[1:-1]
        peaks = np.flatnonzero((inner > r[:-2]) & (inner >= r[2:])) + 1
        if len(peaks) == 0:
            continue
        best = r[peaks].max()
        # smallest-lag peak close to the global maximum guards against octave errors
        k = peaks[np.argmax(r[peaks] >= 0.9 * best)]
        if r[k] < cfg.voicing_threshold:
            continue
        a, b, c = r[k - 1], r[k], r[k + 1]
        denom = a - 2.0 * b + c
        offset = 0.5 * (a - c) / denom if denom != 0 else 0.0
        lag = lags[k] + offset
        freq = w.sample_rate / lag
        if cfg.fmin <= freq <= cfg.fmax:
            f0[i] = freq
            voiced[i] = True
    return PitchTrack(f0, voiced, cfg.shift_s)


def pitch_histogram(values, bin_width=CONFIG.PITCH_BIN_HZ):
    if not bin_width > 0:
        raise ValidationError(f"bin width must be positive, got {bin_width}")
    values = np.asarray(list(values), dtype=np.float64)
    values = values[np.isfinite(values) & (values > 0)]
    counts = Counter(int(k) for k in np.floor(values / bin_width))
    bins = tuple((k * bin_width, (k + 1) * bin_width, counts[k]) for k in sorted(counts))
    return PitchHistogram(bin_width, bins)


def write_histogram(histogram, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(histogram.to_tsv(), encoding="utf-8")
    return path


def _index_path(path):
    return Path(str(path) + ".idx")


def write_feature_archive(path, features):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index_lines = []
    with open(path, "wb") as f:
        for key, feats in features.items():
            offset = f.tell()
            f.write(np.array(feats.frames.shape, dtype="<i4").tobytes())
            f.write(np.ascontiguousarray(feats.frames, dtype="<f4").tobytes())
            index_lines.append(
                f"{key}\t{offset}\t{feats.num_frames}\t{feats.dim}\t{feats.stage}\t{feats.frame_shift!r}"
            )
    _index_path(path).write_text("\n".join(index_lines) + ("\n" if index_lines else ""), encoding="utf-8")
    return path


def read_feature_archive(path):
    path = Path(path)
    features = {}
    with open(path, "rb") as f:
        for line in _index_path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            key, offset, num_frames, dim, stage, frame_shift = line.split("\t")
            f.seek(int(offset))
            shape = tuple(np.frombuffer(f.read(8), dtype="<i4"))
            if shape != (int(num_frames), int(dim)):
                raise ValidationError(f"feature archive entry {key}: header {shape} disagrees with index")
            count = shape[0] * shape[1]
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            features[key] = FeatureMatrix(data.astype(np.float64), float(frame_shift), stage)
    return features


def dump_feature_archive(path):
    out = []
    for key, feats in read_feature_archive(path).items():
        out.append(f"{key}  [ stage={feats.stage} frames={feats.num_frames} dim={feats.dim}")
        for row in feats.frames:
            out.append("  " + " ".join(f"{v:.6g}" for v in row))
        out.append("]")
    return "\n".join(out) + "\n"


def _fragment_mfcc(job):
    audio_path, cfg = job
    return compute_mfcc(read_wav(audio_path), cfg)


def corpus_features(fragments, cfg=MfccConfig(), cmvn="utterance", jobs=CONFIG.JOBS):
    """Feature I for every fragment: MFCC followed by per-utterance or per-singer CMVN."""
    raw = parallel_map(_fragment_mfcc, [(fr.audio_path, cfg) for fr in fragments], jobs)
    raw = dict(zip((fr.fragment_id for fr in fragments), raw))
    if cmvn == "utterance":
        return {key: apply_cmvn(f, compute_cmvn_stats(f)) for key, f in raw.items()}
    if cmvn != "singer":
        raise ValidationError(f"unknown CMVN mode '{cmvn}'")
    per_singer = {}
    for fr in fragments:
        stats = compute_cmvn_stats(raw[fr.fragment_id])
        per_singer[fr.singer_id] = per_singer[fr.singer_id].merge(stats) if fr.singer_id in per_singer else stats
    return {fr.fragment_id: apply_cmvn(raw[fr.fragment_id], per_singer[fr.singer_id]) for fr in fragments}
