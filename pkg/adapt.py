from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
from loguru import logger

from am import TrainingUtterance, alignment_posteriors, component_posteriors, em_iteration, stacked_components
from config import CONFIG
from decoder import compile_training_graph, viterbi_align
from exceptions import AlignmentInfeasibleError, DimensionError, LexiconError, SingalignRuntimeError, ValidationError
from frontend import FeatureMatrix


class AdaptationLevel(str, Enum):
    FRAGMENT = "fragment"
    SONG = "song"
    SINGER = "singer"
    GENRE = "genre"
    POOLED = "pooled"


@dataclass(frozen=True)
class FmllrTransform:
    matrix: np.ndarray
    group: str = ""
    frames: float = 0.0
    trace: tuple = ()

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[1] != matrix.shape[0] + 1:
            raise DimensionError(f"fMLLR matrix must be d x (d+1), got {matrix.shape}")
        if abs(np.linalg.det(matrix[:, :-1])) <= 1e-10:
            raise ValidationError(f"fMLLR transform for '{self.group}' is singular")
        object.__setattr__(self, "matrix", matrix)

    @classmethod
    def identity(cls, dim, group="", frames=0.0):
        return cls(np.hstack([np.eye(dim), np.zeros((dim, 1))]), group, frames)

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def A(self):
        return self.matrix[:, :-1]

    @property
    def b(self):
        return self.matrix[:, -1]

    def log_det(self):
        return float(np.linalg.slogdet(self.A)[1])


@dataclass
class FmllrStats:
    G: np.ndarray
    K: np.ndarray
    beta: float = 0.0

    @classmethod
    def zeros(cls, dim):
        return cls(np.zeros((dim, dim + 1, dim + 1)), np.zeros((dim, dim + 1)), 0.0)

    @property
    def dim(self):
        return self.K.shape[0]

    def __add__(self, other):
        return FmllrStats(self.G + other.G, self.K + other.K, self.beta + other.beta)


def group_key(fragment, level):
    level = AdaptationLevel(level)
    if level is AdaptationLevel.FRAGMENT:
        return fragment.fragment_id
    if level is AdaptationLevel.SONG:
        return fragment.song_id
    if level is AdaptationLevel.SINGER:
        return fragment.singer_id
    if level is AdaptationLevel.GENRE:
        return fragment.genres[0]
    return "all"


def group_fragments(fragments, level):
    fragments = fragments.fragments if hasattr(fragments, "fragments") else fragments
    groups = {}
    for fragment in fragments:
        groups.setdefault(group_key(fragment, level), []).append(fragment)
    return groups


def _frames(f):
    return f.frames if hasattr(f, "frames") else np.asarray(f, dtype=np.float64)


def accumulate_fmllr_stats(model, features, alignment, posterior_features=None):
    """Row statistics for fMLLR; `alignment` is an alignment result or a T x num_pdfs posterior matrix.

    Component posteriors are taken on `posterior_features` when given (already-transformed
    frames), while the statistics themselves are built from `features`.
    """
    frames = _frames(features)
    if frames.shape[1] != model.dim:
        raise DimensionError(f"features have dimension {frames.shape[1]}, model expects {model.dim}")
    if not len(frames):
        return FmllrStats.zeros(model.dim)
    if hasattr(alignment, "frame_info"):
        gamma = alignment_posteriors(model, alignment, len(frames))
    else:
        gamma = np.asarray(alignment, dtype=np.float64)
        if gamma.shape != (len(frames), model.num_pdfs):
            raise DimensionError(f"posteriors of shape {gamma.shape} do not match {len(frames)} frames")
    scored = frames if posterior_features is None else _frames(posterior_features)
    resp, _ = component_posteriors(model, scored, gamma)
    _, means, variances, _, _ = stacked_components(model)
    inv = 1.0 / variances
    xi = np.hstack([frames, np.ones((len(frames), 1))])
    weight = resp @ inv
    G = np.einsum("ti,tj,tk->ijk", weight, xi, xi)
    K = np.einsum("ti,tj->ij", resp @ (means * inv), xi)
    return FmllrStats(G, K, float(resp.sum()))


def fmllr_objective(stats, matrix):
    A = matrix[:, :-1]
    quad = np.einsum("ij,ijk,ik->", matrix, stats.G, matrix)
    return float(stats.beta * np.linalg.slogdet(A)[1] - 0.5 * quad + np.einsum("ij,ij->", matrix, stats.K))


def _regularized_inverse(G):
    scale = max(np.trace(G) / len(G), 1e-10)
    if np.linalg.cond(G) > 1e10:
        G = G + 1e-8 * scale * np.eye(len(G))
    return np.linalg.inv(G)


def estimate_fmllr(
    stats,
    iterations=CONFIG.FMLLR_ITERATIONS,
    min_occupancy=CONFIG.FMLLR_MIN_OCCUPANCY,
    init=None,
    group="",
    min_gain=CONFIG.FMLLR_MIN_GAIN,
):
    d = stats.dim
    if stats.beta < min_occupancy:
        logger.warning(f"fMLLR group '{group}': occupancy {stats.beta:.1f} < {min_occupancy}; using identity")
        return FmllrTransform.identity(d, group, stats.beta)
    W = FmllrTransform.identity(d).matrix if init is None else init.matrix.copy()
    inverses = [_regularized_inverse(stats.G[i]) for i in range(d)]
    trace = [fmllr_objective(stats, W)]
    for _ in range(iterations):
        for i in range(d):
            p = np.append(np.linalg.inv(W[:, :-1]).T[i], 0.0)
            Ginv, k = inverses[i], stats.K[i]
            a = p @ Ginv @ p
            b = p @ Ginv @ k
            disc = np.sqrt(b * b + 4.0 * a * stats.beta)
            best, best_value = None, -np.inf
            for alpha in ((-b + disc) / (2.0 * a), (-b - disc) / (2.0 * a)):
                row = (alpha * p + k) @ Ginv
                value = stats.beta * np.log(abs(row @ p)) - 0.5 * row @ stats.G[i] @ row + row @ k
                if value > best_value:
                    best, best_value = row, value
            W[i] = best
        trace.append(fmllr_objective(stats, W))
        if trace[-1] < trace[-2] - 1e-6 * abs(trace[-2]):
            raise SingalignRuntimeError(f"fMLLR auxiliary decreased for group '{group}': {trace[-2]} -> {trace[-1]}")
        if trace[-1] - trace[-2] < min_gain * abs(trace[-2]):
            break
    logger.debug(f"fMLLR group '{group}': {len(trace) - 1} sweeps, auxiliary {trace[0]:.3f} -> {trace[-1]:.3f}")
    return FmllrTransform(W, group, stats.beta, tuple(trace))


def apply_fmllr(t, f):
    frames = _frames(f)
    if frames.shape[1] != t.dim:
        raise DimensionError(f"transform dimension {t.dim} != feature dimension {frames.shape[1]}")
    out = frames @ t.A.T + t.b
    if isinstance(f, FeatureMatrix):
        return replace(f, frames=out, stage="III")
    return FeatureMatrix(out, stage="III")


def invert(t):
    A_inv = np.linalg.inv(t.A)
    return FmllrTransform(np.hstack([A_inv, (-A_inv @ t.b)[:, None]]), t.group, t.frames)


def compose(t2, t1):
    """Transform equal to applying t1 first, then t2."""
    A = t2.A @ t1.A
    b = t2.A @ t1.b + t2.b
    return FmllrTransform(np.hstack([A, b[:, None]]), t2.group or t1.group, t1.frames)


def write_transforms(transforms, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for key, t in transforms.items():
            f.write(f"{key}\t{t.frames:g}\n")
            for row in t.matrix:
                f.write(" ".join(f"{v:.10g}" for v in row) + "\n")
    return path


def read_transforms(path):
    lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    transforms, pos = {}, 0
    while pos < len(lines):
        try:
            key, frames = lines[pos].split("\t")
            first = [float(v) for v in lines[pos + 1].split()]
            d = len(first) - 1
            rows = [first] + [[float(v) for v in lines[pos + 1 + r].split()] for r in range(1, d)]
        except (ValueError, IndexError) as e:
            raise ValidationError(f"{path}: malformed transform block at line {pos + 1}") from e
        transforms[key] = FmllrTransform(np.array(rows), key, float(frames))
        pos += 1 + d
    return transforms


def estimate_group_transforms(model, utterances, fragments, level, init=None, transformed=None):
    """Per-group fMLLR from aligned utterances keyed by fragment_id."""
    transforms = {}
    for key, members in group_fragments(fragments, level).items():
        stats = FmllrStats.zeros(model.dim)
        for fr in members:
            utt = utterances.get(fr.fragment_id)
            if utt is None or utt.alignment is None:
                continue
            scored = None if transformed is None else transformed[fr.fragment_id]
            stats = stats + accumulate_fmllr_stats(model, utt.features, utt.alignment, scored)
        transforms[key] = estimate_fmllr(stats, init=(init or {}).get(key), group=key)
    return transforms


def sat_retrain(model, utterances, manifest, level, rounds, jobs=1):
    """Alternates per-group fMLLR estimation and EM on transformed features.

    Returns (model, transforms, objective trace); the objective is the training
    log-likelihood on transformed features plus the per-frame log-determinant terms.
    """
    fragments = manifest.fragments if hasattr(manifest, "fragments") else manifest
    fragments = [f for f in fragments if f.fragment_id in utterances]
    current = model.copy()
    transforms, trace = {}, []
    for r in range(rounds):
        transformed = None
        if transforms:
            transformed = {
                f.fragment_id: apply_fmllr(transforms[group_key(f, level)], utterances[f.fragment_id].features).frames
                for f in fragments
            }
        transforms = estimate_group_transforms(current, utterances, fragments, level, transforms, transformed)
        adapted = []
        log_det = 0.0
        for f in fragments:
            utt = utterances[f.fragment_id]
            t = transforms[group_key(f, level)]
            adapted.append(TrainingUtterance(apply_fmllr(t, utt.features).frames, alignment=utt.alignment))
            log_det += len(_frames(utt.features)) * t.log_det()
        current, ll = em_iteration(current, adapted, jobs)
        trace.append(ll + log_det)
        logger.info(f"SAT round {r + 1}/{rounds} ({AdaptationLevel(level).value}): objective {trace[-1]:.3f}")
    return current, transforms, trace


def adapt_features(model, lexicon, features, transcripts, fragments, level, silence_prob=CONFIG.SILENCE_PROB):
    """Aligns each fragment to its supervision transcript, estimates per-group fMLLR and applies it."""
    utterances = {}
    for fr in fragments:
        feats = features[fr.fragment_id]
        try:
            graph = compile_training_graph(transcripts.get(fr.fragment_id, ()), lexicon, model, silence_prob)
            alignment = viterbi_align(graph, feats, model)
        except (AlignmentInfeasibleError, LexiconError) as e:
            logger.warning(f"Skipping {fr.fragment_id} in fMLLR statistics: {e}")
            continue
        utterances[fr.fragment_id] = TrainingUtterance(_frames(feats), alignment=alignment)
    transforms = estimate_group_transforms(model, utterances, fragments, level)
    adapted = {
        fr.fragment_id: apply_fmllr(transforms[group_key(fr, level)], features[fr.fragment_id])
        for fr in fragments
    }
    return adapted, transforms
