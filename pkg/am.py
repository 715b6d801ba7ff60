import heapq
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from loguru import logger
from scipy.cluster.hierarchy import linkage, to_tree

from config import CONFIG
from exceptions import DimensionError, ValidationError
from lexicon import Phone
from utils import parallel_map, text_sha256

FORMAT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)
CONTEXT_MODES = ("monophone", "triphone")


class HmmStateInfo(NamedTuple):
    phone: str
    pos: int
    left: str = ""
    right: str = ""


@dataclass
class GmmState:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if self.means.shape != self.variances.shape or len(self.weights) != len(self.means):
            raise DimensionError("GMM weights, means and variances disagree in shape")
        if abs(self.weights.sum() - 1.0) > 1e-8:
            raise ValidationError(f"GMM weights sum to {self.weights.sum()}")
        if np.any(self.variances <= 0):
            raise ValidationError("GMM variances must be positive")

    @property
    def num_components(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    def copy(self):
        return GmmState(self.weights.copy(), self.means.copy(), self.variances.copy())

    def log_likelihood(self, frames):
        frames = np.atleast_2d(frames)
        diff = frames[:, None, :] - self.means[None, :, :]
        comp = -0.5 * ((diff**2 / self.variances).sum(-1) + np.log(self.variances).sum(-1) + self.dim * LOG_2PI)
        return np.logaddexp.reduce(comp + np.log(self.weights), axis=1)


@dataclass
class TreeNode:
    question: Optional[tuple] = None
    yes: Optional["TreeNode"] = None
    no: Optional["TreeNode"] = None
    pdf: int = -1
    contexts: dict = field(default_factory=dict, repr=False)

    @property
    def is_leaf(self):
        return self.question is None

    def lookup(self, left, right):
        node = self
        while not node.is_leaf:
            side, phones = node.question
            node = node.yes if (left if side == "L" else right) in phones else node.no
        return node.pdf

    def leaves(self):
        if self.is_leaf:
            return [self]
        return self.yes.leaves() + self.no.leaves()

    def to_dict(self):
        if self.is_leaf:
            return {"pdf": self.pdf}
        side, phones = self.question
        return {"side": side, "phones": sorted(phones), "yes": self.yes.to_dict(), "no": self.no.to_dict()}

    @classmethod
    def from_dict(cls, d):
        if "pdf" in d:
            return cls(pdf=d["pdf"])
        return cls((d["side"], frozenset(d["phones"])), cls.from_dict(d["yes"]), cls.from_dict(d["no"]))


@dataclass
class AcousticModel:
    phones: dict
    forward: dict
    states: list
    var_floor: np.ndarray
    context_mode: str = "monophone"
    mono_pdf: dict = field(default_factory=dict)
    trees: dict = field(default_factory=dict)
    occupancy: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.context_mode not in CONTEXT_MODES:
            raise ValidationError(f"unknown context mode '{self.context_mode}'")
        for phone, p in self.forward.items():
            p = np.asarray(p, dtype=np.float64)
            if np.any(p <= 0) or np.any(p > 1):
                raise ValidationError(f"forward probabilities of '{phone}' must lie in (0, 1]")
            self.forward[phone] = p

    @property
    def dim(self):
        return self.states[0].dim

    @property
    def num_pdfs(self):
        return len(self.states)

    @property
    def silence(self):
        return next(s for s, p in self.phones.items() if p.is_silence)

    @property
    def vowels(self):
        return [s for s, p in self.phones.items() if p.is_vowel]

    def num_states(self, phone):
        return len(self.forward[phone])

    def pdf_id(self, phone, pos, left="", right=""):
        if self.context_mode == "monophone" or phone == self.silence:
            if (phone, pos) in self.mono_pdf:
                return self.mono_pdf[(phone, pos)]
        return self.trees[(phone, pos)].lookup(left or self.silence, right or self.silence)

    def transition_logprob(self, phone, pos, kind):
        p = self.forward[phone][pos]
        return math.log(p) if kind == "fwd" else math.log1p(-p)

    def phone_table_hash(self):
        return text_sha256("".join(f"{p.symbol}:{p.kind}\n" for p in self.phones.values()))

    def copy(self):
        return AcousticModel(
            dict(self.phones),
            {k: v.copy() for k, v in self.forward.items()},
            [s.copy() for s in self.states],
            self.var_floor.copy(),
            self.context_mode,
            dict(self.mono_pdf),
            dict(self.trees),
            None if self.occupancy is None else self.occupancy.copy(),
        )


@dataclass
class TrainingUtterance:
    features: np.ndarray
    graph: object = None
    alignment: object = None


@dataclass
class EmStats:
    occupancy: np.ndarray
    first: np.ndarray
    second: np.ndarray
    transitions: dict
    loglik: float = 0.0
    frames: int = 0

    def __add__(self, other):
        transitions = dict(self.transitions)
        for key, value in other.transitions.items():
            transitions[key] = transitions.get(key, 0.0) + value
        return EmStats(
            self.occupancy + other.occupancy,
            self.first + other.first,
            self.second + other.second,
            transitions,
            self.loglik + other.loglik,
            self.frames + other.frames,
        )


def _features(f):
    return f.frames if hasattr(f, "frames") else np.asarray(f, dtype=np.float64)


def stacked_components(model):
    counts = np.array([s.num_components for s in model.states])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    owner = np.repeat(np.arange(model.num_pdfs), counts)
    weights = np.concatenate([s.weights for s in model.states])
    means = np.vstack([s.means for s in model.states])
    variances = np.vstack([s.variances for s in model.states])
    return weights, means, variances, owner, starts


def component_log_likelihoods(model, frames):
    weights, means, variances, _, _ = stacked_components(model)
    inv = 1.0 / variances
    const = np.log(weights) - 0.5 * (model.dim * LOG_2PI + np.log(variances).sum(1) + (means**2 * inv).sum(1))
    return const + frames @ (means * inv).T - 0.5 * (frames**2) @ inv.T


def log_likelihoods(model, features):
    frames = _features(features)
    if frames.shape[1] != model.dim:
        raise DimensionError(f"features have dimension {frames.shape[1]}, model expects {model.dim}")
    _, _, _, _, starts = stacked_components(model)
    return np.logaddexp.reduceat(component_log_likelihoods(model, frames), starts, axis=1)


def flat_start(phones, features, states_per_phone=CONFIG.STATES_PER_PHONE, silence_states=CONFIG.SILENCE_STATES):
    frames = [_features(f) for f in features]
    frames = [f for f in frames if len(f)]
    if not frames:
        raise ValidationError("flat start needs at least one utterance of features")
    data = np.vstack(frames)
    mean = data.sum(axis=0) / len(data)
    var = (data**2).sum(axis=0) / len(data) - mean**2
    var_floor = np.maximum(CONFIG.VAR_FLOOR_FRACTION * var, 1e-10)
    var = np.maximum(var, var_floor)
    forward, states, mono_pdf = {}, [], {}
    for symbol, phone in phones.items():
        n = silence_states if phone.is_silence else states_per_phone
        forward[symbol] = np.full(n, CONFIG.INITIAL_FORWARD_PROB)
        for pos in range(n):
            mono_pdf[(symbol, pos)] = len(states)
            states.append(GmmState(np.ones(1), mean[None, :], var[None, :]))
    logger.info(f"Flat start: {len(phones)} phones, {len(states)} states, {len(data)} frames, dim {data.shape[1]}")
    return AcousticModel(dict(phones), forward, states, var_floor, "monophone", mono_pdf)


def alignment_posteriors(model, alignment, num_frames):
    """One-hot pdf occupancies (T x num_pdfs) from a hard alignment."""
    if len(alignment.frame_info) != num_frames:
        raise DimensionError(f"alignment covers {len(alignment.frame_info)} frames, features have {num_frames}")
    pdfs = np.array([model.pdf_id(*info) for info in alignment.frame_info], dtype=np.int64)
    gamma = np.zeros((num_frames, model.num_pdfs))
    gamma[np.arange(num_frames), pdfs] = 1.0
    return gamma


def component_posteriors(model, frames, gamma):
    """Spreads per-pdf occupancies over each pdf's mixture components (T x total components)."""
    _, _, _, owner, starts = stacked_components(model)
    comp_ll = component_log_likelihoods(model, frames)
    pdf_ll = np.logaddexp.reduceat(comp_ll, starts, axis=1)
    return np.exp(comp_ll - pdf_ll[:, owner]) * gamma[:, owner], pdf_ll


def _alignment_stats(model, frames, alignment):
    gamma = alignment_posteriors(model, alignment, len(frames))
    transitions, trans_ll = {}, 0.0
    states = alignment.frame_states
    for t, info in enumerate(alignment.frame_info):
        kind = "self" if t + 1 < len(frames) and states[t + 1] == states[t] else "fwd"
        key = (info.phone, info.pos, kind)
        transitions[key] = transitions.get(key, 0.0) + 1.0
        trans_ll += model.transition_logprob(info.phone, info.pos, kind)
    return gamma, transitions, trans_ll


def _graph_stats(model, frames, graph):
    loglik, state_post, transitions = graph.forward_backward(model, frames)
    pdfs = graph.pdf_array(model)
    emitting = pdfs >= 0
    gamma = np.zeros((len(frames), model.num_pdfs))
    np.add.at(gamma.T, pdfs[emitting], state_post[:, emitting].T)
    return gamma, transitions, loglik


def accumulate(job):
    model, utt = job
    frames = _features(utt.features)
    if utt.alignment is not None:
        gamma, transitions, trans_ll = _alignment_stats(model, frames, utt.alignment)
        resp, pdf_ll = component_posteriors(model, frames, gamma)
        loglik = float((gamma * pdf_ll).sum()) + trans_ll
    elif utt.graph is not None:
        gamma, transitions, loglik = _graph_stats(model, frames, utt.graph)
        resp, _ = component_posteriors(model, frames, gamma)
    else:
        raise ValidationError("training utterance needs an alignment or a graph")
    return EmStats(resp.sum(0), resp.T @ frames, resp.T @ frames**2, transitions, loglik, len(frames))


def _update_gmm(occ, first, second, var_floor):
    keep = occ > 1e-10
    total = occ[keep].sum()
    means = first[keep] / occ[keep, None]
    variances = np.maximum(second[keep] / occ[keep, None] - means**2, var_floor)
    return GmmState(occ[keep] / total, means, variances)


def em_iteration(model, utterances, jobs=1):
    if not utterances:
        raise ValidationError("EM needs at least one training utterance")
    stats = parallel_map(accumulate, [(model, u) for u in utterances], jobs)
    total = stats[0]
    for s in stats[1:]:
        total = total + s
    _, _, _, _, starts = stacked_components(model)
    ends = np.append(starts[1:], len(total.occupancy))
    new = model.copy()
    occupancy = np.zeros(model.num_pdfs)
    held = []
    for k, (lo, hi) in enumerate(zip(starts, ends)):
        occupancy[k] = total.occupancy[lo:hi].sum()
        if occupancy[k] <= 1e-10:
            held.append(k)
            continue
        new.states[k] = _update_gmm(
            total.occupancy[lo:hi], total.first[lo:hi], total.second[lo:hi], model.var_floor
        )
    if held:
        logger.warning(f"{len(held)} state(s) with zero occupancy keep their parameters: {held[:10]}")
    for phone, probs in model.forward.items():
        updated = probs.copy()
        for pos in range(len(probs)):
            fwd = total.transitions.get((phone, pos, "fwd"), 0.0)
            loop = total.transitions.get((phone, pos, "self"), 0.0)
            if fwd + loop > 0:
                p = fwd / (fwd + loop)
                updated[pos] = min(max(p, CONFIG.TRANSITION_FLOOR), 1.0 - CONFIG.TRANSITION_FLOOR)
        new.forward[phone] = updated
    new.occupancy = occupancy
    logger.debug(f"EM iteration: {total.frames} frames, log-likelihood {total.loglik:.4f}")
    return new, total.loglik


def split_mixtures(model, target, power=CONFIG.MIXUP_POWER, perturb=CONFIG.MIXUP_PERTURB):
    current = sum(s.num_components for s in model.states)
    if target < current:
        raise ValidationError(f"mixture target {target} is below the current {current} components")
    new = model.copy()
    if target == current:
        return new
    occ = model.occupancy if model.occupancy is not None else np.ones(model.num_pdfs)
    share = np.maximum(occ, 1e-10) ** power
    alloc = np.maximum(1, np.floor(target * share / share.sum() + 0.5)).astype(int)
    for k, state in enumerate(new.states):
        weights, means, variances = list(state.weights), list(state.means), list(state.variances)
        while len(weights) < alloc[k]:
            j = int(np.argmax(weights))
            offset = perturb * np.sqrt(variances[j])
            weights[j] /= 2.0
            weights.append(weights[j])
            means.append(means[j] + offset)
            variances.append(variances[j].copy())
            means[j] = means[j] - offset
        new.states[k] = GmmState(np.array(weights), np.array(means), np.array(variances))
    logger.info(f"Mixture split: {current} -> {sum(s.num_components for s in new.states)} components")
    return new


def scale_self_loops(model, r, vowels_only=True):
    if r <= 0:
        raise ValidationError(f"self-loop scale must be positive, got {r}")
    if r == 1.0:
        return model.copy()
    if r > 1.0:
        logger.warning(f"Self-loop scale r={r} > 1 shortens state dwell times")
    targets = model.vowels if vowels_only else [s for s, p in model.phones.items() if not p.is_silence]
    new = model.copy()
    for phone in targets:
        scaled = r * model.forward[phone]
        if np.any(scaled >= 1.0):
            raise ValidationError(f"r={r} makes a forward probability of '{phone}' reach 1")
        new.forward[phone] = scaled
    logger.info(f"Scaled forward probabilities of {len(targets)} phone(s) by r={r}")
    return new


def expected_dwell(model, phone, pos):
    return 1.0 / model.forward[phone][pos]


def sample_dwell(model, phone, pos, n, rng):
    """Frames spent in one state per visit, simulated from its self-loop."""
    return rng.geometric(model.forward[phone][pos], size=n)


def sample_frames(model, pdf_sequence, rng):
    out = np.empty((len(pdf_sequence), model.dim))
    for t, k in enumerate(pdf_sequence):
        state = model.states[k]
        m = rng.choice(state.num_components, p=state.weights)
        out[t] = state.means[m] + np.sqrt(state.variances[m]) * rng.standard_normal(model.dim)
    return out


def _gauss_loglik(n, s, ss, var_floor):
    if n <= 0:
        return 0.0
    mean = s / n
    var = np.maximum(ss / n - mean**2, var_floor)
    return float(-0.5 * (n * (len(s) * LOG_2PI + np.log(var).sum()) + ((ss - s * mean) / var).sum()))


def context_stats(model, utterances):
    """(phone, pos) -> {(left, right): [count, sum, sumsq]} from aligned training data."""
    stats = {}
    for utt in utterances:
        frames = _features(utt.features)
        for t, info in enumerate(utt.alignment.frame_info):
            ctx = (info.left or model.silence, info.right or model.silence)
            entry = stats.setdefault((info.phone, info.pos), {}).setdefault(
                ctx, [0, np.zeros(model.dim), np.zeros(model.dim)]
            )
            entry[0] += 1
            entry[1] += frames[t]
            entry[2] += frames[t] ** 2
    return stats


def phone_questions(model):
    """Context questions: vowel/consonant classes, singletons and a bottom-up clustering of phone means."""
    symbols = [s for s in model.phones]
    universe = frozenset(symbols)
    questions = [
        frozenset(model.vowels),
        frozenset(s for s, p in model.phones.items() if not p.is_vowel and not p.is_silence),
    ]
    questions += [frozenset([s]) for s in symbols]
    if len(symbols) > 2:
        centroids = np.array(
            [np.mean([model.states[model.pdf_id(s, pos)].means.mean(0) for pos in range(model.num_states(s))], axis=0)
             for s in symbols]
        )
        root = to_tree(linkage(centroids, method="average"))
        for node in root.pre_order(lambda n: n):
            questions.append(frozenset(symbols[i] for i in node.pre_order()))
    unique = []
    for q in questions:
        if q and q != universe and q not in unique:
            unique.append(q)
    return unique


def _best_split(node, questions, var_floor, min_leaf):
    totals = _sum_stats(node.contexts.values(), len(var_floor))
    parent = _gauss_loglik(*totals, var_floor)
    best = None
    for side in ("L", "R"):
        for q in questions:
            yes = {c: v for c, v in node.contexts.items() if (c[0] if side == "L" else c[1]) in q}
            if not yes or len(yes) == len(node.contexts):
                continue
            no = {c: v for c, v in node.contexts.items() if c not in yes}
            y, n = _sum_stats(yes.values(), len(var_floor)), _sum_stats(no.values(), len(var_floor))
            if y[0] < min_leaf or n[0] < min_leaf:
                continue
            gain = _gauss_loglik(*y, var_floor) + _gauss_loglik(*n, var_floor) - parent
            if best is None or gain > best[0]:
                best = (gain, (side, q), yes, no)
    return best


def _sum_stats(entries, dim):
    n, s, ss = 0, np.zeros(dim), np.zeros(dim)
    for count, first, second in entries:
        n += count
        s = s + first
        ss = ss + second
    return n, s, ss


def build_triphone_tying(
    model,
    utterances,
    questions=None,
    max_leaves=2000,
    min_leaf_frames=CONFIG.TREE_MIN_LEAF_FRAMES,
    min_gain=CONFIG.TREE_MIN_GAIN,
):
    stats = context_stats(model, utterances)
    questions = phone_questions(model) if questions is None else [frozenset(q) for q in questions]
    roots = {}
    for symbol in model.phones:
        for pos in range(model.num_states(symbol)):
            roots[(symbol, pos)] = TreeNode(contexts=stats.get((symbol, pos), {}))
    leaves = len(roots)
    heap, counter = [], 0
    for key, root in roots.items():
        if key[0] == model.silence or not root.contexts:
            continue
        split = _best_split(root, questions, model.var_floor, min_leaf_frames)
        if split and split[0] > min_gain:
            heapq.heappush(heap, (-split[0], counter, root, split))
            counter += 1
    while heap and leaves < max_leaves:
        _, _, node, (gain, question, yes, no) = heapq.heappop(heap)
        node.question = question
        node.yes, node.no = TreeNode(contexts=yes), TreeNode(contexts=no)
        node.contexts = {}
        leaves += 1
        for child in (node.yes, node.no):
            split = _best_split(child, questions, model.var_floor, min_leaf_frames)
            if split and split[0] > min_gain:
                heapq.heappush(heap, (-split[0], counter, child, split))
                counter += 1
    if leaves == len(roots):
        logger.warning("Triphone tree found no valid split; tying degenerates to the monophone model")

    states, trees = [], {}
    for key, root in roots.items():
        if root.is_leaf:
            root.pdf = len(states)
            states.append(model.states[model.pdf_id(*key)].copy())
        else:
            for leaf in root.leaves():
                leaf.pdf = len(states)
                n, s, ss = _sum_stats(leaf.contexts.values(), model.dim)
                mean = s / n
                var = np.maximum(ss / n - mean**2, model.var_floor)
                states.append(GmmState(np.ones(1), mean[None, :], var[None, :]))
        for leaf in root.leaves():
            leaf.contexts = {}
        trees[key] = root
    mono_pdf = {key: trees[key].pdf for key in roots if key[0] == model.silence}
    logger.info(f"Triphone tying: {len(roots)} roots -> {len(states)} tied states")
    return AcousticModel(
        dict(model.phones),
        {k: v.copy() for k, v in model.forward.items()},
        states,
        model.var_floor.copy(),
        "triphone",
        mono_pdf,
        trees,
    )


def _header(model, stage, config_hash):
    return [
        f"singalign-am {FORMAT_VERSION}",
        f"phone_table_hash {model.phone_table_hash()}",
        f"context_mode {model.context_mode}",
        f"dims {model.dim}",
        f"num_pdfs {model.num_pdfs}",
        f"stage {stage or '-'}",
        f"config_hash {config_hash or '-'}",
    ]


def save_model(model, path, stage="", config_hash=""):
    weights, means, variances, _, _ = stacked_components(model)
    meta = {
        "phones": [[p.symbol, p.kind] for p in model.phones.values()],
        "forward": {k: v.tolist() for k, v in model.forward.items()},
        "components": [s.num_components for s in model.states],
        "mono_pdf": [[k[0], k[1], v] for k, v in model.mono_pdf.items()],
        "trees": [[k[0], k[1], t.to_dict()] for k, t in model.trees.items()],
    }
    payload = io.BytesIO()
    arrays = {"weights": weights, "means": means, "variances": variances, "var_floor": model.var_floor}
    if model.occupancy is not None:
        arrays["occupancy"] = model.occupancy
    np.savez(payload, meta=np.array(json.dumps(meta)), **arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(("\n".join(_header(model, stage, config_hash)) + "\n---\n").encode("utf-8"))
        f.write(payload.getvalue())
    return path


def read_model_header(path):
    header = {}
    with open(path, "rb") as f:
        for raw in f:
            line = raw.decode("utf-8").rstrip("\n")
            if line == "---":
                return header
            key, _, value = line.partition(" ")
            header[key] = value
    raise ValidationError(f"{path}: model header is not terminated")


def load_model(path):
    data = Path(path).read_bytes()
    head, sep, body = data.partition(b"\n---\n")
    if not sep or not head.startswith(b"singalign-am "):
        raise ValidationError(f"{path}: not a singalign model file")
    version = int(head.split(b"\n")[0].split()[1])
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported model format version {version}")
    npz = np.load(io.BytesIO(body), allow_pickle=False)
    meta = json.loads(str(npz["meta"]))
    phones = {s: Phone(s, kind == "vowel", kind == "silence") for s, kind in meta["phones"]}
    bounds = np.cumsum([0] + meta["components"])
    states = [
        GmmState(npz["weights"][lo:hi], npz["means"][lo:hi], npz["variances"][lo:hi])
        for lo, hi in zip(bounds[:-1], bounds[1:])
    ]
    context_mode = head.decode("utf-8").split("context_mode ")[1].split("\n")[0]
    return AcousticModel(
        phones,
        {k: np.array(v) for k, v in meta["forward"].items()},
        states,
        npz["var_floor"],
        context_mode,
        {(s, pos): pdf for s, pos, pdf in meta["mono_pdf"]},
        {(s, pos): TreeNode.from_dict(d) for s, pos, d in meta["trees"]},
        npz["occupancy"] if "occupancy" in npz.files else None,
    )


def dump_model_text(model):
    lines = _header(model, "", "")
    for phone, probs in model.forward.items():
        lines.append(f"<Transitions> {phone} " + " ".join(f"{p:.6f}" for p in probs))
    for k, state in enumerate(model.states):
        lines.append(f"<Pdf> {k} components {state.num_components}")
        for w, m, v in zip(state.weights, state.means, state.variances):
            lines.append(f"  <Weight> {w:.6f}")
            lines.append("  <Mean> " + " ".join(f"{x:.6f}" for x in m))
            lines.append("  <Var> " + " ".join(f"{x:.6f}" for x in v))
    for (phone, pos), tree in model.trees.items():
        lines.append(f"<Tree> {phone} {pos} {json.dumps(tree.to_dict(), sort_keys=True)}")
    return "\n".join(lines) + "\n"
