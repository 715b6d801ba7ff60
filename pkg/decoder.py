import math
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from loguru import logger

from am import HmmStateInfo, log_likelihoods
from config import CONFIG
from exceptions import AlignmentInfeasibleError, LexiconError, ValidationError
from lm import BOS, EOS
from utils import LN10

NEG_INF = float("-inf")


class Arc(NamedTuple):
    dst: int
    olabel: Optional[str] = None
    lm: float = 0.0
    trans: Optional[tuple] = None


@dataclass(frozen=True)
class DecodeConfig:
    beam: float
    max_active: float
    acoustic_scale: float = CONFIG.ACOUSTIC_SCALE

    def __post_init__(self):
        if not self.beam > 0:
            raise ValidationError(f"beam must be positive, got {self.beam}")
        if not self.acoustic_scale > 0:
            raise ValidationError(f"acoustic scale must be positive, got {self.acoustic_scale}")
        if not self.max_active >= 1:
            raise ValidationError(f"max_active must be at least 1, got {self.max_active}")


@dataclass(frozen=True)
class AlignmentResult:
    frame_states: np.ndarray
    frame_info: tuple
    segments: tuple
    words: tuple
    score: float

    @property
    def phones(self):
        return tuple(seg[0] for seg in self.segments)


@dataclass(frozen=True)
class Hypothesis:
    words: tuple = ()
    phones: tuple = ()
    acoustic: float = 0.0
    lm: float = 0.0
    transition: float = 0.0
    score: float = NEG_INF
    failed: bool = False
    segments: tuple = ()
    word_times: tuple = ()

    @property
    def word_phones(self):
        """Phone segments grouped by the decoded word whose span they start in."""
        starts = [frame for _, frame in self.word_times]
        groups = [[] for _ in starts] or [[]]
        for phone, start, _ in self.segments:
            groups[max(bisect_right(starts, start) - 1, 0)].append(phone)
        return tuple(tuple(g) for g in groups)


def transition_weight(model, arc):
    return model.transition_logprob(*arc.trans) if arc.trans else 0.0


def segment_frames(frame_states, frame_info):
    """Phone segments (phone, start, end) with end exclusive.

    Repeated phones split where the state position restarts.
    """
    segments = []
    for t, info in enumerate(frame_info):
        if segments:
            prev_state, prev = frame_states[t - 1], frame_info[t - 1]
            same = info.phone == prev.phone and (frame_states[t] == prev_state or info.pos > prev.pos)
            if same:
                phone, start, _ = segments[-1]
                segments[-1] = (phone, start, t + 1)
                continue
        segments.append((info.phone, t, t + 1))
    return tuple(segments)


@dataclass
class StaticGraph:
    infos: list = field(default_factory=list)
    arcs_out: list = field(default_factory=list)
    finals: dict = field(default_factory=dict)
    start: int = 0

    def add_state(self, info=None):
        self.infos.append(info)
        self.arcs_out.append([])
        return len(self.infos) - 1

    def add_arc(self, src, dst, olabel=None, lm=0.0, trans=None):
        self.arcs_out[src].append(Arc(dst, olabel, lm, trans))

    def set_final(self, state, weight=0.0):
        self.finals[state] = weight

    @property
    def num_states(self):
        return len(self.infos)

    def info(self, state):
        return self.infos[state]

    def out_arcs(self, state):
        return self.arcs_out[state]

    def final_weight(self, state):
        return self.finals.get(state, NEG_INF)

    def is_emitting(self, state):
        return self.infos[state] is not None

    def pdf_array(self, model):
        return np.array([model.pdf_id(*info) if info is not None else -1 for info in self.infos], dtype=np.int64)

    @cached_property
    def flat(self):
        src, dst, lm, trans, olabels = [], [], [], [], []
        for s, arcs in enumerate(self.arcs_out):
            for a in arcs:
                src.append(s)
                dst.append(a.dst)
                lm.append(a.lm)
                trans.append(a.trans)
                olabels.append(a.olabel)
        src = np.array(src, dtype=np.int64)
        dst = np.array(dst, dtype=np.int64)
        emitting = np.array([i is not None for i in self.infos], dtype=bool)
        return {
            "src": src,
            "dst": dst,
            "lm": np.array(lm, dtype=np.float64),
            "trans": trans,
            "olabels": olabels,
            "emit": np.flatnonzero(emitting[dst]) if len(dst) else np.zeros(0, dtype=np.int64),
            "eps": np.flatnonzero(~emitting[dst]) if len(dst) else np.zeros(0, dtype=np.int64),
            "emitting": emitting,
        }

    @cached_property
    def eps_schedule(self):
        """Epsilon arcs grouped by the topological level of their source; None when epsilon arcs form a cycle."""
        flat = self.flat
        level = np.zeros(self.num_states, dtype=np.int64)
        indegree = np.zeros(self.num_states, dtype=np.int64)
        for a in flat["eps"]:
            indegree[flat["dst"][a]] += 1
        by_src = {}
        for a in flat["eps"]:
            by_src.setdefault(int(flat["src"][a]), []).append(a)
        queue = deque(s for s in range(self.num_states) if indegree[s] == 0)
        seen = 0
        while queue:
            s = queue.popleft()
            seen += 1
            for a in by_src.get(s, ()):
                d = flat["dst"][a]
                level[d] = max(level[d], level[s] + 1)
                indegree[d] -= 1
                if indegree[d] == 0:
                    queue.append(d)
        if seen < self.num_states:
            return None
        groups = {}
        for a in flat["eps"]:
            groups.setdefault(int(level[flat["src"][a]]), []).append(a)
        return [np.array(groups[k], dtype=np.int64) for k in sorted(groups)]

    def weights(self, model):
        flat = self.flat
        return flat["lm"] + np.array([model.transition_logprob(*t) if t else 0.0 for t in flat["trans"]])

    def forward_backward(self, model, features):
        ll = log_likelihoods(model, features)
        num_frames = len(ll)
        flat, w, pdfs = self.flat, self.weights(model), self.pdf_array(model)
        src, dst, emit = flat["src"], flat["dst"], flat["emit"]
        schedule = self.eps_schedule
        if schedule is None:
            raise ValidationError("forward-backward needs an acyclic epsilon structure")
        alpha = np.full((num_frames + 1, self.num_states), NEG_INF)
        alpha[0, self.start] = 0.0
        _sum_closure(alpha[0], schedule, src, dst, w)
        for t in range(num_frames):
            vals = alpha[t, src[emit]] + w[emit] + ll[t, pdfs[dst[emit]]]
            np.logaddexp.at(alpha[t + 1], dst[emit], vals)
            _sum_closure(alpha[t + 1], schedule, src, dst, w)
        finals = np.array(sorted(self.finals), dtype=np.int64)
        final_w = np.array([self.finals[f] for f in finals])
        total = np.logaddexp.reduce(alpha[num_frames, finals] + final_w) if len(finals) else NEG_INF
        if not np.isfinite(total):
            raise AlignmentInfeasibleError(f"no path through the graph covers {num_frames} frames")

        beta = np.full((num_frames + 1, self.num_states), NEG_INF)
        beta[num_frames, finals] = final_w
        _reverse_closure(beta[num_frames], schedule, src, dst, w)
        for t in range(num_frames - 1, -1, -1):
            vals = w[emit] + ll[t, pdfs[dst[emit]]] + beta[t + 1, dst[emit]]
            np.logaddexp.at(beta[t], src[emit], vals)
            _reverse_closure(beta[t], schedule, src, dst, w)

        emitting = flat["emitting"]
        state_post = np.zeros((num_frames, self.num_states))
        state_post[:, emitting] = np.exp(alpha[1:, emitting] + beta[1:, emitting] - total)

        counts = np.zeros(len(w))
        emit_post = alpha[:-1][:, src[emit]] + w[emit] + ll[:, pdfs[dst[emit]]] + beta[1:][:, dst[emit]] - total
        counts[emit] = np.exp(emit_post).sum(axis=0)
        eps = flat["eps"]
        if len(eps):
            eps_post = alpha[1:][:, src[eps]] + w[eps] + beta[1:][:, dst[eps]] - total
            counts[eps] = np.exp(eps_post).sum(axis=0)
        transitions = {}
        for a, key in enumerate(flat["trans"]):
            if key is not None and counts[a] > 0:
                transitions[key] = transitions.get(key, 0.0) + counts[a]
        return float(total), state_post, transitions


def _sum_closure(row, schedule, src, dst, w):
    for arcs in schedule:
        np.logaddexp.at(row, dst[arcs], row[src[arcs]] + w[arcs])


def _reverse_closure(row, schedule, src, dst, w):
    for arcs in reversed(schedule):
        np.logaddexp.at(row, src[arcs], row[dst[arcs]] + w[arcs])


def _best_per_dst(arcs, cand, src, dst):
    """For each destination, the best candidate arc; ties go to the lowest source state."""
    finite = np.isfinite(cand)
    arcs, cand = arcs[finite], cand[finite]
    if not len(arcs):
        return arcs, cand
    order = np.lexsort((src[arcs], -cand, dst[arcs]))
    _, first = np.unique(dst[arcs][order], return_index=True)
    pick = order[first]
    return arcs[pick], cand[pick]


def _max_closure(score, bp, graph, w):
    flat = graph.flat
    src, dst = flat["src"], flat["dst"]
    schedule = graph.eps_schedule
    groups = schedule if schedule is not None else [flat["eps"]] * max(graph.num_states, 1)
    for arcs in groups:
        changed = False
        best_arcs, cand = _best_per_dst(arcs, score[src[arcs]] + w[arcs], src, dst)
        for a, c in zip(best_arcs, cand):
            d = dst[a]
            current = bp[d]
            if c > score[d] or (c == score[d] and current >= 0 and src[a] < src[current]):
                score[d] = c
                bp[d] = a
                changed = True
        if schedule is None and not changed:
            break


def _chain(graph, src, context, entry_lm=0.0, olabel=None, entry_trans=None):
    """Adds emitting states for a phone sequence; returns (last state, exit transition key)."""
    prev, prev_trans = src, entry_trans
    first = True
    for phone, num_states, left, right in context:
        for pos in range(num_states):
            state = graph.add_state(HmmStateInfo(phone, pos, left, right))
            graph.add_arc(prev, state, olabel if first else None, entry_lm if first else 0.0, prev_trans)
            graph.add_arc(state, state, trans=(phone, pos, "self"))
            prev, prev_trans, first = state, (phone, pos, "fwd"), False
    return prev, prev_trans


def pronunciation_context(pron, model, silence):
    out = []
    for j, phone in enumerate(pron):
        left = pron[j - 1] if j > 0 else silence
        right = pron[j + 1] if j + 1 < len(pron) else silence
        out.append((phone, model.num_states(phone), left, right))
    return out


def _optional_silence(graph, junction, model, silence_prob):
    after = graph.add_state()
    silence = model.silence
    if silence_prob < 1.0:
        graph.add_arc(junction, after, lm=math.log1p(-silence_prob))
    if silence_prob > 0.0:
        last, trans = _chain(
            graph, junction, [(silence, model.num_states(silence), "", "")], entry_lm=math.log(silence_prob)
        )
        graph.add_arc(last, after, trans=trans)
    return after


def compile_training_graph(transcript, lexicon, model, silence_prob=CONFIG.SILENCE_PROB):
    words = [w.upper() for w in transcript]
    oov = lexicon.oov(words)
    if oov:
        raise LexiconError(f"transcript words missing from the lexicon: {', '.join(oov)}")
    if not 0.0 <= silence_prob <= 1.0:
        raise ValidationError(f"silence probability must lie in [0, 1], got {silence_prob}")
    graph = StaticGraph()
    junction = graph.add_state()
    graph.start = junction
    for word in words:
        entry = _optional_silence(graph, junction, model, silence_prob)
        junction = graph.add_state()
        for pron in lexicon[word]:
            last, trans = _chain(graph, entry, pronunciation_context(pron, model, lexicon.silence), olabel=word)
            graph.add_arc(last, junction, trans=trans)
    graph.set_final(_optional_silence(graph, junction, model, silence_prob))
    return graph


def _traceback(graph, best, layers_emit, layers_eps, num_frames):
    flat = graph.flat
    src, olabels = flat["src"], flat["olabels"]
    states, words = [], []
    state, t = best, num_frames
    while True:
        if graph.is_emitting(state):
            a = layers_emit[t - 1][state]
            states.append(state)
            t -= 1
        else:
            a = layers_eps[t][state]
            if a < 0:
                break
        if olabels[a] is not None:
            words.append((olabels[a], t))
        state = src[a]
    states.reverse()
    words.reverse()
    return np.array(states, dtype=np.int64), tuple(words)


def viterbi_align(graph, features, model):
    ll = log_likelihoods(model, features)
    num_frames = len(ll)
    flat, w, pdfs = graph.flat, graph.weights(model), graph.pdf_array(model)
    src, dst, emit = flat["src"], flat["dst"], flat["emit"]
    score = np.full(graph.num_states, NEG_INF)
    score[graph.start] = 0.0
    bp = np.full(graph.num_states, -1, dtype=np.int64)
    _max_closure(score, bp, graph, w)
    layers_eps, layers_emit = [bp], []
    for t in range(num_frames):
        cand = score[src[emit]] + w[emit] + ll[t, pdfs[dst[emit]]]
        arcs, best = _best_per_dst(emit, cand, src, dst)
        score = np.full(graph.num_states, NEG_INF)
        score[dst[arcs]] = best
        bp_emit = np.full(graph.num_states, -1, dtype=np.int64)
        bp_emit[dst[arcs]] = arcs
        bp = np.full(graph.num_states, -1, dtype=np.int64)
        _max_closure(score, bp, graph, w)
        layers_emit.append(bp_emit)
        layers_eps.append(bp)
    finals = sorted(graph.finals)
    totals = [score[f] + graph.finals[f] for f in finals]
    if not finals or not np.isfinite(max(totals)):
        raise AlignmentInfeasibleError(f"alignment infeasible: no path covers {num_frames} frames")
    best = finals[int(np.argmax(totals))]
    states, words = _traceback(graph, best, layers_emit, layers_eps, num_frames)
    infos = tuple(graph.info(s) for s in states)
    return AlignmentResult(states, infos, segment_frames(states, infos), words, float(max(totals)))


def equal_align(graph, num_frames):
    """Uniform segmentation along the path with the fewest emitting states."""
    dist = {graph.start: 0}
    back = {graph.start: None}
    queue = deque([graph.start])
    while queue:
        s = queue.popleft()
        for a in graph.out_arcs(s):
            cost = dist[s] + (1 if graph.is_emitting(a.dst) and a.dst != s else 0)
            if a.dst not in dist or cost < dist[a.dst]:
                dist[a.dst] = cost
                back[a.dst] = (s, a)
                if graph.is_emitting(a.dst):
                    queue.append(a.dst)
                else:
                    queue.appendleft(a.dst)
    reachable = [f for f in sorted(graph.finals) if f in dist]
    if not reachable:
        raise AlignmentInfeasibleError("graph has no reachable final state")
    final = min(reachable, key=lambda f: (dist[f], f))
    steps, s = [], final
    while back[s] is not None:
        prev, arc = back[s]
        steps.append((s, arc))
        s = prev
    path, words = [], []
    for s, arc in reversed(steps):
        if arc.olabel is not None:
            words.append((arc.olabel, len(path)))
        if graph.is_emitting(s):
            path.append(s)
    if num_frames < len(path):
        raise AlignmentInfeasibleError(f"alignment infeasible: {num_frames} frames for {len(path)} states")
    bounds = np.floor(np.linspace(0, num_frames, len(path) + 1) + 0.5).astype(int)
    states = np.repeat(np.array(path, dtype=np.int64), np.diff(bounds))
    infos = tuple(graph.info(s) for s in states)
    word_times = tuple((w, int(bounds[i])) for w, i in words)
    return AlignmentResult(states, infos, segment_frames(states, infos), word_times, 0.0)


class LmLexiconGraph:
    """Backoff LM composed with the lexicon and HMM topology, expanded on demand.

    State keys: ("j", h) word junction before optional silence, ("k", h) LM history state,
    ("sil", h, pos) silence loop, ("w", h, word, k, j) pronunciation chain leading to history h.
    """

    def __init__(self, lexicon, lm, model, words, silence_prob=CONFIG.SILENCE_PROB):
        self.lexicon = lexicon
        self.lm = lm
        self.model = model
        self.words = frozenset(words)
        self.silence_prob = silence_prob
        self._ids = {}
        self._keys = []
        self._arcs = {}
        self._chains = {}
        self.start = self.state_id(("j", self._history((BOS,) if lm.order > 1 else ())))

    def _history(self, h):
        h = tuple(h)[-(self.lm.order - 1) :] if self.lm.order > 1 else ()
        while h and h not in self.lm.children and self.lm.backoff(h) == 0.0:
            h = h[1:]
        return h

    def state_id(self, key):
        sid = self._ids.get(key)
        if sid is None:
            sid = len(self._keys)
            self._ids[key] = sid
            self._keys.append(key)
        return sid

    def key(self, sid):
        return self._keys[sid]

    @property
    def num_states(self):
        return len(self._keys)

    def _chain_info(self, word, k):
        chain = self._chains.get((word, k))
        if chain is None:
            chain = []
            for phone, n, left, right in pronunciation_context(self.lexicon[word][k], self.model, self.lexicon.silence):
                chain.extend(HmmStateInfo(phone, pos, left, right) for pos in range(n))
            self._chains[(word, k)] = chain
        return chain

    def info(self, sid):
        key = self._keys[sid]
        if key[0] == "w":
            return self._chain_info(key[2], key[3])[key[4]]
        if key[0] == "sil":
            return HmmStateInfo(self.model.silence, key[2])
        return None

    def is_emitting(self, sid):
        return self._keys[sid][0] in ("w", "sil")

    def final_weight(self, sid):
        key = self._keys[sid]
        if key[0] != "k":
            return NEG_INF
        return self.lm.score(EOS, key[1]) * LN10

    def out_arcs(self, sid):
        arcs = self._arcs.get(sid)
        if arcs is None:
            arcs = self._expand(self._keys[sid], sid)
            self._arcs[sid] = arcs
        return arcs

    def _expand(self, key, sid):
        kind = key[0]
        arcs = []
        if kind == "j":
            h = key[1]
            if self.silence_prob < 1.0:
                arcs.append(Arc(self.state_id(("k", h)), lm=math.log1p(-self.silence_prob)))
            if self.silence_prob > 0.0:
                arcs.append(Arc(self.state_id(("sil", h, 0)), lm=math.log(self.silence_prob)))
        elif kind == "sil":
            h, pos = key[1], key[2]
            silence = self.model.silence
            arcs.append(Arc(sid, trans=(silence, pos, "self")))
            if pos + 1 < self.model.num_states(silence):
                arcs.append(Arc(self.state_id(("sil", h, pos + 1)), trans=(silence, pos, "fwd")))
            else:
                arcs.append(Arc(self.state_id(("k", h)), trans=(silence, pos, "fwd")))
        elif kind == "k":
            h = key[1]
            for word, logp in self.lm.children.get(h, ()):
                if word not in self.words:
                    continue
                dest = self._history(h + (word,))
                for k in range(len(self.lexicon[word])):
                    arcs.append(Arc(self.state_id(("w", dest, word, k, 0)), word, logp * LN10))
            if h:
                arcs.append(Arc(self.state_id(("k", h[1:])), lm=self.lm.backoff(h) * LN10))
        else:
            _, dest, word, k, j = key
            chain = self._chain_info(word, k)
            info = chain[j]
            arcs.append(Arc(sid, trans=(info.phone, info.pos, "self")))
            if j + 1 < len(chain):
                arcs.append(Arc(self.state_id(("w", dest, word, k, j + 1)), trans=(info.phone, info.pos, "fwd")))
            else:
                arcs.append(Arc(self.state_id(("j", dest)), trans=(info.phone, info.pos, "fwd")))
        return arcs


def build_decode_graph(lexicon, lm, model, silence_prob=CONFIG.SILENCE_PROB):
    missing = [w for w in lexicon.words() if not lm.in_vocab(w)]
    if missing:
        logger.warning(
            f"{len(missing)} lexicon word(s) absent from the LM are not decodable: {', '.join(missing[:10])}"
        )
    words = [w for w in lexicon.words() if lm.in_vocab(w)]
    if not words:
        raise ValidationError("lexicon and language model vocabularies do not intersect")
    logger.info(f"Decode graph over {len(words)} words, LM order {lm.order}")
    return LmLexiconGraph(lexicon, lm, model, words, silence_prob)


class _Token(NamedTuple):
    score: float
    acoustic: float
    lm: float
    transition: float
    trace: Optional[tuple]


def _relax_eps(graph, model, tokens, frame):
    queue = deque(sorted(tokens))
    while queue:
        sid = queue.popleft()
        tok = tokens[sid]
        for arc in graph.out_arcs(sid):
            if graph.is_emitting(arc.dst):
                continue
            tr = transition_weight(model, arc)
            score = tok.score + arc.lm + tr
            current = tokens.get(arc.dst)
            if current is None or score > current.score:
                trace = (tok.trace, None, arc.olabel, frame) if arc.olabel else tok.trace
                tokens[arc.dst] = _Token(score, tok.acoustic, tok.lm + arc.lm, tok.transition + tr, trace)
                queue.append(arc.dst)


def _prune(tokens, beam, max_active):
    if not tokens:
        return tokens
    best = max(t.score for t in tokens.values())
    kept = {sid: t for sid, t in tokens.items() if t.score >= best - beam}
    if len(kept) > max_active:
        ranked = sorted(kept.items(), key=lambda item: (-item[1].score, item[0]))[: int(max_active)]
        kept = dict(ranked)
    return kept


def decode(graph, features, model, cfg):
    ll = log_likelihoods(model, features)
    num_frames = len(ll)
    pdf_cache = {}
    tokens = {graph.start: _Token(0.0, 0.0, 0.0, 0.0, None)}
    _relax_eps(graph, model, tokens, 0)
    for t in range(num_frames):
        tokens = _prune(tokens, cfg.beam, cfg.max_active)
        nxt = {}
        for sid in sorted(tokens):
            tok = tokens[sid]
            for arc in graph.out_arcs(sid):
                if not graph.is_emitting(arc.dst):
                    continue
                pdf = pdf_cache.get(arc.dst)
                if pdf is None:
                    pdf = pdf_cache[arc.dst] = model.pdf_id(*graph.info(arc.dst))
                ac = ll[t, pdf]
                tr = transition_weight(model, arc)
                score = tok.score + arc.lm + tr + cfg.acoustic_scale * ac
                current = nxt.get(arc.dst)
                if current is None or score > current.score:
                    nxt[arc.dst] = _Token(
                        score,
                        tok.acoustic + ac,
                        tok.lm + arc.lm,
                        tok.transition + tr,
                        (tok.trace, arc.dst, arc.olabel, t),
                    )
        _relax_eps(graph, model, nxt, t + 1)
        tokens = nxt
        if not tokens:
            break
    best_sid, best_total = None, NEG_INF
    for sid in sorted(tokens):
        final = graph.final_weight(sid)
        if final > NEG_INF and tokens[sid].score + final > best_total:
            best_sid, best_total = sid, tokens[sid].score + final
    if best_sid is None:
        logger.warning(f"Search failure: no token reached a final state after {num_frames} frames")
        return Hypothesis(failed=True)
    tok = tokens[best_sid]
    final = graph.final_weight(best_sid)
    states, word_times = [], []
    trace = tok.trace
    while trace is not None:
        prev, sid, olabel, frame = trace
        if sid is not None:
            states.append(sid)
        if olabel is not None:
            word_times.append((olabel, frame))
        trace = prev
    states.reverse()
    word_times.reverse()
    infos = tuple(graph.info(s) for s in states)
    segments = segment_frames(states, infos)
    return Hypothesis(
        words=tuple(w for w, _ in word_times),
        phones=tuple(seg[0] for seg in segments),
        acoustic=tok.acoustic,
        lm=tok.lm + final,
        transition=tok.transition,
        score=best_total,
        segments=segments,
        word_times=tuple(word_times),
    )


def write_hypotheses(hypotheses, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for fragment_id, hyp in hypotheses.items():
            f.write(" ".join((fragment_id,) + hyp.words) + "\n")
    return path


def write_trace(hypotheses, path, frame_shift=CONFIG.SHIFT_S):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("fragment_id\tword\tstart_s\tend_s\tacoustic\tlm\ttransition\tfailed\n")
        for fragment_id, hyp in hypotheses.items():
            num_frames = hyp.segments[-1][2] if hyp.segments else 0
            starts = [frame for _, frame in hyp.word_times] + [num_frames]
            for i, (word, frame) in enumerate(hyp.word_times):
                f.write(
                    f"{fragment_id}\t{word}\t{frame * frame_shift:.2f}\t{starts[i + 1] * frame_shift:.2f}"
                    f"\t{hyp.acoustic:.4f}\t{hyp.lm:.4f}\t{hyp.transition:.4f}\t{int(hyp.failed)}\n"
                )
            if not hyp.word_times:
                f.write(
                    f"{fragment_id}\t-\t0.00\t0.00\t{hyp.acoustic:.4f}\t{hyp.lm:.4f}"
                    f"\t{hyp.transition:.4f}\t{int(hyp.failed)}\n"
                )
    return path
