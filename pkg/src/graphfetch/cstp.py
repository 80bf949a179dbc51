"""Chain spatio-temporal prefetching controller with phase-specific predictor switching."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from graphfetch.amma import AmmaModel, page_predict, rank_deltas
from graphfetch.features import index_to_delta, windows_from_arrays
from graphfetch.trace import MemoryAccess, TraceMeta

UNKNOWN_PAGE = -1


def degree_bounds(d_s: int, d_t: int) -> tuple[int, int]:
    """(min, max) total prefetch degree of one step with spatial degree d_s and temporal degree d_t."""
    if d_s < 1 or d_t < 1:
        raise ValueError("spatial and temporal degree must be >= 1")
    return d_s + 1, d_s * (d_t + 1)


# -- page base offset table ---------------------------------------------------


@dataclass(frozen=True)
class PbotEntry:
    page: int
    last_offset: int
    last_pc: int


class Pbot:
    """LRU map page -> latest (offset, pc)."""

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ValueError("PBOT capacity must be >= 1")
        self.capacity = capacity
        self._d: OrderedDict[int, PbotEntry] = OrderedDict()
        self.evictions = 0

    def update(self, page: int, offset: int, pc: int) -> None:
        self._d[page] = PbotEntry(page, offset, pc)
        self._d.move_to_end(page)
        if len(self._d) > self.capacity:
            self._d.popitem(last=False)
            self.evictions += 1

    def get(self, page: int) -> PbotEntry | None:
        # lookups do not refresh recency; only touches by demand accesses do
        return self._d.get(page)

    def __contains__(self, page: int) -> bool:
        return page in self._d

    def __len__(self) -> int:
        return len(self._d)

    def entries(self) -> list[PbotEntry]:
        """Entries from least to most recently touched."""
        return list(self._d.values())


def pbot_update(pbot: Pbot, access: MemoryAccess, meta: TraceMeta) -> None:
    pbot.update(meta.page_of(access.block_addr), meta.offset_of(access.block_addr), access.pc)


# -- predictor interface ------------------------------------------------------


class PhasePredictor(Protocol):
    """Batched access to one phase's delta and page predictors over (n, T) windows."""

    def top_deltas(self, blocks: np.ndarray, pcs: np.ndarray, k: int) -> np.ndarray:
        """(n, k) signed block deltas, best first."""

    def next_page(self, blocks: np.ndarray, pcs: np.ndarray) -> np.ndarray:
        """(n,) predicted page numbers, UNKNOWN_PAGE where the model predicts the unknown token."""


class ModelPredictor:
    """PhasePredictor backed by a trained (delta, page) AmmaModel pair."""

    def __init__(self, delta_model: AmmaModel, page_model: AmmaModel, vocab, offset_bits: int):
        self.delta_model, self.page_model = delta_model, page_model
        self.vocab = vocab
        self.offset_bits = offset_bits
        self._pages = np.array([UNKNOWN_PAGE] + [vocab.page(t) for t in range(1, len(vocab))],
                               dtype=np.int64)

    def _ws(self, blocks, pcs):
        cfg = self.delta_model.cfg
        return windows_from_arrays(blocks, pcs, self.vocab, self.offset_bits,
                                   cfg.num_segments, cfg.segment_bits)

    def top_deltas(self, blocks, pcs, k):
        scores = self.delta_model.predict_proba(self._ws(blocks, pcs))
        order = rank_deltas(scores, self.delta_model.blocks_per_page)[:, :k]
        return index_to_delta(order, self.delta_model.blocks_per_page)

    def next_page(self, blocks, pcs):
        tok, _ = page_predict(self.page_model, self._ws(blocks, pcs))
        return self._pages[np.clip(tok, 0, len(self._pages) - 1)]


def predictors_from_models(models, offset_bits: int) -> dict[int, ModelPredictor]:
    """phase -> ModelPredictor for a trained PhaseModelSet."""
    return {p: ModelPredictor(*models.pair(p), models.vocab, offset_bits) for p in models.phases}


# -- controller ---------------------------------------------------------------


@dataclass
class CstpConfig:
    d_s: int = 2
    d_t: int = 2
    pbot_capacity: int = 4096
    monitor_len: int = 1000
    # prediction distance the models were trained for; monitoring scores each
    # guess against the first same-page access after this many accesses
    distance: int = 0

    def __post_init__(self):
        degree_bounds(self.d_s, self.d_t)
        if self.monitor_len < 1:
            raise ValueError("monitor_len must be >= 1")
        if self.distance < 0:
            raise ValueError("distance must be >= 0")


@dataclass
class Monitoring:
    remaining: int
    scores: dict[int, int]
    # page -> unresolved (access index, block, {phase: predicted deltas}), oldest first
    pending: dict[int, list[tuple[int, int, dict[int, tuple[int, ...]]]]] = field(default_factory=dict)


@dataclass
class ControllerState:
    predictors: dict[int, PhasePredictor]
    cfg: CstpConfig = field(default_factory=CstpConfig)
    active_phase: int = 0
    pbot: Pbot = None
    monitoring: Monitoring | None = None
    episodes: int = 0
    switches: int = 0

    def __post_init__(self):
        if not self.predictors:
            raise ValueError("controller needs at least one phase predictor")
        if self.pbot is None:
            self.pbot = Pbot(self.cfg.pbot_capacity)
        if self.active_phase not in self.predictors:
            self.active_phase = min(self.predictors)


def on_transition(state: ControllerState, signal=None, monitor_len: int | None = None) -> None:
    """Start (or restart) a monitoring window in which every phase's delta model is scored."""
    n = state.cfg.monitor_len if monitor_len is None else monitor_len
    if n < 1:
        raise ValueError("monitor_len must be >= 1")
    state.monitoring = Monitoring(n, {p: 0 for p in state.predictors})
    state.episodes += 1


def _monitor(state: ControllerState, i: int, block: int, page: int, guesses: dict[int, tuple[int, ...]]) -> None:
    """Score pending guesses on ``page`` that this access resolves, then queue this access's guesses."""
    mon = state.monitoring
    queue = mon.pending.setdefault(page, [])
    gap = state.cfg.distance
    keep = []
    for j, prev_block, prev_guess in queue:
        if j + gap < i:
            realized = block - prev_block
            for p, guess in prev_guess.items():
                mon.scores[p] += realized in guess
        else:
            keep.append((j, prev_block, prev_guess))
    keep.append((i, block, guesses))
    mon.pending[page] = keep
    mon.remaining -= 1
    if mon.remaining == 0:
        _finish_monitoring(state)


def _finish_monitoring(state: ControllerState) -> None:
    scores = state.monitoring.scores
    best = max(scores.values())
    # ties keep the current phase
    if scores[state.active_phase] < best:
        state.active_phase = min(p for p, s in scores.items() if s == best)
        state.switches += 1
    state.monitoring = None


def _spatial(block: int, deltas, meta: TraceMeta) -> list[int]:
    page = block >> meta.offset_bits
    out = []
    for d in deltas:
        tgt = block + int(d)
        if tgt >= 0 and tgt >> meta.offset_bits == page:
            out.append(tgt)
    return out


def _append_unique(out: list[int], seen: set[int], blocks) -> None:
    for b in blocks:
        if b not in seen:
            seen.add(b)
            out.append(b)


def cstp_step(state: ControllerState, win_blocks: np.ndarray, win_pcs: np.ndarray, meta: TraceMeta,
              index: int = 0) -> list[int]:
    """Prefetch candidates for the newest access of the window (blocks and PCs, oldest first).

    The PBOT is updated with the newest access before prediction.  Returns at
    most ``d_s * (d_t + 1)`` distinct block addresses, never the demand block.
    ``index`` is the access's position in the stream, used by monitoring.
    """
    win_blocks = np.asarray(win_blocks, dtype=np.uint64)
    win_pcs = np.asarray(win_pcs, dtype=np.uint64)
    block, pc = int(win_blocks[-1]), int(win_pcs[-1])
    page = block >> meta.offset_bits
    state.pbot.update(page, block & (meta.blocks_per_page - 1), pc)
    if state.monitoring is not None:
        k = state.cfg.d_s
        guesses = {p: tuple(pr.top_deltas(win_blocks[None], win_pcs[None], k)[0].tolist())
                   for p, pr in state.predictors.items()}
        _monitor(state, index, block, page, guesses)

    pred = state.predictors[state.active_phase]
    k = state.cfg.d_s
    out: list[int] = []
    seen = {block}
    _append_unique(out, seen, _spatial(block, pred.top_deltas(win_blocks[None], win_pcs[None], k)[0], meta))
    ctx_b, ctx_p = win_blocks.copy(), win_pcs.copy()
    nxt = int(pred.next_page(ctx_b[None], ctx_p[None])[0])
    for _ in range(state.cfg.d_t):
        if nxt == UNKNOWN_PAGE:
            break
        entry = state.pbot.get(nxt)
        if entry is None:
            break
        anchor = (nxt << meta.offset_bits) | entry.last_offset
        ctx_b = np.append(win_blocks[1:], np.uint64(anchor))
        ctx_p = np.append(win_pcs[1:], np.uint64(entry.last_pc))
        # the anchor block itself is a candidate only via its deltas
        _append_unique(out, seen, _spatial(anchor, pred.top_deltas(ctx_b[None], ctx_p[None], k)[0], meta))
        nxt = int(pred.next_page(ctx_b[None], ctx_p[None])[0])
    assert len(out) <= degree_bounds(k, state.cfg.d_t)[1]
    return out


# -- whole-trace drivers --------------------------------------------------------


def _windows(arr: np.ndarray, history: int) -> np.ndarray:
    return np.lib.stride_tricks.sliding_window_view(arr, history)


def run_controller(state: ControllerState, blocks, pcs, meta: TraceMeta, history: int,
                   transitions=(), phase_labels=None) -> list[list[int]]:
    """Step the controller over a whole stream, one ``cstp_step`` per access.

    ``transitions`` are access indices at which a detector fired; each starts
    a monitoring window before that access is processed.  With
    ``phase_labels`` the active phase follows the labels instead (upper-bound
    mode).  Accesses without a full history window get no requests.
    """
    blocks = np.asarray(blocks, dtype=np.uint64)
    pcs = np.asarray(pcs, dtype=np.uint64)
    fire = set(int(i) for i in transitions)
    out: list[list[int]] = []
    for i in range(len(blocks)):
        if phase_labels is not None:
            state.active_phase = int(phase_labels[i])
        elif i in fire:
            on_transition(state)
        if i < history - 1:
            state.pbot.update(int(blocks[i]) >> meta.offset_bits, int(blocks[i]) & (meta.blocks_per_page - 1),
                              int(pcs[i]))
            out.append([])
            continue
        out.append(cstp_step(state, blocks[i - history + 1:i + 1], pcs[i - history + 1:i + 1], meta, i))
    return out


def plan_requests(state: ControllerState, blocks, pcs, meta: TraceMeta, history: int,
                  transitions=(), phase_labels=None, batch: int = 4096) -> list[list[int]]:
    """Same result as ``run_controller`` with model calls batched over the stream.

    The request stream of the controller does not depend on cache state, so
    the spatial step, the phase selection and every chain hop can be computed
    in whole-trace passes that each replay the PBOT.
    """
    blocks = np.asarray(blocks, dtype=np.uint64)
    pcs = np.asarray(pcs, dtype=np.uint64)
    n = len(blocks)
    k, d_t = state.cfg.d_s, state.cfg.d_t
    bpp, ob = meta.blocks_per_page, meta.offset_bits
    start = history - 1
    wb, wp = _windows(blocks, history), _windows(pcs, history)
    m = len(wb)
    phases = sorted(state.predictors)

    def predict(ph_of_row, ctx_b, ctx_p, rows, page=True):
        deltas = np.zeros((len(rows), k), dtype=np.int64)
        pages = np.full(len(rows), UNKNOWN_PAGE, dtype=np.int64)
        for p in phases:
            sel = np.flatnonzero(ph_of_row == p)
            for s in range(0, len(sel), batch):
                part = sel[s:s + batch]
                pred = state.predictors[p]
                deltas[part] = pred.top_deltas(ctx_b[part], ctx_p[part], k)
                if page:
                    pages[part] = pred.next_page(ctx_b[part], ctx_p[part])
        return deltas, pages

    # all-phase deltas feed monitoring; only computed when monitoring can happen
    fire = sorted(set(int(i) for i in transitions))
    all_deltas = {}
    if phase_labels is None and fire:
        rows = np.arange(m)
        for p in phases:
            all_deltas[p], _ = predict(np.full(m, p), wb, wp, rows, page=False)

    active = np.zeros(m, dtype=np.int64)
    fire_set = set(fire)
    pbot_snap = Pbot(state.pbot.capacity)
    for pe in state.pbot.entries():
        pbot_snap.update(pe.page, pe.last_offset, pe.last_pc)
    for i in range(n):
        if phase_labels is not None:
            state.active_phase = int(phase_labels[i])
        elif i in fire_set:
            on_transition(state)
        b = int(blocks[i])
        page = b >> ob
        state.pbot.update(page, b & (bpp - 1), int(pcs[i]))
        if i < start:
            continue
        r = i - start
        if state.monitoring is not None:
            _monitor(state, i, b, page, {p: tuple(all_deltas[p][r].tolist()) for p in phases})
        active[r] = state.active_phase

    rows = np.arange(m)
    deltas, nxt = predict(active, wb, wp, rows)
    out: list[list[int]] = [[] for _ in range(n)]
    seen: list[set[int]] = [set() for _ in range(n)]
    for r in range(m):
        b = int(wb[r, -1])
        seen[start + r].add(b)
        _append_unique(out[start + r], seen[start + r], _spatial(b, deltas[r], meta))

    live = rows
    for _ in range(d_t):
        # replay the PBOT to resolve each live row's predicted page at its own time
        pb = Pbot(pbot_snap.capacity)
        for pe in pbot_snap.entries():
            pb.update(pe.page, pe.last_offset, pe.last_pc)
        want = {int(r): int(nxt[j]) for j, r in enumerate(live) if nxt[j] != UNKNOWN_PAGE}
        anchors = {}
        for i in range(n):
            b = int(blocks[i])
            pb.update(b >> ob, b & (bpp - 1), int(pcs[i]))
            r = i - start
            if r >= 0 and r in want:
                e = pb.get(want[r])
                if e is not None:
                    anchors[r] = ((want[r] << ob) | e.last_offset, e.last_pc)
        if not anchors:
            break
        live = np.array(sorted(anchors), dtype=np.int64)
        ctx_b = np.concatenate([wb[live, 1:], np.array([[anchors[r][0]] for r in live.tolist()], dtype=np.uint64)], axis=1)
        ctx_p = np.concatenate([wp[live, 1:], np.array([[anchors[r][1]] for r in live.tolist()], dtype=np.uint64)], axis=1)
        deltas, nxt = predict(active[live], ctx_b, ctx_p, live)
        for j, r in enumerate(live.tolist()):
            i = start + r
            _append_unique(out[i], seen[i], _spatial(anchors[r][0], deltas[j], meta))
    return out
