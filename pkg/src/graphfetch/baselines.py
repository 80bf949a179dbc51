"""Rule-based comparison prefetchers: Best-Offset (spatial) and ISB (temporal, PC-localized)."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

_BASE_OFFSETS = (1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 18, 20, 24, 30, 32)
BO_OFFSETS = _BASE_OFFSETS + tuple(-d for d in _BASE_OFFSETS)


@dataclass
class BoConfig:
    offsets: tuple[int, ...] = BO_OFFSETS
    max_score: int = 31
    max_rounds: int = 100
    bad_score: int = 1
    rr_size: int = 256
    degree: int = 6


@dataclass
class BoState:
    """Best-Offset learner scored in trace order.

    Each access tests one candidate offset d: the offset scores when
    ``block - d`` is among recent accesses.  A learning phase ends when an
    offset reaches ``max_score`` or after ``max_rounds`` passes over the list;
    the winner becomes the prefetch offset unless its score is at most
    ``bad_score``, which switches prefetching off until the next phase.
    """

    cfg: BoConfig = field(default_factory=BoConfig)
    scores: dict[int, int] = field(default_factory=dict)
    best_offset: int | None = None
    phases_done: int = 0
    _idx: int = 0
    _round: int = 0
    _rr: OrderedDict = field(default_factory=OrderedDict)

    def __post_init__(self):
        if not self.scores:
            self.scores = {d: 0 for d in self.cfg.offsets}

    def _end_phase(self) -> None:
        best = max(self.cfg.offsets, key=lambda d: self.scores[d])  # first maximal in list order
        self.best_offset = best if self.scores[best] > self.cfg.bad_score else None
        self.scores = {d: 0 for d in self.cfg.offsets}
        self._idx = self._round = 0
        self.phases_done += 1

    def _learn(self, block: int) -> None:
        d = self.cfg.offsets[self._idx]
        if block - d in self._rr:
            self.scores[d] += 1
            if self.scores[d] >= self.cfg.max_score:
                self._end_phase()
                return
        self._idx += 1
        if self._idx == len(self.cfg.offsets):
            self._idx = 0
            self._round += 1
            if self._round >= self.cfg.max_rounds:
                self._end_phase()

    def _remember(self, block: int) -> None:
        self._rr[block] = None
        self._rr.move_to_end(block)
        if len(self._rr) > self.cfg.rr_size:
            self._rr.popitem(last=False)


def bo_access(state: BoState, block: int, offset_bits: int) -> list[int]:
    state._learn(block)
    state._remember(block)
    if state.best_offset is None:
        return []
    page = block >> offset_bits
    out = []
    for j in range(1, state.cfg.degree + 1):
        tgt = block + j * state.best_offset
        if tgt < 0 or tgt >> offset_bits != page:
            break
        out.append(tgt)
    return out


@dataclass
class IsbConfig:
    region: int = 256
    degree: int = 6


@dataclass
class IsbState:
    """Per-PC structural address space: each PC's successive misses get consecutive structural addresses."""

    cfg: IsbConfig = field(default_factory=IsbConfig)
    ps: dict[int, int] = field(default_factory=dict)
    sp: dict[int, int] = field(default_factory=dict)
    last: dict[int, int] = field(default_factory=dict)
    next_region: int = 0
    regions_allocated: int = 0

    def _new_region(self) -> int:
        base = self.next_region
        self.next_region += self.cfg.region
        self.regions_allocated += 1
        return base

    def _map(self, phys: int, struct: int) -> None:
        self.ps[phys] = struct
        self.sp[struct] = phys

    def train(self, pc: int, block: int) -> None:
        if block not in self.ps:
            prev = self.last.get(pc)
            s = None
            if prev is not None and prev in self.ps:
                cand = self.ps[prev] + 1
                if cand % self.cfg.region and cand not in self.sp:
                    s = cand
            self._map(block, self._new_region() if s is None else s)
        self.last[pc] = block

    def predict(self, block: int) -> list[int]:
        s = self.ps.get(block)
        if s is None:
            return []
        out = []
        for j in range(1, self.cfg.degree + 1):
            if (s + j) % self.cfg.region == 0:
                break
            nxt = self.sp.get(s + j)
            if nxt is None:
                break
            out.append(nxt)
        return out


def isb_access(state: IsbState, pc: int, block: int) -> list[int]:
    state.train(pc, block)
    return [b for b in state.predict(block) if b != block]

