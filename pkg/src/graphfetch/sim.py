"""Trace-driven cache simulation, prefetch metrics and the critical-path latency estimate."""

from __future__ import annotations

import csv
import io
import math
from collections import OrderedDict, deque
from dataclasses import asdict, dataclass, field

import numpy as np

from graphfetch.baselines import BoConfig, BoState, IsbConfig, IsbState, bo_access, isb_access
from graphfetch.cstp import ControllerState, on_transition, plan_requests
from graphfetch.detection import evaluate_detections
from graphfetch.features import hash_normalize_pc
from graphfetch.trace import Trace

SCHEMA_VERSION = 1


# -- cache ---------------------------------------------------------------------


@dataclass(frozen=True)
class CacheConfig:
    size_bytes: int = 64 * 1024
    ways: int = 16
    block_bits: int = 6

    @property
    def sets(self) -> int:
        return self.size_bytes // (self.ways << self.block_bits)

    def __post_init__(self):
        s = self.size_bytes // (self.ways << self.block_bits)
        if s < 1 or s & (s - 1) or s * (self.ways << self.block_bits) != self.size_bytes:
            raise ValueError("cache geometry must give a power-of-two number of sets")


class CacheModel:
    """Set-associative LRU cache of blocks; each line carries a prefetched-not-yet-used bit."""

    def __init__(self, sets: int, ways: int):
        if sets < 1 or sets & (sets - 1):
            raise ValueError("sets must be a power of two")
        if ways < 1:
            raise ValueError("ways must be >= 1")
        self.sets, self.ways = sets, ways
        self._sets = [OrderedDict() for _ in range(sets)]
        self.useful = 0
        self.prefetch_fills = 0
        self.evicted_unused = 0

    @classmethod
    def from_config(cls, cfg: CacheConfig) -> "CacheModel":
        return cls(cfg.sets, cfg.ways)

    def _set(self, block: int) -> OrderedDict:
        return self._sets[block & (self.sets - 1)]

    def contains(self, block: int) -> bool:
        return block in self._set(block)

    def _fill(self, s: OrderedDict, block: int, prefetched: bool) -> None:
        if len(s) >= self.ways:
            _, was_pref = s.popitem(last=False)
            self.evicted_unused += was_pref
        s[block] = prefetched

    def access(self, block: int, is_prefetch: bool = False) -> str:
        """'hit', 'miss' or 'filled' (prefetch into a non-resident line); a resident prefetch is 'hit' and no-op."""
        s = self._set(block)
        if block in s:
            if not is_prefetch:
                s.move_to_end(block)
                if s[block]:
                    s[block] = False
                    self.useful += 1
            return "hit"
        self._fill(s, block, is_prefetch)
        if is_prefetch:
            self.prefetch_fills += 1
            return "filled"
        return "miss"

    def unused_resident(self) -> int:
        return sum(v for s in self._sets for v in s.values())


def cache_access(cache: CacheModel, block_addr: int, is_prefetch: bool = False) -> str:
    return cache.access(block_addr, is_prefetch)


# -- prefetchers ------------------------------------------------------------------


class Prefetcher:
    name = "none"

    def prepare(self, trace: Trace, distance: int) -> None:
        pass

    def on_access(self, i: int, pc: int, block: int) -> list[int]:
        return []


class NullPrefetcher(Prefetcher):
    pass


class OraclePrefetcher(Prefetcher):
    """Prefetches the blocks of the next ``degree`` accesses after the distance gap."""

    name = "oracle"

    def __init__(self, degree: int = 6):
        self.degree = degree

    def prepare(self, trace, distance):
        self._blocks = trace.blocks.tolist()
        self._skip = distance

    def on_access(self, i, pc, block):
        lo = i + 1 + self._skip
        return self._blocks[lo:lo + self.degree]


class BoPrefetcher(Prefetcher):
    name = "bo"

    def __init__(self, cfg: BoConfig | None = None):
        self.cfg = cfg or BoConfig()

    def prepare(self, trace, distance):
        self.state = BoState(self.cfg)
        self._ob = trace.meta.offset_bits

    def on_access(self, i, pc, block):
        return bo_access(self.state, block, self._ob)


class IsbPrefetcher(Prefetcher):
    name = "isb"

    def __init__(self, cfg: IsbConfig | None = None):
        self.cfg = cfg or IsbConfig()

    def prepare(self, trace, distance):
        self.state = IsbState(self.cfg)

    def on_access(self, i, pc, block):
        return isb_access(self.state, pc, block)


class CstpPrefetcher(Prefetcher):
    """CSTP driven by detector firings (monitoring + selection) or, in upper-bound mode, by phase labels."""

    name = "cstp"

    def __init__(self, state: ControllerState, history: int, transitions=None, use_labels: bool = False):
        self.state = state
        self.history = history
        self.transitions = transitions
        self.use_labels = use_labels

    def prepare(self, trace, distance):
        labels = trace.phases if self.use_labels else None
        if self.use_labels and labels is None:
            raise ValueError("label-driven switching needs a labelled trace")
        self._plan = plan_requests(self.state, trace.blocks, trace.pcs, trace.meta, self.history,
                                   transitions=self.transitions or (), phase_labels=labels)

    def on_access(self, i, pc, block):
        return self._plan[i]


# -- simulation -----------------------------------------------------------------


@dataclass
class SimReport:
    prefetcher: str
    distance: int
    demand_accesses: int = 0
    demand_hits: int = 0
    demand_misses: int = 0
    prefetches_issued: int = 0
    prefetches_useful: int = 0
    late_or_evicted: int = 0
    unused_resident: int = 0
    max_requests_per_step: int = 0
    per_phase: dict = field(default_factory=dict)
    detector: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.prefetches_useful / self.prefetches_issued if self.prefetches_issued else 0.0

    @property
    def coverage(self) -> float:
        den = self.prefetches_useful + self.demand_misses
        return self.prefetches_useful / den if den else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["accuracy"] = self.accuracy
        d["coverage"] = self.coverage
        return d

    def to_text(self) -> str:
        """Key-value report; floats use repr so identical runs give identical bytes."""
        lines = [f"schema_version={SCHEMA_VERSION}"]
        d = self.to_dict()
        for k in ("prefetcher", "distance", "demand_accesses", "demand_hits", "demand_misses",
                  "prefetches_issued", "prefetches_useful", "late_or_evicted", "unused_resident",
                  "max_requests_per_step", "accuracy", "coverage"):
            lines.append(f"{k}={d[k]!r}" if isinstance(d[k], float) else f"{k}={d[k]}")
        for ph in sorted(self.per_phase):
            for k, v in sorted(self.per_phase[ph].items()):
                lines.append(f"phase.{ph}.{k}={v!r}" if isinstance(v, float) else f"phase.{ph}.{k}={v}")
        for k, v in sorted(self.detector.items()):
            lines.append(f"detector.{k}={v!r}" if isinstance(v, float) else f"detector.{k}={v}")
        return "\n".join(lines) + "\n"

    CSV_FIELDS = ("schema_version", "prefetcher", "distance", "demand_accesses", "demand_misses",
                  "prefetches_issued", "prefetches_useful", "late_or_evicted", "accuracy", "coverage",
                  "detector_precision", "detector_recall", "detector_f1")

    def to_csv_row(self) -> dict:
        d = self.to_dict()
        row = {k: d.get(k, "") for k in self.CSV_FIELDS}
        row["schema_version"] = SCHEMA_VERSION
        for k in ("precision", "recall", "f1"):
            row[f"detector_{k}"] = self.detector.get(k, "")
        return row

    @classmethod
    def from_text(cls, text: str) -> "SimReport":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                kv[k] = v
        if kv.get("schema_version") != str(SCHEMA_VERSION):
            raise ValueError(f"report schema version {kv.get('schema_version')!r}, expected {SCHEMA_VERSION}")
        rep = cls(kv["prefetcher"], int(kv["distance"]))
        for k in ("demand_accesses", "demand_hits", "demand_misses", "prefetches_issued",
                  "prefetches_useful", "late_or_evicted", "unused_resident", "max_requests_per_step"):
            setattr(rep, k, int(kv[k]))
        for k, v in kv.items():
            if k.startswith("phase."):
                _, ph, name = k.split(".", 2)
                rep.per_phase.setdefault(int(ph), {})[name] = _num(v)
            elif k.startswith("detector."):
                rep.detector[k.split(".", 1)[1]] = _num(v)
        return rep


def _num(v: str):
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SimReport.CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.to_csv_row())
    return buf.getvalue()


def simulate(trace: Trace, prefetcher: Prefetcher | None, cache_cfg: CacheConfig | None = None,
             distance: int = 0) -> SimReport:
    """Replay ``trace`` through the cache; requests produced at access i are applied after ``distance`` more accesses."""
    if distance < 0:
        raise ValueError("distance must be >= 0")
    prefetcher = prefetcher or NullPrefetcher()
    cache_cfg = cache_cfg or CacheConfig(block_bits=trace.meta.block_bits)
    cache = CacheModel.from_config(cache_cfg)
    prefetcher.prepare(trace, distance)
    rep = SimReport(prefetcher.name, distance)
    phases = trace.phases
    ph_stats: dict[int, dict] = {}
    queue: deque[tuple[int, list[int]]] = deque()
    in_flight: dict[int, int] = {}
    late = 0
    blocks = trace.blocks.tolist()
    pcs = trace.pcs.tolist()

    def apply(reqs):
        for b in reqs:
            cnt = in_flight.get(b, 0)
            if cnt == 0:
                continue  # cancelled by a demand that arrived first
            if cnt == 1:
                del in_flight[b]
            else:
                in_flight[b] = cnt - 1
            cache.access(b, is_prefetch=True)

    for i, (pc, b) in enumerate(zip(pcs, blocks)):
        if b in in_flight:
            # the prefetch is still in flight: a late, non-useful issue
            late += in_flight.pop(b)
        before = cache.useful
        res = cache.access(b)
        rep.demand_accesses += 1
        if res == "hit":
            rep.demand_hits += 1
        else:
            rep.demand_misses += 1
        if phases is not None:
            st = ph_stats.setdefault(int(phases[i]), {"accesses": 0, "misses": 0, "useful": 0})
            st["accesses"] += 1
            st["misses"] += res == "miss"
            st["useful"] += cache.useful - before
        reqs = prefetcher.on_access(i, pc, b)
        rep.max_requests_per_step = max(rep.max_requests_per_step, len(reqs))
        fresh = [r for r in reqs if not cache.contains(r)]
        for r in fresh:
            in_flight[r] = in_flight.get(r, 0) + 1
        queue.append((i, fresh))
        while queue and queue[0][0] + distance <= i:
            apply(queue.popleft()[1])
    while queue:
        apply(queue.popleft()[1])

    rep.prefetches_useful = cache.useful
    rep.prefetches_issued = cache.prefetch_fills + late
    rep.late_or_evicted = late + cache.evicted_unused
    rep.unused_resident = cache.unused_resident()
    for ph, st in sorted(ph_stats.items()):
        den = st["useful"] + st["misses"]
        st["coverage"] = st["useful"] / den if den else 0.0
        rep.per_phase[ph] = st
    return rep


def attach_detector_scores(rep: SimReport, detected, truth, window: int) -> SimReport:
    s = evaluate_detections(detected, truth, window)
    rep.detector = {"precision": s.precision, "recall": s.recall, "f1": s.f1,
                    "detections": len(list(detected))}
    return rep


def run_detector_in_loop(trace: Trace, detector, controller: ControllerState | None = None) -> list[int]:
    """Feed hashed PCs to ``detector`` in trace order; each firing starts a monitoring window on ``controller``.

    ``detector`` is an object with ``update(x, index)`` returning a detection or None.
    Returns the access indices at which it fired.
    """
    xs = hash_normalize_pc(trace.pcs)
    fired = []
    for i, x in enumerate(xs.tolist()):
        det = detector.update(x, i)
        if det is not None:
            fired.append(i)
            if controller is not None:
                on_transition(controller, det)
    return fired


# -- latency --------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyConfig:
    attn_dim: int = 64
    fusion_dim: int = 128
    trans_dim: int = 128
    layers: int = 1
    include_hash: bool = True
    include_head: bool = True
    include_av: bool = True

    @classmethod
    def uniform(cls, d: int, layers: int = 1) -> "LatencyConfig":
        return cls(d, d, d, layers)


def _t_mm(d: int) -> int:
    if d < 1 or d & (d - 1):
        raise ValueError(f"dimension {d} is not a power of two")
    return 1 + int(math.log2(d))


def estimate_latency(cfg: LatencyConfig) -> int:
    """Critical-path cycle count of one inference, with log-depth matrix products."""
    t_av = 1
    t_emb = _t_mm(cfg.attn_dim) + t_av
    t_att = 4 * _t_mm(cfg.attn_dim) + 3 * t_av
    t_fus = 4 * _t_mm(cfg.fusion_dim) + 3 * t_av + _t_mm(cfg.fusion_dim) + 4 * t_av
    t_trans = 4 * _t_mm(cfg.trans_dim) + 3 * t_av + _t_mm(cfg.trans_dim) + 4 * t_av
    total = t_emb + t_att + t_fus + cfg.layers * t_trans
    if cfg.include_hash:
        total += 1
    if cfg.include_head:
        total += _t_mm(cfg.trans_dim)
    if cfg.include_av:
        total += t_av
    return total


def latency_table(dims=(8, 16, 32, 64, 128, 256, 512, 1024), layers=(1, 2, 4)) -> np.ndarray:
    return np.array([[estimate_latency(LatencyConfig.uniform(d, l)) for d in dims] for l in layers])
