"""Memory-trace data model, text I/O and the scatter-gather trace synthesizer."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from graphfetch.rng import derive_rng


class TraceError(ValueError):
    pass


class TraceParseError(TraceError):
    def __init__(self, lineno: int, line: str, reason: str):
        super().__init__(f"line {lineno}: {reason}: {line!r}")
        self.lineno = lineno


@dataclass(frozen=True)
class MemoryAccess:
    index: int
    pc: int
    block_addr: int
    phase: int | None = None


@dataclass(frozen=True)
class TraceMeta:
    block_bits: int = 6
    page_bits: int = 12
    num_phases: int = 1
    transition_truth: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.page_bits <= self.block_bits:
            raise TraceError("page_bits must exceed block_bits")
        if self.num_phases < 1:
            raise TraceError("num_phases must be >= 1")
        if self.transition_truth is not None:
            t = self.transition_truth
            if any(b <= a for a, b in zip(t, t[1:])):
                raise TraceError("transition_truth must be strictly increasing")

    @property
    def blocks_per_page(self) -> int:
        return 1 << (self.page_bits - self.block_bits)

    @property
    def offset_bits(self) -> int:
        return self.page_bits - self.block_bits

    def page_of(self, block_addr: int) -> int:
        return block_addr >> self.offset_bits

    def offset_of(self, block_addr: int) -> int:
        return block_addr & (self.blocks_per_page - 1)


@dataclass(frozen=True)
class Trace:
    """An immutable access stream.

    Columns are kept as numpy arrays (``pcs``, ``blocks``, ``phases``) because
    every consumer scans them in bulk; ``accesses`` materializes the record view.
    """

    meta: TraceMeta
    pcs: np.ndarray
    blocks: np.ndarray
    phases: np.ndarray | None = None

    def __post_init__(self):
        for arr in (self.pcs, self.blocks) + ((self.phases,) if self.phases is not None else ()):
            arr.setflags(write=False)
        if len(self.pcs) != len(self.blocks):
            raise TraceError("pc and block columns differ in length")
        if self.phases is not None and len(self.phases) != len(self.blocks):
            raise TraceError("phase column length mismatch")
        limit = 1 << (64 - self.meta.block_bits)
        if len(self.blocks) and int(self.blocks.max()) >= limit:
            raise TraceError("block address exceeds address width")

    @classmethod
    def from_accesses(cls, meta: TraceMeta, accesses: Sequence[MemoryAccess]) -> "Trace":
        labelled = [a.phase is not None for a in accesses]
        if any(labelled) and not all(labelled):
            raise TraceError("either all accesses carry a phase label or none do")
        pcs = np.array([a.pc for a in accesses], dtype=np.uint64)
        blocks = np.array([a.block_addr for a in accesses], dtype=np.uint64)
        phases = np.array([a.phase for a in accesses], dtype=np.int64) if accesses and all(labelled) else None
        return cls(meta, pcs, blocks, phases)

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, i: int) -> MemoryAccess:
        phase = None if self.phases is None else int(self.phases[i])
        return MemoryAccess(i, int(self.pcs[i]), int(self.blocks[i]), phase)

    @property
    def accesses(self) -> list[MemoryAccess]:
        return [self[i] for i in range(len(self))]

    @property
    def pages(self) -> np.ndarray:
        return self.blocks >> np.uint64(self.meta.offset_bits)

    @property
    def offsets(self) -> np.ndarray:
        return (self.blocks & np.uint64(self.meta.blocks_per_page - 1)).astype(np.int64)

    def slice(self, start: int, stop: int) -> "Trace":
        """Sub-trace with indices renumbered from 0 and truth shifted to match."""
        truth = None
        if self.meta.transition_truth is not None:
            truth = tuple(t - start for t in self.meta.transition_truth if start < t < stop)
        meta = replace(self.meta, transition_truth=truth)
        phases = None if self.phases is None else self.phases[start:stop].copy()
        return Trace(meta, self.pcs[start:stop].copy(), self.blocks[start:stop].copy(), phases)

    def segments(self) -> list[tuple[int, int]]:
        """[start, stop) ranges of constant phase, from labels or from transition_truth."""
        if self.meta.transition_truth is not None:
            cuts = [0, *self.meta.transition_truth, len(self)]
        elif self.phases is not None:
            change = np.flatnonzero(np.diff(self.phases)) + 1
            cuts = [0, *change.tolist(), len(self)]
        else:
            raise TraceError("trace carries neither phase labels nor transition_truth")
        return [(a, b) for a, b in zip(cuts, cuts[1:]) if b > a]


def transitions_from_phases(phases: np.ndarray) -> tuple[int, ...]:
    return tuple((np.flatnonzero(np.diff(phases)) + 1).tolist())


# -- text format -------------------------------------------------------------

_META_KEYS = {"block_bits", "page_bits", "num_phases", "transition_truth"}


def _parse_header(lines: Iterable[str]) -> dict:
    out: dict = {}
    for line in lines:
        body = line[1:].strip()
        if "=" not in body:
            continue
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in _META_KEYS:
            continue
        if key == "transition_truth":
            out[key] = tuple(int(v) for v in value.split(",") if v.strip())
        else:
            out[key] = int(value)
    return out


def parse_trace(path: str | os.PathLike, meta: TraceMeta | None = None) -> Trace:
    """Read ``0x<pc>,0x<byte_addr>[,<phase>]`` lines.

    Header comments ``# key=value`` fill in meta fields that the caller did not
    supply explicitly.
    """
    with open(path, encoding="utf-8") as fh:
        raw = fh.read().splitlines()

    header = [ln for ln in raw if ln.startswith("#")]
    hdr = _parse_header(header)
    if meta is None:
        meta = TraceMeta(**hdr)

    pcs: list[int] = []
    blocks: list[int] = []
    phases: list[int] = []
    for lineno, line in enumerate(raw, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split(",")
        if len(parts) not in (2, 3):
            raise TraceParseError(lineno, line, "expected 2 or 3 comma-separated fields")
        try:
            pc = int(parts[0], 16)
            addr = int(parts[1], 16)
            phase = int(parts[2]) if len(parts) == 3 else None
        except ValueError as exc:
            raise TraceParseError(lineno, line, str(exc)) from None
        if not (parts[0].strip().lower().startswith("0x") and parts[1].strip().lower().startswith("0x")):
            raise TraceParseError(lineno, line, "pc and address must be 0x-prefixed hex")
        if pc >= 1 << 64 or addr >= 1 << 64 or pc < 0 or addr < 0:
            raise TraceParseError(lineno, line, "value out of 64-bit range")
        if (phase is None) != (not phases) and pcs:
            raise TraceParseError(lineno, line, "phase column present on some lines only")
        pcs.append(pc)
        blocks.append(addr >> meta.block_bits)
        if phase is not None:
            if phase < 0:
                raise TraceParseError(lineno, line, "negative phase label")
            phases.append(phase)

    if not pcs:
        raise TraceError(f"{path}: trace file contains no accesses")

    phase_arr = np.array(phases, dtype=np.int64) if phases else None
    if phase_arr is not None and meta.transition_truth is None:
        meta = replace(meta, transition_truth=transitions_from_phases(phase_arr))
    return Trace(meta, np.array(pcs, dtype=np.uint64), np.array(blocks, dtype=np.uint64), phase_arr)


def write_trace(trace: Trace, path: str | os.PathLike) -> None:
    m = trace.meta
    shift = m.block_bits
    lines = [
        f"# block_bits={m.block_bits}",
        f"# page_bits={m.page_bits}",
        f"# num_phases={m.num_phases}",
    ]
    if m.transition_truth is not None:
        lines.append("# transition_truth=" + ",".join(str(t) for t in m.transition_truth))
    pcs = trace.pcs.tolist()
    blocks = trace.blocks.tolist()
    if trace.phases is None:
        lines.extend(f"{pc:#x},{b << shift:#x}" for pc, b in zip(pcs, blocks))
    else:
        lines.extend(f"{pc:#x},{b << shift:#x},{ph}" for pc, b, ph in zip(pcs, blocks, trace.phases.tolist()))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# -- synthetic scatter-gather workload -----------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Shape of the emulated two-phase (Scatter, Gather) graph workload.

    Each simulated core owns an edge region, a bin region and a slice of the
    vertex array; the graph (edge destinations) is fixed per seed so every
    iteration replays the same address stream up to core-interleaving jitter.
    """

    iterations: int = 3
    scatter_len: int = 6000
    gather_len: int = 6000
    partitions: int = 4
    edges_per_vertex: int = 4
    vertex_pages: int = 4
    vertex_stride: int = 8
    scatter_vertex_stride: int = 3
    pcs_per_phase: int = 6
    jitter: float = 0.25
    impulse_rate: float = 0.0
    impulse_len: tuple[int, int] = (4, 10)
    block_bits: int = 6
    page_bits: int = 12
    base_addr: int = 0x7F00_0000_0000

    def __post_init__(self):
        if self.iterations < 1:
            raise TraceError("iterations must be >= 1")
        if self.scatter_len <= 0 or self.gather_len <= 0:
            raise TraceError("phase lengths must be positive")
        if self.partitions < 1:
            raise TraceError("partitions must be >= 1")
        if self.pcs_per_phase < 3:
            raise TraceError("pcs_per_phase must be >= 3")
        if self.edges_per_vertex < 1 or self.vertex_pages < 1 or self.vertex_stride < 1:
            raise TraceError("edges_per_vertex, vertex_pages and vertex_stride must be >= 1")

    @property
    def num_phases(self) -> int:
        return 2


SCATTER, GATHER = 0, 1


def phase_pc_pool(phase: int, size: int) -> list[int]:
    """Disjoint, clustered PC pools: each phase's loop body lives in its own code region."""
    base = 0x400000 + phase * 0x10000
    return [base + 0x40 * i for i in range(size)]


class _Layout:
    def __init__(self, cfg: SynthConfig):
        bpp = 1 << (cfg.page_bits - cfg.block_bits)
        base_block = cfg.base_addr >> cfg.block_bits
        region_pages = -(-cfg.scatter_len // bpp) + 2
        # regions are separated by guard pages so streams never share a page
        gap = 16 * bpp
        cursor = base_block
        self.edge_base, self.bin_base, self.vertex_base = [], [], []
        for bases, pages in ((self.edge_base, region_pages), (self.bin_base, region_pages),
                             (self.vertex_base, cfg.vertex_pages)):
            for _ in range(cfg.partitions):
                bases.append(cursor)
                cursor += pages * bpp + gap
        self.vertex_blocks = cfg.vertex_pages * bpp


def _interleave(rng: np.random.Generator, streams: list[list[list[tuple[int, int]]]],
                jitter: float) -> list[tuple[int, int]]:
    """Merge per-core record streams round-robin; with probability ``jitter`` a random core goes next."""
    out: list[tuple[int, int]] = []
    pos = [0] * len(streams)
    live = [i for i, s in enumerate(streams) if s]
    total = sum(len(s) for s in streams)
    draws = rng.random(total)
    picks = rng.integers(0, 1 << 30, size=total)
    turn = 0
    for k in range(total):
        if draws[k] < jitter:
            core = live[picks[k] % len(live)]
        else:
            core = live[turn % len(live)]
            turn += 1
        out.extend(streams[core][pos[core]])
        pos[core] += 1
        if pos[core] >= len(streams[core]):
            live.remove(core)
    return out


def generate_synthetic_trace(cfg: SynthConfig, seed: int) -> Trace:
    """Emulate iterations of a partitioned Scatter/Gather graph kernel.

    Scatter, per core: read the next source vertex (+1 over the vertex slice)
    every ``edges_per_vertex`` edges, stream the edge list (+1), and append an
    update to the bin of the edge's destination partition, so consecutive
    writes hop between P widely separated bin pages.  Gather, per core: stream
    the own bin back (+1) and apply each update to the vertex slice with a
    fixed block stride.  Every core runs the same code, so the PC streams of
    the P cores interleave.
    """
    lay = _Layout(cfg)
    P = cfg.partitions
    records_per_core = -(-cfg.scatter_len // (P * 2)) + 1
    dst = derive_rng(seed, "synth.graph").integers(0, P, size=(P, records_per_core))
    spc = phase_pc_pool(SCATTER, cfg.pcs_per_phase)
    gpc = phase_pc_pool(GATHER, cfg.pcs_per_phase)
    vb = lay.vertex_blocks

    scatter_streams = []
    counts = [0] * P
    for c in range(P):
        recs = []
        for j in range(records_per_core):
            rec = []
            if j % cfg.edges_per_vertex == 0:
                raw = (j // cfg.edges_per_vertex) * (cfg.scatter_vertex_stride + 2 * c)
                rec.append((spc[0], lay.vertex_base[c] + (raw + raw // vb) % vb))
            rec.append((spc[1], lay.edge_base[c] + j))
            d = int(dst[c, j])
            rec.append((spc[2 + d % (cfg.pcs_per_phase - 2)], lay.bin_base[d] + counts[d]))
            counts[d] += 1
            recs.append(rec)
        scatter_streams.append(recs)

    gather_records = -(-cfg.gather_len // (P * 2)) + 1
    gather_streams = []
    for c in range(P):
        n_bin = max(counts[c], 1)
        recs = []
        for k in range(gather_records):
            raw = k * (cfg.vertex_stride + 2 * c)
            # shift by one block per wrap so later sweeps visit fresh blocks
            v = (raw + raw // vb) % vb
            recs.append([(gpc[0], lay.bin_base[c] + n_bin - 1 - k % n_bin),
                         (gpc[1 + c % (cfg.pcs_per_phase - 1)], lay.vertex_base[c] + v)])
        gather_streams.append(recs)

    pcs: list[int] = []
    blocks: list[int] = []
    phases: list[int] = []
    for it in range(cfg.iterations):
        rng = derive_rng(seed, f"synth.iter{it}")
        for phase, streams, length, foreign in ((SCATTER, scatter_streams, cfg.scatter_len, gpc),
                                                 (GATHER, gather_streams, cfg.gather_len, spc)):
            seg = _interleave(rng, streams, cfg.jitter)[:length]
            seg = _inject_impulses(rng, seg, foreign, cfg)
            pcs.extend(pc for pc, _ in seg)
            blocks.extend(b for _, b in seg)
            phases.extend([phase] * len(seg))

    phase_arr = np.array(phases, dtype=np.int64)
    meta = TraceMeta(
        block_bits=cfg.block_bits,
        page_bits=cfg.page_bits,
        num_phases=cfg.num_phases,
        transition_truth=transitions_from_phases(phase_arr),
    )
    return Trace(meta, np.array(pcs, dtype=np.uint64), np.array(blocks, dtype=np.uint64), phase_arr)


def _inject_impulses(rng, seg, foreign_pcs, cfg: SynthConfig):
    """Overwrite the PCs of short bursts with PCs from the other phase's pool.

    Addresses are untouched; only the instruction mix shifts briefly, which is
    the within-phase pattern shift that trips hard drift detectors.
    """
    if cfg.impulse_rate <= 0:
        return seg
    seg = list(seg)
    n = len(seg)
    lo, hi = cfg.impulse_len
    # keep a margin around the boundaries so impulses stay inside the phase
    margin = hi + 1
    starts = np.flatnonzero(rng.random(n) < cfg.impulse_rate)
    for s in starts:
        if s < margin or s > n - 2 * margin:
            continue
        length = int(rng.integers(lo, hi + 1))
        for j in range(s, min(s + length, n)):
            seg[j] = (foreign_pcs[int(rng.integers(0, len(foreign_pcs)))], seg[j][1])
    return seg


def split_first_iteration(trace: Trace) -> tuple[Trace, Trace]:
    """First ``num_phases`` segments are the training iteration; the rest is for evaluation."""
    segs = trace.segments()
    n = trace.meta.num_phases
    if len(segs) < n + 1:
        raise TraceError(f"need at least {n + 1} phase segments, trace has {len(segs)}")
    cut = segs[n - 1][1]
    return trace.slice(0, cut), trace.slice(cut, len(trace))
