"""Input preprocessing and label construction for the access predictors."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from graphfetch.trace import Trace

# splitmix64 finalizer (Steele, Lea & Flood 2014)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def mix64(x):
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = x ^ (x >> np.uint64(30))
        x = x * _MIX1
        x = x ^ (x >> np.uint64(27))
        x = x * _MIX2
        x = x ^ (x >> np.uint64(31))
    return x


def hash_normalize_pc(pc):
    """Map PCs to [0, 1) through splitmix64; accepts a scalar or an array."""
    h = mix64(pc)
    # keep 53 bits so the float division can never round up to 1.0
    out = (h >> np.uint64(11)).astype(np.float64) / float(2**53)
    return float(out) if out.ndim == 0 else out


def segment_address(block_addr, num_segments: int = 8, segment_bits: int = 8) -> np.ndarray:
    """Low ``S*b`` bits of the block address as S fields, least significant first, scaled to [0, 1)."""
    a = np.asarray(block_addr, dtype=np.uint64)
    mask = np.uint64((1 << segment_bits) - 1)
    shifts = np.arange(num_segments, dtype=np.uint64) * np.uint64(segment_bits)
    fields = (a[..., None] >> shifts) & mask
    return fields.astype(np.float64) / float(1 << segment_bits)


def unsegment(segments: np.ndarray, segment_bits: int = 8) -> np.ndarray:
    scaled = np.rint(np.asarray(segments) * (1 << segment_bits)).astype(np.uint64)
    shifts = np.arange(scaled.shape[-1], dtype=np.uint64) * np.uint64(segment_bits)
    return np.bitwise_or.reduce(scaled << shifts, axis=-1)


# -- delta bitmaps --------------------------------------------------------------


def bitmap_size(blocks_per_page: int) -> int:
    return 2 * (blocks_per_page - 1)


def delta_to_index(delta: int, blocks_per_page: int) -> int:
    if delta == 0 or abs(delta) >= blocks_per_page:
        raise ValueError(f"delta {delta} outside the in-page range")
    return delta + blocks_per_page - 1 if delta < 0 else delta + blocks_per_page - 2


def index_to_delta(idx, blocks_per_page: int):
    idx = np.asarray(idx)
    bpp = blocks_per_page
    out = np.where(idx < bpp - 1, idx - (bpp - 1), idx - (bpp - 2))
    return int(out) if out.ndim == 0 else out


def all_deltas(blocks_per_page: int) -> np.ndarray:
    return index_to_delta(np.arange(bitmap_size(blocks_per_page)), blocks_per_page)


# -- page vocabulary -------------------------------------------------------------

UNKNOWN = 0


class PageVocab:
    """Bidirectional page-number <-> token map; token 0 is reserved for unknown pages."""

    def __init__(self, pages=()):
        self._tok: dict[int, int] = {}
        self._page: list[int | None] = [None]
        for p in pages:
            self.add(int(p))

    @classmethod
    def from_trace(cls, trace: Trace) -> "PageVocab":
        # first-touch order keeps tokens stable for a given trace
        seen = dict.fromkeys(trace.pages.tolist())
        return cls(seen)

    def add(self, page: int) -> int:
        if page not in self._tok:
            self._tok[page] = len(self._page)
            self._page.append(page)
        return self._tok[page]

    def token(self, page: int) -> int:
        return self._tok.get(int(page), UNKNOWN)

    def tokens(self, pages: np.ndarray) -> np.ndarray:
        get = self._tok.get
        return np.fromiter((get(p, UNKNOWN) for p in pages.tolist()), dtype=np.int64, count=len(pages))

    def page(self, token: int) -> int | None:
        if 0 < token < len(self._page):
            return self._page[token]
        return None

    def __len__(self) -> int:
        """Number of classes including the unknown token."""
        return len(self._page)

    def __eq__(self, other) -> bool:
        return isinstance(other, PageVocab) and self._page == other._page

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self._page[1:]:
            h.update(int(p).to_bytes(8, "little"))
        return h.hexdigest()[:16]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok, page in enumerate(self._page[1:], start=1):
                fh.write(f"{page:#x} {tok}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PageVocab":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    page_s, tok_s = line.split()
                    pairs.append((int(tok_s), int(page_s, 16)))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: expected '<page_hex> <token>'") from None
        pairs.sort()
        if [t for t, _ in pairs] != list(range(1, len(pairs) + 1)):
            raise ValueError(f"{path}: tokens must be 1..n without gaps")
        return cls(p for _, p in pairs)


# -- binary page encoding ------------------------------------------------------

CODE_BITS = 16


def encode_binary(tokens, bits: int = CODE_BITS) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= 1 << bits):
        raise ValueError(f"token outside [0, 2^{bits})")
    return ((t[..., None] >> np.arange(bits)) & 1).astype(np.float64)


def decode_binary(code: np.ndarray) -> np.ndarray:
    bits = (np.asarray(code) >= 0.5).astype(np.int64)
    return (bits << np.arange(bits.shape[-1])).sum(axis=-1)


# -- windows and labels ------------------------------------------------------


@dataclass
class WindowSet:
    """Model inputs for a set of window end positions ``ends`` (inclusive)."""

    ends: np.ndarray
    addr_segments: np.ndarray  # (n, T, S)
    page_tokens: np.ndarray  # (n, T)
    pc_values: np.ndarray  # (n, T, 1)

    def __len__(self) -> int:
        return len(self.ends)

    def take(self, idx) -> "WindowSet":
        return WindowSet(self.ends[idx], self.addr_segments[idx], self.page_tokens[idx], self.pc_values[idx])


def window_ends(n: int, history: int, lookforward: int, distance: int = 0) -> np.ndarray:
    """Positions t with a full history and a full label horizon after ``distance``."""
    return np.arange(history - 1, max(history - 1, n - lookforward - distance))


def make_windows(trace: Trace, ends: np.ndarray, history: int, vocab: PageVocab,
                 num_segments: int = 8, segment_bits: int = 8) -> WindowSet:
    ends = np.asarray(ends, dtype=np.int64)
    idx = ends[:, None] - np.arange(history - 1, -1, -1)[None, :]
    if len(ends) and idx.min() < 0:
        raise ValueError("window extends before the start of the trace")
    blocks = trace.blocks[idx]
    tok_all = vocab.tokens(trace.pages)
    return WindowSet(
        ends=ends,
        addr_segments=segment_address(blocks, num_segments, segment_bits),
        page_tokens=tok_all[idx],
        pc_values=hash_normalize_pc(trace.pcs)[idx][..., None],
    )


def windows_from_arrays(blocks: np.ndarray, pcs: np.ndarray, vocab: PageVocab, offset_bits: int,
                        num_segments: int = 8, segment_bits: int = 8) -> WindowSet:
    """WindowSet from explicit (n, T) block and PC arrays, e.g. synthesized chain contexts."""
    blocks = np.asarray(blocks, dtype=np.uint64)
    pcs = np.asarray(pcs, dtype=np.uint64)
    pages = blocks >> np.uint64(offset_bits)
    return WindowSet(
        ends=np.full(len(blocks), -1, dtype=np.int64),
        addr_segments=segment_address(blocks, num_segments, segment_bits),
        page_tokens=vocab.tokens(pages.ravel()).reshape(pages.shape),
        pc_values=hash_normalize_pc(pcs)[..., None],
    )


def build_labels(trace: Trace, t: int, lookforward: int, vocab: PageVocab, distance: int = 0):
    """Delta bitmap and next-page token for access ``t``.

    Future accesses are taken from ``(t + distance, t + distance + F]``.
    """
    n = len(trace)
    if t < 0 or t + distance + lookforward >= n:
        raise IndexError(f"label horizon of t={t} runs past the end of the trace")
    bitmaps, pages = build_label_arrays(trace, np.array([t]), lookforward, vocab, distance)
    return bitmaps[0], int(pages[0])


def build_label_arrays(trace: Trace, ends: np.ndarray, lookforward: int, vocab: PageVocab,
                       distance: int = 0) -> tuple[np.ndarray, np.ndarray]:
    meta = trace.meta
    bpp = meta.blocks_per_page
    blocks = trace.blocks.astype(np.int64)
    pages = blocks >> meta.offset_bits
    ends = np.asarray(ends, dtype=np.int64)
    n = len(ends)
    bitmaps = np.zeros((n, bitmap_size(bpp)), dtype=np.float64)
    page_lab = np.zeros(n, dtype=np.int64)
    fut = ends[:, None] + distance + 1 + np.arange(lookforward)[None, :]
    fb = blocks[fut]
    fp = pages[fut]
    cur_b = blocks[ends][:, None]
    cur_p = pages[ends][:, None]
    same = fp == cur_p
    delta = fb - cur_b
    ok = same & (delta != 0)
    rows, cols = np.nonzero(ok)
    d = delta[rows, cols]
    bitmaps[rows, np.where(d < 0, d + bpp - 1, d + bpp - 2)] = 1.0
    other = ~same
    has = other.any(axis=1)
    first = np.argmax(other, axis=1)
    tok = vocab.tokens(fp[np.arange(n), first].astype(np.uint64)) if n else np.zeros(0, dtype=np.int64)
    page_lab[has] = tok[has]
    return bitmaps, page_lab


def next_pages(trace: Trace, ends: np.ndarray, horizon: int = 10) -> np.ndarray:
    """Page numbers of the ``horizon`` accesses after each end (for accuracy@10)."""
    pages = trace.pages.astype(np.int64)
    fut = np.asarray(ends)[:, None] + 1 + np.arange(horizon)[None, :]
    fut = np.minimum(fut, len(pages) - 1)
    return pages[fut]
