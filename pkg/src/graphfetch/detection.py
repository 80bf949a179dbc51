"""Online phase-transition detectors over the PC stream.

Two unsupervised detectors (KSWIN and its soft variant) consume hash-normalized
PCs; two supervised ones (DT, Soft-DT) consume windows of the last T PCs and a
decision tree trained on phase labels.
"""

from __future__ import annotations

import math
from collections import Counter, deque
from dataclasses import dataclass

import numpy as np

from graphfetch.rng import derive_rng

KINDS = ("kswin", "soft_kswin", "dt", "soft_dt")


@dataclass(frozen=True)
class Detection:
    index: int
    kind: str

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("detection index must be >= 0")
        if self.kind not in KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}")


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov distance sup_x |F_a(x) - F_b(x)|."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("K-S statistic needs two non-empty samples")
    # the ECDF difference only changes at sample points
    x = np.concatenate([a, b])
    fa = np.searchsorted(a, x, side="right") / a.size
    fb = np.searchsorted(b, x, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def kswin_threshold(alpha: float, r: int, h: int) -> float:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if r < 1 or h < 1:
        raise ValueError("window sizes must be >= 1")
    return math.sqrt(-math.log(alpha / 2.0) * (1.0 + r / h) / (2.0 * r))


@dataclass
class KswinConfig:
    w: int = 300
    r: int = 30
    h: int = 30
    alpha: float = 0.005
    th_r: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.r < 1 or self.h < 1 or self.r + self.h > self.w:
            raise ValueError("need r, h >= 1 and r + h <= w")
        if not 0.0 < self.th_r <= 1.0:
            raise ValueError("th_r must lie in (0, 1]")


class Kswin:
    """Hard KSWIN: fire as soon as the recent window departs from the sampled history."""

    kind = "kswin"

    def __init__(self, cfg: KswinConfig | None = None, **kw):
        self.cfg = cfg or KswinConfig(**kw)
        self.threshold = kswin_threshold(self.cfg.alpha, self.cfg.r, self.cfg.h)
        self.rng = derive_rng(self.cfg.seed, f"detector.{self.kind}")
        self.psi: deque[float] = deque(maxlen=self.cfg.w)
        self.seen = 0
        self.last_stat = 0.0

    def reset(self):
        self.psi.clear()

    def _sample_history(self, pool_len: int) -> np.ndarray:
        window = np.fromiter(self.psi, dtype=np.float64, count=len(self.psi))
        pick = self.rng.integers(0, pool_len, size=self.cfg.h)
        return window[pick], window[-self.cfg.r:]

    def update(self, x: float, index: int | None = None) -> Detection | None:
        index = self.seen if index is None else index
        self.seen += 1
        self.psi.append(float(x))
        if len(self.psi) < self.cfg.w:
            return None
        hist, recent = self._sample_history(self.cfg.w - self.cfg.r)
        self.last_stat = ks_statistic(hist, recent)
        if self.last_stat > self.threshold:
            self.reset()
            return Detection(index, self.kind)
        return None


class SoftKswin(Kswin):
    """KSWIN with soft detection.

    Per-step exceedances open an episode; the history pool shrinks by the
    episode counter so it never reaches into the new pattern, and a transition
    is declared only when exceedances dominate once the counter spans a full
    recent window.
    """

    kind = "soft_kswin"

    def __init__(self, cfg: KswinConfig | None = None, **kw):
        super().__init__(cfg, **kw)
        self.counter = 0
        self.detections = 0
        self.pool_clamped = 0

    def reset(self):
        super().reset()
        self.counter = 0
        self.detections = 0

    def update(self, x: float, index: int | None = None) -> Detection | None:
        cfg = self.cfg
        index = self.seen if index is None else index
        self.seen += 1
        if len(self.psi) < cfg.w:
            self.psi.append(float(x))
            return None
        self.psi.append(float(x))  # deque evicts the oldest point

        pool = cfg.w - cfg.r - self.counter
        if pool < cfg.h:
            pool = max(cfg.h, 1)
            self.pool_clamped += 1
        hist, recent = self._sample_history(pool)
        self.last_stat = ks_statistic(hist, recent)

        if self.last_stat > self.threshold:
            self.counter += 1
            self.detections += 1
            if self.counter >= cfg.r:
                if self.detections / self.counter > cfg.th_r:
                    self.reset()
                    return Detection(index, self.kind)
                self._close_episode()
                return None
        elif self.counter >= cfg.r:
            self._close_episode()
            return None
        if self.counter > 0:
            self.counter += 1
        return None

    def _close_episode(self):
        # the episode spanned a full recent window without a verdict; start afresh
        self.counter = 0
        self.detections = 0


def run_stream(detector, values, start_index: int = 0) -> list[Detection]:
    out = []
    for i, v in enumerate(values):
        d = detector.update(v, start_index + i)
        if d is not None:
            out.append(d)
    return out


# -- decision tree -----------------------------------------------------------


@dataclass
class _Node:
    value: int
    feature: int = -1
    threshold: float = 0.0
    left: "_Node | None" = None
    right: "_Node | None" = None


def _mode(values) -> int:
    """Most frequent value; lowest value wins ties."""
    counts = Counter(int(v) for v in values)
    best = max(counts.values())
    return min(v for v, c in counts.items() if c == best)


class DecisionTree:
    """CART classifier with Gini impurity.

    Ties resolve deterministically: the lowest feature index wins equal-gain
    splits, the lowest class id wins equal-count leaves.
    """

    def __init__(self, max_depth: int = 8, min_samples_split: int = 2):
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.root: _Node | None = None
        self.n_classes = 0

    def fit(self, X, y) -> "DecisionTree":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        self.n_classes = int(y.max()) + 1
        self.root = self._grow(X, y, 0)
        return self

    def _leaf_value(self, y) -> int:
        return int(np.argmax(np.bincount(y, minlength=self.n_classes)))

    def _grow(self, X, y, depth) -> _Node:
        node = _Node(self._leaf_value(y))
        if depth >= self.max_depth or len(y) < self.min_samples_split or np.all(y == y[0]):
            return node
        split = self._best_split(X, y)
        if split is None:
            return node
        f, thr = split
        mask = X[:, f] <= thr
        node.feature, node.threshold = f, thr
        node.left = self._grow(X[mask], y[mask], depth + 1)
        node.right = self._grow(X[~mask], y[~mask], depth + 1)
        return node

    def _best_split(self, X, y):
        n = len(y)
        onehot = np.eye(self.n_classes)[y]
        total = onehot.sum(axis=0)
        parent = 1.0 - np.sum((total / n) ** 2)
        best_gain, best = 1e-12, None
        for f in range(X.shape[1]):
            order = np.argsort(X[:, f], kind="stable")
            xs = X[order, f]
            left = np.cumsum(onehot[order], axis=0)[:-1]
            cut = np.flatnonzero(xs[1:] > xs[:-1])
            if cut.size == 0:
                continue
            lc = left[cut]
            nl = (cut + 1).astype(np.float64)
            nr = n - nl
            rc = total - lc
            gl = 1.0 - np.sum((lc / nl[:, None]) ** 2, axis=1)
            gr = 1.0 - np.sum((rc / nr[:, None]) ** 2, axis=1)
            gain = parent - (nl * gl + nr * gr) / n
            k = int(np.argmax(gain))
            if gain[k] > best_gain + 1e-12:
                best_gain = float(gain[k])
                best = (f, float((xs[cut[k]] + xs[cut[k] + 1]) / 2.0))
        return best

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.empty(len(X), dtype=np.int64)
        self._route(self.root, X, np.arange(len(X)), out)
        return out

    def _route(self, node, X, idx, out):
        if node.left is None:
            out[idx] = node.value
            return
        mask = X[idx, node.feature] <= node.threshold
        self._route(node.left, X, idx[mask], out)
        self._route(node.right, X, idx[~mask], out)


def pc_windows(pc_values: np.ndarray, history: int) -> np.ndarray:
    """Row t holds the hashed PCs of accesses t-T+1..t (rows start at t = T-1)."""
    v = np.asarray(pc_values, dtype=np.float64)
    return np.lib.stride_tricks.sliding_window_view(v, history)


class DtDetectorState:
    """Trained tree plus the online detection state for DT and Soft-DT."""

    def __init__(self, tree: DecisionTree, history: int, train_accuracy: float, q: int = 32):
        if q < 2 or q % 2:
            raise ValueError("result queue length must be even and >= 2")
        self.tree = tree
        self.history = history
        self.train_accuracy = train_accuracy
        self.separable = train_accuracy > 0.5
        self.q = q
        self.queue: deque[int] = deque(maxlen=q)
        self.prev: int | None = None
        self.last_report: int | None = None
        self.seen = 0

    def reset_online(self):
        self.queue.clear()
        self.prev = None
        self.last_report = None
        self.seen = 0


def dt_train(windows, labels, history: int = 9, max_depth: int = 8, q: int = 32) -> DtDetectorState:
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("decision-tree detector needs at least two phase labels")
    tree = DecisionTree(max_depth=max_depth).fit(windows, labels)
    acc = float(np.mean(tree.predict(windows) == labels))
    return DtDetectorState(tree, history, acc, q)


def dt_step(state: DtDetectorState, prediction: int, index: int | None = None) -> Detection | None:
    index = state.seen if index is None else index
    state.seen += 1
    prev, state.prev = state.prev, prediction
    if prev is not None and prediction != prev:
        return Detection(index, "dt")
    return None


def soft_dt_step(state: DtDetectorState, prediction: int, index: int | None = None) -> Detection | None:
    index = state.seen if index is None else index
    state.seen += 1
    state.queue.append(int(prediction))
    if len(state.queue) < state.q:
        return None
    items = list(state.queue)
    half = state.q // 2
    older, newer = _mode(items[:half]), _mode(items[half:])
    if older != newer and newer != state.last_report:
        state.last_report = newer
        return Detection(index, "soft_dt")
    return None


def dt_detect(state: DtDetectorState, window, index: int | None = None) -> Detection | None:
    return dt_step(state, int(state.tree.predict(window)[0]), index)


def soft_dt_detect(state: DtDetectorState, window, index: int | None = None) -> Detection | None:
    return soft_dt_step(state, int(state.tree.predict(window)[0]), index)


def run_dt_on_trace(state: DtDetectorState, pc_values: np.ndarray, soft: bool) -> list[Detection]:
    """Batch-predict every full window, then replay the online rule over the predictions."""
    state.reset_online()
    X = pc_windows(pc_values, state.history)
    preds = state.tree.predict(X)
    step = soft_dt_step if soft else dt_step
    out = []
    for i, p in enumerate(preds.tolist()):
        d = step(state, p, i + state.history - 1)
        if d is not None:
            out.append(d)
    return out


# -- detection quality --------------------------------------------------------


@dataclass(frozen=True)
class DetectionScore:
    precision: float
    recall: float
    f1: float
    true_positives: int
    precision_defined: bool = True


def evaluate_detections(detected, truth, window: int) -> DetectionScore:
    """Greedy one-to-one matching of detections to truth indices.

    A detection at d matches the earliest unmatched truth t with t <= d <= t + window.
    """
    idx = sorted(d.index if isinstance(d, Detection) else int(d) for d in detected)
    truth = list(truth)
    used = [False] * len(truth)
    tp = 0
    for d in idx:
        for j, t in enumerate(truth):
            if not used[j] and t <= d <= t + window:
                used[j] = True
                tp += 1
                break
    defined = len(idx) > 0
    p = tp / len(idx) if defined else 0.0
    r = tp / len(truth) if truth else (1.0 if not idx else 0.0)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return DetectionScore(p, r, f1, tp, defined)
