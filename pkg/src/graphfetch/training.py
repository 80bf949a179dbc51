"""Offline training of phase-specific predictors and their evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from graphfetch import nn
from graphfetch.amma import AmmaModel, PredictorConfig, page_predict, rank_deltas
from graphfetch.features import (PageVocab, WindowSet, build_label_arrays, encode_binary,
                                 make_windows, next_pages, window_ends)
from graphfetch.rng import derive_rng, derive_seed
from graphfetch.trace import Trace

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 8
    batch_size: int = 128
    lr: float = 2e-3
    seed: int = 0
    max_windows: int = 50_000
    distance: int = 0
    page_head: str = "page_softmax"


@dataclass
class PhaseModelSet:
    """phase id -> (delta model, page model); a pooled set maps every phase to one pair."""

    cfg: PredictorConfig
    vocab: PageVocab
    delta: dict[int, AmmaModel]
    page: dict[int, AmmaModel]
    losses: dict[str, list[float]] = field(default_factory=dict)
    distance: int = 0

    @property
    def phases(self) -> list[int]:
        return sorted(self.delta)

    def __len__(self) -> int:
        return len(self.delta)

    def pair(self, phase: int) -> tuple[AmmaModel, AmmaModel]:
        return self.delta[phase], self.page[phase]


@dataclass
class LabelledWindows:
    ws: WindowSet
    bitmaps: np.ndarray
    page_labels: np.ndarray
    phases: np.ndarray | None = None

    def take(self, idx) -> "LabelledWindows":
        return LabelledWindows(self.ws.take(idx), self.bitmaps[idx], self.page_labels[idx],
                               None if self.phases is None else self.phases[idx])

    def __len__(self) -> int:
        return len(self.ws)


def labelled_windows(trace: Trace, cfg: PredictorConfig, vocab: PageVocab, ends: np.ndarray,
                     distance: int = 0) -> LabelledWindows:
    ws = make_windows(trace, ends, cfg.history, vocab, cfg.num_segments, cfg.segment_bits)
    bitmaps, pages = build_label_arrays(trace, ends, cfg.lookforward, vocab, distance)
    phases = None if trace.phases is None else trace.phases[ends]
    return LabelledWindows(ws, bitmaps, pages, phases)


def phase_window_ends(trace: Trace, phase: int, cfg: PredictorConfig, distance: int = 0) -> np.ndarray:
    """Window ends whose history and label horizon both stay inside one segment of ``phase``."""
    out = []
    for start, stop in trace.segments():
        if int(trace.phases[start]) != phase:
            continue
        lo = start + cfg.history - 1
        hi = stop - cfg.lookforward - distance - 1
        if hi >= lo:
            out.append(np.arange(lo, hi + 1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _subsample(ends: np.ndarray, limit: int, rng) -> np.ndarray:
    if len(ends) <= limit:
        return ends
    return np.sort(rng.choice(ends, size=limit, replace=False))


def make_model(cfg: PredictorConfig, kind: str, vocab: PageVocab, seed: int, bpp: int) -> AmmaModel:
    return AmmaModel(cfg, kind, len(vocab) if kind != "delta_sigmoid" else 0, seed, bpp)


def page_targets(model: AmmaModel, labels: np.ndarray) -> np.ndarray:
    return encode_binary(labels) if model.kind == "page_binary16" else labels


def loss_and_grad(model: AmmaModel, logits: np.ndarray, target: np.ndarray):
    if model.kind == "page_softmax":
        return nn.softmax_cce(logits, target)
    return nn.bce_with_logits(logits, target)


def fit(model: AmmaModel, ws: WindowSet, target: np.ndarray, hyper: TrainHyper, tag: str,
        soft_target: np.ndarray | None = None, temperature: float = 2.0, soft_weight: float = 0.5,
        start_epoch: int = 0) -> list[float]:
    """Minibatch Adam; returns the mean training loss of every epoch.

    With ``soft_target`` (teacher logits) the loss becomes
    ``(1-w) * hard + w * T^2 * soft`` with temperature-scaled distributions.
    """
    opt = nn.Adam(model, lr=hyper.lr)
    n = len(ws)
    history = []
    for epoch in range(start_epoch, start_epoch + hyper.epochs):
        # per-epoch streams keep a resumed run on the same shuffles as an uninterrupted one
        order = derive_rng(hyper.seed, f"fit.{tag}.{epoch}").permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, hyper.batch_size):
            idx = order[s:s + hyper.batch_size]
            model.zero_grad()
            z = model.forward(ws.take(idx))
            loss, g = loss_and_grad(model, z, target[idx])
            if soft_target is not None:
                t = temperature
                zt = soft_target[idx] / t
                if model.kind == "page_softmax":
                    sl, sg = nn.soft_target_cce(z / t, nn.softmax(zt))
                else:
                    sl, sg = nn.bce_with_logits(z / t, nn.sigmoid(zt))
                loss = (1 - soft_weight) * loss + soft_weight * t * t * sl
                g = (1 - soft_weight) * g + soft_weight * t * sg
            model.backward(g)
            opt.step()
            total += loss * len(idx)
            count += len(idx)
        history.append(total / max(count, 1))
        log.debug("%s epoch %d loss %.6f", tag, epoch, history[-1])
    return history


def train_phase_models(train: Trace, cfg: PredictorConfig, hyper: TrainHyper,
                       vocab: PageVocab | None = None, resume: PhaseModelSet | None = None) -> PhaseModelSet:
    """One delta model (BCE on bitmaps) and one page model per phase, each fed only its phase's windows.

    With ``resume`` training continues from those models for ``hyper.epochs``
    further epochs and the new losses are appended to the old curves.
    """
    if train.phases is None:
        raise TrainingError("training trace has no phase labels")
    if resume is not None:
        vocab = resume.vocab
    vocab = vocab or PageVocab.from_trace(train)
    bpp = train.meta.blocks_per_page
    delta, page, losses = {}, {}, {}
    for phase in range(train.meta.num_phases):
        ends = phase_window_ends(train, phase, cfg, hyper.distance)
        if len(ends) < hyper.batch_size:
            raise TrainingError(f"phase {phase}: only {len(ends)} training windows "
                                f"(segments must exceed T + F = {cfg.history + cfg.lookforward} accesses)")
        ends = _subsample(ends, hyper.max_windows, derive_rng(hyper.seed, f"subsample.{phase}"))
        data = labelled_windows(train, cfg, vocab, ends, hyper.distance)
        if resume is not None:
            dm, pm = resume.pair(phase)
            old_d, old_p = resume.losses.get(f"delta.{phase}", []), resume.losses.get(f"page.{phase}", [])
        else:
            dm = make_model(cfg, "delta_sigmoid", vocab, derive_seed(hyper.seed, f"init.delta.{phase}"), bpp)
            pm = make_model(cfg, hyper.page_head, vocab, derive_seed(hyper.seed, f"init.page.{phase}"), bpp)
            old_d, old_p = [], []
        losses[f"delta.{phase}"] = old_d + fit(dm, data.ws, data.bitmaps, hyper, f"delta.{phase}",
                                               start_epoch=len(old_d))
        losses[f"page.{phase}"] = old_p + fit(pm, data.ws, page_targets(pm, data.page_labels), hyper,
                                              f"page.{phase}", start_epoch=len(old_p))
        delta[phase], page[phase] = dm, pm
    return PhaseModelSet(cfg, vocab, delta, page, losses, hyper.distance)


def train_pooled_model(train: Trace, cfg: PredictorConfig, hyper: TrainHyper,
                       vocab: PageVocab | None = None) -> PhaseModelSet:
    """A single phase-agnostic pair trained on the windows of all phases."""
    vocab = vocab or PageVocab.from_trace(train)
    bpp = train.meta.blocks_per_page
    if train.phases is not None:
        ends = np.concatenate([phase_window_ends(train, p, cfg, hyper.distance)
                               for p in range(train.meta.num_phases)])
    else:
        ends = window_ends(len(train), cfg.history, cfg.lookforward, hyper.distance)
    ends = _subsample(np.sort(ends), hyper.max_windows, derive_rng(hyper.seed, "subsample.pooled"))
    if len(ends) < hyper.batch_size:
        raise TrainingError("not enough training windows")
    data = labelled_windows(train, cfg, vocab, ends, hyper.distance)
    dm = make_model(cfg, "delta_sigmoid", vocab, derive_seed(hyper.seed, "init.delta.pooled"), bpp)
    pm = make_model(cfg, hyper.page_head, vocab, derive_seed(hyper.seed, "init.page.pooled"), bpp)
    losses = {"delta.pooled": fit(dm, data.ws, data.bitmaps, hyper, "delta.pooled"),
              "page.pooled": fit(pm, data.ws, page_targets(pm, data.page_labels), hyper, "page.pooled")}
    n = train.meta.num_phases
    return PhaseModelSet(cfg, vocab, {p: dm for p in range(n)}, {p: pm for p in range(n)}, losses,
                         hyper.distance)


# -- evaluation --------------------------------------------------------------


@dataclass(frozen=True)
class PredictorScore:
    delta_f1: float
    delta_f1_macro: float
    accuracy_at_10: float
    windows: int
    per_phase_f1: dict = field(default_factory=dict)


def select_top(scores: np.ndarray, k: int, blocks_per_page: int) -> np.ndarray:
    order = rank_deltas(scores, blocks_per_page)[:, :k]
    out = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(out, order, True, axis=1)
    return out


def select_threshold(scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return scores >= threshold


def delta_f1(pred: np.ndarray, label: np.ndarray) -> tuple[float, float]:
    """(micro, macro) multi-label F1; macro averages per-window F1 over windows."""
    pred = np.asarray(pred, dtype=bool)
    label = np.asarray(label, dtype=bool)
    tp = np.sum(pred & label, axis=1)
    fp = np.sum(pred & ~label, axis=1)
    fn = np.sum(~pred & label, axis=1)
    denom = 2 * tp.sum() + fp.sum() + fn.sum()
    micro = 2 * tp.sum() / denom if denom else 1.0
    row_den = 2 * tp + fp + fn
    per_row = np.where(row_den > 0, 2 * tp / np.maximum(row_den, 1), 1.0)
    return float(micro), float(per_row.mean()) if len(per_row) else 0.0


def accuracy_at(pred_pages: np.ndarray, future_pages: np.ndarray) -> float:
    """Fraction of windows whose predicted page (-1 = none) shows up among the future pages."""
    if len(pred_pages) == 0:
        return 0.0
    hit = (future_pages == np.asarray(pred_pages)[:, None]).any(axis=1) & (np.asarray(pred_pages) >= 0)
    return float(hit.mean())


def tokens_to_pages(tokens: np.ndarray, vocab: PageVocab) -> np.ndarray:
    out = np.full(len(tokens), -1, dtype=np.int64)
    for i, t in enumerate(tokens.tolist()):
        p = vocab.page(t)
        if p is not None:
            out[i] = p
    return out


def evaluate_predictor(models: PhaseModelSet, trace: Trace, cfg: PredictorConfig | None = None,
                       phases: np.ndarray | None = None, mode: str = "topk",
                       horizon: int = 10, max_windows: int | None = None, seed: int = 0) -> PredictorScore:
    """Delta F1 of the selected deltas against the label bitmaps, and page accuracy@``horizon``.

    Each window is scored by the model pair of its phase; phases come from
    ``phases`` (per access) or the trace labels.
    """
    cfg = cfg or models.cfg
    ends = window_ends(len(trace), cfg.history, cfg.lookforward, models.distance)
    if max_windows is not None and len(ends) > max_windows:
        ends = _subsample(ends, max_windows, derive_rng(seed, "eval.subsample"))
    data = labelled_windows(trace, cfg, models.vocab, ends, models.distance)
    if phases is None:
        phases = trace.phases if trace.phases is not None else np.zeros(len(trace), dtype=np.int64)
    win_phase = np.asarray(phases)[ends]
    bpp = trace.meta.blocks_per_page
    pred_bits = np.zeros_like(data.bitmaps, dtype=bool)
    pred_pages = np.full(len(ends), -1, dtype=np.int64)
    per_phase = {}
    for p in np.unique(win_phase).tolist():
        sel = np.flatnonzero(win_phase == p)
        dm, pm = models.pair(p)
        sub = data.ws.take(sel)
        scores = dm.predict_proba(sub)
        pred_bits[sel] = (select_top(scores, cfg.spatial_degree, bpp) if mode == "topk"
                          else select_threshold(scores))
        tok, _ = page_predict(pm, sub)
        pred_pages[sel] = tokens_to_pages(tok, models.vocab)
        per_phase[p] = delta_f1(pred_bits[sel], data.bitmaps[sel] > 0)[0]
    micro, macro = delta_f1(pred_bits, data.bitmaps > 0)
    acc = accuracy_at(pred_pages, next_pages(trace, ends + models.distance, horizon))
    return PredictorScore(micro, macro, acc, len(ends), per_phase)
