"""Model compression: teacher-student distillation and 8-bit affine weight quantization."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from graphfetch.amma import AmmaModel, PredictorConfig
from graphfetch.rng import derive_rng, derive_seed
from graphfetch.trace import Trace
from graphfetch.training import (PhaseModelSet, TrainHyper, TrainingError, _subsample, fit, labelled_windows,
                                 make_model, page_targets, phase_window_ends)


def _teacher_logits(model: AmmaModel, ws, batch: int = 1024) -> np.ndarray:
    return np.concatenate([model.forward(ws.take(slice(s, s + batch))) for s in range(0, len(ws), batch)])


def _check_dims(teacher: PredictorConfig, student: PredictorConfig) -> None:
    for k in ("attn_dim", "fusion_dim", "trans_dim", "trans_layers"):
        if getattr(student, k) > getattr(teacher, k):
            raise ValueError(f"student {k}={getattr(student, k)} exceeds teacher {getattr(teacher, k)}")
    for k in ("history", "lookforward", "num_segments", "segment_bits"):
        if getattr(student, k) != getattr(teacher, k):
            raise ValueError(f"student and teacher must share {k}")


def distill(teachers: PhaseModelSet, train: Trace, student_cfg: PredictorConfig, hyper: TrainHyper,
            temperature: float = 2.0, soft_weight: float = 0.5, single_student: bool = False,
            heads: tuple[str, ...] = ("delta", "page")) -> PhaseModelSet:
    """Train students on a mix of hard labels and temperature-softened teacher outputs.

    Per phase by default; with ``single_student`` one student pair learns from
    every phase's windows, each window supervised by its own phase's teacher.
    ``soft_weight=0`` gives the from-scratch baseline on identical data.
    """
    _check_dims(teachers.cfg, student_cfg)
    if train.phases is None:
        raise TrainingError("distillation needs a phase-labelled training trace")
    vocab = teachers.vocab
    bpp = train.meta.blocks_per_page
    per_phase = {}
    for phase in teachers.phases:
        ends = phase_window_ends(train, phase, student_cfg, hyper.distance)
        if len(ends) == 0:
            raise TrainingError(f"phase {phase}: no training windows")
        ends = _subsample(ends, hyper.max_windows, derive_rng(hyper.seed, f"subsample.{phase}"))
        data = labelled_windows(train, student_cfg, vocab, ends, hyper.distance)
        tdm, tpm = teachers.pair(phase)
        soft = {"delta": _teacher_logits(tdm, data.ws) if "delta" in heads else None,
                "page": _teacher_logits(tpm, data.ws) if "page" in heads else None}
        per_phase[phase] = (data, soft)

    def build(tag, seed_tag, kind, groups):
        ws_parts = [d.ws for d, _ in groups]
        ws = ws_parts[0] if len(ws_parts) == 1 else _concat_ws(ws_parts)
        if kind == "delta_sigmoid":
            target = np.concatenate([d.bitmaps for d, _ in groups])
            soft = np.concatenate([s["delta"] for _, s in groups])
        else:
            target = None
            soft = np.concatenate([s["page"] for _, s in groups])
        model = make_model(student_cfg, kind, vocab, derive_seed(hyper.seed, seed_tag), bpp)
        if target is None:
            target = page_targets(model, np.concatenate([d.page_labels for d, _ in groups]))
        hist = fit(model, ws, target, hyper, tag, soft_target=soft if soft_weight > 0 else None,
                   temperature=temperature, soft_weight=soft_weight)
        return model, hist

    delta, page, losses = {}, {}, {}
    if single_student:
        groups = [per_phase[p] for p in teachers.phases]
        dm, losses["delta.student"] = build("distill.delta", "student.delta", "delta_sigmoid", groups) \
            if "delta" in heads else (None, [])
        pm, losses["page.student"] = build("distill.page", "student.page", teachers.page[teachers.phases[0]].kind,
                                           groups) if "page" in heads else (None, [])
        for p in teachers.phases:
            delta[p], page[p] = dm, pm
    else:
        for p in teachers.phases:
            if "delta" in heads:
                delta[p], losses[f"delta.{p}"] = build(f"distill.delta.{p}", f"student.delta.{p}",
                                                       "delta_sigmoid", [per_phase[p]])
            if "page" in heads:
                page[p], losses[f"page.{p}"] = build(f"distill.page.{p}", f"student.page.{p}",
                                                     teachers.page[p].kind, [per_phase[p]])
    return PhaseModelSet(student_cfg, vocab, delta, page, losses, teachers.distance)


def _concat_ws(parts):
    from graphfetch.features import WindowSet

    return WindowSet(*(np.concatenate([getattr(p, f) for p in parts])
                       for f in ("ends", "addr_segments", "page_tokens", "pc_values")))


# -- quantization ---------------------------------------------------------------


@dataclass(frozen=True)
class QuantizedTensor:
    q: np.ndarray  # uint8
    scale: float
    zero_point: float  # real value encoded by q = 0
    shape: tuple[int, ...]

    def dequantize(self) -> np.ndarray:
        return (self.zero_point + self.q.astype(np.float64) * self.scale).reshape(self.shape)


def quantize_tensor(x: np.ndarray, bits: int = 8) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    levels = (1 << bits) - 1
    if hi == lo:
        return QuantizedTensor(np.zeros(x.size, dtype=np.uint8), 1.0, lo, x.shape)
    scale = (hi - lo) / levels
    q = np.clip(np.rint((x.ravel() - lo) / scale), 0, levels).astype(np.uint8)
    return QuantizedTensor(q, scale, lo, x.shape)


# scale and zero point stored as float32 each
TENSOR_OVERHEAD_BYTES = 8


@dataclass(frozen=True)
class QuantReport:
    tensors: int
    parameters: int
    size_bytes: int
    float64_bytes: int
    max_abs_error: float


def quantize_model(model: AmmaModel) -> tuple[AmmaModel, QuantReport, dict[str, QuantizedTensor]]:
    """8-bit per-tensor affine quantization; returns a dequantized copy for inference, a size report and the codes."""
    qmodel = copy.deepcopy(model)
    codes = {}
    err = 0.0
    state = {}
    for name, arr in model.state_dict().items():
        qt = quantize_tensor(arr)
        codes[name] = qt
        deq = qt.dequantize()
        err = max(err, float(np.max(np.abs(deq - arr))) if arr.size else 0.0)
        state[name] = deq
    qmodel.load_state_dict(state)
    n = model.num_parameters()
    rep = QuantReport(len(codes), n, n + TENSOR_OVERHEAD_BYTES * len(codes), 8 * n, err)
    return qmodel, rep, codes


def quantize_model_set(models: PhaseModelSet) -> tuple[PhaseModelSet, dict[str, QuantReport]]:
    delta, page, reports = {}, {}, {}
    cache = {}
    for p in models.phases:
        for kind, src, dst in (("delta", models.delta, delta), ("page", models.page, page)):
            m = src[p]
            if id(m) not in cache:
                qm, rep, _ = quantize_model(m)
                cache[id(m)] = qm
                reports[f"{kind}.{p}"] = rep
            dst[p] = cache[id(m)]
    return PhaseModelSet(models.cfg, models.vocab, delta, page, dict(models.losses), models.distance), reports
