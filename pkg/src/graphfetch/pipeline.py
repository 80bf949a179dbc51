"""End-to-end steps shared by the CLI and the experiment scripts.

Every step reads its inputs from and writes its outputs under the run's
output root, so steps can be rerun independently.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path

from graphfetch.amma import PredictorConfig, load_model, save_model
from graphfetch.baselines import BoConfig
from graphfetch.compression import distill, quantize_model_set
from graphfetch.config import RunConfig
from graphfetch.cstp import ControllerState, predictors_from_models
from graphfetch.detection import (KswinConfig, Kswin, SoftKswin, dt_train, evaluate_detections,
                                  pc_windows, run_dt_on_trace)
from graphfetch.features import PageVocab, hash_normalize_pc
from graphfetch.nn import CheckpointError
from graphfetch.rng import derive_seed
from graphfetch.sim import (BoPrefetcher, CstpPrefetcher, IsbPrefetcher, NullPrefetcher, OraclePrefetcher,
                            SimReport, attach_detector_scores, reports_to_csv, run_detector_in_loop, simulate)
from graphfetch.trace import Trace, generate_synthetic_trace, parse_trace, split_first_iteration, write_trace
from graphfetch.training import PhaseModelSet, TrainHyper, evaluate_predictor, train_phase_models

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


# -- paths ----------------------------------------------------------------------


def trace_path(cfg: RunConfig) -> Path:
    return cfg.output_root() / "trace.txt"


def model_dir(cfg: RunConfig, kind: str = "models") -> Path:
    return cfg.output_root() / kind


def report_dir(cfg: RunConfig) -> Path:
    return cfg.output_root() / "reports"


def _hyper(cfg: RunConfig, tag: str, **kw) -> TrainHyper:
    fields = {**cfg.train.__dict__, **kw, "seed": derive_seed(cfg.seed, tag)}
    return TrainHyper(**fields)


# -- trace ----------------------------------------------------------------------


def gen_trace(cfg: RunConfig) -> Path:
    trace = generate_synthetic_trace(cfg.synth, derive_seed(cfg.seed, "synth"))
    path = trace_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_trace(trace, path)
    return path


def load_split(cfg: RunConfig) -> tuple[Trace, Trace]:
    path = trace_path(cfg)
    if not path.exists():
        raise PipelineError(f"trace {path} not found; run gen-trace first")
    return split_first_iteration(parse_trace(path))


# -- models -----------------------------------------------------------------------


def save_model_set(models: PhaseModelSet, directory: Path) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    digest = models.vocab.digest()
    models.vocab.save(directory / "vocab.txt")
    written = [directory / "vocab.txt"]
    for p in models.phases:
        for kind, m in (("delta", models.delta[p]), ("page", models.page[p])):
            path = directory / f"{kind}_phase{p}.gfck"
            save_model(m, path, p, digest, distance=models.distance)
            written.append(path)
    with open(directory / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "epoch", "loss"])
        for tag in sorted(models.losses):
            for e, v in enumerate(models.losses[tag]):
                w.writerow([tag, e, repr(float(v))])
    written.append(directory / "losses.csv")
    return written


def load_model_set(directory: Path, num_phases: int) -> PhaseModelSet:
    vocab_path = directory / "vocab.txt"
    if not vocab_path.exists():
        raise PipelineError(f"{vocab_path} missing; run train first")
    vocab = PageVocab.load(vocab_path)
    delta, page = {}, {}
    distance = 0
    cfg = None
    for p in range(num_phases):
        for kind, dst in (("delta", delta), ("page", page)):
            path = directory / f"{kind}_phase{p}.gfck"
            if not path.exists():
                raise PipelineError(f"no {kind} model for phase {p} ({path}); run train first")
            model, meta = load_model(path)
            if meta.get("vocab_digest") != vocab.digest():
                raise CheckpointError(f"{path}: vocabulary digest does not match {vocab_path}")
            dst[p] = model
            distance = int(meta.get("distance", "0"))
            cfg = model.cfg
    losses: dict[str, list[float]] = {}
    loss_path = directory / "losses.csv"
    if loss_path.exists():
        with open(loss_path, newline="") as fh:
            for row in csv.DictReader(fh):
                losses.setdefault(row["model"], []).append(float(row["loss"]))
    return PhaseModelSet(cfg, vocab, delta, page, losses, distance)


def train(cfg: RunConfig, resume: bool = False) -> PhaseModelSet:
    tr, _ = load_split(cfg)
    prev = None
    if resume and (model_dir(cfg) / "vocab.txt").exists():
        prev = load_model_set(model_dir(cfg), tr.meta.num_phases)
    models = train_phase_models(tr, cfg.predictor, _hyper(cfg, "train"), resume=prev)
    save_model_set(models, model_dir(cfg))
    return models


def student_config(cfg: RunConfig) -> PredictorConfig:
    d = cfg.distill
    base = cfg.predictor.to_dict()
    base.update(attn_dim=d.attn_dim, fusion_dim=d.fusion_dim, trans_dim=d.trans_dim, heads=d.heads)
    return PredictorConfig(**base)


def distill_step(cfg: RunConfig) -> PhaseModelSet:
    tr, _ = load_split(cfg)
    teachers = load_model_set(model_dir(cfg), tr.meta.num_phases)
    d = cfg.distill
    hyper = _hyper(cfg, "distill", epochs=d.epochs, lr=d.lr, distance=teachers.distance)
    students = distill(teachers, tr, student_config(cfg), hyper, temperature=d.temperature,
                       soft_weight=d.soft_weight, single_student=d.single_student)
    save_model_set(students, model_dir(cfg, "students"))
    return students


def quantize_step(cfg: RunConfig, source: str = "models") -> Path:
    tr, ev = load_split(cfg)
    models = load_model_set(model_dir(cfg, source), tr.meta.num_phases)
    qset, reports = quantize_model_set(models)
    out = model_dir(cfg, f"{source}_q8")
    save_model_set(qset, out)
    full = evaluate_predictor(models, ev)
    quant = evaluate_predictor(qset, ev)
    lines = [f"source={source}", f"delta_f1_full={full.delta_f1!r}", f"delta_f1_quantized={quant.delta_f1!r}"]
    for name, r in sorted(reports.items()):
        lines += [f"{name}.parameters={r.parameters}", f"{name}.size_bytes={r.size_bytes}",
                  f"{name}.float64_bytes={r.float64_bytes}", f"{name}.max_abs_error={r.max_abs_error!r}"]
    (out / "quant_report.txt").write_text("\n".join(lines) + "\n")
    return out / "quant_report.txt"


# -- detection --------------------------------------------------------------------


def detect(cfg: RunConfig, kind: str, train_trace: Trace, trace: Trace) -> list[int] | None:
    """Indices at which detector ``kind`` fires on ``trace`` (None for label-driven or no switching)."""
    d = cfg.detector
    if kind in ("labels", "none"):
        return None
    if kind in ("kswin", "soft_kswin"):
        kcfg = KswinConfig(**{**d.kswin.__dict__, "seed": derive_seed(cfg.seed, "detector")})
        det = (SoftKswin if kind == "soft_kswin" else Kswin)(kcfg)
        return run_detector_in_loop(trace, det)
    if train_trace.phases is None:
        raise PipelineError("decision-tree detectors need a labelled training trace")
    X = pc_windows(hash_normalize_pc(train_trace.pcs), d.dt_history)
    state = dt_train(X, train_trace.phases[d.dt_history - 1:], d.dt_history, d.dt_max_depth, d.dt_queue)
    found = run_dt_on_trace(state, hash_normalize_pc(trace.pcs), soft=kind == "soft_dt")
    return [x.index for x in found]


def detect_bench(cfg: RunConfig, kinds=("kswin", "soft_kswin", "dt", "soft_dt")) -> Path:
    tr, ev = load_split(cfg)
    truth = ev.meta.transition_truth or ()
    out = cfg.output_root() / "detect_bench.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["detector", "detections", "precision", "recall", "f1"])
        for kind in kinds:
            fired = detect(cfg, kind, tr, ev)
            s = evaluate_detections(fired, truth, cfg.detector.lag_window)
            w.writerow([kind, len(fired), repr(s.precision), repr(s.recall), repr(s.f1)])
    return out


# -- simulation --------------------------------------------------------------------


def build_prefetcher(cfg: RunConfig, name: str, train_trace: Trace, trace: Trace, models: PhaseModelSet | None):
    if name == "none":
        return NullPrefetcher(), None
    if name == "oracle":
        return OraclePrefetcher(cfg.simulation.oracle_degree), None
    if name == "bo":
        return BoPrefetcher(BoConfig(**cfg.bo.__dict__)), None
    if name == "isb":
        return IsbPrefetcher(cfg.isb), None
    if name == "cstp":
        if models is None:
            raise PipelineError("cstp needs trained models")
        cstp_cfg = dataclasses.replace(cfg.cstp, distance=models.distance)
        state = ControllerState(predictors_from_models(models, trace.meta.offset_bits), cstp_cfg,
                                active_phase=int(trace.phases[0]) if trace.phases is not None else 0)
        kind = cfg.detector.kind
        fired = detect(cfg, kind, train_trace, trace)
        return CstpPrefetcher(state, models.cfg.history, transitions=fired, use_labels=kind == "labels"), fired
    raise PipelineError(f"unknown prefetcher {name!r}")


def simulate_step(cfg: RunConfig, prefetchers=None, models_from: str = "models") -> list[Path]:
    tr, ev = load_split(cfg)
    names = list(prefetchers or cfg.simulation.prefetchers)
    models = load_model_set(model_dir(cfg, models_from), tr.meta.num_phases) if "cstp" in names else None
    out = report_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    written, reports = [], []
    for name in names:
        pf, fired = build_prefetcher(cfg, name, tr, ev, models)
        rep = simulate(ev, pf, cfg.cache, cfg.simulation.distance)
        if fired is not None:
            attach_detector_scores(rep, fired, ev.meta.transition_truth or (), cfg.detector.lag_window)
        path = out / f"{name}.txt"
        path.write_text(rep.to_text())
        written.append(path)
        reports.append(rep)
    (out / "summary.csv").write_text(reports_to_csv(reports))
    return written


def load_reports(paths) -> list[SimReport]:
    reports, bad = [], []
    for p in paths:
        try:
            reports.append(SimReport.from_text(Path(p).read_text()))
        except (OSError, ValueError, KeyError) as exc:
            bad.append(f"{p}: {exc}")
    if bad:
        raise PipelineError("incompatible reports:\n  " + "\n  ".join(bad))
    if not reports:
        raise PipelineError("no reports given")
    return reports


def render_csv(paths) -> str:
    return reports_to_csv(load_reports(paths))


def render_report(paths) -> str:
    """Aligned comparison table of report files, in the given order."""
    reports = load_reports(paths)
    head = ["prefetcher", "distance", "accuracy", "coverage", "issued", "useful", "misses",
            "det_P", "det_R", "det_F1"]
    rows = []
    for r in reports:
        det = [f"{r.detector[k]:.3f}" if k in r.detector else "-" for k in ("precision", "recall", "f1")]
        rows.append([r.prefetcher, str(r.distance), f"{r.accuracy:.4f}", f"{r.coverage:.4f}",
                     str(r.prefetches_issued), str(r.prefetches_useful), str(r.demand_misses), *det])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(head)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join([fmt.format(*head)] + [fmt.format(*row) for row in rows]) + "\n"


def evaluate_models(cfg: RunConfig, source: str = "models"):
    tr, ev = load_split(cfg)
    return evaluate_predictor(load_model_set(model_dir(cfg, source), tr.meta.num_phases), ev)

