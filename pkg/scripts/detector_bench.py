"""Precision and recall of the four phase-transition detectors over many traces."""

import argparse

import numpy as np

from graphfetch.detection import (Kswin, KswinConfig, SoftKswin, dt_train, evaluate_detections, pc_windows,
                                  run_dt_on_trace, run_stream)
from graphfetch.features import hash_normalize_pc
from graphfetch.trace import SynthConfig, generate_synthetic_trace, split_first_iteration


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--traces", type=int, default=20)
    ap.add_argument("--impulse-rate", type=float, default=0.008)
    ap.add_argument("--phase-len", type=int, default=3000)
    args = ap.parse_args()

    synth = SynthConfig(iterations=3, scatter_len=args.phase_len, gather_len=args.phase_len,
                        impulse_rate=args.impulse_rate)
    lag = 2 * KswinConfig().w
    scores = {k: [] for k in ("kswin", "soft_kswin", "dt", "soft_dt")}
    for seed in range(args.traces):
        train, ev = split_first_iteration(generate_synthetic_trace(synth, seed))
        v = hash_normalize_pc(ev.pcs)
        truth = ev.meta.transition_truth
        for cls in (Kswin, SoftKswin):
            scores[cls.kind].append(evaluate_detections(run_stream(cls(KswinConfig(seed=seed)), v), truth, lag))
        dt = dt_train(pc_windows(hash_normalize_pc(train.pcs), 9), train.phases[8:])
        for soft in (False, True):
            found = run_dt_on_trace(dt, v, soft)
            scores["soft_dt" if soft else "dt"].append(evaluate_detections(found, truth, lag))
    print("detector     precision  recall  f1")
    for k, rows in scores.items():
        p, r, f = (np.mean([getattr(s, a) for s in rows]) for a in ("precision", "recall", "f1"))
        print(f"{k:<12} {p:.3f}      {r:.3f}   {f:.3f}")


if __name__ == "__main__":
    main()
