"""Coverage and accuracy of every prefetcher on one synthetic trace.

Trains the per-phase models once, then runs the oracle, BO, ISB and CSTP
(driven by in-loop Soft-KSWIN) through the cache simulator.  ``--distance``
trains distance-aware models and delays every prefetcher's requests.
"""

import argparse
import time

from graphfetch.amma import PredictorConfig
from graphfetch.cstp import ControllerState, CstpConfig, predictors_from_models
from graphfetch.detection import KswinConfig, SoftKswin
from graphfetch.sim import (BoPrefetcher, CstpPrefetcher, IsbPrefetcher, NullPrefetcher, OraclePrefetcher,
                            reports_to_csv, run_detector_in_loop, simulate)
from graphfetch.trace import SynthConfig, generate_synthetic_trace, split_first_iteration
from graphfetch.training import TrainHyper, train_phase_models


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--distance", type=int, nargs="+", default=[0])
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--d-s", type=int, default=2)
    ap.add_argument("--d-t", type=int, default=2)
    ap.add_argument("--csv", action="store_true", help="print CSV rows instead of a table")
    args = ap.parse_args()

    cfg = PredictorConfig(attn_dim=16, fusion_dim=32, trans_dim=32)
    train, ev = split_first_iteration(generate_synthetic_trace(SynthConfig(iterations=3), args.seed))
    fired = run_detector_in_loop(ev, SoftKswin(KswinConfig()))
    reports = []
    for distance in args.distance:
        t0 = time.perf_counter()
        models = train_phase_models(train, cfg, TrainHyper(seed=args.seed, epochs=args.epochs, lr=3e-3,
                                                           distance=distance))
        state = ControllerState(predictors_from_models(models, ev.meta.offset_bits),
                                CstpConfig(d_s=args.d_s, d_t=args.d_t, distance=distance))
        for pf in (NullPrefetcher(), OraclePrefetcher(args.d_s * (args.d_t + 1)), BoPrefetcher(), IsbPrefetcher(),
                   CstpPrefetcher(state, cfg.history, transitions=fired)):
            reports.append(simulate(ev, pf, distance=distance))
        if not args.csv:
            print(f"distance {distance}: {time.perf_counter() - t0:.0f}s")
    if args.csv:
        print(reports_to_csv(reports), end="")
        return
    print("prefetcher  distance  coverage  accuracy  issued  max/step")
    for r in reports:
        print(f"{r.prefetcher:<11} {r.distance:<9} {r.coverage:.3f}     {r.accuracy:.3f}     "
              f"{r.prefetches_issued:<7} {r.max_requests_per_step}")


if __name__ == "__main__":
    main()
