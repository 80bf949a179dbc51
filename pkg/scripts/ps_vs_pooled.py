"""Per-phase AMMA models against one pooled model on the same training split.

    python3 scripts/ps_vs_pooled.py --seeds 0 1 2 --epochs 10
"""

import argparse
import time

from graphfetch.amma import PredictorConfig
from graphfetch.trace import SynthConfig, generate_synthetic_trace, split_first_iteration
from graphfetch.training import TrainHyper, evaluate_predictor, train_phase_models, train_pooled_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--iterations", type=int, default=2)
    ap.add_argument("--dims", type=int, nargs=3, default=[16, 32, 32], metavar=("ATTN", "FUSION", "TRANS"))
    args = ap.parse_args()

    cfg = PredictorConfig(attn_dim=args.dims[0], fusion_dim=args.dims[1], trans_dim=args.dims[2])
    print("seed  model    F1      F1-macro  acc@10  seconds")
    for seed in args.seeds:
        train, ev = split_first_iteration(generate_synthetic_trace(SynthConfig(iterations=args.iterations), seed))
        hyper = TrainHyper(seed=seed, epochs=args.epochs, lr=args.lr)
        for name, trainer in (("ps", train_phase_models), ("pooled", train_pooled_model)):
            t0 = time.perf_counter()
            models = trainer(train, cfg, hyper)
            dt = time.perf_counter() - t0
            s = evaluate_predictor(models, ev)
            print(f"{seed:<5} {name:<8} {s.delta_f1:.4f}  {s.delta_f1_macro:.4f}    {s.accuracy_at_10:.4f}  {dt:.0f}")


if __name__ == "__main__":
    main()
