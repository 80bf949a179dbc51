"""Distilled students against students trained on labels alone.

For each seed: train per-phase teachers, then train delta students with
``soft_weight`` in ``--weights`` (0 is the from-scratch baseline) and report
delta F1.  Also prints the 8-bit quantization size and F1 change for the teachers.
"""

import argparse

from graphfetch.amma import AmmaModel, PredictorConfig
from graphfetch.compression import distill, quantize_model_set
from graphfetch.trace import SynthConfig, generate_synthetic_trace, split_first_iteration
from graphfetch.training import TrainHyper, evaluate_predictor, train_phase_models


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--weights", type=float, nargs="+", default=[0.0, 0.5])
    ap.add_argument("--temperature", type=float, default=2.0)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--student", type=int, nargs=3, default=[8, 16, 8], metavar=("ATTN", "FUSION", "TRANS"))
    args = ap.parse_args()

    teacher_cfg = PredictorConfig(attn_dim=16, fusion_dim=32, trans_dim=32)
    student_cfg = PredictorConfig(attn_dim=args.student[0], fusion_dim=args.student[1], trans_dim=args.student[2])
    print(f"teacher {AmmaModel(teacher_cfg, 'delta_sigmoid').num_parameters()} params, "
          f"student {AmmaModel(student_cfg, 'delta_sigmoid').num_parameters()} params")
    for seed in args.seeds:
        train, ev = split_first_iteration(generate_synthetic_trace(SynthConfig(iterations=2), seed))
        hyper = TrainHyper(seed=seed, epochs=args.epochs, lr=3e-3)
        teachers = train_phase_models(train, teacher_cfg, hyper)
        base = evaluate_predictor(teachers, ev).delta_f1
        q, reports = quantize_model_set(teachers)
        size = sum(r.size_bytes for r in reports.values())
        print(f"seed {seed}: teacher F1 {base:.4f}, 8-bit F1 {evaluate_predictor(q, ev).delta_f1:.4f} "
              f"({size} bytes)")
        for w in args.weights:
            s = distill(teachers, train, student_cfg, hyper, temperature=args.temperature, soft_weight=w,
                        heads=("delta",))
            s.page = teachers.page
            print(f"  soft_weight {w:.2f}: student F1 {evaluate_predictor(s, ev).delta_f1:.4f}")


if __name__ == "__main__":
    main()
