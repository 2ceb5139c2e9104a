"""Monte Carlo signal strengths D and D_h for every simulation model.

    python scripts/signal_strengths.py --mc-reps 2000 --seed 1
"""

from __future__ import annotations

import argparse

from poismix.simulate import MODELS, get_model, signal_strength


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--models", nargs="+", default=sorted(MODELS))
    p.add_argument("--mc-reps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    print("model\tD\tse_D\tD_h\tse_D_h")
    for model in a.models:
        s = signal_strength(*get_model(model), mc_reps=a.mc_reps, seed=a.seed)
        print(f"{model}\t{s.D:.4f}\t{s.se_D:.4f}\t{s.D_h:.4f}\t{s.se_D_h:.4f}", flush=True)


if __name__ == "__main__":
    main()
