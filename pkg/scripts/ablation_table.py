"""Train each ablation row (loss kind, GMF, ground mask) on the toy task and print a metrics table."""
import argparse
import dataclasses

from contrastmotion.config import ABLATIONS
from contrastmotion.experiment import ToyConfig, run_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=1200)
    ap.add_argument("--rows", nargs="*", default=list(ABLATIONS), choices=list(ABLATIONS))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("| row | loss | GMF | ground mask | EPE3D | Acc3DS | Acc3DR | Outliers3D | moving err (widths) |")
    print("|---|---|---|---|---|---|---|---|---|")
    for name in args.rows:
        kind, gmf, ground = ABLATIONS[name]
        base = ToyConfig()
        cfg = dataclasses.replace(
            base, steps=args.steps, seed=args.seed,
            loss=dataclasses.replace(base.loss, kind=kind),
            model=dataclasses.replace(base.model, use_gmf=gmf),
            ground_threshold=base.ground_threshold if ground else None,
        )
        m = run_toy(cfg)["after"]
        print("| %s | %s | %s | %s | %.3f | %.3f | %.3f | %.3f | %.2f |" % (
            name, kind, "yes" if gmf else "no", "yes" if ground else "no", m["EPE3D"], m["Acc3DS"],
            m["Acc3DR"], m["Outliers3D"], m["moving_pillar_error_widths"]))


if __name__ == "__main__":
    main()
