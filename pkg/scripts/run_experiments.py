"""Run the synthetic experiments end to end and print a results table.

    python3 scripts/run_experiments.py --out runs/ --seeds 0 1

For each seed this writes ``<out>/seed<k>/foreground`` (four methods with
image-based pooling, plus filter inspection) and ``<out>/seed<k>/both``
(the finetuned network under image-based and human-based pooling).
"""

import argparse
import logging
import time

from humangeo import experiments as X


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--epochs", type=int, default=X.ExperimentConfig.epochs)
    p.add_argument("--per-class", dest="per_class", type=int, default=X.ExperimentConfig.per_class)
    p.add_argument("--skip-both", action="store_true", help="only run the foreground experiment")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    for seed in args.seeds:
        kw = dict(seed=seed, epochs=args.epochs, per_class=args.per_class)
        t0 = time.time()
        fg = X.run(X.foreground_config(**kw), f"{args.out}/seed{seed}/foreground")
        print(f"seed {seed} foreground ({time.time() - t0:.0f}s)")
        for key, val in fg.items():
            name = key if isinstance(key, str) else " / ".join(key)
            print(f"  {name:<32s} {val:.4f}")
        if args.skip_both:
            continue
        t0 = time.time()
        both = X.run(X.pooling_contrast_config(**kw), f"{args.out}/seed{seed}/both")
        print(f"seed {seed} both ({time.time() - t0:.0f}s)")
        for (method, pooling), val in both.items():
            print(f"  {method + ' / ' + pooling:<32s} {val:.4f}")


if __name__ == "__main__":
    main()
