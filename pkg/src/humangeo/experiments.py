"""Synthetic end-to-end experiments driven through the CLI.

Every stage is a ``humangeo`` subcommand, so the runs here exercise exactly
the file-based pipeline a user would run by hand. A run directory looks
like::

    source/           synthetic source corpus (stand-in for ImageNet)
    target/           synthetic 12-city corpus
    split_source/     split_target/
    net_source/       network trained from scratch on the source corpus (f)
    ft_image/ ...     fine-tuned networks per pooling mode (f')
    feat_*/ svm_*/    tapped features and SVMs
    pred_<method>_<pooling>/predictions.tsv
    eval/             reports, summary.csv, compare.csv
    inspect/          density.csv, overlays, summary.txt
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from . import cli

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    signal: str = "foreground"
    classes: int = 12
    per_class: int = 120
    size: int = 64
    seed: int = 0
    # source task used to pretrain f
    source_classes: int = 10
    source_per_class: int = 60
    source_signal: str = "foreground"
    source_epochs: int = 8
    # fine-tuning and classifiers
    epochs: int = 8
    lr: float = 0.01
    grid: str = "0.1,1,10,100"
    folds: int = 5
    svm_epochs: int = 300
    k: int = 5
    bins: int = 50
    methods: tuple = cli.METHODS
    poolings: tuple = ("image",)
    inspect: bool = True
    extra: dict = field(default_factory=dict)


def _run(*argv) -> None:
    argv = [str(a) for a in argv]
    log.info("humangeo %s", " ".join(argv))
    code = cli.main(argv + ["--deterministic"])
    if code != 0:
        raise RuntimeError(f"stage failed ({code}): humangeo {' '.join(argv)}")


def run(cfg: ExperimentConfig, out_dir) -> dict:
    """Run the whole pipeline and return ``{(method, pooling): mCA}`` plus
    ``"quartile_gap"`` when inspection ran."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    src, tgt = out / "source", out / "target"
    _run("synth", "--out", src, "--classes", cfg.source_classes, "--per-class", cfg.source_per_class,
         "--signal", cfg.source_signal, "--seed", 101 + cfg.seed, "--size", cfg.size,
         "--offset", math.pi / cfg.source_classes, "--prefix", "src")
    _run("synth", "--out", tgt, "--classes", cfg.classes, "--per-class", cfg.per_class, "--signal", cfg.signal,
         "--seed", 1 + cfg.seed, "--size", cfg.size)
    for name, data in (("source", src), ("target", tgt)):
        _run("split", "--manifest", data / "manifest.tsv", "--seed", cfg.seed, "--out", out / f"split_{name}")
    tm, ts = tgt / "manifest.tsv", out / "split_target" / "split.tsv"
    train = ("--lr", cfg.lr, "--seed", cfg.seed)
    _run("pretrain", "--manifest", src / "manifest.tsv", "--split", out / "split_source" / "split.tsv",
         "--epochs", cfg.source_epochs, "--size", cfg.size, "--out", out / "net_source", *train)

    preds = []
    for pooling in cfg.poolings:
        ft = out / f"ft_{pooling}"
        needs_ft = any(m != "pretrained_svm" for m in cfg.methods)
        if needs_ft:
            _run("finetune", "--manifest", tm, "--split", ts, "--init", out / "net_source", "--pooling", pooling,
                 "--epochs", cfg.epochs, "--out", ft, *train)
        for method in cfg.methods:
            net = out / "net_source" if method == "pretrained_svm" else ft
            pred_dir = out / f"pred_{method}_{pooling}"
            extra = []
            if method.endswith("_svm"):
                tag = f"{'pre' if method == 'pretrained_svm' else 'ft'}_{pooling}"
                _run("extract", "--manifest", tm, "--split", ts, "--net", net, "--pooling", pooling,
                     "--out", out / f"feat_{tag}")
                _run("train-svm", "--features", out / f"feat_{tag}" / "train", "--grid", cfg.grid,
                     "--folds", cfg.folds, "--svm-epochs", cfg.svm_epochs, "--seed", cfg.seed,
                     "--out", out / f"svm_{tag}")
                extra = ["--svm", out / f"svm_{tag}" / "svm.gsvm"]
            _run("predict", "--method", method, "--manifest", tm, "--split", ts, "--net", net, "--pooling", pooling,
                 "--k", cfg.k, "--out", pred_dir, *extra)
            preds.append(pred_dir / "predictions.tsv")
    _run("evaluate", "--manifest", tm, "--dataset", f"synthetic_{cfg.signal}", "--out", out / "eval",
         "--predictions", *preds)

    results = {}
    with open(out / "eval" / "summary.csv", newline="") as fp:
        for row in csv.DictReader(fp):
            results[(row["method"], row["pooling"])] = float(row["mca"])
    if cfg.inspect and "image" in cfg.poolings and "finetuned" in cfg.methods:
        _run("inspect", "--manifest", tm, "--split", ts, "--net", out / "ft_image", "--bins", cfg.bins,
             "--out", out / "inspect")
        for line in (out / "inspect" / "summary.txt").read_text().splitlines():
            if line.startswith("quartile_gap:"):
                results["quartile_gap"] = float(line.split(":", 1)[1])
    return results


def foreground_config(**kw) -> ExperimentConfig:
    """Four methods, image-based pooling, plus inspection."""
    return ExperimentConfig(signal="foreground", **kw)


def pooling_contrast_config(**kw) -> ExperimentConfig:
    """Finetuned method under both pooling modes on the ``both`` signal."""
    return ExperimentConfig(signal="both", methods=("finetuned",), poolings=("image", "human"), inspect=False, **kw)
