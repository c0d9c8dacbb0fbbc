"""Command-line pipeline. Stages talk to each other only through files.

::

    humangeo synth     --out data/fg --signal foreground
    humangeo split     --manifest data/fg/manifest.tsv --out runs/fg
    humangeo pretrain  --manifest data/src/manifest.tsv --split runs/src/split.tsv --out runs/src/net
    humangeo finetune  --manifest ... --split ... --init runs/src/net --pooling image --out runs/fg/ft
    humangeo extract   --manifest ... --split ... --net runs/fg/ft --tap fc7 --out runs/fg/feat_ft
    humangeo train-svm --features runs/fg/feat_ft/train --out runs/fg/svm_ft
    humangeo predict   --method finetuned_svm --net runs/fg/ft --svm runs/fg/svm_ft/svm.gsvm ...
    humangeo inspect   --manifest ... --split ... --net runs/fg/ft --out runs/fg/inspect
    humangeo evaluate  --manifest ... --predictions runs/fg/pred_*/predictions.tsv --out runs/fg/eval

Any flag can also come from ``--config FILE`` (``key=value`` lines, keys as
flag names without dashes); explicit flags win.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import classifiers as K
from . import convnet as C
from . import dataset as D
from . import evaluation as E
from . import inspection as I
from .errors import HumangeoError, UsageError

log = logging.getLogger("humangeo")

METHODS = ("pretrained_svm", "finetuned", "finetuned_svm", "deep_im2gps")


@dataclass
class RunConfig:
    """Every knob of a run; CLI flags and config files both land here."""

    manifest: str | None = None
    split: str | None = None
    seed: int = 0
    network: str = "desk"
    pooling: str = "image"
    method: str | None = None
    tap: str = "fc7"
    k: int = 5
    weighting: str = "inverse_distance"
    bins: int = 50
    out: str | None = None
    strict_bbox: bool = True
    deterministic: bool = False
    # fine-tuning
    lr: float = 0.01
    lr_end: float | None = None
    epochs: int = 10
    batch_size: int = 32
    momentum: float = 0.9
    dropout: float = 0.5
    # svm
    grid: str = "0.1,1,10,100"
    folds: int = 5
    svm_epochs: int = 300

    def finetune_config(self) -> C.FinetuneConfig:
        return C.FinetuneConfig(lr=self.lr, lr_end=self.lr_end, epochs=self.epochs, batch_size=self.batch_size,
                                momentum=self.momentum, dropout=self.dropout, seed=self.seed)

    def c_grid(self) -> list:
        try:
            return [float(v) for v in self.grid.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"bad SVM grid {self.grid!r}") from None


def load_config(path) -> dict:
    """Parse ``key=value`` lines (``#`` comments allowed) into a dict of strings."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


class MissingArtifactError(UsageError):
    pass


def _require(path, producer: str) -> Path:
    p = Path(path) if path else None
    if p is None or not p.exists():
        raise MissingArtifactError(f"missing {path or 'required input'}; produce it with `humangeo {producer}`")
    return p


def _records(args, part: str):
    manifest = D.load_manifest(_require(args.manifest, "synth"))
    assignment = D.load_split(_require(args.split, "split"))
    return manifest, assignment, D.partition(manifest, assignment, part)


def _labels(records) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.intp)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    m = D.make_synthetic_dataset(args.out, args.classes, args.per_class, args.signal, args.seed, args.size,
                                 args.offset, args.prefix)
    print(f"wrote {len(m.records)} images to {args.out}")


def cmd_split(args) -> None:
    manifest = D.load_manifest(_require(args.manifest, "synth"))
    assignment = D.split(manifest, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_split(assignment, out / "split.tsv")
    counts = {p: sum(1 for v in assignment.values() if v == p) for p in D.PARTITIONS}
    print(f"split {len(assignment)} records: {counts}")


def _train_network(args, make) -> None:
    cfg = run_config(args)
    pooling = D.pooling_mode(cfg.pooling)
    manifest, assignment, train = _records(args, "train")
    val = D.partition(manifest, assignment, "val")
    spec, weights = make(manifest)
    target = spec.input_shape[1:]
    mean = D.channel_mean(manifest, train, pooling, target, cfg.strict_bbox)
    spec = dataclasses.replace(spec, mean=mean)
    x_train = D.load_batch(manifest, train, pooling, target, mean, cfg.strict_bbox)
    x_val = D.load_batch(manifest, val, pooling, target, mean, cfg.strict_bbox)
    history = []
    weights = C.finetune(spec, weights, (x_train, _labels(train)), (x_val, _labels(val)), cfg.finetune_config(),
                         history)
    out = Path(args.out)
    C.save_network(spec, weights, out)
    with open(out / "history.csv", "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "val_mca"])
        for h in history:
            w.writerow([h["epoch"], f"{h['lr']:.6g}", _fmt(h["train_loss"]), _fmt(h["val_mca"])])
    best = max(h["val_mca"] for h in history)
    print(f"trained {len(history)} epochs, best val mCA {best:.4f}; network in {out}")


def cmd_pretrain(args) -> None:
    """Train a network from scratch (stand-in for ImageNet pretraining)."""

    def make(manifest):
        if args.network == "vggf":
            spec = C.vggf_spec(manifest.num_classes)
        else:
            spec = C.desk_spec(manifest.num_classes, input_size=args.size)
        return spec, C.build_network(spec, init="he", seed=args.seed)

    _train_network(args, make)


def cmd_finetune(args) -> None:
    init = _require(Path(args.init) / "weights.gswt" if args.init else None, "pretrain")

    def make(manifest):
        spec, weights = C.load_network(init.parent)
        return C.replace_head(spec, weights, manifest.num_classes, seed=args.seed, dropout_p=args.dropout)

    _train_network(args, make)


def cmd_extract(args) -> None:
    net = _require(Path(args.net) / "weights.gswt" if args.net else None, "finetune")
    spec, weights = C.load_network(net.parent)
    manifest = D.load_manifest(_require(args.manifest, "synth"))
    assignment = D.load_split(_require(args.split, "split"))
    pooling = D.pooling_mode(args.pooling)
    for part in D.PARTITIONS:
        recs = D.partition(manifest, assignment, part)
        if not recs:
            continue
        X = K.encode_records(spec, weights, manifest, recs, args.tap, pooling, args.strict_bbox)
        fs = K.FeatureSet(X, _labels(recs), manifest.num_classes, args.tap, pooling, [r.id for r in recs])
        K.save_features(fs, Path(args.out) / part)
    print(f"features written to {args.out}")


def cmd_train_svm(args) -> None:
    feat = _require(Path(args.features) / "features.gstn" if args.features else None, "extract")
    fs = K.load_features(feat.parent)
    grid = RunConfig(grid=args.grid).c_grid()
    model = K.train_svm(fs, grid, args.folds, args.seed, args.svm_epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    K.save_svm(model, out / "svm.gsvm")
    with open(out / "cv.csv", "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["C", "cv_mca"])
        for c, s in model.meta["cv_mca"].items():
            w.writerow([f"{c:g}", _fmt(s)])
    print(f"chose C={model.C:g}; model in {out / 'svm.gsvm'}")


def predict_records(method, spec, weights, manifest, records, pooling, tap="fc7", svm=None, index=None, k=5,
                    weighting="inverse_distance", strict=True) -> np.ndarray:
    """Predicted class index per record for one of the four methods."""
    if method == "finetuned":
        batch = D.load_batch(manifest, records, pooling, spec.input_shape[1:], spec.mean, strict)
        return C.predict_proba(spec, weights, batch).argmax(axis=1)
    X = K.encode_records(spec, weights, manifest, records, tap, pooling, strict)
    if method in ("pretrained_svm", "finetuned_svm"):
        return K.svm_scores(svm, X).argmax(axis=1)
    if method == "deep_im2gps":
        return np.array([K.vote_from_index(index, x, k, manifest.num_classes, weighting).label for x in X])
    raise UsageError(f"unknown method {method!r}; choose from {METHODS}")


def cmd_predict(args) -> None:
    if args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {METHODS}")
    producer = "pretrain" if args.method == "pretrained_svm" else "finetune"
    net = _require(Path(args.net) / "weights.gswt" if args.net else None, producer)
    spec, weights = C.load_network(net.parent)
    pooling = D.pooling_mode(args.pooling)
    manifest, assignment, records = _records(args, args.partition)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    svm = index = None
    if args.method.endswith("_svm"):
        svm = K.load_svm(_require(args.svm, "train-svm"))
    elif args.method == "deep_im2gps":
        if args.index:
            index = K.load_index(_require(args.index, "predict --method deep_im2gps"))
        else:
            train = D.partition(manifest, assignment, "train")
            index = K.build_index(spec, weights, manifest, train, args.tap, pooling, strict=args.strict_bbox)
            K.save_index(index, out / "index.gsix")
    pred = predict_records(args.method, spec, weights, manifest, records, pooling, args.tap, svm, index, args.k,
                           args.weighting, args.strict_bbox)
    write_predictions(out / "predictions.tsv", args.method, pooling, manifest, records, pred)
    print(f"{args.method}: {len(records)} predictions in {out / 'predictions.tsv'}")


def write_predictions(path, method, pooling, manifest, records, pred) -> None:
    lines = [f"#method={method}\tpooling={pooling}"]
    names = manifest.label_names
    lines += [f"{r.id}\t{names[int(p)]}\t{names[r.label]}" for r, p in zip(records, pred)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path, label_names):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    meta = dict(item.split("=", 1) for item in lines[0].lstrip("#").split("\t")) if lines and lines[0].startswith(
        "#") else {}
    pred, true = [], []
    for line in lines[1 if meta else 0:]:
        if not line:
            continue
        _, p, t = line.split("\t")
        try:
            pred.append(label_names.index(p))
            true.append(label_names.index(t))
        except ValueError:
            raise UsageError(f"{path}: label not in manifest class list: {line!r}") from None
    return meta.get("method", Path(path).parent.name), meta.get("pooling", "image_based"), pred, true


def cmd_evaluate(args) -> None:
    manifest = D.load_manifest(_require(args.manifest, "synth"), check_images=False)
    out = Path(args.out)
    reports = []
    for path in args.predictions:
        method, pooling, pred, true = read_predictions(_require(path, "predict"), manifest.label_names)
        report = E.evaluate(pred, true, manifest.label_names, method, pooling, args.dataset)
        E.write_report(report, out / f"{method}_{pooling}")
        reports.append(report)
        print(f"{method:>15s} {pooling:>12s}  mCA {report.mca:.4f}")
    out.mkdir(parents=True, exist_ok=True)
    E.write_summary(reports, out / "summary.csv")
    if len(reports) >= 2:
        E.write_comparison(E.compare(reports), out / "compare.csv")


def cmd_inspect(args) -> None:
    net = _require(Path(args.net) / "weights.gswt" if args.net else None, "finetune")
    spec, weights = C.load_network(net.parent)
    manifest, _, records = _records(args, args.partition)
    samples, skipped = I.collect_proportions(spec, weights, manifest, records)
    n_filters = C.tap_shape(spec, C.last_conv_name(spec))[0]
    densities = I.filter_density(samples, n_filters, args.bins)
    order = I.sort_filters(densities)
    overlays = {}
    boxed = [r for r in records if r.bbox is not None][: args.overlay_records]
    if boxed and order:
        chosen = order[: args.overlay_filters] + order[-args.overlay_filters :]
        for stack in I.capture_activations(spec, weights, manifest, boxed):
            for f in dict.fromkeys(chosen):
                overlays[(stack.record_id, f)] = I.heatmap(stack, f)
    groups = I.export_inspection_report(densities, order, overlays, args.out)
    print(f"inspected {len(records) - skipped} records ({skipped} without bbox); "
          + ", ".join(f"{k}: {len(v)}" for k, v in groups.items()))


def run_config(args) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    return RunConfig(**{k: v for k, v in vars(args).items() if k in names})


# ---------------------------------------------------------------------------
# argument parsing


def _common(p, *flags):
    d = RunConfig()
    if "manifest" in flags:
        p.add_argument("--manifest", help="manifest.tsv")
    if "split" in flags:
        p.add_argument("--split", help="split.tsv")
    if "seed" in flags:
        p.add_argument("--seed", type=int, default=d.seed)
    if "pooling" in flags:
        p.add_argument("--pooling", choices=["image", "human"], default=d.pooling)
    if "tap" in flags:
        p.add_argument("--tap", default=d.tap)
    if "strict" in flags:
        p.add_argument("--strict-bbox", dest="strict_bbox", action=argparse.BooleanOptionalAction,
                       default=d.strict_bbox, help="fail on records without bbox under human pooling")
    p.add_argument("--out", required=False)
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bit-reproducible runs")
    p.add_argument("--config", help="key=value file providing defaults")


def _training(p):
    d = RunConfig()
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--lr-end", dest="lr_end", type=float, default=d.lr_end,
                   help="geometric per-epoch decay from --lr down to this rate")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=d.batch_size)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--dropout", type=float, default=d.dropout)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="humangeo", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic human-centered dataset")
    _common(p, "seed")
    p.add_argument("--classes", type=int, default=12)
    p.add_argument("--per-class", dest="per_class", type=int, default=120)
    p.add_argument("--signal", choices=D.SIGNALS, default="foreground")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--offset", type=float, default=0.0, help="hue offset of the class palette (radians)")
    p.add_argument("--prefix", default="city")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="stratified 70/15/15 split")
    _common(p, "manifest", "seed")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="train a network from scratch on a source dataset")
    _common(p, "manifest", "split", "seed", "pooling", "strict")
    _training(p)
    p.add_argument("--network", choices=["desk", "vggf"], default=RunConfig.network)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="replace the head of a pretrained network and fine-tune it")
    _common(p, "manifest", "split", "seed", "pooling", "strict")
    _training(p)
    p.add_argument("--init", help="directory of the pretrained network")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("extract", help="tap features for every partition")
    _common(p, "manifest", "split", "pooling", "tap", "strict")
    p.add_argument("--net", help="network directory")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-svm", help="cross-validated one-vs-rest linear SVM")
    _common(p, "seed")
    p.add_argument("--features", help="feature directory (train partition)")
    p.add_argument("--grid", default=RunConfig.grid)
    p.add_argument("--folds", type=int, default=RunConfig.folds)
    p.add_argument("--svm-epochs", dest="svm_epochs", type=int, default=RunConfig.svm_epochs)
    p.set_defaults(func=cmd_train_svm)

    p = sub.add_parser("predict", help="predict city labels with one of the four methods")
    _common(p, "manifest", "split", "pooling", "tap", "strict")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--net", help="network directory")
    p.add_argument("--svm", help="svm.gsvm for *_svm methods")
    p.add_argument("--index", help="prebuilt index.gsix for deep_im2gps")
    p.add_argument("--k", type=int, default=RunConfig.k)
    p.add_argument("--weighting", choices=["inverse_distance", "uniform"], default=RunConfig.weighting)
    p.add_argument("--partition", choices=D.PARTITIONS, default="test")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="foreground/background attribution of last-conv filters")
    _common(p, "manifest", "split")
    p.add_argument("--net", help="network directory")
    p.add_argument("--bins", type=int, default=RunConfig.bins)
    p.add_argument("--partition", choices=D.PARTITIONS, default="test")
    p.add_argument("--overlay-records", dest="overlay_records", type=int, default=2)
    p.add_argument("--overlay-filters", dest="overlay_filters", type=int, default=2)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("evaluate", help="mCA, confusion matrices and method comparison")
    _common(p, "manifest")
    p.add_argument("--predictions", nargs="+", default=[])
    p.add_argument("--dataset", default="synthetic")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _coerce(parser: argparse.ArgumentParser, argv, values: dict) -> dict:
    """Turn config-file strings into typed defaults using the subparser's actions."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in argv if a in sub.choices), None)
    if command is None:
        return {}
    actions = {a.dest: a for a in sub.choices[command]._actions}
    out = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"config key {key!r} is not an option of {command!r}")
        if isinstance(action, (argparse.BooleanOptionalAction, argparse._StoreTrueAction)):
            out[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.nargs in ("+", "*"):
            out[key] = raw.split()
        else:
            out[key] = action.type(raw) if action.type else raw
    sub.choices[command].set_defaults(**out)
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if "--config" in argv:
            at = argv.index("--config")
            if at + 1 >= len(argv):
                raise UsageError("--config needs a file path")
            _coerce(parser, argv, load_config(argv[at + 1]))
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        if args.out is None:
            raise UsageError(f"{args.command}: --out is required")
        limit = contextlib.nullcontext()
        if args.deterministic:
            limit = threadpool_limits(1)
        with limit:
            args.func(args)
    except (HumangeoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
