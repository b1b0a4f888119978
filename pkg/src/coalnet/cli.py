"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
stderr; results go to stdout or to the named output files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import nn, train
from .augment import AugmentPlan, NormalizationStats, compute_stats, expand_dataset, prepare_input
from .core import CLASS_NAMES, DatasetManifest, Record, Rng, load_manifest, read_image, read_pgm, save_manifest, write_pgm
from .detect import DetectParams, detect_and_crop
from .errors import CoalnetError
from .metrics import compute_metrics, confusion, evaluate, report_json
from .synth import SynthSpec, generate
from .texture import FeatureScaler, LinearSvmModel, TextureConfig, raw_feature_vector, svm_predict, svm_train

log = logging.getLogger("coalnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad command line or configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def __init__(self, prog):
        super().__init__(prog, width=100, max_help_position=36)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _load_stats(path, ck: train.Checkpoint | None = None) -> NormalizationStats:
    if path is not None:
        return NormalizationStats.load(path)
    stats = ck.stats if ck is not None else None
    if stats is None:
        raise UsageError("--stats is required: the checkpoint carries no normalisation statistics")
    return stats


def _classes_of(spec: nn.NetworkSpec) -> tuple[str, ...]:
    classes = spec.extra.get("classes")
    if classes:
        return tuple(classes)
    if spec.num_classes == len(CLASS_NAMES):
        return CLASS_NAMES
    return tuple(f"class{i}" for i in range(spec.num_classes))


def _parse_freeze(text: str | None):
    if not text:
        return ()
    keys = []
    for part in text.split(","):
        part = part.strip()
        if part:
            keys.append(int(part) if part.lstrip("-").isdigit() else part)
    return tuple(keys)


def _predictor(ck: train.Checkpoint):
    return lambda x: nn.predict_proba(ck.spec, ck.params, x)


def _detect_params(sigma: float, ksize: int) -> DetectParams:
    return DetectParams(sigma=sigma, ksize=ksize)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec(image_size=args.size, with_background=args.with_background,
                     n_per_class=args.n_per_class, seed=args.seed, gap=args.gap)
    manifest = generate(spec, args.out_dir)
    log.info("wrote %d images to %s", len(manifest), args.out_dir)
    return EXIT_OK


def cmd_detect(args) -> int:
    img = read_image(args.inp)
    crop = detect_and_crop(img, _detect_params(args.sigma, args.ksize), args.debug_dir)
    write_pgm(crop, args.out)
    log.info("cropped %dx%d -> %dx%d", img.width, img.height, crop.width, crop.height)
    return EXIT_OK


def cmd_augment(args) -> int:
    manifest = load_manifest(args.manifest)
    plan = AugmentPlan(mode="default" if args.factor == "5" else "full", seed=args.seed,
                       target_size=args.size, crop_fraction=args.crop_fraction, noise_sigma=args.noise_sigma)
    out = expand_dataset(manifest, plan, args.out_dir)
    log.info("%d records -> %d records (factor %d)", len(manifest), len(out), plan.factor)
    return EXIT_OK


def cmd_stats(args) -> int:
    stats = compute_stats(load_manifest(args.manifest))
    stats.save(args.out)
    print(stats.to_json())
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    stats = NormalizationStats.load(args.stats)
    spec = nn.NetworkSpec.load(args.spec) if args.spec else nn.mini_alexnet(args.size)
    cfg = train.SgdConfig(eta=args.eta, momentum=args.momentum, weight_decay=args.wd, batch_size=args.batch,
                          iterations=args.iters, seed=args.seed, classic_momentum=args.classic_momentum,
                          init_std=args.init_std)
    freeze = _parse_freeze(args.freeze)
    rng = Rng(args.seed)
    if args.init:
        pretrained = train.load_checkpoint(args.init)
        params, loss_log = train.fine_tune(pretrained, spec, freeze, cfg, manifest, stats, rng,
                                           pretrained_lr_mult=args.pretrained_lr_mult)
    else:
        params = nn.init_params(spec, rng.spawn(2), cfg.init_std)
        params, loss_log = train.train_loop(spec, params, manifest, stats, cfg, freeze, rng)
    out_spec = nn.NetworkSpec(spec.layers, spec.input_shape, spec.num_classes,
                              {**spec.extra, "normalization": {"mean": stats.mean, "std": stats.std}})
    train.save_checkpoint(params, out_spec, args.out)
    if args.log:
        loss_log.save(args.log)
    if loss_log.rows:
        it, loss, acc = loss_log.rows[-1]
        log.info("iteration %d: loss %.4f, batch accuracy %.3f", it, loss, acc)
    return EXIT_OK


def _run_eval(manifest: DatasetManifest, ck: train.Checkpoint, stats: NormalizationStats, detect: DetectParams | None):
    m, _ = evaluate(_predictor(ck), manifest, stats, ck.spec.input_shape[1], detect, ck.spec.num_classes)
    return m, compute_metrics(m, _classes_of(ck.spec))


def cmd_eval(args) -> int:
    ck = train.load_checkpoint(args.checkpoint)
    stats = _load_stats(args.stats, ck)
    detect = None if args.no_detect else _detect_params(args.sigma, args.ksize)
    m, report = _run_eval(load_manifest(args.manifest), ck, stats, detect)
    print(report.format())
    if args.report:
        Path(args.report).write_text(report_json(m, report) + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    ck = train.load_checkpoint(args.checkpoint)
    stats = _load_stats(args.stats, ck)
    img = read_image(args.inp)
    if args.detect:
        img = detect_and_crop(img, _detect_params(args.sigma, args.ksize))
    x = prepare_input(img, ck.spec.input_shape[1], stats)[None]
    probs = nn.predict_proba(ck.spec, ck.params, x)[0]
    label = _classes_of(ck.spec)[int(np.argmax(probs))]
    print(label + " " + " ".join(f"{p:.3f}" for p in probs))
    return EXIT_OK


def _feature_header(dim: int) -> list[str]:
    return ["path", "label"] + [f"f{i}" for i in range(dim)]


def cmd_features(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = TextureConfig(levels=args.levels)
    rows = []
    for rec in manifest.records:
        v = raw_feature_vector(read_pgm(manifest.resolve(rec)), cfg)
        rows.append([rec.path, rec.label.label] + [repr(float(f)) for f in v])
    dim = len(rows[0]) - 2 if rows else 4 * len(cfg.offsets)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_feature_header(dim))
        writer.writerows(rows)
    log.info("wrote %d feature rows to %s", len(rows), args.out)
    return EXIT_OK


def _read_features(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or rows[0][:2] != ["path", "label"]:
        raise UsageError(f"{path}: feature CSV must start with 'path,label,f0,...'")
    names = {n: i for i, n in enumerate(CLASS_NAMES)}
    x, y = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if row[1] not in names:
            raise UsageError(f"{path}:{lineno}: unknown label {row[1]!r}")
        y.append(names[row[1]])
        x.append([float(v) for v in row[2:]])
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)


def cmd_svm_train(args) -> int:
    x, y = _read_features(args.feats)
    scaler = FeatureScaler.fit(x)
    model = svm_train(scaler.transform(x), y, lam=args.lam, epochs=args.epochs, rng=Rng(args.seed))
    model.seed = args.seed
    d = model.to_dict()
    d["scaler"] = scaler.to_dict()
    Path(args.out).write_text(json.dumps(d) + "\n")
    log.info("final objective %.6f", model.history[-1] if model.history else float("nan"))
    return EXIT_OK


def cmd_svm_eval(args) -> int:
    x, y = _read_features(args.feats)
    d = json.loads(Path(args.model).read_text())
    model = LinearSvmModel.from_dict(d)
    if "scaler" in d:
        x = FeatureScaler.from_dict(d["scaler"]).transform(x)
    preds = [svm_predict(model, v) for v in x]
    m = confusion(y, preds, len(model.classes))
    report = compute_metrics(m, model.classes)
    print(report.format())
    if args.report:
        Path(args.report).write_text(report_json(m, report) + "\n")
    return EXIT_OK


def cmd_viz_kernels(args) -> int:
    ck = train.load_checkpoint(args.checkpoint)
    img = train.export_kernel_grid(ck, args.layer, args.out)
    log.info("wrote %dx%d kernel grid", img.width, img.height)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

PIPELINE_STAGES = ("synth", "augment", "train", "eval")
_STAGE_DEFAULTS = {
    "synth": {"n_per_class": 20, "size": 64, "seed": 0, "with_background": False, "gap": 1.0,
              "test_n_per_class": 20, "test_seed": 1},
    "detect": {"enabled": None, "sigma": 1.5, "ksize": 5},
    "augment": {"factor": "5", "seed": 0, "crop_fraction": 7 / 8, "noise_sigma": 8.0},
    "train": {"spec": None, "eta": 0.01, "momentum": 0.9, "wd": 0.0, "batch": 32, "iters": 500, "seed": 0,
              "classic_momentum": False, "init_std": 0.1},
    "eval": {"detect": None},
}


class StageError(Exception):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


def _stage_config(config: dict, stage: str) -> dict:
    given = config.get(stage, {})
    if not isinstance(given, dict):
        raise UsageError(f"config key {stage!r} must be an object")
    unknown = set(given) - set(_STAGE_DEFAULTS[stage])
    if unknown:
        raise UsageError(f"config stage {stage!r} has unknown keys {sorted(unknown)}")
    return {**_STAGE_DEFAULTS[stage], **given}


def pipeline_run(config: dict, out_dir=None) -> dict:
    """Run synth, detect, augment, stats, train and eval from one config.

    Writes ``artifacts.json`` (every file produced, by stage) and
    ``report.json`` into the output directory and returns the report dict.
    """
    for key in PIPELINE_STAGES:
        if key not in config:
            raise UsageError(f"config is missing required key {key!r}")
    out_dir = out_dir or config.get("out_dir")
    if not out_dir:
        raise UsageError("config is missing required key 'out_dir'")
    out = Path(out_dir)
    cfg = {stage: _stage_config(config, stage) for stage in _STAGE_DEFAULTS}
    s, d, a, t, e = cfg["synth"], cfg["detect"], cfg["augment"], cfg["train"], cfg["eval"]
    detect_on = s["with_background"] if d["enabled"] is None else bool(d["enabled"])
    eval_detect = detect_on if e["detect"] is None else bool(e["detect"])
    params = _detect_params(d["sigma"], d["ksize"])
    artifacts: dict[str, list[str]] = {}

    def stage(name, fn):
        log.info("pipeline: %s", name)
        try:
            return fn()
        except (CoalnetError, OSError, ValueError, FloatingPointError) as exc:
            raise StageError(name, exc) from exc

    def do_synth():
        common = dict(image_size=s["size"], with_background=s["with_background"], gap=s["gap"])
        tr = generate(SynthSpec(n_per_class=s["n_per_class"], seed=s["seed"], **common), out / "train")
        te = generate(SynthSpec(n_per_class=s["test_n_per_class"], seed=s["test_seed"], **common), out / "test")
        artifacts["synth"] = [str(out / "train" / "manifest.csv"), str(out / "test" / "manifest.csv")]
        return tr, te

    train_m, test_m = stage("synth", do_synth)

    def do_detect():
        crop_dir = out / "crops"
        crop_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for rec in train_m.records:
            write_pgm(detect_and_crop(read_pgm(train_m.resolve(rec)), params), crop_dir / rec.path)
            records.append(Record(rec.path, rec.label))
        m = DatasetManifest(records, root=crop_dir)
        save_manifest(m, crop_dir / "manifest.csv")
        artifacts["detect"] = [str(crop_dir / "manifest.csv")]
        return m

    source = stage("detect", do_detect) if detect_on else train_m

    def do_augment():
        plan = AugmentPlan(mode="default" if str(a["factor"]) == "5" else "full", seed=a["seed"],
                           target_size=s["size"], crop_fraction=a["crop_fraction"], noise_sigma=a["noise_sigma"])
        m = expand_dataset(source, plan, out / "aug")
        stats = compute_stats(m)
        stats.save(out / "stats.json")
        artifacts["augment"] = [str(out / "aug" / "manifest.csv"), str(out / "stats.json")]
        return m, stats

    aug_m, stats = stage("augment", do_augment)

    def do_train():
        spec = nn.NetworkSpec.load(t["spec"]) if t["spec"] else nn.mini_alexnet(s["size"])
        sgd = train.SgdConfig(eta=t["eta"], momentum=t["momentum"], weight_decay=t["wd"], batch_size=t["batch"],
                              iterations=t["iters"], seed=t["seed"], classic_momentum=t["classic_momentum"],
                              init_std=t["init_std"])
        rng = Rng(t["seed"])
        p0 = nn.init_params(spec, rng.spawn(2), sgd.init_std)
        p, loss_log = train.train_loop(spec, p0, aug_m, stats, sgd, (), rng)
        spec = nn.NetworkSpec(spec.layers, spec.input_shape, spec.num_classes,
                              {**spec.extra, "normalization": {"mean": stats.mean, "std": stats.std}})
        train.save_checkpoint(p, spec, out / "model.bin")
        loss_log.save(out / "loss.csv")
        artifacts["train"] = [str(out / "model.bin"), str(out / "loss.csv")]
        return train.Checkpoint(spec, p)

    ck = stage("train", do_train)

    def do_eval():
        m, report = _run_eval(test_m, ck, stats, params if eval_detect else None)
        (out / "report.json").write_text(report_json(m, report) + "\n")
        artifacts["eval"] = [str(out / "report.json")]
        return report.to_dict(m)

    report = stage("eval", do_eval)
    (out / "artifacts.json").write_text(json.dumps(artifacts, indent=2) + "\n")
    return report


def cmd_pipeline(args) -> int:
    try:
        config = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: invalid JSON: {exc}") from None
    if not isinstance(config, dict):
        raise UsageError(f"{args.config}: config must be a JSON object")
    report = pipeline_run(config, args.out_dir)
    print(f"recg {report['recg']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coalnet", description="Coal and gangue recognition pipeline.",
                     formatter_class=_HelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_HelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a labelled synthetic dataset")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--n-per-class", type=int, default=20, help="images per class")
    p.add_argument("--size", type=int, default=64, help="image side length in pixels")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--gap", type=float, default=1.0, help="class intensity gap multiplier")
    p.add_argument("--with-background", action="store_true", help="embed each texture in a belt scene")

    def detect_flags(p):
        p.add_argument("--sigma", type=float, default=1.5, help="Gaussian blur sigma")
        p.add_argument("--ksize", type=int, default=5, help="Gaussian kernel size (odd)")

    p = add("detect", cmd_detect, "detect the object and write the cropped region")
    p.add_argument("--in", dest="inp", required=True, help="input PGM/PPM")
    p.add_argument("--out", required=True, help="output PGM")
    detect_flags(p)
    p.add_argument("--debug-dir", default=None, help="directory for intermediate images")

    p = add("augment", cmd_augment, "expand a dataset with crops, rotations and noise")
    p.add_argument("--manifest", required=True, help="input manifest CSV")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--factor", choices=("5", "full"), default="5", help="augmentation plan")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--size", type=int, default=64, help="output side length")
    p.add_argument("--crop-fraction", type=float, default=7 / 8, help="crop side as a fraction of the source")
    p.add_argument("--noise-sigma", type=float, default=8.0, help="additive noise standard deviation")

    p = add("stats", cmd_stats, "compute normalisation statistics of a dataset")
    p.add_argument("--manifest", required=True, help="input manifest CSV")
    p.add_argument("--out", default="stats.json", help="output JSON")

    p = add("train", cmd_train, "train or fine-tune the network")
    p.add_argument("--manifest", required=True, help="training manifest CSV")
    p.add_argument("--spec", default=None, help="network spec JSON (built-in small network when omitted)")
    p.add_argument("--size", type=int, default=64, help="input size of the built-in network")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--init", default=None, help="checkpoint to fine-tune from")
    p.add_argument("--freeze", default="", help="comma-separated layer indices or names to freeze")
    p.add_argument("--eta", type=float, default=0.01, help="learning rate")
    p.add_argument("--momentum", type=float, default=0.9, help="momentum coefficient")
    p.add_argument("--wd", type=float, default=0.0, help="L2 weight decay")
    p.add_argument("--batch", type=int, default=32, help="mini-batch size")
    p.add_argument("--iters", type=int, default=500, help="training iterations")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--init-std", type=float, default=0.1, help="standard deviation of initial weights")
    p.add_argument("--classic-momentum", action="store_true", help="use v = a*v - eta*g instead of the default rule")
    p.add_argument("--pretrained-lr-mult", type=float, default=0.1, help="learning-rate factor of copied layers")
    p.add_argument("--stats", required=True, help="normalisation stats JSON")
    p.add_argument("--log", default=None, help="loss log CSV")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a labelled dataset")
    p.add_argument("--manifest", required=True, help="test manifest CSV")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--stats", default=None, help="stats JSON (defaults to the checkpoint's)")
    p.add_argument("--report", default=None, help="report JSON")
    p.add_argument("--no-detect", action="store_true", help="classify whole images without cropping")
    detect_flags(p)

    p = add("predict", cmd_predict, "classify one image")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--in", dest="inp", required=True, help="input PGM/PPM")
    p.add_argument("--stats", default=None, help="stats JSON (defaults to the checkpoint's)")
    p.add_argument("--detect", action="store_true", help="crop the detected object first")
    detect_flags(p)

    p = add("features", cmd_features, "extract GLCM texture features")
    p.add_argument("--manifest", required=True, help="input manifest CSV")
    p.add_argument("--out", required=True, help="feature CSV")
    p.add_argument("--levels", type=int, default=16, help="gray levels after quantisation")

    p = add("svm-train", cmd_svm_train, "train the linear SVM baseline")
    p.add_argument("--feats", required=True, help="feature CSV")
    p.add_argument("--out", required=True, help="model JSON")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3, help="regularisation strength")
    p.add_argument("--epochs", type=int, default=200, help="passes over the data")
    p.add_argument("--seed", type=int, default=0, help="random seed")

    p = add("svm-eval", cmd_svm_eval, "evaluate the linear SVM baseline")
    p.add_argument("--feats", required=True, help="feature CSV")
    p.add_argument("--model", required=True, help="model JSON")
    p.add_argument("--report", default=None, help="report JSON")

    p = add("viz-kernels", cmd_viz_kernels, "write a conv layer's kernels as an image grid")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--layer", default="conv1", help="conv layer name")
    p.add_argument("--out", required=True, help="output PGM")

    p = add("pipeline", cmd_pipeline, "run synth, detect, augment, train and eval from a JSON config")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--out-dir", default=None, help="output directory (overrides the config's out_dir)")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("coalnet: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s: %(message)s", force=True)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"coalnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"coalnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CoalnetError, OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"coalnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
