"""Command-line pipeline driver.

Subcommands cover the full two-stage workflow::

    rxgb fetch-data                      download + verify the dataset
    rxgb train --out DIR                 stage 1: SGD-train backbone + FC head
    rxgb extract --checkpoint F --out DIR   pooled features for train and test
    rxgb train-gbdt --features F --out DIR  stage 2: boosted-tree head
    rxgb eval --head fc|gbdt ...         top-1 accuracy + confusion matrix
    rxgb cost --spec reference [--diff reference-nofc]   cost report / delta
    rxgb pipeline --out DIR              all stages with one seed

Configuration is a flat key=value namespace (see DEFAULTS). Values come
from ``--config FILE`` and are overridden by ``--<key> <value>`` flags, e.g.
``--train.epochs 1 --data.subset 512``. Unknown keys are rejected, and every
command that writes artifacts echoes the fully resolved configuration to
``<out>/config.txt``.

Failures print a single machine-parsable line to stderr::

    RXGB-ERROR <class>: <detail>

with exit code 2 for configuration/usage errors and 1 for everything else.
Compliance mode (default on) refuses tree heads beyond the deployable
envelope — more than 20 trees in total or depth over 10 — before any
compute; ``--no-compliance`` unlocks exploration. ``--threads N`` caps BLAS
worker threads; outputs are independent of N.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

# key -> (default, parser); parsers raise ValueError on bad input
DEFAULTS: dict[str, tuple] = {
    "seed": (0, int),
    "binary.weight_scaling": (True, None),                # bool, see _parse_bool
    "net.width_mult": (1.0, float),
    "train.epochs": (120, int),
    "train.batch_size": (128, int),
    "train.lr": (0.01, float),
    "train.momentum": (0.9, float),
    "train.weight_decay": (1e-5, float),
    "train.augment": (False, None),
    "gbdt.max_trees": (20, int),
    "gbdt.max_depth": (10, int),
    "gbdt.learning_rate": (0.3, float),
    "gbdt.reg_lambda": (1.0, float),
    "gbdt.gamma": (0.0, float),
    "gbdt.min_child_weight": (1.0, float),
    "gbdt.budget_mode": ("total_trees", str),
    "data.dir": ("", str),
    "data.subset": (0, int),
    "data.test_subset": (0, int),
    "data.val_count": (5000, int),
}

COMPLIANCE_MAX_TREES = 20
COMPLIANCE_MAX_DEPTH = 10


class ConfigError(ValueError):
    """Bad configuration key, value, or file."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key: str, raw: str):
    default, parser = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return _parse_bool(raw)
        return parser(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from e


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse `key = value` lines; '#' starts a comment; unknown keys rejected."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(config_path: str | None, overrides: dict) -> dict:
    """Defaults <- config file <- CLI overrides, strictly in that order."""
    values = {key: default for key, (default, _) in DEFAULTS.items()}
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from e
        values.update(parse_config_text(text, source=config_path))
    for key, raw in overrides.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def render_config(cfg: dict) -> str:
    """Deterministic key=value text of the resolved configuration."""
    lines = []
    for key in sorted(cfg):
        val = cfg[key]
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def _split_overrides(rest: list[str]) -> dict:
    """Turn trailing `--some.key value` pairs into an override mapping."""
    overrides = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"flag --{key} needs a value")
            raw = rest[i + 1]
            i += 1
        overrides[key] = raw
        i += 1
    return overrides


def _setup_threads(argv: list[str]) -> None:
    """Apply --threads N to the BLAS thread pools before numpy loads."""
    n = None
    for i, tok in enumerate(argv):
        if tok == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif tok.startswith("--threads="):
            n = tok.split("=", 1)[1]
    if n is None:
        return
    try:
        count = int(n)
        if count < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"--threads must be a positive integer, got {n!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(count)


# --- shared helpers ----------------------------------------------------------


def _out_dir(args, cfg) -> str:
    out = args.out or time.strftime(f"runs/%Y%m%d-%H%M%S-seed{cfg['seed']}")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as f:
        f.write(render_config(cfg))
    return out


def _cache_dir(cfg):
    from . import data

    return cfg["data.dir"] or data.default_cache_dir()


def _load_split(cfg, split: str):
    from . import data

    ds = data.load_dataset(split, cache_dir=_cache_dir(cfg))
    limit = cfg["data.subset"] if split == "train" else cfg["data.test_subset"]
    if limit:
        ds = data.subset(ds, limit)
    return ds


def _build_spec(cfg, include_fc: bool = True):
    from . import netspec

    return netspec.reference_spec(width_mult=cfg["net.width_mult"],
                                  include_fc=include_fc)


def _gbdt_config(cfg, compliance: bool):
    from . import gbdt

    config = gbdt.GBDTConfig(
        n_classes=10,
        max_trees=cfg["gbdt.max_trees"],
        max_depth=cfg["gbdt.max_depth"],
        learning_rate=cfg["gbdt.learning_rate"],
        reg_lambda=cfg["gbdt.reg_lambda"],
        gamma=cfg["gbdt.gamma"],
        min_child_weight=cfg["gbdt.min_child_weight"],
        budget_mode=cfg["gbdt.budget_mode"],
    )
    if compliance:
        if config.total_tree_budget > COMPLIANCE_MAX_TREES:
            raise ConfigError(
                f"compliance mode: {config.total_tree_budget} total trees "
                f"exceeds {COMPLIANCE_MAX_TREES} (use --no-compliance to override)"
            )
        if config.max_depth > COMPLIANCE_MAX_DEPTH:
            raise ConfigError(
                f"compliance mode: depth {config.max_depth} exceeds "
                f"{COMPLIANCE_MAX_DEPTH} (use --no-compliance to override)"
            )
    return config


def _confusion_matrix(pred, labels, k: int = 10):
    import numpy as np

    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def _print_eval(name: str, pred, labels) -> float:
    import numpy as np

    top1 = float((pred == labels).mean())
    print(f"{name} top-1 accuracy: {top1:.4f} ({int((pred == labels).sum())}"
          f"/{len(labels)})")
    cm = _confusion_matrix(pred, labels)
    print("confusion matrix (rows = true, cols = predicted):")
    width = max(len(str(cm.max())), 3)
    header = "     " + " ".join(f"{c:>{width}}" for c in range(cm.shape[1]))
    print(header)
    for row in range(cm.shape[0]):
        cells = " ".join(f"{v:>{width}}" for v in cm[row])
        print(f"  {row:>2} {cells}")
    return top1


# --- subcommands -------------------------------------------------------------


def cmd_fetch_data(args, cfg) -> int:
    from . import data

    paths = data.fetch(cache_dir=_cache_dir(cfg))
    for name in sorted(paths):
        print(f"verified {name} -> {paths[name]}")
    return 0


def cmd_train(args, cfg) -> int:
    from . import data, netspec, network

    out = _out_dir(args, cfg)
    full = _load_split(cfg, "train")
    train_ds, val_ds = data.split_train_val(full, cfg["data.val_count"])
    spec = _build_spec(cfg)
    model = network.build_network(
        spec, seed=cfg["seed"], weight_scaling=cfg["binary.weight_scaling"]
    )
    hp = network.StageOneConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        learning_rate=cfg["train.lr"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        seed=cfg["seed"],
        augment=cfg["train.augment"],
    )
    print(f"training {len(train_ds)} samples, validating {len(val_ds)}, "
          f"{hp.epochs} epochs")
    result = network.train_stage1(model, train_ds, val_ds, hp)
    metrics_path = os.path.join(out, "metrics.tsv")
    with open(metrics_path, "w", encoding="utf-8") as f:
        f.write("epoch\ttrain_loss\tval_top1\twall_seconds\tlearning_rate\n")
        for m in result.metrics:
            f.write(f"{m.epoch}\t{m.train_loss:.6f}\t{m.val_top1:.4f}\t"
                    f"{m.wall_seconds:.2f}\t{m.learning_rate:.6g}\n")
            print(f"epoch {m.epoch:3d}  loss {m.train_loss:.4f}  "
                  f"val top-1 {m.val_top1:.4f}  {m.wall_seconds:.1f}s")
    if result.aborted:
        raise RuntimeError(f"training aborted: {result.abort_reason}")
    ckpt_path = os.path.join(out, "checkpoint.ckpt")
    network.save_checkpoint(result.model, ckpt_path)
    print(f"best epoch {result.best_epoch} "
          f"(val top-1 {result.best_val_top1:.4f}) -> {ckpt_path}")
    print(f"metrics -> {metrics_path}")
    return 0


def cmd_extract(args, cfg) -> int:
    from . import data, network

    out = _out_dir(args, cfg)
    model = network.load_checkpoint(args.checkpoint)
    for split in ("train", "test"):
        ds = _load_split(cfg, split)
        feats, labels = network.extract_features(
            model, ds, batch_size=cfg["train.batch_size"]
        )
        path = os.path.join(out, f"features-{split}.rxgbfeat")
        data.save_features(path, feats, labels)
        print(f"{split}: {feats.shape[0]} x {feats.shape[1]} features -> {path}")
    return 0


def cmd_train_gbdt(args, cfg) -> int:
    from . import data, gbdt

    config = _gbdt_config(cfg, args.compliance)       # refuse before compute
    out = _out_dir(args, cfg)
    feats, labels = data.load_features(args.features)
    print(f"training tree head on {feats.shape[0]} x {feats.shape[1]} features "
          f"({config.total_tree_budget} trees, depth <= {config.max_depth})")
    ens = gbdt.train_ensemble(feats, labels, config)
    for rnd, loss in enumerate(gbdt.round_losses(ens, feats, labels)):
        label = "initial" if rnd == 0 else f"round {rnd:2d}"
        print(f"{label}  train log-loss {loss:.6f}")
    path = os.path.join(out, "gbdt-model.txt")
    with open(path, "w", encoding="utf-8") as f:
        f.write(gbdt.serialize(ens))
    print(f"{len(ens.trees)} trees -> {path}")
    return 0


def cmd_eval(args, cfg) -> int:
    import numpy as np

    from . import gbdt, network

    model = network.load_checkpoint(args.checkpoint)
    ds = _load_split(cfg, "test")
    if args.head == "fc":
        logits, _ = _batched_logits(model, ds, cfg["train.batch_size"])
        pred = np.argmax(logits, axis=1)
        _print_eval("fc head", pred, ds.labels)
    else:
        if not args.model:
            raise ConfigError("eval --head gbdt requires --model FILE")
        with open(args.model, encoding="utf-8") as f:
            ens = gbdt.deserialize(f.read())
        feats, labels = network.extract_features(
            model, ds, batch_size=cfg["train.batch_size"]
        )
        pred = gbdt.predict_class(ens, feats)
        _print_eval("gbdt head", pred, labels)
    return 0


def _batched_logits(model, ds, batch_size):
    import numpy as np

    from . import data, network

    chunks = [network.forward(model, xb, training=False)[0]
              for xb, _ in data.batches(ds, batch_size, shuffle=False)]
    return np.concatenate(chunks), None


_SPEC_NAMES = ("reference", "reference-nofc")


def _named_spec(name: str, cfg):
    from . import netspec

    if name not in _SPEC_NAMES:
        raise ConfigError(f"unknown spec {name!r}; choose from {_SPEC_NAMES}")
    return netspec.reference_spec(width_mult=cfg["net.width_mult"],
                                  include_fc=(name == "reference"))


def cmd_cost(args, cfg) -> int:
    from . import costmodel

    spec_a = _named_spec(args.spec, cfg)
    report_a = costmodel.cost_report(spec_a)
    with_budget = cfg["net.width_mult"] == 1.0
    tree_head = costmodel.gbdt_cost(_gbdt_config(cfg, compliance=False))
    if args.machine:
        print(costmodel.render_machine(report_a), end="")
    else:
        print(costmodel.render_table(
            report_a,
            budget=costmodel.DESIGN_BUDGET if with_budget else None,
            with_fc=spec_a.has_fc_head(),
            tree_head=tree_head,
        ))
    if not args.diff:
        return 0
    spec_b = _named_spec(args.diff, cfg)
    report_b = costmodel.cost_report(spec_b)
    if args.machine:
        print(costmodel.render_machine(report_b), end="")
    else:
        print(costmodel.render_table(report_b, with_fc=spec_b.has_fc_head()))
    diff = costmodel.diff_reports(report_a, report_b)
    print(f"delta {args.diff} vs {args.spec}:")
    print(f"  headline FLOPs {diff.delta_headline_flops:+,}")
    print(f"  parameter bytes {diff.delta_param_bytes:+,.0f} "
          f"({diff.delta_param_megabytes:+.2f} MB)")
    if (with_budget and args.spec == "reference"
            and args.diff == "reference-nofc"):
        rec = costmodel.fc_removal_vs_budget(diff, costmodel.DESIGN_BUDGET)
        print(f"  vs budget table: FLOPs {rec.flops_pct:+.2f}%, "
              f"size {rec.param_pct:+.2f}%")
    return 0


def cmd_pipeline(args, cfg) -> int:
    import numpy as np

    from . import data, gbdt, netspec, network

    config = _gbdt_config(cfg, args.compliance)       # refuse before compute
    out = _out_dir(args, cfg)
    started = time.perf_counter()

    full = _load_split(cfg, "train")
    test_ds = _load_split(cfg, "test")
    train_ds, val_ds = data.split_train_val(full, cfg["data.val_count"])

    # stage 1: backbone + FC head
    spec = _build_spec(cfg)
    model = network.build_network(
        spec, seed=cfg["seed"], weight_scaling=cfg["binary.weight_scaling"]
    )
    hp = network.StageOneConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        learning_rate=cfg["train.lr"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        seed=cfg["seed"],
        augment=cfg["train.augment"],
    )
    print(f"stage 1: {len(train_ds)} train / {len(val_ds)} val, "
          f"{hp.epochs} epochs")
    result = network.train_stage1(model, train_ds, val_ds, hp)
    for m in result.metrics:
        print(f"epoch {m.epoch:3d}  loss {m.train_loss:.4f}  "
              f"val top-1 {m.val_top1:.4f}  {m.wall_seconds:.1f}s")
    if result.aborted:
        raise RuntimeError(f"training aborted: {result.abort_reason}")
    best = result.model
    network.save_checkpoint(best, os.path.join(out, "checkpoint.ckpt"))
    with open(os.path.join(out, "metrics.tsv"), "w", encoding="utf-8") as f:
        f.write("epoch\ttrain_loss\tval_top1\twall_seconds\tlearning_rate\n")
        for m in result.metrics:
            f.write(f"{m.epoch}\t{m.train_loss:.6f}\t{m.val_top1:.4f}\t"
                    f"{m.wall_seconds:.2f}\t{m.learning_rate:.6g}\n")

    # stage 2: frozen features -> boosted trees
    feats, labels = network.extract_features(best, full,
                                             batch_size=cfg["train.batch_size"])
    test_feats, test_labels = network.extract_features(
        best, test_ds, batch_size=cfg["train.batch_size"])
    data.save_features(os.path.join(out, "features-train.rxgbfeat"),
                       feats, labels)
    data.save_features(os.path.join(out, "features-test.rxgbfeat"),
                       test_feats, test_labels)
    print(f"stage 2: boosting {config.total_tree_budget} trees "
          f"on {feats.shape[0]} x {feats.shape[1]} features")
    feats32, _ = data.load_features(os.path.join(out, "features-train.rxgbfeat"))
    ens = gbdt.train_ensemble(feats32, labels, config)
    with open(os.path.join(out, "gbdt-model.txt"), "w", encoding="utf-8") as f:
        f.write(gbdt.serialize(ens))

    # evaluation: both heads on the test split
    fc_logits, _ = _batched_logits(best, test_ds, cfg["train.batch_size"])
    fc_top1 = _print_eval("fc head", np.argmax(fc_logits, axis=1), test_labels)
    gbdt_top1 = _print_eval(
        "gbdt head", gbdt.predict_class(ens, test_feats), test_labels
    )
    wall = time.perf_counter() - started
    print(f"pipeline complete in {wall:.1f}s: fc {fc_top1:.4f}, "
          f"hybrid {gbdt_top1:.4f} -> {out}")
    return 0


# --- entry point ---------------------------------------------------------------

_ERROR_CLASSES = [
    # (exception qualifier, printed class, exit code); first match wins
    ("ConfigError", "config", 2),
    ("FormatError", "model-format", 1),
    ("CheckpointError", "checkpoint-format", 1),
    ("IdxError", "data-format", 1),
    ("FileNotFoundError", "missing-artifact", 1),
    ("ValueError", "invalid-value", 1),
    ("RuntimeError", "runtime", 1),
    ("OSError", "io", 1),
]


def _error_line(exc: BaseException) -> tuple[str, int]:
    mro_names = [base.__name__ for base in type(exc).__mro__]
    for qualifier, cls, code in _ERROR_CLASSES:
        if qualifier in mro_names:
            return f"RXGB-ERROR {cls}: {exc}", code
    return f"RXGB-ERROR internal: {exc}", 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rxgb",
        description="Two-stage hybrid classifier: 1-bit CNN features + "
                    "bounded boosted-tree head.",
    )
    parser.add_argument("--threads", type=int, metavar="N",
                        help="cap BLAS worker threads (default: library choice)")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p, out=False):
        p.add_argument("--config", metavar="FILE",
                       help="key=value configuration file")
        p.add_argument("--threads", type=int, metavar="N",
                       help="cap BLAS worker threads (default: library choice)")
        if out:
            p.add_argument("--out", metavar="DIR",
                           help="artifact directory (default runs/<stamp>-seed<s>)")

    common(sub.add_parser("fetch-data", help="download and verify the dataset"))
    common(sub.add_parser("train", help="stage 1: train backbone + FC head"),
           out=True)
    p = sub.add_parser("extract", help="write pooled features for train/test")
    common(p, out=True)
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p = sub.add_parser("train-gbdt", help="stage 2: train the tree head")
    common(p, out=True)
    p.add_argument("--features", required=True, metavar="FILE")
    p.add_argument("--no-compliance", dest="compliance", action="store_false",
                   help="lift the 20-tree/depth-10 deployment bound")
    p = sub.add_parser("eval", help="top-1 accuracy + confusion matrix")
    common(p)
    p.add_argument("--head", choices=("fc", "gbdt"), required=True)
    p.add_argument("--checkpoint", required=True, metavar="FILE")
    p.add_argument("--model", metavar="FILE", help="gbdt model (for --head gbdt)")
    p = sub.add_parser("cost", help="cost report for a named plan")
    common(p)
    p.add_argument("--spec", default="reference", metavar="NAME",
                   help="one of: reference, reference-nofc")
    p.add_argument("--diff", metavar="NAME",
                   help="second plan; prints both reports plus deltas")
    p.add_argument("--machine", action="store_true",
                   help="tab-separated rows instead of the aligned table")
    p = sub.add_parser("pipeline", help="train, extract, boost, evaluate")
    common(p, out=True)
    p.add_argument("--no-compliance", dest="compliance", action="store_false")
    return parser


_COMMANDS = {
    "fetch-data": cmd_fetch_data,
    "train": cmd_train,
    "extract": cmd_extract,
    "train-gbdt": cmd_train_gbdt,
    "eval": cmd_eval,
    "cost": cmd_cost,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _setup_threads(argv)
        parser = build_parser()
        args, rest = parser.parse_known_args(argv)
        overrides = _split_overrides(rest)
        cfg = resolve_config(args.config, overrides)
        return _COMMANDS[args.cmd](args, cfg)
    except KeyboardInterrupt:
        print("RXGB-ERROR interrupted: stopped by user", file=sys.stderr)
        return 130
    except Exception as exc:                   # noqa: BLE001 - CLI boundary
        line, code = _error_line(exc)
        print(line, file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
