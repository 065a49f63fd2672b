"""Command-line entry point.

Subcommands: ``prepare`` (build dataset splits from raw IDX files), ``train``
(run one training configuration), ``eval`` (score a finished run and emit
artifacts), ``table`` (assemble comparison tables against the reference
results). Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
from pathlib import Path

from . import data as data_mod
from . import evaluation as eval_mod
from .errors import ConfigurationError, FormatError, GroupVAEError
from .networks import load_checkpoint
from .training import RunConfig, train, write_config

USAGE_ERROR = 1
RUNTIME_ERROR = 2

# Published reference results this implementation is compared against.
# Table "mnist": K=2, d_c=2, d_s=14 rows (C_c, C_s, L_rec).
REFERENCE = {
    "mnist": {
        "mlvae_k2": (0.650, 0.892, 75.2),
        "mlvae_ad_k2": (0.976, 0.412, 78.2),
        "mlvae_k5": (0.929, 0.852, 76.0),
        "mlvae_ad_k5": (0.973, 0.402, 80.6),
        "mlvae_k10": (0.941, 0.859, 75.7),
        "mlvae_ad_k10": (0.963, 0.579, 79.5),
    },
    "beta": {
        "beta_1.5": (0.876, 0.774, 80.4),
        "beta_2.0": (0.935, 0.555, 85.2),
        "beta_5.0": (0.956, 0.309, 106.8),
        "beta_10.0": (0.943, 0.203, 128.7),
        "beta_20.0": (0.945, 0.292, 141.3),
    },
    # MNIST-ROT content accuracies by eval angle set
    "mnist_rot": {
        "mlvae": {"theta": 0.522, "pm55": 0.419, "pm65": 0.293},
        "mlvae_ad": {"theta": 0.951, "pm55": 0.857, "pm65": 0.710},
    },
}

TABLE_ALIASES = {"1": "mnist", "2": "beta", "5": "mnist_rot"}


def _source_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=10
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def cmd_prepare(args) -> int:
    raw = Path(args.raw_dir)
    names = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    paths = {key: raw / name for key, name in names.items()}
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        print(
            "missing raw MNIST files (big-endian IDX, standard distribution):\n  "
            + "\n  ".join(missing),
            file=sys.stderr,
        )
        return USAGE_ERROR

    train_images, train_labels = data_mod.load_image_label_pair(
        paths["train_images"], paths["train_labels"]
    )
    test_images, test_labels = data_mod.load_image_label_pair(
        paths["test_images"], paths["test_labels"]
    )
    if args.dataset == "mnist":
        splits = data_mod.build_mnist_splits(
            train_images, train_labels, test_images, test_labels,
            group_size=args.k, groups_per_class=args.groups_per_class, seed=args.seed,
        )
    else:
        angles = [float(a) for a in args.train_angles.split(",")]
        splits = data_mod.build_mnist_rot(
            train_images, train_labels, test_images, test_labels,
            train_angles=angles, group_size=args.k,
            groups_per_class=args.groups_per_class, seed=args.seed,
        )
    out_dir = Path(args.out_dir) / f"{args.dataset}_k{args.k}"
    manifest = data_mod.save_splits(splits, out_dir)
    print(f"wrote {manifest} ({splits.model_train.n_groups} groups)")
    return 0


def cmd_train(args) -> int:
    if args.config:
        config = RunConfig.from_file(args.config)
    else:
        config = RunConfig()
    overrides = _parse_overrides(args.set or [])
    if args.seed is not None:
        overrides.setdefault("seed", str(args.seed))
    config = config.with_overrides(overrides)
    if not config.data_dir:
        print("config needs data_dir (a directory written by `prepare`)", file=sys.stderr)
        return USAGE_ERROR

    run_id = args.run_id or (
        Path(args.config).stem if args.config else "run"
    ) + f"_seed{config.seed}"
    run_dir = Path(args.out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    splits = data_mod.load_splits(config.data_dir)
    write_config(config, run_dir / "config.ini")
    manifest = {
        "run_id": run_id,
        "config": config.to_dict(),
        "artifact_dir": str(run_dir),
        "source_revision": _source_revision(),
        "seed": config.seed,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    train(config, splits, run_dir, progress=not args.quiet)
    print(f"run {run_id} complete; artifacts in {run_dir}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.out_dir) / args.run_id
    ckpt = run_dir / "checkpoint_final.ckpt"
    if not ckpt.exists():
        print(f"no checkpoint at {ckpt}; train the run first", file=sys.stderr)
        return USAGE_ERROR
    bundle, _ = load_checkpoint(ckpt)
    config = bundle.config
    splits = data_mod.load_splits(config.data_dir)
    classifier = args.classifier or config.classifier

    eval_sets = {"test": splits.eval_test}
    eval_sets.update(splits.extra_eval)
    results = {}
    for name, obs in eval_sets.items():
        sub_dir = run_dir / "eval" if name == "test" else run_dir / f"eval_{name}"
        report = eval_mod.evaluate(
            bundle, splits.classifier_train, obs,
            run_id=args.run_id, out_dir=sub_dir,
            classifier=classifier, svm_c=config.svm_c, seed=config.seed,
            make_artifacts=(name == "test"),
        )
        results[name] = report
        print(
            f"[{name}] C(c)={report.content_accuracy:.4f} "
            f"C(s)={report.style_accuracy:.4f} L_rec={report.recon_nll:.2f}"
        )
    _append_results_csv(Path(args.out_dir) / "results.csv", args.run_id, results)
    return 0


def _append_results_csv(path: Path, run_id: str, results: dict) -> None:
    exists = path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if not exists:
            writer.writerow(["run_id", "eval_set", "C_c", "C_s", "L_rec"])
        for name, report in results.items():
            writer.writerow([
                run_id, name,
                f"{report.content_accuracy:.4f}",
                f"{report.style_accuracy:.4f}",
                f"{report.recon_nll:.4f}",
            ])


def _load_report(out_dir: Path, run_id: str, eval_set: str = "test") -> dict | None:
    sub = "eval" if eval_set == "test" else f"eval_{eval_set}"
    path = out_dir / run_id / sub / "report.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())


def cmd_table(args) -> int:
    table = TABLE_ALIASES.get(args.table, args.table)
    if table not in REFERENCE:
        print(f"unknown table {args.table!r}; choose from 1/2/5", file=sys.stderr)
        return USAGE_ERROR
    out_dir = Path(args.out_dir)
    rows = []
    missing = []
    if table in ("mnist", "beta"):
        for name, (ref_cc, ref_cs, ref_lrec) in REFERENCE[table].items():
            report = _load_report(out_dir, f"{name}_seed{args.seed}")
            if report is None:
                missing.append(f"{name}_seed{args.seed}")
                continue
            rows.append([
                name, f"{report['C_c']:.4f}", f"{report['C_s']:.4f}",
                f"{report['L_rec']:.2f}", f"{ref_cc:.3f}", f"{ref_cs:.3f}",
                f"{ref_lrec:.1f}",
            ])
        header = ["run", "C_c", "C_s", "L_rec", "ref_C_c", "ref_C_s", "ref_L_rec"]
    else:  # mnist_rot
        for name, refs in REFERENCE["mnist_rot"].items():
            for eval_set, ref_cc in refs.items():
                report = _load_report(out_dir, f"mnistrot_{name}_seed{args.seed}", eval_set)
                if report is None:
                    missing.append(f"mnistrot_{name}_seed{args.seed}:{eval_set}")
                    continue
                rows.append([name, eval_set, f"{report['C_c']:.4f}", f"{ref_cc:.3f}"])
        header = ["run", "eval_set", "C_c", "ref_C_c"]

    if missing and not rows:
        print("no completed runs found; missing:\n  " + "\n  ".join(missing), file=sys.stderr)
        return USAGE_ERROR
    table_path = out_dir / f"table_{args.table}.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    print(f"wrote {table_path}")
    if missing:
        print("incomplete; missing runs:\n  " + "\n  ".join(missing), file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groupvae",
        description="Grouped-observation content/style disentanglement experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_prep = sub.add_parser("prepare", help="build dataset splits from raw IDX files")
    p_prep.add_argument("dataset", choices=["mnist", "mnist-rot"])
    p_prep.add_argument("--raw-dir", default="data/raw")
    p_prep.add_argument("--out-dir", default="data/prepared")
    p_prep.add_argument("--k", type=int, default=2, help="group size")
    p_prep.add_argument("--groups-per-class", type=int, default=10000)
    p_prep.add_argument("--seed", type=int, default=0)
    p_prep.add_argument("--train-angles", default="0,22.5,-22.5,45,-45")
    p_prep.set_defaults(func=cmd_prepare)

    p_train = sub.add_parser("train", help="run one training configuration")
    p_train.add_argument("--config", help="INI config file")
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override a config field (repeatable)")
    p_train.add_argument("--run-id")
    p_train.add_argument("--out-dir", default="runs")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--quiet", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a finished run")
    p_eval.add_argument("run_id")
    p_eval.add_argument("--out-dir", default="runs")
    p_eval.add_argument("--classifier", choices=["svm", "logistic"])
    p_eval.set_defaults(func=cmd_eval)

    p_table = sub.add_parser("table", help="assemble a comparison table")
    p_table.add_argument("table", help="1 (group sizes), 2 (style weight), 5 (rotations)")
    p_table.add_argument("--out-dir", default="runs")
    p_table.add_argument("--seed", type=int, default=0)
    p_table.set_defaults(func=cmd_table)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigurationError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except GroupVAEError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
