"""Command-line interface.

Subcommands: gen-data, split, train, sweep, ablate, params, gradcheck,
report. Every command takes a single --seed; all internal random streams
derive from it. Failures print one line, ``<error-class>: <message>``, to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import hpo as hpo_mod
from .errors import ConfigError, FormatError, PolyfuseError
from .metrics import METRIC_COLUMNS, MetricsReport
from .model import (
    ModalityShape,
    ModelConfig,
    analytic_param_count,
    build,
    count_params,
)
from .numerics import cross_entropy_with_logits, grad_check
from .training import TrainSpec, run_cv

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ExperimentManifest:
    """Everything needed to re-run a sweep or ablation, as one JSON file."""

    data_dir: str
    out_dir: str
    seed: int
    jobs: int
    space: hpo_mod.SearchSpace
    train_spec: TrainSpec
    model_overrides: dict
    format_version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
            "seed": self.seed,
            "jobs": self.jobs,
            "space": self.space.to_dict(),
            "train_spec": self.train_spec.to_dict(),
            "model_overrides": dict(self.model_overrides),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentManifest":
        if not isinstance(doc, dict):
            raise FormatError("manifest must be a JSON object")
        version = doc.get("format_version")
        if version != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest format_version {version!r}")
        required = {"data_dir", "out_dir", "seed", "jobs", "space", "train_spec",
                    "model_overrides", "format_version"}
        missing = required - set(doc)
        if missing:
            raise FormatError(f"manifest missing fields: {sorted(missing)}")
        unknown = set(doc) - required
        if unknown:
            raise FormatError(f"unknown manifest fields: {sorted(unknown)}")
        return cls(
            data_dir=str(doc["data_dir"]),
            out_dir=str(doc["out_dir"]),
            seed=int(doc["seed"]),
            jobs=int(doc["jobs"]),
            space=hpo_mod.SearchSpace.from_dict(doc["space"]),
            train_spec=TrainSpec.from_dict(doc["train_spec"]),
            model_overrides=dict(doc["model_overrides"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "ExperimentManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def check_paths(self) -> None:
        if not Path(self.data_dir).is_dir():
            raise FormatError("manifest data_dir does not exist", path=self.data_dir)


def _slug(tag: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", tag).strip("_") or "trial"


def _read_text(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise FormatError("file is missing", path=str(p))
    return p.read_text()


def _base_config_from_dataset(dataset, overrides: dict) -> ModelConfig:
    known = {"dropout", "conv_kernel"}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown model overrides: {sorted(unknown)}")
    shapes = tuple(ModalityShape(c, t) for c, t in dataset.modality_shapes)
    return ModelConfig(
        modalities=shapes,
        num_classes=dataset.num_classes,
        **overrides,
    )


def _print_report(report: MetricsReport) -> None:
    print(",".join(MetricsReport.csv_header()))
    print(",".join(report.to_csv_row()))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    dataset = data_mod.generate_synthetic(
        num_modalities=args.modalities,
        num_samples=args.samples,
        num_classes=args.classes,
        channels=args.channels,
        timesteps=args.timesteps,
        separability=args.separability,
        seed=args.seed,
    )
    out = data_mod.save_dataset(dataset, args.out, seed=args.seed)
    print(f"wrote dataset: {out} ({dataset.num_samples} samples, "
          f"{dataset.num_modalities} modalities, {dataset.num_classes} classes)")
    return 0


def _cmd_split(args) -> int:
    if args.data is None and args.n is None:
        raise ConfigError("split needs --data or --n")
    if args.data is not None:
        dataset, _, meta = data_mod.load_dataset(args.data)
        folds = data_mod.make_folds(dataset.num_samples, args.seed)
        out_dir = Path(args.out) if args.out else Path(args.data)
        data_mod.save_folds(dataset, folds, out_dir, seed=args.seed)
        print(f"wrote fold table for {dataset.num_samples} samples into {out_dir}")
        return 0
    folds = data_mod.make_folds(args.n, args.seed)
    doc = {
        "num_samples": args.n,
        "seed": args.seed,
        "folds": [
            {"fold": f.fold_index, "train": list(f.train_idx),
             "val": list(f.val_idx), "test": list(f.test_idx)}
            for f in folds
        ],
    }
    out = Path(args.out) if args.out else Path("folds.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(f"wrote fold table: {out}")
    return 0


def _load_train_spec(args) -> TrainSpec:
    spec = TrainSpec()
    if getattr(args, "train_spec", None):
        spec = TrainSpec.from_json(_read_text(args.train_spec))
    overrides = {}
    for flag, field in (("epochs", "epochs"), ("batch_size", "batch_size"),
                        ("lr", "learning_rate"), ("patience", "patience"),
                        ("clip", "clip_norm")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        spec = replace(spec, **overrides)
    return spec.validate()


def _cmd_train(args) -> int:
    dataset, folds, _ = data_mod.load_dataset(args.data)
    if folds is None:
        raise FormatError("dataset has no fold table; run split first", path="meta.json")
    bundles = data_mod.load_all_folds(args.data)
    if args.fold != "all":
        index = int(args.fold)
        if not 0 <= index < len(bundles):
            raise ConfigError(f"fold index {index} out of range [0, {len(bundles)})")
        bundles = [bundles[index]]

    if args.config:
        try:
            doc = json.loads(_read_text(args.config))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("model config document must be a JSON object")
        if "modalities" not in doc:
            doc["modalities"] = [
                {"channels": c, "timesteps": t} for c, t in dataset.modality_shapes
            ]
        doc.setdefault("num_classes", dataset.num_classes)
        config = ModelConfig.from_dict(doc)
    else:
        overrides = {}
        if args.dropout is not None:
            overrides["dropout"] = args.dropout
        if args.kernel is not None:
            overrides["conv_kernel"] = args.kernel
        config = _base_config_from_dataset(dataset, overrides)
        config = replace(
            config,
            cm_layers=args.layers, sa_layers=args.layers,
            cm_heads=args.heads, sa_heads=args.heads,
            model_dim=args.dm, ffn_size=args.ffn,
        )
    config.validate()

    spec = _load_train_spec(args)
    result = run_cv(config, spec, bundles)
    _print_report(result.mean)

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "model_config.json").write_text(config.to_json())
        (out / "train_spec.json").write_text(spec.to_json())
        trial = hpo_mod.TrialConfig(
            layers=config.cm_layers, heads=config.cm_heads,
            model_dim=config.model_dim, ffn_size=config.ffn_size, tag="train",
        )
        hpo_mod.emit_report(
            [hpo_mod.TrialResult(trial=trial, report=result.mean,
                                 fold_reports=result.fold_reports,
                                 histories=result.histories)],
            out / "trials",
        )
        for i, history in enumerate(result.histories):
            history.to_csv(out / f"history_fold{i}.csv")
        print(f"wrote run artifacts to {out}")
    return 0


def _write_trial_outputs(results, out_dir: Path) -> None:
    csv_path, md_path = hpo_mod.emit_report(results, out_dir / "trials")
    for result in results:
        if result.report is None:
            continue
        for i, history in enumerate(result.histories):
            history.to_csv(out_dir / "histories" / _slug(result.trial.tag) / f"fold{i}.csv")
    print(f"wrote {csv_path} and {md_path}")


def _manifest_from_args(args, need_local_opts: bool) -> ExperimentManifest:
    if args.manifest:
        manifest = ExperimentManifest.from_json(_read_text(args.manifest))
    else:
        if not args.data or not args.space or not args.out:
            raise ConfigError("need --data, --space and --out (or --manifest)")
        space = hpo_mod.SearchSpace.from_json(_read_text(args.space))
        overrides = {}
        if args.dropout is not None:
            overrides["dropout"] = args.dropout
        if args.kernel is not None:
            overrides["conv_kernel"] = args.kernel
        manifest = ExperimentManifest(
            data_dir=str(args.data),
            out_dir=str(args.out),
            seed=args.seed if args.seed is not None else 0,
            jobs=args.jobs,
            space=space,
            train_spec=_load_train_spec(args),
            model_overrides=overrides,
        )
    manifest.check_paths()
    if need_local_opts and set(hpo_mod.KNOBS) - set(manifest.space.local_opts):
        raise ConfigError(
            "ablation needs local_opts for all four knobs in the search space"
        )
    return manifest


def _run_manifest(manifest: ExperimentManifest, plan_kind: str) -> int:
    dataset, folds, _ = data_mod.load_dataset(manifest.data_dir)
    if folds is None:
        raise FormatError("dataset has no fold table; run split first", path="meta.json")
    bundles = data_mod.load_all_folds(manifest.data_dir)
    base_config = _base_config_from_dataset(dataset, manifest.model_overrides)

    validation = hpo_mod.validate_space(manifest.space)
    for pair in validation.rejected:
        print(f"rejected pair: d_m={pair.model_dim} heads={pair.heads} ({pair.reason})")

    if plan_kind == "sweep":
        plan = hpo_mod.isolation_sweep(validation.space)
    else:
        plan = hpo_mod.ablation_plan(
            validation.space.default_trial(), validation.space.local_opts
        )
    spec = replace(manifest.train_spec, seed=manifest.seed)
    results = hpo_mod.run_plan(plan, base_config, bundles, spec, jobs=manifest.jobs)

    out_dir = Path(manifest.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(manifest.to_json())
    _write_trial_outputs(results, out_dir)
    errored = sum(1 for r in results if r.report is None)
    print(f"{plan_kind}: {len(results)} trials, {errored} errored")
    return 0


def _cmd_sweep(args) -> int:
    return _run_manifest(_manifest_from_args(args, need_local_opts=False), "sweep")


def _cmd_ablate(args) -> int:
    return _run_manifest(_manifest_from_args(args, need_local_opts=True), "ablate")


def _cmd_params(args) -> int:
    shapes = tuple(
        ModalityShape(args.channels, args.timesteps) for _ in range(args.modalities)
    )
    config = ModelConfig(
        modalities=shapes,
        cm_layers=args.layers, sa_layers=args.layers,
        cm_heads=args.heads, sa_heads=args.heads,
        model_dim=args.dm, ffn_size=args.ffn,
        num_classes=args.classes,
    ).validate()
    breakdown = analytic_param_count(config)
    print(f"per_block        {breakdown.per_block:,}")
    print(f"num_blocks       {breakdown.num_blocks:,}")
    print(f"blocks_subtotal  {breakdown.blocks_subtotal:,}")
    print(f"overhead         {breakdown.overhead:,}")
    print(f"total            {breakdown.total:,}")
    return 0


def _cmd_gradcheck(args) -> int:
    config = ModelConfig(
        modalities=(ModalityShape(1, 4), ModalityShape(1, 4)),
        cm_layers=1, sa_layers=1, cm_heads=1, sa_heads=1,
        model_dim=6, ffn_size=30, dropout=0.0, num_classes=3,
    ).validate()
    model = build(config, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    xs = [rng.standard_normal((2, 1, 4)) for _ in range(2)]
    ys = np.array([0, 2])

    def loss_fn():
        return cross_entropy_with_logits(model.forward(xs, train_flag=False), ys)

    worst = grad_check(loss_fn, model.params, eps=args.eps)
    print(f"max relative gradient error: {worst:.3e} (tolerance {args.tolerance:.1e})")
    return 0 if worst < args.tolerance else 1


def _cmd_report(args) -> int:
    rows: list[dict] = []
    for path in args.trials:
        if not Path(path).is_file():
            raise FormatError("file is missing", path=str(path))
        rows.extend(hpo_mod.read_report_csv(path))
    if not rows:
        raise FormatError("no trial rows found in the given CSVs")
    results = _results_from_rows(rows)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, md_path = hpo_mod.emit_report(results, out_dir / "merged")
    written = [csv_path, md_path]
    if not args.no_figures:
        from . import figures
        from .training import RunHistory

        fig_dir = out_dir / "figures"
        merged_rows = hpo_mod.read_report_csv(csv_path)
        written.append(figures.render_trials_overview(merged_rows, fig_dir / "trials_overview.png"))
        for hist_path in _collect_histories(args.histories):
            history = RunHistory.from_csv(hist_path)
            name = _slug(str(Path(hist_path).parent.name) + "_" + Path(hist_path).stem)
            written.append(
                figures.render_history_curves(history, fig_dir / f"curves_{name}.png",
                                              title=Path(hist_path).stem)
            )
    for path in written:
        print(f"wrote {path}")
    return 0


def _collect_histories(entries) -> list[Path]:
    paths: list[Path] = []
    for entry in entries or []:
        p = Path(entry)
        if p.is_dir():
            paths.extend(sorted(p.rglob("*.csv")))
        elif p.exists():
            paths.append(p)
        else:
            raise FormatError("history path does not exist", path=str(p))
    return paths


def _results_from_rows(rows: list[dict]) -> list[hpo_mod.TrialResult]:
    results = []
    for row in rows:
        try:
            trial = hpo_mod.TrialConfig(
                layers=int(row["layers"]), heads=int(row["heads"]),
                model_dim=int(row["model_dim"]), ffn_size=int(row["ffn_size"]),
                tag=row["tag"],
            )
        except (KeyError, ValueError) as exc:
            raise FormatError(f"malformed trial row: {exc}") from exc
        status = row.get("status", "ok")
        if status != "ok" or not row.get("params"):
            results.append(hpo_mod.TrialResult(
                trial=trial, report=None,
                error=status.removeprefix("error: ") if status != "ok" else "missing metrics",
            ))
            continue
        report = MetricsReport(
            loss=float(row["loss"]), mae=float(row["mae"]),
            accuracy=float(row["accuracy"]), f1=float(row["f1"]),
            train_time_h=float(row["train_time_h"]),
            memory_mb=float(row["memory_mb"]), params=int(row["params"]),
        )
        results.append(hpo_mod.TrialResult(trial=trial, report=report))
    return results


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_seed(parser: argparse.ArgumentParser, default=0) -> None:
    parser.add_argument("--seed", type=int, default=default,
                        help="seed for every random stream in this command")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--train-spec", help="JSON file with training settings")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--clip", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polyfuse",
        description="Multimodal cross-attention classifier and sweep harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic multimodal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--modalities", type=int, default=2)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--timesteps", type=int, default=32)
    p.add_argument("--separability", type=float, default=5.0)
    _add_seed(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("split", help="build the 10-fold table")
    p.add_argument("--data", help="dataset directory to split")
    p.add_argument("--n", type=int, help="sample count for a standalone fold table")
    p.add_argument("--out", help="output directory (with --data) or JSON path (with --n)")
    _add_seed(p)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("train", help="train one config over the folds")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="model config JSON (modalities optional)")
    p.add_argument("--layers", type=int, default=5)
    p.add_argument("--heads", type=int, default=3)
    p.add_argument("--dm", type=int, default=30)
    p.add_argument("--ffn", type=int, default=120)
    p.add_argument("--dropout", type=float)
    p.add_argument("--kernel", type=int)
    p.add_argument("--fold", default="all", help="fold index, or 'all'")
    p.add_argument("--out", help="directory for report, config and history files")
    _add_train_flags(p)
    _add_seed(p, default=None)
    p.set_defaults(func=_cmd_train)

    for name, helptext in (("sweep", "one-knob-at-a-time isolation sweep"),
                           ("ablate", "local-optima ablation grid")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data")
        p.add_argument("--space", help="search space JSON")
        p.add_argument("--out")
        p.add_argument("--manifest", help="run from a saved manifest instead of flags")
        p.add_argument("--jobs", type=int, default=1, help="parallel trial processes")
        p.add_argument("--dropout", type=float)
        p.add_argument("--kernel", type=int)
        _add_train_flags(p)
        _add_seed(p, default=None)
        p.set_defaults(func=_cmd_sweep if name == "sweep" else _cmd_ablate)

    p = sub.add_parser("params", help="closed-form parameter accounting")
    p.add_argument("--modalities", type=int, required=True)
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--heads", type=int, required=True)
    p.add_argument("--dm", type=int, required=True)
    p.add_argument("--ffn", type=int, required=True)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--timesteps", type=int, default=32)
    p.add_argument("--classes", type=int, default=3)
    p.set_defaults(func=_cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    _add_seed(p)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("report", help="merge trial CSVs into tables and figures")
    p.add_argument("--trials", nargs="+", required=True)
    p.add_argument("--histories", nargs="*", help="history CSVs or directories")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PolyfuseError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
