"""Hyperparameter search: isolation sweeps, ablation grids, report emission.

The search treats four knobs: L (both stack depths together), H (both head
counts together), d_m (model dim), FFN (nominal FFN width). A sweep varies
one knob at a time with the others pinned at the defaults; an ablation
applies every subset of size >= 2 of the per-knob local optima.
"""

from __future__ import annotations

import csv
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .data import FoldBundle
from .errors import ConfigError
from .metrics import METRIC_COLUMNS, METRIC_TITLES, MetricsReport, format_metric
from .model import ModelConfig, with_trial_dims
from .training import RunHistory, TrainSpec, derive_trial_spec, run_cv

KNOBS = ("L", "H", "d_m", "FFN")

# Lower is better for everything except these two.
_HIGHER_BETTER = {"accuracy", "f1"}


@dataclass(frozen=True)
class TrialConfig:
    """One point in the four-knob search space, plus its table label."""

    layers: int
    heads: int
    model_dim: int
    ffn_size: int
    tag: str

    def knob_values(self) -> dict[str, int]:
        return {"L": self.layers, "H": self.heads, "d_m": self.model_dim,
                "FFN": self.ffn_size}

    def apply(self, base: ModelConfig) -> ModelConfig:
        return with_trial_dims(base, self.layers, self.heads,
                               self.model_dim, self.ffn_size)


@dataclass(frozen=True)
class RejectedPair:
    model_dim: int
    heads: int
    reason: str


@dataclass(frozen=True)
class SearchSpace:
    layers_set: tuple[int, ...]
    heads_set: tuple[int, ...]
    dm_set: tuple[int, ...]
    ffn_set: tuple[int, ...]
    defaults: dict[str, int]
    local_opts: dict[str, int] = field(default_factory=dict)

    def validate_fields(self) -> "SearchSpace":
        for name, values in (("layers_set", self.layers_set), ("heads_set", self.heads_set),
                             ("dm_set", self.dm_set), ("ffn_set", self.ffn_set)):
            if not values:
                raise ConfigError(f"search space {name} is empty")
            if any(v < 1 for v in values):
                raise ConfigError(f"search space {name} contains non-positive values")
        missing = set(KNOBS) - set(self.defaults)
        if missing:
            raise ConfigError(f"search space defaults missing knobs: {sorted(missing)}")
        return self

    def default_trial(self) -> TrialConfig:
        return TrialConfig(
            layers=self.defaults["L"], heads=self.defaults["H"],
            model_dim=self.defaults["d_m"], ffn_size=self.defaults["FFN"],
            tag="Default",
        )

    def to_dict(self) -> dict:
        doc = {
            "layers": list(self.layers_set),
            "heads": list(self.heads_set),
            "model_dim": list(self.dm_set),
            "ffn": list(self.ffn_set),
            "defaults": dict(self.defaults),
        }
        if self.local_opts:
            doc["local_opts"] = dict(self.local_opts)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchSpace":
        if not isinstance(doc, dict):
            raise ConfigError("search space document must be a JSON object")
        required = {"layers", "heads", "model_dim", "ffn", "defaults"}
        missing = required - set(doc)
        if missing:
            raise ConfigError(f"search space missing fields: {sorted(missing)}")
        unknown = set(doc) - required - {"local_opts"}
        if unknown:
            raise ConfigError(f"unknown search space fields: {sorted(unknown)}")
        return cls(
            layers_set=tuple(int(v) for v in doc["layers"]),
            heads_set=tuple(int(v) for v in doc["heads"]),
            dm_set=tuple(int(v) for v in doc["model_dim"]),
            ffn_set=tuple(int(v) for v in doc["ffn"]),
            defaults={k: int(v) for k, v in doc["defaults"].items()},
            local_opts={k: int(v) for k, v in doc.get("local_opts", {}).items()},
        ).validate_fields()

    @classmethod
    def from_json(cls, text: str) -> "SearchSpace":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"search space is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


@dataclass(frozen=True)
class ValidationReport:
    space: SearchSpace
    rejected: tuple[RejectedPair, ...]


def validate_space(space: SearchSpace) -> ValidationReport:
    """Report every head-divisibility violation across dm_set x heads_set.

    A value is dropped only when it has no valid partner on the other axis;
    an axis left empty is a config error.
    """
    space.validate_fields()
    rejected = []
    valid_dm = set()
    valid_heads = set()
    for dm in space.dm_set:
        for h in space.heads_set:
            if dm % h == 0:
                valid_dm.add(dm)
                valid_heads.add(h)
            else:
                rejected.append(RejectedPair(dm, h, f"model_dim {dm} is not divisible by heads {h}"))
    kept_dm = tuple(v for v in space.dm_set if v in valid_dm)
    kept_heads = tuple(v for v in space.heads_set if v in valid_heads)
    if not kept_dm or not kept_heads:
        raise ConfigError("search space has no divisibility-valid (model_dim, heads) pair")
    pruned = SearchSpace(
        layers_set=space.layers_set,
        heads_set=kept_heads,
        dm_set=kept_dm,
        ffn_set=space.ffn_set,
        defaults=space.defaults,
        local_opts=space.local_opts,
    )
    return ValidationReport(space=pruned, rejected=tuple(rejected))


def _check_trial(trial: TrialConfig) -> TrialConfig:
    if trial.model_dim % trial.heads != 0:
        raise ConfigError(
            f"trial {trial.tag!r}: model_dim {trial.model_dim} is not divisible "
            f"by heads {trial.heads}"
        )
    return trial


def isolation_sweep(space: SearchSpace, defaults: TrialConfig | None = None) -> list[TrialConfig]:
    """One trial per value per knob, in L, H, d_m, FFN order, rest at defaults."""
    space.validate_fields()
    base = defaults if defaults is not None else space.default_trial()
    _check_trial(base)
    trials: list[TrialConfig] = []
    sweeps = (
        ("L", space.layers_set, "layers"),
        ("H", space.heads_set, "heads"),
        ("d_m", space.dm_set, "model_dim"),
        ("FFN", space.ffn_set, "ffn_size"),
    )
    for knob, values, attr in sweeps:
        for value in values:
            fields = {
                "layers": base.layers,
                "heads": base.heads,
                "model_dim": base.model_dim,
                "ffn_size": base.ffn_size,
            }
            fields[attr] = value
            trial = TrialConfig(tag=f"{knob}={value}", **fields)
            trials.append(_check_trial(trial))
    return trials


def ablation_plan(defaults: TrialConfig, local_opts: dict[str, int]) -> list[TrialConfig]:
    """Default row plus all 11 subsets of size >= 2 of the local optima.

    Row labels follow the knob order, e.g. "L + d_m + FFN". Knobs outside
    the subset stay at the defaults.
    """
    missing = set(KNOBS) - set(local_opts)
    if missing:
        raise ConfigError(f"local_opts missing knobs: {sorted(missing)}")
    _check_trial(defaults)
    attr_of = {"L": "layers", "H": "heads", "d_m": "model_dim", "FFN": "ffn_size"}
    plan = [defaults if defaults.tag == "Default"
            else TrialConfig(defaults.layers, defaults.heads, defaults.model_dim,
                             defaults.ffn_size, "Default")]
    for size in (2, 3, 4):
        for subset in itertools.combinations(KNOBS, size):
            fields = {
                "layers": defaults.layers,
                "heads": defaults.heads,
                "model_dim": defaults.model_dim,
                "ffn_size": defaults.ffn_size,
            }
            for knob in subset:
                fields[attr_of[knob]] = int(local_opts[knob])
            trial = TrialConfig(tag=" + ".join(subset), **fields)
            plan.append(_check_trial(trial))
    return plan


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


@dataclass
class TrialResult:
    trial: TrialConfig
    report: MetricsReport | None
    fold_reports: list[MetricsReport] = field(default_factory=list)
    histories: list[RunHistory] = field(default_factory=list)
    error: str | None = None


def _run_one(args) -> TrialResult:
    trial, base_config, bundles, spec = args
    try:
        config = trial.apply(base_config)
        result = run_cv(config, spec, bundles)
        return TrialResult(trial=trial, report=result.mean,
                           fold_reports=result.fold_reports,
                           histories=result.histories)
    except Exception as exc:  # errored rows keep the plan moving
        return TrialResult(trial=trial, report=None, error=f"{type(exc).__name__}: {exc}")


def run_plan(plan: list[TrialConfig], base_config: ModelConfig,
             bundles: list[FoldBundle], spec: TrainSpec,
             jobs: int = 1) -> list[TrialResult]:
    """Execute trials in plan order; failures become errored rows.

    Each trial derives its own seed from (spec.seed, trial index), so the
    results do not depend on the parallelism degree.
    """
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    spec.validate()
    tasks = [
        (trial, base_config, bundles, derive_trial_spec(spec, i))
        for i, trial in enumerate(plan)
    ]
    if jobs == 1 or len(tasks) <= 1:
        return [_run_one(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, tasks))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

_CONFIG_COLUMNS = ("tag", "layers", "heads", "model_dim", "ffn_size")
_CONFIG_TITLES = {"tag": "Config", "layers": "L", "heads": "H",
                  "model_dim": "d_m", "ffn_size": "FFN"}


def _best_flags(results: list[TrialResult]) -> dict[int, list[str]]:
    """Index -> metric names where that row is the best scored row."""
    flags: dict[int, list[str]] = {}
    for metric in METRIC_COLUMNS:
        best_idx = None
        best_val = None
        for i, r in enumerate(results):
            if r.report is None:
                continue
            v = getattr(r.report, metric)
            better = (
                best_val is None
                or (metric in _HIGHER_BETTER and v > best_val)
                or (metric not in _HIGHER_BETTER and v < best_val)
            )
            if better:
                best_val = v
                best_idx = i
        if best_idx is not None:
            flags.setdefault(best_idx, []).append(metric)
    return flags


def _row_cells(result: TrialResult) -> list[str]:
    t = result.trial
    cells = [t.tag, str(t.layers), str(t.heads), str(t.model_dim), str(t.ffn_size)]
    if result.report is None:
        cells += ["" for _ in METRIC_COLUMNS]
        cells.append(f"error: {result.error}")
    else:
        cells += result.report.to_csv_row()
        cells.append("ok")
    return cells


def emit_report(results: list[TrialResult], out_base) -> tuple[Path, Path]:
    """Write <out_base>.csv and <out_base>.md with identical numbers.

    The Markdown table bolds the best row per metric; both formats carry a
    best_for column naming those metrics.
    """
    base = Path(out_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path = base.with_suffix(".csv")
    md_path = base.with_suffix(".md")
    flags = _best_flags(results)

    header = list(_CONFIG_COLUMNS) + list(METRIC_COLUMNS) + ["status", "best_for"]
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, result in enumerate(results):
            writer.writerow(_row_cells(result) + ["+".join(flags.get(i, []))])

    titles = [_CONFIG_TITLES[c] for c in _CONFIG_COLUMNS]
    titles += [METRIC_TITLES[c] for c in METRIC_COLUMNS]
    titles += ["Status", "Best For"]
    lines = ["| " + " | ".join(titles) + " |",
             "| " + " | ".join("---" for _ in titles) + " |"]
    for i, result in enumerate(results):
        cells = _row_cells(result)
        row_flags = flags.get(i, [])
        if result.report is not None and row_flags:
            offset = len(_CONFIG_COLUMNS)
            for metric in row_flags:
                j = offset + METRIC_COLUMNS.index(metric)
                cells[j] = f"**{cells[j]}**"
        cells.append("+".join(row_flags))
        lines.append("| " + " | ".join(cells) + " |")
    md_path.write_text("\n".join(lines) + "\n")
    return csv_path, md_path


def read_report_csv(path) -> list[dict]:
    """Rows of a trials CSV as dicts (strings preserved)."""
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))
