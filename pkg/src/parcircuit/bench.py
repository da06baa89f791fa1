"""Condition-matrix execution, aggregation, and report emission.

A matrix is (dataset x architecture x condition x k); every cell runs a
fixed number of independent trials whose seeds derive injectively from
(base_seed, cell index, trial index). Trial results persist as one JSON
file plus a per-epoch history CSV each, written atomically, so an
interrupted run resumes by skipping whatever already finished and the
final report depends only on the persisted set.
"""

import json
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .datasets import Dataset, SplitSpec, load_manifest, normalize, resolve_dataset, split
from .dropout import DropoutPolicy
from .errors import BenchError, ConfigError, DataError, FormatError
from .network import Topology, build_network
from .rng import RngKey, permutation
from .training import Hyperparams, TrialResult, train

CONDITIONS = ("SC", "ND", "NFD", "FD")
_CONDITION_ORDER = {c: i for i, c in enumerate(CONDITIONS + ("AVG",))}
PC_CONDITIONS = ("ND", "NFD", "FD")

_SEED_SPAN = 2**32


@dataclass(frozen=True)
class ExperimentConfig:
    datasets: tuple
    architectures: tuple  # tuple of width tuples
    conditions: tuple
    circuit_counts: tuple
    hyperparams: Hyperparams
    trials: int
    base_seed: int
    manifest: str
    test_fraction: float = 0.2
    stratified: bool = True
    normalize: str = "zscore"
    head: str = "softmax"
    dataset_options: tuple = ()  # ((name, {...}), ...) kept hashable

    def __post_init__(self):
        if not self.datasets:
            raise ConfigError("config needs at least one dataset")
        if not self.architectures:
            raise ConfigError("config needs at least one architecture")
        bad = [c for c in self.conditions if c not in CONDITIONS]
        if bad or not self.conditions:
            raise ConfigError(f"conditions must be a non-empty subset of {CONDITIONS}, got {self.conditions}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if not 0 <= self.base_seed < _SEED_SPAN:
            raise ConfigError(f"base_seed must be in [0, 2^32), got {self.base_seed}")
        needs_pc = any(c in PC_CONDITIONS for c in self.conditions)
        if needs_pc:
            if not self.circuit_counts:
                raise ConfigError("PC conditions need at least one circuit count")
            for k in self.circuit_counts:
                if k < 2:
                    raise ConfigError(f"circuit counts must be >= 2, got {k}")
                for arch in self.architectures:
                    if len(arch) < 2:
                        raise ConfigError(f"architecture {arch} needs >= 2 hidden layers for PC runs")
                    for w in arch:
                        if w % k != 0:
                            raise ConfigError(f"width {w} not divisible by k={k}")

    def options_for(self, dataset: str) -> dict:
        return dict(self.dataset_options).get(dataset, {})

    def to_dict(self) -> dict:
        return {
            "datasets": list(self.datasets),
            "architectures": [list(a) for a in self.architectures],
            "conditions": list(self.conditions),
            "circuit_counts": list(self.circuit_counts),
            "hyperparams": {
                "learning_rate": self.hyperparams.learning_rate,
                "momentum": self.hyperparams.momentum,
                "l2": self.hyperparams.l2,
                "retain_p": self.hyperparams.retain_p,
                "epochs": self.hyperparams.epochs,
                "batch_size": self.hyperparams.batch_size,
                "init_scale": self.hyperparams.init_scale,
            },
            "trials": self.trials,
            "base_seed": self.base_seed,
            "manifest": self.manifest,
            "test_fraction": self.test_fraction,
            "stratified": self.stratified,
            "normalize": self.normalize,
            "head": self.head,
            "dataset_options": {name: opts for name, opts in self.dataset_options},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        hp = Hyperparams(**obj.get("hyperparams", {}))
        return cls(
            datasets=tuple(obj["datasets"]),
            architectures=tuple(tuple(a) for a in obj["architectures"]),
            conditions=tuple(obj.get("conditions", CONDITIONS)),
            circuit_counts=tuple(obj.get("circuit_counts", ())),
            hyperparams=hp,
            trials=int(obj.get("trials", 1)),
            base_seed=int(obj.get("base_seed", 0)),
            manifest=str(obj["manifest"]),
            test_fraction=float(obj.get("test_fraction", 0.2)),
            stratified=bool(obj.get("stratified", True)),
            normalize=str(obj.get("normalize", "zscore")),
            head=str(obj.get("head", "softmax")),
            dataset_options=tuple(sorted((k, v) for k, v in obj.get("dataset_options", {}).items())),
        )

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    import yaml

    path = Path(path)
    with open(path) as f:
        obj = yaml.safe_load(f)
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    manifest = obj.get("manifest")
    if manifest and not Path(manifest).is_absolute():
        obj["manifest"] = str((path.parent / manifest).resolve())
    try:
        return ExperimentConfig.from_dict(obj)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class Cell:
    index: int
    dataset: str
    arch: tuple
    condition: str
    k: int

    @property
    def arch_str(self) -> str:
        return "x".join(str(w) for w in self.arch)

    @property
    def cell_id(self) -> str:
        return f"{self.dataset}__{self.arch_str}__{self.condition}__k{self.k}"


def plan_cells(config: ExperimentConfig) -> list:
    """Deterministic cell enumeration; SC collapses the k axis to 1."""
    cells = []
    for dataset in config.datasets:
        for arch in config.architectures:
            for condition in CONDITIONS:
                if condition not in config.conditions:
                    continue
                ks = (1,) if condition == "SC" else tuple(config.circuit_counts)
                for k in ks:
                    cells.append(Cell(len(cells), dataset, tuple(arch), condition, k))
    if len(cells) * config.trials >= _SEED_SPAN:
        raise ConfigError("matrix too large for the seed-derivation scheme")
    return cells


def trial_seed(config: ExperimentConfig, cell: Cell, trial_idx: int) -> RngKey:
    """Injective over (cell, trial): disjoint blocks of the trial field."""
    value = config.base_seed * _SEED_SPAN + cell.index * config.trials + trial_idx
    return RngKey(trial=value)


def policy_for(condition: str, retain_p: float) -> DropoutPolicy:
    if condition in ("SC", "ND"):
        return DropoutPolicy(kind="node_dropout", retain_p=retain_p)
    if condition == "NFD":
        return DropoutPolicy(kind="nonfixed_dropcircuit", retain_p=retain_p)
    if condition == "FD":
        return DropoutPolicy(kind="fixed_dropcircuit", retain_p=retain_p)
    raise ConfigError(f"unknown condition {condition!r}")


_dataset_cache: dict = {}


def _resolved(config: ExperimentConfig, name: str) -> dict:
    key = (config.manifest, name)
    if key not in _dataset_cache:
        manifest = load_manifest(config.manifest)
        if name not in manifest:
            raise ConfigError(f"dataset {name!r} not in manifest {config.manifest}")
        base_dir = Path(config.manifest).parent
        _dataset_cache[key] = resolve_dataset(name, manifest[name], base_dir)
    return _dataset_cache[key]


def _limited(ds: Dataset, limit: Optional[int], key: RngKey, lane: int) -> Dataset:
    if limit is None or limit >= ds.n_samples:
        return ds
    order = permutation(key.with_fields(purpose="split"), ds.n_samples, lane=lane)
    return ds.subset(np.sort(order[:limit]))


def prepare_trial_data(config: ExperimentConfig, cell: Cell, seed: RngKey) -> tuple:
    """Per-trial (train, test) pair: split or subsample, then normalize."""
    parts = _resolved(config, cell.dataset)
    opts = config.options_for(cell.dataset)
    if "full" in parts:
        spec = SplitSpec(
            test_fraction=config.test_fraction, seed=seed, stratified=config.stratified
        )
        train_raw, test_raw = split(parts["full"], spec)
    else:
        train_raw = _limited(parts["train"], opts.get("train_limit"), seed, lane=1001)
        test_raw = _limited(parts["test"], opts.get("test_limit"), seed, lane=1002)
    method = opts.get("normalize", "none" if "train" in parts else config.normalize)
    train_ds = normalize(train_raw, method, train_raw)
    test_ds = normalize(test_raw, method, train_raw)
    return train_ds, test_ds


def run_trial(config: ExperimentConfig, cell: Cell, trial_idx: int, clock=None) -> TrialResult:
    seed = trial_seed(config, cell, trial_idx)
    train_ds, test_ds = prepare_trial_data(config, cell, seed)
    topo = Topology(
        input_dim=train_ds.n_features,
        k=cell.k,
        hidden=cell.arch,
        output_dim=train_ds.class_count,
        head=config.head,
    )
    params = build_network(topo, config.hyperparams.init_scale, seed)
    policy = policy_for(cell.condition, config.hyperparams.retain_p)
    kwargs = {"label": cell.condition}
    if clock is not None:
        kwargs["clock"] = clock
    _, result = train(params, train_ds, test_ds, policy, config.hyperparams, seed, **kwargs)
    return result


# --- persistence ---------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _trial_paths(out_dir: Path, cell: Cell, trial_idx: int) -> tuple:
    base = out_dir / "trials" / f"{cell.cell_id}__trial{trial_idx:04d}"
    return (
        base.with_suffix(".json"),
        Path(str(base) + "_history.csv"),
        Path(str(base) + ".failed.json"),
    )


def _history_csv(result: TrialResult) -> str:
    lines = ["epoch,train_error,test_error,cumulative_seconds"]
    cum = 0.0
    for e, (tr, te, sec) in enumerate(
        zip(result.train_errors, result.test_errors, result.epoch_seconds)
    ):
        cum += sec
        lines.append(f"{e},{tr!r},{te!r},{cum!r}")
    return "\n".join(lines) + "\n"


def persist_trial(out_dir: Path, config, cell: Cell, trial_idx: int, result: TrialResult) -> None:
    json_path, history_path, _ = _trial_paths(out_dir, cell, trial_idx)
    payload = {
        "cell": {
            "dataset": cell.dataset,
            "arch": list(cell.arch),
            "condition": cell.condition,
            "k": cell.k,
        },
        "trial": trial_idx,
        "config_digest": config.digest(),
        "result": result.to_dict(),
    }
    _atomic_write(history_path, _history_csv(result))
    _atomic_write(json_path, json.dumps(payload, indent=1))


def load_trial(out_dir: Path, config, cell: Cell, trial_idx: int) -> Optional[TrialResult]:
    json_path, _, _ = _trial_paths(out_dir, cell, trial_idx)
    if not json_path.exists():
        return None
    payload = json.loads(json_path.read_text())
    if payload.get("config_digest") != config.digest():
        raise ConfigError(
            f"{json_path}: persisted under a different config; use a fresh output directory"
        )
    return TrialResult.from_dict(payload["result"])


# --- aggregation and reports ---------------------------------------------


def aggregate(trials: list) -> dict:
    """Mean/median/min/max of final test errors, mean training seconds."""
    if not trials:
        raise DataError("cannot aggregate an empty trial list")
    errors = [t.final_test_error for t in trials]
    times = [t.total_seconds for t in trials]
    return {
        "mean_error": float(statistics.mean(errors)),
        "median_error": float(statistics.median(errors)),
        "whisker_low": float(min(errors)),
        "whisker_high": float(max(errors)),
        "mean_seconds": float(statistics.mean(times)),
        "trials": len(errors),
    }


@dataclass(frozen=True)
class ReportRow:
    dataset: str
    architecture: str
    condition: str
    k: int
    trials: int
    mean_error: float
    median_error: float
    whisker_low: float
    whisker_high: float
    mean_seconds: float

    CSV_COLUMNS = (
        "dataset",
        "architecture",
        "condition",
        "k",
        "trials",
        "mean_error",
        "median_error",
        "whisker_low",
        "whisker_high",
        "mean_seconds",
    )

    def to_csv_fields(self) -> list:
        return [
            self.dataset,
            self.architecture,
            self.condition,
            str(self.k),
            str(self.trials),
            repr(self.mean_error),
            repr(self.median_error),
            repr(self.whisker_low),
            repr(self.whisker_high),
            repr(self.mean_seconds),
        ]

    @classmethod
    def from_csv_fields(cls, fields: list) -> "ReportRow":
        return cls(
            dataset=fields[0],
            architecture=fields[1],
            condition=fields[2],
            k=int(fields[3]),
            trials=int(fields[4]),
            mean_error=float(fields[5]),
            median_error=float(fields[6]),
            whisker_low=float(fields[7]),
            whisker_high=float(fields[8]),
            mean_seconds=float(fields[9]),
        )


def _avg_row(group_rows: list) -> ReportRow:
    # field-wise arithmetic mean over the PC-condition rows of one cell group
    first = group_rows[0]
    return ReportRow(
        dataset=first.dataset,
        architecture=first.architecture,
        condition="AVG",
        k=first.k,
        trials=sum(r.trials for r in group_rows),
        mean_error=float(statistics.mean(r.mean_error for r in group_rows)),
        median_error=float(statistics.mean(r.median_error for r in group_rows)),
        whisker_low=float(statistics.mean(r.whisker_low for r in group_rows)),
        whisker_high=float(statistics.mean(r.whisker_high for r in group_rows)),
        mean_seconds=float(statistics.mean(r.mean_seconds for r in group_rows)),
    )


def build_rows(config: ExperimentConfig, cells: list, results: dict) -> list:
    """Aggregate per-cell trial lists into report rows plus AVG rows."""
    rows = []
    for cell in cells:
        stats = aggregate(results[cell.cell_id])
        rows.append(
            ReportRow(
                dataset=cell.dataset,
                architecture=cell.arch_str,
                condition=cell.condition,
                k=cell.k,
                trials=stats["trials"],
                mean_error=stats["mean_error"],
                median_error=stats["median_error"],
                whisker_low=stats["whisker_low"],
                whisker_high=stats["whisker_high"],
                mean_seconds=stats["mean_seconds"],
            )
        )
    groups: dict = {}
    for row in rows:
        if row.condition in PC_CONDITIONS:
            groups.setdefault((row.dataset, row.architecture, row.k), []).append(row)
    avg_rows = [_avg_row(g) for g in groups.values()]
    all_rows = rows + avg_rows
    all_rows.sort(
        key=lambda r: (
            config.datasets.index(r.dataset),
            r.architecture,
            _CONDITION_ORDER[r.condition],
            r.k,
        )
    )
    return all_rows


def run_matrix(
    config: ExperimentConfig,
    out_dir,
    jobs: int = 1,
    resume: bool = False,
    clock_factory=None,
) -> list:
    """Execute every pending (cell, trial), persist, and aggregate.

    With resume=True, trials whose files already exist are not re-run.
    Failures leave a .failed.json marker and the matrix raises at the end;
    completed trial files always survive.
    """
    out_dir = Path(out_dir)
    (out_dir / "trials").mkdir(parents=True, exist_ok=True)
    cells = plan_cells(config)
    for name in config.datasets:
        _resolved(config, name)  # fail on unresolvable datasets before any training
    _atomic_write(out_dir / "config.json", json.dumps(config.to_dict(), indent=1))

    pending = []
    results: dict = {c.cell_id: [None] * config.trials for c in cells}
    for cell in cells:
        for t in range(config.trials):
            existing = load_trial(out_dir, config, cell, t) if resume else None
            if existing is not None:
                results[cell.cell_id][t] = existing
            else:
                pending.append((cell, t))

    failures = []
    if jobs <= 1:
        for cell, t in pending:
            clock = clock_factory() if clock_factory is not None else None
            try:
                result = run_trial(config, cell, t, clock=clock)
            except Exception as exc:  # persist the marker, keep going
                _record_failure(out_dir, cell, t, exc)
                failures.append((cell.cell_id, t, str(exc)))
                continue
            persist_trial(out_dir, config, cell, t, result)
            results[cell.cell_id][t] = result
    else:
        job_args = [(config.to_dict(), cell, t, str(out_dir)) for cell, t in pending]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for (cell, t), outcome in zip(pending, pool.map(_pool_trial, job_args)):
                ok, info = outcome
                if ok:
                    results[cell.cell_id][t] = load_trial(out_dir, config, cell, t)
                else:
                    failures.append((cell.cell_id, t, info))

    if failures:
        raise BenchError(
            f"{len(failures)} trial(s) failed: "
            + "; ".join(f"{cid}/trial{t}: {msg}" for cid, t, msg in failures)
        )
    return build_rows(config, cells, {cid: rs for cid, rs in results.items()})


def _record_failure(out_dir: Path, cell: Cell, trial_idx: int, exc: Exception) -> None:
    _, _, failed_path = _trial_paths(out_dir, cell, trial_idx)
    _atomic_write(
        failed_path,
        json.dumps({"error": type(exc).__name__, "message": str(exc)}, indent=1),
    )


def _pool_trial(args) -> tuple:
    config_dict, cell, trial_idx, out_dir = args
    config = ExperimentConfig.from_dict(config_dict)
    out = Path(out_dir)
    try:
        result = run_trial(config, cell, trial_idx)
        persist_trial(out, config, cell, trial_idx, result)
        return True, None
    except Exception as exc:
        _record_failure(out, cell, trial_idx, exc)
        return False, str(exc)


def rows_from_directory(out_dir) -> list:
    """Rebuild report rows from a completed run directory."""
    out_dir = Path(out_dir)
    config_path = out_dir / "config.json"
    if not config_path.exists():
        raise ConfigError(f"{out_dir}: no config.json (was `run` executed here?)")
    config = ExperimentConfig.from_dict(json.loads(config_path.read_text()))
    cells = plan_cells(config)
    results = {}
    for cell in cells:
        trials = []
        for t in range(config.trials):
            result = load_trial(out_dir, config, cell, t)
            if result is None:
                raise BenchError(f"missing trial {t} for cell {cell.cell_id}; matrix incomplete")
            trials.append(result)
        results[cell.cell_id] = trials
    return build_rows(config, cells, results)


# --- report formats -------------------------------------------------------


def emit_csv(rows: list, path) -> Path:
    path = Path(path)
    lines = [",".join(ReportRow.CSV_COLUMNS)]
    lines += [",".join(r.to_csv_fields()) for r in rows]
    _atomic_write(path, "\n".join(lines) + "\n")
    return path


def parse_csv(path) -> list:
    lines = Path(path).read_text().strip().split("\n")
    if lines[0] != ",".join(ReportRow.CSV_COLUMNS):
        raise FormatError(f"{path}: unexpected report header")
    return [ReportRow.from_csv_fields(line.split(",")) for line in lines[1:]]


def emit_markdown(rows: list, path) -> Path:
    """Dataset x condition pivot per (architecture, k); best mean bolded,
    second best italicized."""
    path = Path(path)
    by_key: dict = {}
    sc_rows: dict = {}
    for r in rows:
        if r.condition == "SC":
            sc_rows[(r.dataset, r.architecture)] = r
        else:
            by_key.setdefault((r.architecture, r.k), {}).setdefault(r.dataset, {})[
                r.condition
            ] = r
    out = ["# Benchmark report", ""]
    if not by_key and sc_rows:  # SC-only matrix
        by_key = {}
        for (dataset, arch), r in sc_rows.items():
            by_key.setdefault((arch, 1), {}).setdefault(dataset, {})
    for (arch, k) in sorted(by_key):
        datasets = sorted(by_key[(arch, k)])
        conditions = [c for c in CONDITIONS + ("AVG",)]
        out.append(f"## architecture {arch}, k={k}")
        out.append("")
        out.append("| dataset | " + " | ".join(conditions) + " |")
        out.append("|" + "---|" * (len(conditions) + 1))
        for dataset in datasets:
            cond_rows = dict(by_key[(arch, k)][dataset])
            sc = sc_rows.get((dataset, arch))
            if sc is not None:
                cond_rows["SC"] = sc
            ranked = sorted(
                (r.mean_error, c) for c, r in cond_rows.items() if c in CONDITIONS
            )
            cells = []
            for c in conditions:
                r = cond_rows.get(c)
                if r is None:
                    cells.append("-")
                    continue
                text = f"{r.mean_error:.3f}"
                if ranked and (r.mean_error, c) == ranked[0]:
                    text = f"**{text}**"
                elif len(ranked) > 1 and (r.mean_error, c) == ranked[1]:
                    text = f"*{text}*"
                cells.append(text)
            out.append(f"| {dataset} | " + " | ".join(cells) + " |")
        out.append("")
    out.append("whiskers are min/max over trials")
    _atomic_write(path, "\n".join(out) + "\n")
    return path


def emit_plotdata(out_dir, path) -> Path:
    """Long-format per-epoch curves collected from the persisted histories."""
    out_dir = Path(out_dir)
    path = Path(path)
    lines = ["dataset,architecture,condition,k,trial,epoch,train_error,test_error,cumulative_seconds"]
    for history in sorted((out_dir / "trials").glob("*_history.csv")):
        stem = history.name[: -len("_history.csv")]
        cell_part, trial_part = stem.rsplit("__trial", 1)
        dataset, arch, condition, kpart = cell_part.split("__")
        for line in history.read_text().strip().split("\n")[1:]:
            lines.append(
                f"{dataset},{arch},{condition},{kpart[1:]},{int(trial_part)},{line}"
            )
    _atomic_write(path, "\n".join(lines) + "\n")
    return path


def emit_report(rows: list, fmt: str, out_dir) -> Path:
    if not rows and fmt != "plotdata":
        raise DataError("no report rows to emit")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        return emit_csv(rows, out_dir / "report.csv")
    if fmt == "markdown":
        return emit_markdown(rows, out_dir / "report.md")
    if fmt == "plotdata":
        return emit_plotdata(out_dir, out_dir / "plotdata.csv")
    raise ConfigError(f"unknown report format {fmt!r}")
