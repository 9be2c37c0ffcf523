"""Experiment runner for the single-pass class-incremental protocol.

A run trains one method on a task stream (tasks in order, one pass over the
data unless configured otherwise) and evaluates it on the full test set over
all classes, without task identity.

Seeds: for a run with seed ``s`` the PEC teacher uses ``s``, students and
discriminative networks ``s + 1``, data shuffling, synthetic draws and
imbalance subsampling ``s + 2``, replay and balancing buffers ``s + 3``.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import balancing, baselines, data, nn, pec

METHODS = ("pec", "nearest_mean", "slda", "finetune", "er", "labels_trick", "gp_check")
DISCRIMINATIVE = ("finetune", "er", "labels_trick")
DATASETS = ("mnist", "cifar10", "synthetic")
BUDGETS = ("single_pass", "steps", "equal_budgets")
BALANCING = ("none", "oracle", "buffer")

# (method, dataset, split or None) -> defaults; the split-specific entry wins
DEFAULTS = {
    ("pec", "mnist", None): dict(lr=0.01, batch_size=1, decay=True),
    ("pec", "cifar10", None): dict(lr=0.0003, batch_size=1, decay=True),
    ("pec", "synthetic", None): dict(lr=0.001, batch_size=1, decay=True),
    ("er", "mnist", "10/1"): dict(lr=0.0003, batch_size=1, decay=True),
    ("er", "mnist", "5/2"): dict(lr=0.0001, batch_size=1, decay=True),
    ("labels_trick", "mnist", "10/1"): dict(lr=0.001, batch_size=1, decay=False),
    ("labels_trick", "mnist", "5/2"): dict(lr=0.0001, batch_size=32, decay=False),
    ("finetune", "mnist", None): dict(lr=0.001, batch_size=1, decay=False),
    ("slda", "mnist", None): dict(epsilon=0.1),
    ("slda", "cifar10", None): dict(epsilon=0.3),
}
FALLBACK = dict(lr=0.001, batch_size=1, decay=False, epsilon=0.1)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    method: str = "pec"
    dataset: str = "mnist"
    split: str = "10/1"
    seed: int = 0
    lr: float | None = None
    batch_size: int | None = None
    decay: bool | None = None
    budget: str = "single_pass"
    steps: int | None = None
    balancing: str = "none"
    imbalanced: bool = False
    # PEC architecture overrides
    student_width: int | None = None
    teacher_width: int | None = None
    output_dim: int | None = None
    pool_target: int | None = None
    depth: int | None = None
    init: str | None = None
    init_range: float | None = None
    # baselines
    buffer_capacity: int = 500
    epsilon: float | None = None
    hidden: tuple[int, ...] = (100, 100)
    # balancing
    cma_generations: int = 300
    # synthetic dataset
    num_classes: int = 10
    dim: int = 20
    mean_scale: float = 3.0
    n_per_class: int = 1000
    n_test_per_class: int = 500
    data_dir: str | None = None

    def validate(self) -> ExperimentConfig:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.method == "gp_check":
            raise ConfigError("gp_check is not a training run; use the gp-check command")
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.budget not in BUDGETS:
            raise ConfigError(f"unknown budget mode {self.budget!r}")
        if self.balancing not in BALANCING:
            raise ConfigError(f"unknown balancing {self.balancing!r}")
        if self.method != "pec" and (self.balancing != "none" or self.budget != "single_pass"):
            raise ConfigError("balancing and budget modes apply to pec only")
        if self.budget == "steps" and (self.steps is None or self.steps < 0):
            raise ConfigError("budget=steps needs steps >= 0")
        if self.method in DISCRIMINATIVE and self.dataset == "cifar10":
            raise ConfigError("discriminative baselines are only provided for flat inputs")
        try:
            data.parse_split(self.split)
        except ValueError as e:
            raise ConfigError(f"bad split {self.split!r}") from e
        return self

    def resolved(self) -> ExperimentConfig:
        """Copy with every unset hyperparameter filled from the defaults table."""
        self.validate()
        d = dict(FALLBACK)
        d.update(DEFAULTS.get((self.method, self.dataset, None), {}))
        d.update(DEFAULTS.get((self.method, self.dataset, self.split), {}))
        fill = {k: v for k, v in d.items() if getattr(self, k) is None}
        return dataclasses.replace(self, **fill)

    def arch(self, input_shape) -> pec.PECArch:
        overrides = dict(student_width=self.student_width, teacher_width=self.teacher_width,
                         output_dim=self.output_dim, pool_target=self.pool_target, depth=self.depth,
                         init=self.init, init_range=self.init_range)
        if self.dataset == "synthetic":
            base = pec.PECArch("mlp", tuple(input_shape), student_width=10, teacher_width=500, output_dim=32)
            return dataclasses.replace(base, **{k: v for k, v in overrides.items() if v is not None})
        return pec.preset(self.dataset, **overrides)


@dataclass
class RunReport:
    accuracy: float
    per_class_accuracy: list
    per_task_accuracy: list
    wall_time: float
    param_count: int
    mac_count: int
    seed: int
    config: dict
    mac_count_elementwise: int | None = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        return cls(**d)


def final_average_accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if len(preds) != len(labels):
        raise ValueError("predictions and labels differ in length")
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(preds == labels))


def _dataset_dir(cfg: ExperimentConfig):
    """``data_dir`` may hold the files directly or a per-dataset subdirectory."""
    if cfg.data_dir is None:
        return None
    sub = Path(cfg.data_dir) / cfg.dataset
    return sub if sub.is_dir() else Path(cfg.data_dir)


def load_data(cfg: ExperimentConfig) -> tuple[data.Dataset, data.Dataset]:
    if cfg.dataset == "mnist":
        return data.load_mnist(_dataset_dir(cfg))
    if cfg.dataset == "cifar10":
        return data.load_cifar10(_dataset_dir(cfg))
    return data.synthetic_gaussians(cfg.num_classes, cfg.dim, cfg.mean_scale, cfg.n_per_class,
                                    seed=cfg.seed + 2, n_test_per_class=cfg.n_test_per_class)


def run_experiment(cfg: ExperimentConfig, datasets=None) -> RunReport:
    """Train ``cfg.method`` on the task stream and evaluate on the whole test set.

    ``datasets`` optionally passes a preloaded (train, test) pair.
    """
    cfg = cfg.resolved()
    train, test = datasets if datasets is not None else load_data(cfg)
    T, C = data.parse_split(cfg.split)
    if T * C != train.num_classes:
        raise ConfigError(f"split {cfg.split} does not cover {train.num_classes} classes")
    data_seed = cfg.seed + 2
    if cfg.imbalanced:
        train = data.make_imbalanced(train, doubled=0, halved=1, seed=data_seed)
    if not (cfg.method == "pec" and cfg.dataset == "cifar10"):
        train, test = train.flattened(), test.flattened()
    stream = data.split_tasks(train, T, C, seed=data_seed)

    start = time.perf_counter()
    runner = {"pec": _run_pec, "nearest_mean": _run_closed_form, "slda": _run_closed_form}.get(
        cfg.method, _run_discriminative)
    preds, params, macs, macs_elem, notes = runner(cfg, train, test, stream)
    wall = time.perf_counter() - start

    K = train.num_classes
    per_class = [float(np.mean(preds[test.y == c] == c)) if np.any(test.y == c) else float("nan")
                 for c in range(K)]
    per_task = []
    for task in stream:
        mask = np.isin(test.y, task.classes)
        per_task.append(float(np.mean(preds[mask] == test.y[mask])) if mask.any() else float("nan"))
    return RunReport(final_average_accuracy(preds, test.y), per_class, per_task, wall,
                     int(params), int(macs), cfg.seed, _jsonable(asdict(cfg)), macs_elem, notes)


def _run_pec(cfg, train, test, stream):
    arch = cfg.arch(train.sample_shape)
    K = train.num_classes
    clf = pec.build_pec(arch, K, teacher_seed=cfg.seed, student_seed=cfg.seed + 1)
    data_seed = cfg.seed + 2
    if cfg.budget == "equal_budgets":
        per_class = balancing.equal_budget_schedule(train.class_counts(), single_pass=True)
        per_class = [math.ceil(n / cfg.batch_size) for n in per_class]
    else:
        per_class = [cfg.steps if cfg.budget == "steps" else None] * K
    buf = baselines.ReplayBuffer(cfg.buffer_capacity, seed=cfg.seed + 3) if cfg.balancing == "buffer" else None
    for task in stream:
        for c in task.classes:
            budget = pec.TrainBudget(cfg.lr, cfg.batch_size, cfg.decay, per_class[c])
            clf.train_class(c, task.class_data(c), budget=budget, seed=data_seed)
        if buf is not None:
            buf.insert_batch(task.x, task.y)
    scores = clf.scores(test.x)
    notes = []
    if cfg.balancing != "none":
        cma = balancing.CMAConfig(generations=cfg.cma_generations, seed=cfg.seed)
        if cfg.balancing == "oracle":
            scalars = balancing.fit_scalars(scores, test.y, cma)
        else:
            bx, by = buf.arrays()
            scalars = balancing.fit_scalars(clf.scores(bx), by, cma)
        scores = balancing.apply_scalars(scores, scalars)
        notes.append("scalars=" + ",".join(f"{s:.6g}" for s in scalars.scale))
    preds = np.argmin(scores, axis=1)
    return preds, clf.param_count(), clf.mac_count(), clf.mac_count(elementwise=True), notes


def _run_closed_form(cfg, train, test, stream, chunk: int = 1000):
    K, D = train.num_classes, int(np.prod(train.sample_shape))
    model = baselines.NearestMean(K, D) if cfg.method == "nearest_mean" else baselines.SLDA(K, D, cfg.epsilon)
    for task in stream:
        for i in range(0, len(task), chunk):
            model.update(task.x[i : i + chunk], task.y[i : i + chunk])
    return model.predict(test.x), model.param_count(), K * D, None, []


def _run_discriminative(cfg, train, test, stream):
    K, D = train.num_classes, int(np.prod(train.sample_shape))
    model = baselines.DiscriminativeMLP(D, K, cfg.method, hidden=tuple(cfg.hidden), seed=cfg.seed + 1)
    buf = baselines.ReplayBuffer(cfg.buffer_capacity, seed=cfg.seed + 3) if cfg.method == "er" else None
    bs = cfg.batch_size
    for task in stream:
        n = len(task)
        S = math.ceil(n / bs)
        for k in range(S):
            xb, yb = task.x[k * bs : (k + 1) * bs], task.y[k * bs : (k + 1) * bs]
            model.train_step(xb, yb, nn.lr_at(cfg.lr, k, S, cfg.decay), buffer=buf,
                             current_classes=task.classes)
            if buf is not None:
                buf.insert_batch(xb, yb)
    macs = nn.count_macs(model.net, (D,))
    return model.predict(test.x), model.param_count(), macs, nn.count_macs(model.net, (D,), True), []


# --------------------------------------------------------------------------
# reports

CSV_FIELDS = ("method", "dataset", "split", "seed", "accuracy", "per_class_accuracy",
              "per_task_accuracy", "wall_time", "param_count", "mac_count",
              "mac_count_elementwise", "notes", "config")
SWEEP_CSV_FIELDS = ("method", "dataset", "split", "n_seeds", "seeds", "mean_accuracy",
                    "stderr_accuracy", "single_seed")


def _format(path, fmt):
    fmt = fmt or Path(path).suffix.lstrip(".").lower()
    if fmt not in ("json", "csv"):
        raise ValueError(f"unknown report format {fmt!r}")
    return fmt


def _csv_row(r: RunReport) -> dict:
    c = r.config
    return {
        "method": c["method"], "dataset": c["dataset"], "split": c["split"], "seed": r.seed,
        "accuracy": repr(r.accuracy),
        "per_class_accuracy": json.dumps(r.per_class_accuracy),
        "per_task_accuracy": json.dumps(r.per_task_accuracy),
        "wall_time": repr(r.wall_time), "param_count": r.param_count, "mac_count": r.mac_count,
        "mac_count_elementwise": "" if r.mac_count_elementwise is None else r.mac_count_elementwise,
        "notes": json.dumps(r.notes), "config": json.dumps(c, sort_keys=True),
    }


def _from_csv_row(row: dict) -> RunReport:
    return RunReport(
        accuracy=float(row["accuracy"]),
        per_class_accuracy=json.loads(row["per_class_accuracy"]),
        per_task_accuracy=json.loads(row["per_task_accuracy"]),
        wall_time=float(row["wall_time"]), param_count=int(row["param_count"]),
        mac_count=int(row["mac_count"]), seed=int(row["seed"]), config=json.loads(row["config"]),
        mac_count_elementwise=int(row["mac_count_elementwise"]) if row["mac_count_elementwise"] else None,
        notes=json.loads(row["notes"]),
    )


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d))


def emit_report(reports, path, fmt: str | None = None) -> Path:
    """Write one report (or a list) as JSON or as CSV with one row per run."""
    path = Path(path)
    fmt = _format(path, fmt)
    reports = [reports] if isinstance(reports, RunReport) else list(reports)
    if fmt == "json":
        payload = reports[0].to_dict() if len(reports) == 1 else [r.to_dict() for r in reports]
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    else:
        with path.open("w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
            w.writeheader()
            for r in reports:
                w.writerow(_csv_row(r))
    return path


def read_report(path, fmt: str | None = None) -> list[RunReport]:
    path = Path(path)
    fmt = _format(path, fmt)
    if fmt == "json":
        payload = json.loads(path.read_text())
        payload = payload if isinstance(payload, list) else [payload]
        return [RunReport.from_dict(d) for d in payload]
    with path.open(newline="") as f:
        return [_from_csv_row(row) for row in csv.DictReader(f)]


# --------------------------------------------------------------------------
# seed sweeps


@dataclass
class Aggregate:
    mean: float
    stderr: float
    n: int
    single_seed: bool


def aggregate(values) -> Aggregate:
    """Mean and standard error (sample std / sqrt(n)); a single value gets SE 0."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        raise ValueError("nothing to aggregate")
    if len(v) == 1:
        return Aggregate(float(v[0]), 0.0, 1, True)
    return Aggregate(float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))), len(v), False)


@dataclass
class SweepResult:
    reports: list
    accuracy: Aggregate

    def to_dict(self) -> dict:
        return {"accuracy": asdict(self.accuracy), "reports": [r.to_dict() for r in self.reports]}


def run_seed_sweep(cfg: ExperimentConfig, seeds, datasets=None, progress=None) -> SweepResult:
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    if datasets is None and cfg.dataset != "synthetic":
        datasets = load_data(cfg.resolved())
    reports = []
    for s in seeds:
        r = run_experiment(dataclasses.replace(cfg, seed=s), datasets)
        reports.append(r)
        if progress:
            progress(r)
    return SweepResult(reports, aggregate([r.accuracy for r in reports]))


def emit_sweep(sweep: SweepResult, path, fmt: str | None = None) -> Path:
    path = Path(path)
    fmt = _format(path, fmt)
    if fmt == "json":
        path.write_text(json.dumps(_jsonable(sweep.to_dict()), indent=2, sort_keys=True) + "\n")
        return path
    c = sweep.reports[0].config
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_CSV_FIELDS)
        w.writeheader()
        w.writerow({
            "method": c["method"], "dataset": c["dataset"], "split": c["split"],
            "n_seeds": sweep.accuracy.n, "seeds": " ".join(str(r.seed) for r in sweep.reports),
            "mean_accuracy": repr(sweep.accuracy.mean), "stderr_accuracy": repr(sweep.accuracy.stderr),
            "single_seed": int(sweep.accuracy.single_seed),
        })
    return path


# --------------------------------------------------------------------------
# config files


def _coerce(name: str, raw: str):
    f = {x.name: x for x in dataclasses.fields(ExperimentConfig)}[name]
    t = str(f.type)
    raw = raw.strip()
    if raw.lower() in ("", "none") and "None" in t:
        return None
    if t.startswith("bool"):
        return raw.lower() in ("1", "true", "yes", "on")
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    if t.startswith("tuple"):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw


def load_config(path, section: str = "experiment", **overrides) -> ExperimentConfig:
    """Read an INI file; keys of ``[experiment]`` are ExperimentConfig field names."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    if not parser.has_section(section):
        raise ConfigError(f"{path}: missing [{section}] section")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for key, raw in parser.items(section):
        if key not in names:
            raise ConfigError(f"{path}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values).validate()
