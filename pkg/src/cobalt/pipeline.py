"""Run orchestration: configuration, stage 1 and 2 training, evaluation, persistence and reporting.

A run directory holds everything one configuration produces::

    data/      dataset.cblt, dataset.json, train.txt, val.txt, test.txt
    stage1/    student.cbsn, teacher.cbsn, codebook.json, metrics.ndjson
    assign/    train.ndjson, val.ndjson, test.ndjson
    balance/   cluster_table.json
    runs/<sampler>_<early_stop>/
               classifier.cbsn, metrics.ndjson, predictions.ndjson, eval.json
    report/    summary.json, summary.md, *.png
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import balancer, conceptvq, objectives, slotnet, synthgen
from .estimators import BalancedClassifier, CollapseError, ConceptDiscovery, EvalSet
from .tensorcore import Tensor

log = logging.getLogger(__name__)

SAMPLERS = ("cobalt", "iid")
EARLY_STOPS = ("hg", "ig", "avg")
GROUPINGS = ("ground_truth", "inferred")

__all__ = [
    "ArtifactError", "CollapseError", "ConfigError", "RunLayout", "Stage1Config", "Stage2Config",
    "TrainConfig", "train_stage1", "load_stage1", "export_assignments", "balance", "train_stage2",
    "evaluate", "evaluate_run", "report", "run_pipeline",
]


class ConfigError(ValueError):
    """The configuration is malformed or out of range."""


class ArtifactError(FileNotFoundError):
    """A required run artifact is missing or unreadable."""


# configuration


@dataclass
class Stage1Config:
    n_slots: int = 4
    n_codes: int = 8
    dim: int = 16
    hidden: int = 32
    proj_hidden: int = 64
    tau_s: float = 0.1
    tau_t: float = 0.07
    tau_c: float = 0.1
    alpha_c: float = 0.9
    alpha_t: float = 0.99
    teacher_period: int | None = None
    center_momentum: float = 0.9
    augment: bool = True
    epochs: int = 20
    batch_size: int = 32
    lr: float = 2e-4
    momentum: float = 0.9  # sgd only
    weight_decay: float = 5e-4
    collapse_patience: int = 3
    normalize_codes: bool = True
    contrast_negatives: str = "batch"
    optimizer: str = "adam"


@dataclass
class Stage2Config:
    hidden: int = 128
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float | None = None  # None selects from the silhouette score
    silhouette_points: int = 2000


@dataclass
class TrainConfig:
    dataset: synthgen.DatasetSpec = field(default_factory=synthgen.DatasetSpec)
    dataset_path: str | None = None
    seed: int = 0
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    early_stop: str = "avg"
    min_group_size: int = 10

    def validate(self) -> "TrainConfig":
        s1, s2 = self.stage1, self.stage2
        problems = []
        for name in ("tau_s", "tau_t", "tau_c"):
            if not _number(getattr(s1, name)) or not getattr(s1, name) > 0:
                problems.append(f"stage1.{name} must be a positive number")
        for name in ("alpha_c", "alpha_t", "center_momentum"):
            if not _number(getattr(s1, name)) or not 0.0 <= getattr(s1, name) <= 1.0:
                problems.append(f"stage1.{name} must lie in [0, 1]")
        for name in ("n_slots", "n_codes", "dim", "hidden", "proj_hidden", "epochs", "batch_size", "collapse_patience"):
            if not _integer(getattr(s1, name)) or getattr(s1, name) < 1:
                problems.append(f"stage1.{name} must be an integer >= 1")
        if s1.teacher_period is not None and (not _integer(s1.teacher_period) or s1.teacher_period < 1):
            problems.append("stage1.teacher_period must be null or an integer >= 1")
        for name in ("lr", "weight_decay"):
            if not _number(getattr(s1, name)) or getattr(s1, name) < 0:
                problems.append(f"stage1.{name} must be >= 0")
        if not _number(s1.momentum) or not 0.0 <= s1.momentum < 1.0:
            problems.append("stage1.momentum must lie in [0, 1)")
        if s1.contrast_negatives not in ("sample", "batch"):
            problems.append("stage1.contrast_negatives must be 'sample' or 'batch'")
        if s1.optimizer not in ("sgd", "adam"):
            problems.append("stage1.optimizer must be 'sgd' or 'adam'")
        for name in ("hidden", "epochs", "batch_size", "silhouette_points"):
            if not _integer(getattr(s2, name)) or getattr(s2, name) < 1:
                problems.append(f"stage2.{name} must be an integer >= 1")
        for name in ("lr", "weight_decay"):
            if not _number(getattr(s2, name)) or getattr(s2, name) < 0:
                problems.append(f"stage2.{name} must be >= 0")
        if not _number(s2.momentum) or not 0.0 <= s2.momentum < 1.0:
            problems.append("stage2.momentum must lie in [0, 1)")
        if s2.lam is not None and (not _number(s2.lam) or s2.lam < 0):
            problems.append("stage2.lam must be null or a number >= 0")
        if self.early_stop not in EARLY_STOPS:
            problems.append(f"early_stop must be one of {EARLY_STOPS}, got {self.early_stop!r}")
        if not _integer(self.min_group_size) or self.min_group_size < 1:
            problems.append("min_group_size must be an integer >= 1")
        if not _integer(self.seed) or not 0 <= self.seed < 2**64:
            problems.append("seed must be an unsigned 64-bit integer")
        try:
            self.dataset.validate()
        except (ValueError, TypeError) as err:
            problems.append(f"dataset: {err}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "dataset_path": self.dataset_path,
            "seed": self.seed,
            "stage1": dataclasses.asdict(self.stage1),
            "stage2": dataclasses.asdict(self.stage2),
            "early_stop": self.early_stop,
            "min_group_size": self.min_group_size,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - top
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kwargs = {k: v for k, v in doc.items() if k not in ("dataset", "stage1", "stage2")}
        try:
            kwargs["dataset"] = synthgen.DatasetSpec.from_dict(doc.get("dataset", {}))
        except (TypeError, ValueError) as err:
            raise ConfigError(f"dataset: {err}") from err
        kwargs["stage1"] = _sub_config(Stage1Config, doc.get("stage1", {}), "stage1")
        kwargs["stage2"] = _sub_config(Stage2Config, doc.get("stage2", {}), "stage2")
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from err
        return cls.from_dict(doc)

    def with_seed(self, seed: int) -> "TrainConfig":
        """Copy with the master seed and the dataset seed both set to ``seed``."""
        return dataclasses.replace(
            self, seed=seed, dataset=dataclasses.replace(self.dataset, seed=seed)
        ).validate()


def _number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _integer(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _sub_config(kind, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return kind(**doc)


def _child_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1, dtype=np.uint64)[0] % (2**63))


# run directory


@dataclass
class RunLayout:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def stage1(self) -> Path:
        return self.root / "stage1"

    @property
    def assign(self) -> Path:
        return self.root / "assign"

    @property
    def balance(self) -> Path:
        return self.root / "balance"

    @property
    def runs(self) -> Path:
        return self.root / "runs"

    @property
    def report(self) -> Path:
        return self.root / "report"

    def run_dir(self, sampler: str, early_stop: str) -> Path:
        return self.runs / f"{sampler}_{early_stop}"


def _require(*paths: Path) -> None:
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ArtifactError(f"missing artifacts: {', '.join(missing)}")


def write_ndjson(path: Path, rows: list[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def read_ndjson(path: Path) -> list[dict]:
    if not path.exists():
        raise ArtifactError(f"missing artifacts: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as err:
            raise ArtifactError(f"{path}:{lineno}: corrupt record ({err.msg})") from err
        if not isinstance(row, dict):
            raise ArtifactError(f"{path}:{lineno}: corrupt record (expected a JSON object)")
        rows.append(row)
    return rows


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    _require(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ArtifactError(f"{path}:{err.lineno}: corrupt JSON ({err.msg})") from err


# dataset


def generate(config: TrainConfig, layout: RunLayout) -> synthgen.Dataset:
    dataset = synthgen.generate_dataset(config.dataset)
    synthgen.save_dataset(dataset, layout.data)
    return dataset


def load_data(config: TrainConfig, layout: RunLayout) -> synthgen.Dataset:
    source = Path(config.dataset_path) if config.dataset_path else layout.data
    target = source / "dataset.cblt" if source.suffix != ".cblt" else source
    _require(target)
    try:
        return synthgen.load_dataset(target)
    except (ValueError, KeyError) as err:
        raise ArtifactError(f"{target}: {err}") from err


# stage 1


def _discovery(config: TrainConfig, patch_size: int) -> ConceptDiscovery:
    s1 = config.stage1
    return ConceptDiscovery(
        random_state=_child_seed(config.seed, 1),
        patch_size=patch_size,
        **{k: getattr(s1, k) for k in ConceptDiscovery().get_params() if hasattr(s1, k)},
    )


def train_stage1(config: TrainConfig, dataset: synthgen.Dataset, layout: RunLayout) -> ConceptDiscovery:
    """Fit the slot model on the training images and persist checkpoints, codebook and metrics.

    Raises :class:`CollapseError` after writing the metrics gathered so far.
    """
    model = _discovery(config, config.dataset.patch_size if config.dataset_path is None else dataset.spec.patch_size)
    layout.stage1.mkdir(parents=True, exist_ok=True)
    try:
        model.fit(dataset.split("train").images)
    finally:
        if hasattr(model, "history_"):
            write_ndjson(layout.stage1 / "metrics.ndjson", [{"stage": 1, **h} for h in model.history_])
    slotnet.save_branch(
        layout.stage1 / "teacher.cbsn", model.teacher_,
        {"center": model.center_, "embedding_center": model.embedding_center_t_},
    )
    extra = {k: t.values for k, t in model.predictor_.tensors.items()}
    extra["embedding_center"] = model.embedding_center_s_
    slotnet.save_branch(layout.stage1 / "student.cbsn", model.student_, extra)
    model.codebook_.save(layout.stage1 / "codebook.json")
    return model


def load_stage1(config: TrainConfig, layout: RunLayout, patch_size: int) -> ConceptDiscovery:
    """Rebuild a fitted :class:`ConceptDiscovery` from the stage-1 artifacts."""
    paths = [layout.stage1 / n for n in ("teacher.cbsn", "student.cbsn", "codebook.json")]
    _require(*paths)
    model = _discovery(config, patch_size)
    try:
        teacher, t_extra = slotnet.load_branch(paths[0])
        student, s_extra = slotnet.load_branch(paths[1])
        codebook = conceptvq.ConceptDictionary.load(paths[2])
    except (ValueError, KeyError, json.JSONDecodeError) as err:
        raise ArtifactError(f"unreadable stage-1 artifact: {err}") from err
    model.teacher_ = teacher
    model.student_ = student
    model.codebook_ = codebook
    model.center_ = t_extra["center"]
    model.embedding_center_t_ = t_extra["embedding_center"]
    model.embedding_center_s_ = s_extra.pop("embedding_center")
    model.predictor_ = objectives.PredictorParams({k: Tensor(v, False, k) for k, v in s_extra.items()})
    model.n_slots, model.n_codes = teacher.n_slots, codebook.K
    return model


def export_assignments(model: ConceptDiscovery, dataset: synthgen.Dataset, layout: RunLayout) -> dict:
    """Teacher-branch assignment records for every split, written as NDJSON."""
    layout.assign.mkdir(parents=True, exist_ok=True)
    out = {}
    for name in ("train", "val", "test"):
        if name not in dataset.splits or len(dataset.splits[name]) == 0:
            continue
        part = dataset.split(name)
        out[name] = model.assign(part.images, part.y, part.sample_id)
        balancer.write_records(layout.assign / f"{name}.ndjson", out[name])
    return out


def read_assignments(layout: RunLayout, split: str) -> list[balancer.AssignmentRecord]:
    path = layout.assign / f"{split}.ndjson"
    _require(path)
    try:
        return balancer.read_records(path)
    except ValueError as err:
        raise ArtifactError(str(err)) from err


# balancing


def balance(config: TrainConfig, model: ConceptDiscovery, dataset: synthgen.Dataset,
            records: list[balancer.AssignmentRecord], layout: RunLayout) -> dict:
    """Cluster table plus the silhouette-selected sampling exponent, written to ``cluster_table.json``.

    The silhouette uses a seeded subsample of the training split. When every
    sample's dominant concept is the same, the score is undefined and the
    weakly-separated exponent 2 is used.
    """
    table = balancer.build_cluster_table(records)
    train = dataset.split("train")
    rng = np.random.default_rng(_child_seed(config.seed, 2))
    pick = np.sort(rng.permutation(len(train))[: config.stage2.silhouette_points])
    enc = model.encode(train.images[pick])
    feats, ids = balancer.concept_features(enc["slots"], enc["concept"], enc["mass"], enc["active"])
    try:
        score = balancer.silhouette(feats, ids)
    except ValueError:
        score = None
    auto = 2 if score is None else balancer.select_lambda(score)
    lam = auto if config.stage2.lam is None else config.stage2.lam
    doc = {"silhouette": score, "lambda_auto": auto, **table.summary(lam)}
    layout.balance.mkdir(parents=True, exist_ok=True)
    _write_json(layout.balance / "cluster_table.json", doc)
    return doc


def load_cluster_table(layout: RunLayout) -> tuple[balancer.ClusterTable, float]:
    """Cluster table rebuilt from the exported training assignments, and the stored exponent."""
    doc = _read_json(layout.balance / "cluster_table.json")
    return balancer.build_cluster_table(read_assignments(layout, "train")), float(doc["lambda"])


# stage 2


def _groupings(dataset: synthgen.Dataset, records: list[balancer.AssignmentRecord] | None) -> dict:
    gt = synthgen.ground_truth_groups(dataset.y, dataset.a, dataset.spec.n_colors)
    out = {"hg": {int(s): {int(g)} for s, g in zip(dataset.sample_id, gt)}}
    if records is not None:
        out["ig"] = balancer.infer_groups(records)
    return out


def train_stage2(config: TrainConfig, dataset: synthgen.Dataset, layout: RunLayout, sampler: str,
                 early_stop: str | None = None) -> BalancedClassifier:
    """Train the classifier under one sampler, keep the best epoch, persist checkpoint and metrics."""
    if sampler not in SAMPLERS:
        raise ConfigError(f"sampler must be one of {SAMPLERS}, got {sampler!r}")
    early_stop = config.early_stop if early_stop is None else early_stop
    if early_stop not in EARLY_STOPS:
        raise ConfigError(f"early stop must be one of {EARLY_STOPS}, got {early_stop!r}")
    table, lam = (None, 0.0)
    if sampler == "cobalt":
        table, lam = load_cluster_table(layout)
    val_records = read_assignments(layout, "val") if (layout.assign / "val.ndjson").exists() else None
    if early_stop == "ig" and val_records is None:
        raise ArtifactError(f"missing artifacts: {layout.assign / 'val.ndjson'}")
    train, val = dataset.split("train"), dataset.split("val")
    s2 = config.stage2
    clf = BalancedClassifier(
        hidden=s2.hidden, epochs=s2.epochs, batch_size=s2.batch_size, lr=s2.lr, momentum=s2.momentum,
        weight_decay=s2.weight_decay, sampler=sampler, lam=lam, early_stop=early_stop,
        min_group_size=config.min_group_size, random_state=_child_seed(config.seed, 3),
    )
    eval_set = EvalSet(val.images, val.y, val.sample_id, _groupings(val, val_records))
    clf.fit(train.images, train.y, train.sample_id, table, eval_set)
    out = layout.run_dir(sampler, early_stop)
    out.mkdir(parents=True, exist_ok=True)
    slotnet.save_tensors(out / "classifier.cbsn", {k: t.values for k, t in clf.params_.items()})
    _write_json(out / "run.json", {"sampler": sampler, "early_stop": early_stop, "lambda": lam,
                                   "best_epoch": clf.best_epoch_, "hidden": s2.hidden})
    write_ndjson(out / "metrics.ndjson", [
        {"stage": 2, "sampler": sampler, "early_stop": early_stop, **h, "selected": h["epoch"] == clf.best_epoch_}
        for h in clf.history_
    ])
    return clf


def load_classifier(run_dir: Path) -> BalancedClassifier:
    _require(run_dir / "classifier.cbsn", run_dir / "run.json")
    meta = _read_json(run_dir / "run.json")
    try:
        tensors = slotnet.load_tensors(run_dir / "classifier.cbsn")
    except (ValueError, OSError) as err:
        raise ArtifactError(f"{run_dir / 'classifier.cbsn'}: {err}") from err
    clf = BalancedClassifier(hidden=meta["hidden"], sampler=meta["sampler"], early_stop=meta["early_stop"])
    clf.params_ = {k: Tensor(v, False, k) for k, v in tensors.items()}
    clf.classes_ = np.arange(tensors["fc2.b"].shape[0])
    clf.best_epoch_ = meta["best_epoch"]
    return clf


# evaluation


def evaluate(clf: BalancedClassifier, split: synthgen.Dataset, grouping: str = "ground_truth",
             records: list[balancer.AssignmentRecord] | None = None, min_group_size: int = 10) -> dict:
    """Average and worst-group accuracy of ``clf`` on ``split``.

    ``grouping="inferred"`` needs the split's assignment records; groups are
    then (class, concept) pairs.
    """
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    if grouping not in GROUPINGS:
        raise ValueError(f"grouping must be one of {GROUPINGS}, got {grouping!r}")
    if grouping == "inferred" and records is None:
        raise ValueError("inferred grouping needs assignment records for the split")
    pred = clf.predict(split.images)
    groups = _groupings(split, records)["hg" if grouping == "ground_truth" else "ig"]
    by_id = dict(zip(split.sample_id.tolist(), pred.tolist()))
    labels = dict(zip(split.sample_id.tolist(), split.y.tolist()))
    worst, table = balancer.worst_group_accuracy(by_id, labels, groups, min_group_size)
    return {
        "average": float(np.mean(pred == split.y)),
        "worst": float(worst),
        "groups": {_group_key(g): v for g, v in sorted(table.items())},
        "predictions": pred,
    }


def _group_key(g) -> str:
    return "-".join(str(x) for x in g) if isinstance(g, tuple) else str(g)


def evaluate_run(config: TrainConfig, dataset: synthgen.Dataset, layout: RunLayout, run_dir: Path,
                 grouping: str = "ground_truth") -> dict:
    """Evaluate a stored classifier on the test split; writes ``eval.json`` and ``predictions.ndjson``."""
    clf = load_classifier(run_dir)
    test = dataset.split("test")
    records = read_assignments(layout, "test") if grouping == "inferred" else None
    result = evaluate(clf, test, grouping, records, config.min_group_size)
    pred = result.pop("predictions")
    gt = synthgen.ground_truth_groups(test.y, test.a, dataset.spec.n_colors)
    write_ndjson(run_dir / "predictions.ndjson", [
        {"sample_id": int(s), "y": int(y), "pred": int(p), "group": int(g)}
        for s, y, p, g in zip(test.sample_id, test.y, pred, gt)
    ])
    doc = {"grouping": grouping, "split": "test", "min_group_size": config.min_group_size, **result}
    _write_json(run_dir / "eval.json", doc)
    return doc


# reporting


def _recompute(pred_rows: list[dict], min_group_size: int) -> tuple[float, float]:
    preds = {r["sample_id"]: r["pred"] for r in pred_rows}
    labels = {r["sample_id"]: r["y"] for r in pred_rows}
    groups = {r["sample_id"]: {r["group"]} for r in pred_rows}
    worst, _ = balancer.worst_group_accuracy(preds, labels, groups, min_group_size)
    return float(np.mean([preds[s] == labels[s] for s in preds])), float(worst)


def report(layout: RunLayout, plots: bool = True) -> dict:
    """Summarize every evaluated run: test numbers recomputed from predictions, and cobalt-vs-ERM deltas."""
    run_dirs = sorted(p for p in layout.runs.glob("*") if (p / "predictions.ndjson").exists()) if layout.runs.exists() else []
    if not run_dirs:
        raise ArtifactError(f"missing artifacts: no evaluated runs under {layout.runs}")
    rows = []
    curves = {}
    for run_dir in run_dirs:
        meta = _read_json(run_dir / "run.json")
        ev = _read_json(run_dir / "eval.json")
        metrics = read_ndjson(run_dir / "metrics.ndjson")
        for lineno, m in enumerate(metrics, 1):
            if "epoch" not in m or "train_loss" not in m:
                raise ArtifactError(f"{run_dir / 'metrics.ndjson'}:{lineno}: corrupt record (missing epoch fields)")
        avg, worst = _recompute(read_ndjson(run_dir / "predictions.ndjson"), ev.get("min_group_size", 10))
        rows.append({
            "run": run_dir.name, "sampler": meta["sampler"], "early_stop": meta["early_stop"],
            "best_epoch": meta["best_epoch"], "lambda": meta["lambda"],
            "test_average": avg, "test_worst": worst,
        })
        curves[run_dir.name] = metrics
    deltas = []
    erm = {r["early_stop"]: r for r in rows if r["sampler"] == "iid"}
    for r in rows:
        base = erm.get(r["early_stop"])
        if r["sampler"] == "cobalt" and base is not None:
            deltas.append({
                "early_stop": r["early_stop"],
                "worst_delta": r["test_worst"] - base["test_worst"],
                "average_delta": r["test_average"] - base["test_average"],
            })
    summary = {"runs": rows, "deltas": deltas}
    stage1_metrics = layout.stage1 / "metrics.ndjson"
    stage1 = read_ndjson(stage1_metrics) if stage1_metrics.exists() else []
    layout.report.mkdir(parents=True, exist_ok=True)
    _write_json(layout.report / "summary.json", summary)
    (layout.report / "summary.md").write_text(_markdown(summary))
    if plots:
        _plots(layout, run_dirs, curves, stage1)
    return summary


def _markdown(summary: dict) -> str:
    lines = ["# Run summary", "", "| run | sampler | early stop | best epoch | test avg | test worst |",
             "|---|---|---|---|---|---|"]
    for r in summary["runs"]:
        lines.append(f"| {r['run']} | {r['sampler']} | {r['early_stop']} | {r['best_epoch']} | "
                     f"{r['test_average']:.4f} | {r['test_worst']:.4f} |")
    if summary["deltas"]:
        lines += ["", "| early stop | worst-group delta | average delta |", "|---|---|---|"]
        for d in summary["deltas"]:
            lines.append(f"| {d['early_stop']} | {d['worst_delta']:+.4f} | {d['average_delta']:+.4f} |")
    return "\n".join(lines) + "\n"


def _plots(layout: RunLayout, run_dirs: list[Path], curves: dict, stage1: list[dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("loss", "L_dis", "L_con", "L_vq"):
        if stage1:
            axes[0].plot([m["epoch"] for m in stage1], [m[key] for m in stage1], label=key)
    axes[0].set(title="stage 1 losses", xlabel="epoch")
    for name, metrics in curves.items():
        axes[1].plot([m["epoch"] for m in metrics], [m["train_loss"] for m in metrics], label=name)
    axes[1].set(title="stage 2 training loss", xlabel="epoch")
    for ax in axes:
        if ax.lines:
            ax.legend()
    fig.tight_layout()
    fig.savefig(layout.report / "losses.png", dpi=80)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(10, 4))
    width = 0.8 / max(len(run_dirs), 1)
    for k, run_dir in enumerate(run_dirs):
        groups = _read_json(run_dir / "eval.json")["groups"]
        keys = sorted(groups, key=lambda g: [int(x) for x in g.split("-")])
        ax.bar(np.arange(len(keys)) + k * width, [groups[g]["acc"] for g in keys], width, label=run_dir.name)
        ax.set_xticks(np.arange(len(keys)) + 0.4, keys, rotation=90, fontsize=6)
    ax.set(title="test accuracy per group", ylim=(0, 1))
    ax.legend()
    fig.tight_layout()
    fig.savefig(layout.report / "group_accuracy.png", dpi=80)
    plt.close(fig)

    codebook = layout.stage1 / "codebook.json"
    if codebook.exists() or stage1:
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        if codebook.exists():
            usage = _read_json(codebook)["usage"]
            axes[0].bar(np.arange(len(usage)), usage)
        axes[0].set(title="cumulative code usage", xlabel="code")
        if stage1:
            axes[1].plot([m["epoch"] for m in stage1], [m["codes_in_use"] for m in stage1], marker="o")
        axes[1].set(title="codes in use", xlabel="epoch")
        fig.tight_layout()
        fig.savefig(layout.report / "codebook_usage.png", dpi=80)
        plt.close(fig)


# end to end


def run_pipeline(config: TrainConfig, out: str | Path, samplers: tuple[str, ...] = SAMPLERS,
                 plots: bool = True) -> dict:
    """Every step in order: generate, discover, assign, balance, train each sampler, evaluate, report."""
    config.validate()
    layout = RunLayout(out)
    dataset = load_data(config, layout) if config.dataset_path else generate(config, layout)
    model = train_stage1(config, dataset, layout)
    records = export_assignments(model, dataset, layout)
    balance(config, model, dataset, records["train"], layout)
    for sampler in samplers:
        train_stage2(config, dataset, layout, sampler)
        evaluate_run(config, dataset, layout, layout.run_dir(sampler, config.early_stop))
    return report(layout, plots)
