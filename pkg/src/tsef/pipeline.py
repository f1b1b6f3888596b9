"""Experiment orchestration: config, eligible-sample selection, attack runs, evaluation files."""
from __future__ import annotations

import json
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import attacks as A
from . import classifier as clf
from . import datagen, metrics, tsr
from .explainers import EXPLAINER_NAMES, get_explainer

SCHEMA_VERSION = 1
ATTACKS = ("tsef", "tsef-no-mt", "pgd", "adv2", "random", "gauss-local", "gauss-global")
REFERENCES = ("ground_truth", "topk")
EVAL_CLASSES = ("original", "predicted")
# TSEF loss weights picked on the validation split of each synthetic set (scripts/tune_tsef.py);
# sets missing here use the TSEFConfig defaults. Explicit attack_params override them.
TSEF_PRESETS = {
    "lowvar": {"lambda_cls": 2.0, "lambda_fpf": 2.0},
}


class ConfigError(ValueError):
    pass


def stream_seed(master: int, name: str) -> int:
    """Independent 32-bit seed for a named stream derived from the master seed."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


@dataclass
class ExperimentConfig:
    dataset: str
    model: str
    out_dir: str
    attack: str = "tsef"
    explainer: str = "ig"
    ig_steps: int = 20
    epsilon: float = 0.1
    reference: str = "ground_truth"
    k_percent: float = 10.0
    n_samples: int | None = None
    seed: int = 0
    split: str = "test"
    eval_class: str = "original"
    positive_class: int | None = None
    chunk_size: int = 20
    attack_params: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def validate(self, check_paths: bool = True) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}; expected {SCHEMA_VERSION}")
        choices = {"attack": ATTACKS, "explainer": EXPLAINER_NAMES, "reference": REFERENCES,
                   "eval_class": EVAL_CLASSES, "split": datagen.SPLITS}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if self.chunk_size < 1 or self.ig_steps < 1:
            raise ConfigError("chunk_size and ig_steps must be >= 1")
        if self.n_samples is not None and self.n_samples < 1:
            raise ConfigError("n_samples must be positive when given")
        if self.attack in ("tsef", "tsef-no-mt", "adv2") and self.explainer == "occlusion":
            raise ConfigError("occlusion is not differentiable; attacks need ig, grad or gxi")
        allowed_params = {"iters", "step", "lambda_cls", "lambda_exp"} | {f.name for f in fields(A.TSEFConfig)}
        unknown = set(self.attack_params) - allowed_params
        if unknown:
            raise ConfigError(f"unknown attack_params {sorted(unknown)}")
        if check_paths:
            if not (Path(self.dataset) / "manifest.json").exists():
                raise ConfigError(f"dataset directory {self.dataset!r} has no manifest.json")
            if not (Path(self.model) / "model.json").exists():
                raise ConfigError(f"model directory {self.model!r} has no model.json")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from None


def eligible_indices(split: datagen.Split, model: clf.Classifier, reference: str,
                     positive_class: int | None = None) -> np.ndarray:
    """Correctly classified samples; ground-truth references also need a nonempty mask."""
    keep = model.predict_labels(split.X) == split.y
    if positive_class is not None:
        keep &= split.y == positive_class
    if reference == "ground_truth":
        if split.masks is None:
            raise ConfigError("ground_truth reference needs a dataset with masks")
        keep &= split.masks.reshape(len(split), -1).sum(axis=1) > 0
    return np.nonzero(keep)[0]


def sample_targets(y: np.ndarray, n_classes: int, seed: int) -> np.ndarray:
    """y' uniform over the C - 1 classes other than y."""
    rng = np.random.default_rng(seed)
    shift = rng.integers(1, n_classes, size=len(y))
    return (np.asarray(y) + shift) % n_classes


def tsef_config(params: dict, seed: int, no_mt: bool) -> A.TSEFConfig:
    kw = {k: v for k, v in params.items() if k in {f.name for f in fields(A.TSEFConfig)}}
    kw["seed"] = seed
    if no_mt:
        kw["use_temporal_mask"] = False
    return A.TSEFConfig(**kw)


def effective_params(cfg: ExperimentConfig, dataset: str) -> dict:
    """attack_params with the dataset's TSEF preset filled in beneath them."""
    if cfg.attack.startswith("tsef"):
        return {**TSEF_PRESETS.get(dataset, {}), **cfg.attack_params}
    return dict(cfg.attack_params)


def _run_chunk(cfg: ExperimentConfig, p: dict, model, explainer, X, y_orig, target, ref, ids, stats) -> A.AttackResult:
    budget = A.AttackBudget.for_input(X, cfg.epsilon)
    seed = stream_seed(cfg.seed, "attack")
    if cfg.attack == "pgd":
        return A.pgd_targeted(model, X, target, budget, p.get("iters", 100), p.get("step"))
    if cfg.attack == "adv2":
        return A.adv2_attack(model, explainer, X, target, ref, budget, p.get("iters", 100), p.get("step"),
                             p.get("lambda_cls", 1.0), p.get("lambda_exp", 1.0), p.get("metric", "mse"), y_orig)
    if cfg.attack == "random":
        r = A.random_sign(X, budget, seed, ids)
    elif cfg.attack.startswith("gauss"):
        sal = explainer(model, X, y_orig).normalized.data
        r = A.gaussian_baseline(X, sal, cfg.attack.split("-")[1], cfg.k_percent, stats, budget, seed, ids)
    else:
        tc = tsef_config(p, seed, cfg.attack == "tsef-no-mt")
        return A.tsef_attack(model, explainer, X, target, ref, budget, tc, y_orig, ids)
    r.target = target.copy()
    r.reference = ref
    r.predicted = model.predict_labels(r.x_adv)
    return r


def _threads() -> int:
    raw = os.environ.get("TSEF_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"TSEF_THREADS must be an integer, got {raw!r}") from None


def run_attack(cfg: ExperimentConfig) -> dict:
    """Run the configured attack; returns arrays and per-sample records (nothing written)."""
    cfg.validate()
    ds = datagen.load_dataset(cfg.dataset)
    ck = clf.load_checkpoint(cfg.model)
    model = ck.model()
    if (ck.config.T, ck.config.D) != (ds.T, ds.D):
        raise ConfigError(f"model expects (T, D)=({ck.config.T}, {ck.config.D}), dataset has ({ds.T}, {ds.D})")
    split = ds.split(cfg.split)
    idx = eligible_indices(split, model, cfg.reference, cfg.positive_class)
    if cfg.n_samples is not None:
        idx = idx[: cfg.n_samples]
    if len(idx) == 0:
        raise ConfigError("no eligible samples: none are correctly classified with a usable reference")
    X = split.X[idx]
    y = split.y[idx]
    target = sample_targets(y, ds.C, stream_seed(cfg.seed, "target-sampling"))
    explainer = get_explainer(cfg.explainer, cfg.ig_steps)
    y_orig = y.copy()  # eligible samples are correctly classified
    if cfg.reference == "ground_truth":
        ref = A.make_reference(X, "ground_truth", gt_mask=split.masks[idx])
    else:
        ref = A.make_reference(X, "topk", model=model, explainer=explainer, k_percent=cfg.k_percent,
                               class_index=y_orig)
    stats = A.DatasetStats.from_split(ds.train.X)
    chunks = [np.arange(i, min(i + cfg.chunk_size, len(idx))) for i in range(0, len(idx), cfg.chunk_size)]

    params = effective_params(cfg, ds.name)

    def work(c):
        return _run_chunk(cfg, params, model, explainer, X[c], y_orig[c], target[c], ref[c], idx[c], stats)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        parts = list(pool.map(work, chunks))
    x_adv = np.concatenate([r.x_adv for r in parts])
    predicted = np.concatenate([r.predicted for r in parts])
    violations = A.AttackBudget.for_input(X, cfg.epsilon).violations(x_adv, X)
    eval_cls = y_orig if cfg.eval_class == "original" else predicted
    sal = explainer(model, x_adv, eval_cls).normalized.data
    metric = params.get("metric", "mse")
    dist = np.atleast_1d(A.explanation_distance(sal, ref, metric).data)
    records = [
        {"row": i, "index": int(idx[i]), "y": int(y[i]), "original_prediction": int(y_orig[i]),
         "target": int(target[i]), "predicted": int(predicted[i]), "explanation_distance": float(dist[i]),
         "budget_violation": bool(violations[i])}
        for i in range(len(idx))
    ]
    return {"x_adv": x_adv, "saliency": sal, "reference": ref, "records": records, "dataset": ds.name,
            "attack_params": params}


def write_results(cfg: ExperimentConfig, run: dict, results_path) -> Path:
    results_path = Path(results_path)
    out = results_path.parent
    out.mkdir(parents=True, exist_ok=True)
    stem = results_path.stem
    blobs = {k: f"{stem}_{k}.tsr" for k in ("x_adv", "saliency", "reference")}
    for k, name in blobs.items():
        tsr.save(out / name, run[k])
    doc = {"schema_version": SCHEMA_VERSION, "dataset": run["dataset"], "attack": cfg.attack,
           "explainer": cfg.explainer, "config": cfg.to_dict(),
           "attack_params": run.get("attack_params", cfg.attack_params), "blobs": blobs, "samples": run["records"]}
    results_path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return results_path


def load_results(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"results file {path} not found")
    doc = json.loads(path.read_text())
    arrays = {k: tsr.load(path.parent / name) for k, name in doc.get("blobs", {}).items()}
    return doc, arrays


def evaluate_results(doc: dict, arrays: dict | None = None, label: str | None = None) -> metrics.MetricsReport:
    s = doc.get("samples", [])
    arrays = arrays or {}
    pred = [r["predicted"] for r in s]
    tgt = [r["target"] for r in s]
    orig = [r["original_prediction"] for r in s]
    label = label if label is not None else f"{doc.get('attack', '')}"
    rep = metrics.evaluate(pred, tgt, orig, arrays.get("saliency"), arrays.get("reference"), label)
    rep.extra = {"dataset": doc.get("dataset"), "budget_violations": int(sum(r.get("budget_violation", 0) for r in s))}
    return rep


def render_report(results, fmt: str = "markdown") -> str:
    """Render reports (or results documents) as json, csv or markdown."""
    reports = []
    for r in results:
        if isinstance(r, metrics.MetricsReport):
            reports.append(r)
        elif isinstance(r, tuple):
            reports.append(evaluate_results(*r))
        else:
            reports.append(evaluate_results(r))
    return metrics.render(reports, fmt)


def write_report(rep: metrics.MetricsReport, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    out_path.with_suffix(".csv").write_text(metrics.render([rep], "csv"))
    return out_path


def run_pipeline(cfg: ExperimentConfig) -> dict[str, Path]:
    """Attack, evaluate and write results.json, report.json, report.csv and manifest.json."""
    cfg.validate()
    out = Path(cfg.out_dir)
    run = run_attack(cfg)
    res = write_results(cfg, run, out / "results.json")
    doc, arrays = load_results(res)
    rep = write_report(evaluate_results(doc, arrays), out / "report.json")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "attack_params": doc.get("attack_params", cfg.attack_params),
        "seeds": {name: stream_seed(cfg.seed, name) for name in ("attack", "target-sampling")},
        "model": clf.load_checkpoint(cfg.model).metadata,
        "dataset": json.loads((Path(cfg.dataset) / "manifest.json").read_text()),
        "files": ["results.json", "report.json", "report.csv"] + sorted(doc["blobs"].values()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return {"results": res, "report": rep, "csv": rep.with_suffix(".csv"), "manifest": out / "manifest.json"}
