"""Stage functions behind the command line: generate, train, calibrate, infer, eval, ablate, report.

Every artifact carries the resolved config hash and seed. A stage whose
outputs already exist with a matching hash and matching input digests is
skipped, which makes reruns idempotent and interrupted runs resumable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import calibration, storage
from .calibration import Calibrator
from .config import RunConfig
from .domain import AttributeKind, DatasetSplit, LabeledSample, MiniAppCatalog, build_catalog, labels_array
from .encoder import build_encoding, encode_batch
from .evaluation import (
    AblationCell,
    AblationGrid,
    EvaluationReport,
    Scored,
    bins_csv,
    evaluate_attribute,
    plot_description,
    threshold_cells,
)
from .inference import CalibratedClassifier, decision_records
from .model import DivergenceError, TrainedModel, load_checkpoint, read_checkpoint_header, save_checkpoint, train
from .simulator import InsufficientCountError, PersonaSet, PopulationSpec, chi_square_marginals, default_personas, generate_population

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def config(self):
        return self.root / "config.json"

    @property
    def catalog(self):
        return self.root / "data" / "catalog.json"

    @property
    def marginals(self):
        return self.root / "data" / "marginals.json"

    def dataset(self, split: str):
        return self.root / "data" / f"{split}.jsonl"

    def checkpoint(self, kind: AttributeKind):
        return self.root / "models" / f"{kind.value}.ckpt"

    def calibrator(self, kind: AttributeKind):
        return self.root / "calibrators" / f"{kind.value}.json"

    def decisions(self, kind: AttributeKind):
        return self.root / "decisions" / f"{kind.value}.jsonl"

    def report(self, name: str):
        return self.root / "reports" / name


def stamp(cfg: RunConfig, stage: str, **extra) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "stage": stage, **extra}


def population(cfg: RunConfig, num_users: int, length: int | None = None,
               samples_per_user: int | None = None) -> PopulationSpec:
    d = cfg.data
    return PopulationSpec(
        num_users=num_users,
        samples_per_user=samples_per_user or d.samples_per_user,
        signal_strength=d.signal_strength,
        seed=cfg.seed,
        marginals=d.kind_marginals(),
        length=length or d.length,
        independent_mini_h=d.independent_mini_h,
    )


def make_catalog(cfg: RunConfig) -> MiniAppCatalog:
    return build_catalog(cfg.catalog.num_miniapps, cfg.catalog.num_buttons, cfg.seed)


def make_split(cfg: RunConfig, catalog: MiniAppCatalog, personas: PersonaSet | None = None,
               length: int | None = None) -> DatasetSplit:
    """Train, validation and test users are consecutive index ranges of one population."""
    personas = personas or default_personas()
    d = cfg.data
    sizes = (d.train_users, d.validation_users, d.test_users)
    per_user = (d.samples_per_user, d.samples_per_user, d.test_samples_per_user or d.samples_per_user)
    parts, offset = [], 0
    for size, k in zip(sizes, per_user):
        pop = population(cfg, size, length, k)
        parts.append(tuple(generate_population(pop, personas, catalog, user_offset=offset)))
        offset += size
    return DatasetSplit(*parts, seed=cfg.seed)


def fit_attribute(cfg: RunConfig, split: DatasetSplit, kind: AttributeKind, catalog: MiniAppCatalog,
                  input_mode: str | None = None) -> TrainedModel:
    hyper = cfg.training if input_mode is None else replace(cfg.training, input_mode=input_mode)
    return train(cfg.architecture, split, kind, hyper, build_encoding(catalog))


def calibrate(cfg: RunConfig, model: TrainedModel, validation: Sequence[LabeledSample]) -> Calibrator:
    return calibration.fit(cfg.calibrator, model, validation)


def score(clf: CalibratedClassifier, samples: Sequence[LabeledSample]) -> Scored:
    probs = clf.probabilities(encode_batch(samples, clf.model.encoding))
    return Scored.from_probabilities(probs, labels_array(samples, clf.attribute))


def priors(cfg: RunConfig) -> dict[str, np.ndarray]:
    return {k.value: np.asarray(v) for k, v in cfg.data.kind_marginals().items()}


# --------------------------------------------------------------------------- stages


def _fresh(path: Path, expected: dict) -> bool:
    """True when an existing artifact header matches ``expected`` on every key."""
    if not path.exists():
        return False
    try:
        if path.suffix == ".ckpt":
            header = read_checkpoint_header(path)["meta"]
        elif path.suffix == ".jsonl":
            header, _ = storage.read_jsonl(path, "")
        else:
            header = storage.read_json(path, "")
    except (ValueError, KeyError):
        return False
    return all(header.get(k) == v for k, v in expected.items())


def write_config(cfg: RunConfig) -> Path:
    paths = RunPaths(Path(cfg.out_dir))
    storage.write_json(paths.config, {**cfg.to_dict(), "config_hash": cfg.config_hash()})
    return paths.config


def stage_generate(cfg: RunConfig) -> dict:
    paths = RunPaths(Path(cfg.out_dir))
    write_config(cfg)
    head = stamp(cfg, "generate", data_hash=cfg.data_hash())
    key = {"data_hash": cfg.data_hash()}
    if all(_fresh(paths.dataset(s), key) for s in SPLITS) and _fresh(paths.marginals, key):
        log.info("generate: up to date")
        return storage.read_json(paths.marginals, "generate")
    catalog = make_catalog(cfg)
    split = make_split(cfg, catalog)
    storage.write_json(paths.catalog, {**head, "catalog": catalog.to_dict()})
    for name in SPLITS:
        storage.save_dataset(paths.dataset(name), getattr(split, name), {**head, "split": name})
    summary = {**head, "splits": {}}
    pop = population(cfg, 1)
    for name in SPLITS:
        samples = getattr(split, name)
        users = {s.user_id: s for s in samples}
        entry = {"users": len(users), "samples": len(samples), "label_counts": {}}
        for kind in cfg.kinds:
            counts = np.bincount([u.label(kind) for u in users.values()], minlength=kind.num_classes)
            entry["label_counts"][kind.value] = counts.tolist()
        try:
            chi = chi_square_marginals(samples, pop)
            entry["chi_square"] = {k.value: {"statistic": s, "p_value": p} for k, (s, p) in chi.items()}
        except InsufficientCountError as e:
            entry["chi_square"] = {"undefined": str(e)}
        summary["splits"][name] = entry
    storage.write_json(paths.marginals, summary)
    return summary


def load_split(cfg: RunConfig) -> tuple[DatasetSplit, MiniAppCatalog]:
    paths = RunPaths(Path(cfg.out_dir))
    parts = []
    for name in SPLITS:
        header, samples = storage.load_dataset(paths.dataset(name))
        if header.get("data_hash") != cfg.data_hash():
            raise storage.FormatError(f"{paths.dataset(name)} was generated with a different config; rerun 'generate'")
        parts.append(tuple(samples))
    catalog = MiniAppCatalog.from_dict(storage.read_json(paths.catalog, "generate")["catalog"])
    return DatasetSplit(*parts, seed=cfg.seed), catalog


def _data_digest(cfg: RunConfig) -> str:
    paths = RunPaths(Path(cfg.out_dir))
    for name in SPLITS:
        if not paths.dataset(name).exists():
            raise storage.MissingArtifactError(paths.dataset(name), "generate")
    return storage.digest(paths.dataset("train")) + storage.digest(paths.dataset("validation"))


def stage_train(cfg: RunConfig) -> list[Path]:
    paths = RunPaths(Path(cfg.out_dir))
    key = {"model_hash": cfg.model_hash(), "data": _data_digest(cfg)}
    head = stamp(cfg, "train", **key)
    todo = [k for k in cfg.kinds if not _fresh(paths.checkpoint(k), key)]
    if todo:
        split, catalog = load_split(cfg)
        for kind in todo:
            log.info("train: %s", kind.value)
            model = fit_attribute(cfg, split, kind, catalog)
            paths.checkpoint(kind).parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, paths.checkpoint(kind), meta={**head, "attribute": kind.value})
    return [paths.checkpoint(k) for k in cfg.kinds]


def _load_model(cfg: RunConfig, kind: AttributeKind) -> TrainedModel:
    path = RunPaths(Path(cfg.out_dir)).checkpoint(kind)
    if not path.exists():
        raise storage.MissingArtifactError(path, "train")
    return load_checkpoint(path)


def stage_calibrate(cfg: RunConfig) -> list[Path]:
    paths = RunPaths(Path(cfg.out_dir))
    split = None
    for kind in cfg.kinds:
        model_digest = storage.digest(paths.checkpoint(kind)) if paths.checkpoint(kind).exists() else None
        if model_digest is None:
            raise storage.MissingArtifactError(paths.checkpoint(kind), "train")
        key = {"model": model_digest, "variant": cfg.calibrator, "threshold": cfg.threshold}
        head = stamp(cfg, "calibrate", **key)
        if _fresh(paths.calibrator(kind), key):
            continue
        if split is None:
            split, _ = load_split(cfg)
        model = _load_model(cfg, kind)
        cal = calibrate(cfg, model, split.validation)
        storage.write_json(paths.calibrator(kind), {
            **head,
            "attribute": kind.value,
            "checkpoint": paths.checkpoint(kind).name,
            "threshold": cfg.threshold,
            "calibrator": cal.to_dict(),
        })
    return [paths.calibrator(k) for k in cfg.kinds]


def load_classifier(cfg: RunConfig, kind: AttributeKind, threshold: float | None = None) -> CalibratedClassifier:
    paths = RunPaths(Path(cfg.out_dir))
    bundle = storage.read_json(paths.calibrator(kind), "calibrate")
    model = _load_model(cfg, kind)
    if bundle["attribute"] != model.attribute.value:
        raise storage.FormatError(f"{paths.calibrator(kind)} targets {bundle['attribute']}, model targets {model.attribute.value}")
    return CalibratedClassifier(model, Calibrator.from_dict(bundle["calibrator"]), threshold or cfg.threshold)


def stage_infer(cfg: RunConfig, threshold: float | None = None) -> list[Path]:
    paths = RunPaths(Path(cfg.out_dir))
    t = threshold or cfg.threshold
    test = None
    for kind in cfg.kinds:
        if not paths.calibrator(kind).exists():
            raise storage.MissingArtifactError(paths.calibrator(kind), "calibrate")
        key = {"threshold": t, "calibrator": storage.digest(paths.calibrator(kind)),
               "test": storage.digest(paths.dataset("test")) if paths.dataset("test").exists() else None}
        head = stamp(cfg, "infer", attribute=kind.value, **key)
        if _fresh(paths.decisions(kind), key):
            continue
        if test is None:
            _, test = storage.load_dataset(paths.dataset("test"))
        clf = load_classifier(cfg, kind, t)
        records = decision_records(clf, test)
        storage.write_jsonl(paths.decisions(kind), head, records)
    return [paths.decisions(k) for k in cfg.kinds]


def read_decisions(path: Path) -> tuple[dict, Scored]:
    header, rows = storage.read_jsonl(path, "infer")
    conf, pred, true = [], [], []
    for lineno, r in rows:
        if r.get("true") is None:
            raise storage.FormatError(f"{path}:{lineno}: decision has no ground truth; cannot evaluate")
        conf.append(float(r["confidence"]))
        pred.append(int(r["predicted"]))
        true.append(int(r["true"]))
    if not conf:
        raise storage.FormatError(f"{path}: no decisions")
    return header, Scored(np.array(conf), np.array(pred), np.array(true))


def stage_eval(cfg: RunConfig, threshold: float | None = None) -> EvaluationReport:
    paths = RunPaths(Path(cfg.out_dir))
    t = threshold or cfg.threshold
    pri = priors(cfg)
    reports = {}
    for kind in cfg.kinds:
        _, scored = read_decisions(paths.decisions(kind))
        reports[kind.value] = evaluate_attribute(kind.value, scored, pri[kind.value], t)
    report = EvaluationReport(cfg.config_hash(), cfg.seed, reports)
    out = paths.report("report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    paths.report("bins.csv").write_text(bins_csv(report))
    storage.write_json(paths.report("plot.json"), plot_description(report))
    return report


def run_ablation_grid(cfg: RunConfig, axes: Sequence[str] = ("threshold", "input", "length"),
                      attributes: Sequence[AttributeKind] | None = None) -> AblationGrid:
    """One-factor-at-a-time grid around the base config; cells whose training
    fails are recorded as failed rather than aborting the grid."""
    kinds = tuple(attributes) if attributes else cfg.kinds
    catalog = make_catalog(cfg)
    personas = default_personas()
    pri = priors(cfg)
    splits: dict[int, DatasetSplit] = {}
    cache: dict[tuple[str, int], dict[str, Scored]] = {}

    def scored_for(mode: str, length: int) -> dict[str, Scored]:
        key = (mode, length)
        if key not in cache:
            if length not in splits:
                splits[length] = make_split(cfg, catalog, personas, length)
            split = splits[length]
            out = {}
            for kind in kinds:
                model = fit_attribute(cfg, split, kind, catalog, input_mode=mode)
                clf = CalibratedClassifier(model, calibrate(cfg, model, split.validation), cfg.threshold)
                out[kind.value] = score(clf, split.test)
            cache[key] = out
        return cache[key]

    def cell(axis, value, mode, length):
        try:
            scored = scored_for(mode, length)
        except (DivergenceError, ValueError) as e:
            return AblationCell(axis, value, None, f"{type(e).__name__}: {e}")
        return AblationCell(axis, value, {a: evaluate_attribute(a, s, pri[a], cfg.threshold) for a, s in scored.items()})

    base_mode, base_len = cfg.training.input_mode, cfg.data.length
    cells: list[AblationCell] = []
    for axis in axes:
        if axis == "threshold":
            try:
                scored = scored_for(base_mode, base_len)
                cells += threshold_cells(scored, pri, cfg.ablation.thresholds)
            except (DivergenceError, ValueError) as e:
                cells += [AblationCell("threshold", t, None, f"{type(e).__name__}: {e}") for t in cfg.ablation.thresholds]
        elif axis == "input":
            cells += [cell("input", m, m, base_len) for m in cfg.ablation.inputs]
        elif axis == "length":
            cells += [cell("length", n, base_mode, n) for n in cfg.ablation.lengths]
        else:
            raise ValueError(f"unknown ablation axis {axis!r}")
    return AblationGrid(cfg.config_hash(), cfg.seed, cells)


def stage_ablate(cfg: RunConfig) -> AblationGrid:
    paths = RunPaths(Path(cfg.out_dir))
    write_config(cfg)
    grid = run_ablation_grid(cfg)
    out = paths.report("ablation.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(grid.to_json())
    paths.report("ablation.csv").write_text(grid.table_csv())
    return grid


def stage_report(cfg: RunConfig) -> str:
    """Markdown summary of the evaluation report (and the ablation grid when present)."""
    paths = RunPaths(Path(cfg.out_dir))
    rep = storage.read_json(paths.report("report.json"), "eval")
    lines = [
        f"# Run {rep['config_hash']} (seed {rep['seed']})",
        "",
        "| attribute | accuracy | baseline | t_d | coverage | subset accuracy | macro F1 | pearson r |",
        "|---|---|---|---|---|---|---|---|",
    ]

    def fmt(v):
        return v if isinstance(v, str) else f"{v:.3f}"

    for name, a in sorted(rep["attributes"].items()):
        s = a["subset"]
        lines.append(
            f"| {name} | {fmt(a['overall_accuracy'])} | {fmt(a['baseline_accuracy'])} | {a['threshold']} | "
            f"{fmt(s['phc'])} | {fmt(s['accuracy'])} | {fmt(s['f1'])} | {fmt(a['pearson_r'])} |"
        )
    abl = paths.report("ablation.json")
    if abl.exists():
        grid = storage.read_json(abl, "ablate")
        lines += ["", "| axis | value | headline | coverage |", "|---|---|---|---|"]
        for c in grid["cells"]:
            lines.append(f"| {c['axis']} | {c['value']} | {fmt(c['headline'])} | {fmt(c.get('coverage', 'undefined'))} |")
    text = "\n".join(lines) + "\n"
    paths.report("summary.md").write_text(text)
    return text
