"""Experiment orchestration: trains every configured regime, evaluates the
attack suite on the on-manifold and natural test sets, verifies budget
compliance independently of the attack code, and emits deterministic report
files (JSON, CSV tables, curve tables, figures).
"""

from __future__ import annotations

import json
import os
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import (
    AttackSpec,
    apply_corruption,
    craft,
    default_suite,
    get_basis,
    load_suite,
    save_suite,
)
from .manifold import (
    DatasetConfig,
    SampleSet,
    build_dataset,
    load_dataset,
    save_dataset,
)
from .models import (
    DEFAULT_GENERATOR_SEED as GENERATOR_SEED,
    DEFAULT_TEACHER_SEED as TEACHER_SEED,
    FileFormatError,
    ModelParams,
    load_checkpoint,
    make_generator,
    make_teacher,
    predict,
    save_checkpoint,
)
from .training import TrainConfig, TrainRun, train, velocity_to_flat, write_metrics_csv

__all__ = [
    "EXP_MAGIC",
    "REPORT_MAGIC",
    "ExperimentConfig",
    "RobustnessReport",
    "EvalFragment",
    "evaluate",
    "snapshot_curves",
    "emit_report",
    "load_report",
    "run_experiment",
    "load_experiment_config",
    "save_experiment_config",
    "default_experiment_config",
    "smoke_experiment_config",
]

EXP_MAGIC = "DMATLAB-EXP-v1"
REPORT_MAGIC = "DMATLAB-REPORT-v1"
MANIFEST_MAGIC = "DMATLAB-MANIFEST-v1"

OUT_ROOT_ENV = "DMATLAB_OUT_ROOT"

BUDGET_TOL = 1e-12
# How many per-sample difference tensors each attack contributes to the
# emitted differences/ tables.
N_DIFF_SAMPLES = 8

EVAL_SETS = ("on_manifold", "natural")

DEFAULT_CURVE_REGIMES = ("normal", "at", "om_at_fgsm", "om_at_pgd", "dmat")

_KNOWN_COLUMNS = ("standard", "fgsm", "pgd50", "mia", "worst_case", "om_pgd50")
_UNSEEN_COLUMNS = ("fog", "snow", "elastic", "gabor", "jpeg", "l2", "l1")
_TRADES_ROWS = ("normal", "trades", "dmat_trades")
_TRADES_COLUMNS = ("standard", "pgd50", "om_pgd50", "fog", "snow", "elastic", "gabor", "jpeg", "l2")
_NATURAL_COLUMNS = ("standard", "pgd50", "fog", "snow", "elastic", "gabor", "jpeg", "l2", "l1")


@dataclass
class ExperimentConfig:
    """Everything one full run needs: data, regimes, threat suite, outputs."""

    seed: int = 0
    dataset: DatasetConfig | str = field(default_factory=DatasetConfig)
    train_configs: list = field(default_factory=list)
    suite: str | list | None = None  # None -> default suite
    worst_case_over: list = field(default_factory=lambda: ["fgsm", "pgd50", "mia"])
    eval_sets: tuple = EVAL_SETS
    curve_regimes: tuple = DEFAULT_CURVE_REGIMES
    curve_samples: int = 250
    emit_figures: bool = True
    out_dir: str = "runs/default"

    def resolve_suite(self) -> tuple[list[AttackSpec], list[str]]:
        if self.suite is None:
            return default_suite(seed=self.seed)
        if isinstance(self.suite, str):
            return load_suite(self.suite)
        return list(self.suite), list(self.worst_case_over)


def default_experiment_config(out_dir: str = "runs/default", seed: int = 0) -> ExperimentConfig:
    from .training import REGIMES

    return ExperimentConfig(
        seed=seed,
        dataset=DatasetConfig(seed=seed),
        train_configs=[TrainConfig(regime=r, seed=seed) for r in REGIMES],
        out_dir=out_dir,
    )


def smoke_experiment_config(out_dir: str = "runs/smoke", seed: int = 0) -> ExperimentConfig:
    """Reduced end-to-end configuration: 200/100 samples, 2 epochs."""
    from .training import REGIMES

    return ExperimentConfig(
        seed=seed,
        dataset=DatasetConfig(n_train=200, n_test=100, seed=seed),
        train_configs=[TrainConfig(regime=r, epochs=2, seed=seed) for r in REGIMES],
        curve_regimes=("at",),
        curve_samples=50,
        out_dir=out_dir,
    )


@dataclass
class EvalFragment:
    """Accuracies of one model on one eval set, plus verification tallies."""

    regime: str
    eval_set: str
    standard: float
    per_attack: dict  # name -> accuracy
    worst_case: float | None
    n_samples: int
    budget_violations: int
    pixel_violations: int
    correct: dict = field(default_factory=dict)  # name -> per-sample bool array
    differences: dict = field(default_factory=dict)  # name -> (k, D) array


@dataclass
class RobustnessReport:
    cells: dict = field(default_factory=dict)  # (regime, eval_set, attack) -> acc
    worst: dict = field(default_factory=dict)  # (regime, eval_set) -> acc
    curves: dict = field(default_factory=dict)  # regime -> list of row dicts
    n_samples: dict = field(default_factory=dict)  # eval_set -> count
    budget_violations: int = 0
    pixel_violations: int = 0
    worst_case_over: list = field(default_factory=list)

    def add_fragment(self, frag: EvalFragment) -> None:
        self.cells[(frag.regime, frag.eval_set, "standard")] = frag.standard
        for name, acc in frag.per_attack.items():
            self.cells[(frag.regime, frag.eval_set, name)] = acc
        if frag.worst_case is not None:
            self.worst[(frag.regime, frag.eval_set)] = frag.worst_case
        self.n_samples[frag.eval_set] = frag.n_samples
        self.budget_violations += frag.budget_violations
        self.pixel_violations += frag.pixel_violations

    def accuracy(self, regime: str, eval_set: str, attack: str) -> float:
        return self.cells[(regime, eval_set, attack)]

    def regimes(self) -> list:
        return sorted({r for (r, _, _) in self.cells})

    def attacks(self, eval_set: str) -> list:
        names = {a for (_, s, a) in self.cells if s == eval_set and a != "standard"}
        return sorted(names)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_MAGIC,
            "cells": [
                {"regime": r, "eval_set": s, "attack": a, "accuracy": acc}
                for (r, s, a), acc in sorted(self.cells.items())
            ],
            "worst_case": [
                {"regime": r, "eval_set": s, "accuracy": acc}
                for (r, s), acc in sorted(self.worst.items())
            ],
            "curves": {
                regime: rows for regime, rows in sorted(self.curves.items())
            },
            "n_samples": dict(sorted(self.n_samples.items())),
            "budget_violations": self.budget_violations,
            "pixel_violations": self.pixel_violations,
            "worst_case_over": list(self.worst_case_over),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RobustnessReport":
        if doc.get("format") != REPORT_MAGIC:
            raise FileFormatError(
                f"bad report format {doc.get('format')!r}, expected {REPORT_MAGIC!r}"
            )
        rep = cls()
        for cell in doc["cells"]:
            rep.cells[(cell["regime"], cell["eval_set"], cell["attack"])] = cell["accuracy"]
        for w in doc["worst_case"]:
            rep.worst[(w["regime"], w["eval_set"])] = w["accuracy"]
        rep.curves = {k: list(v) for k, v in doc.get("curves", {}).items()}
        rep.n_samples = dict(doc.get("n_samples", {}))
        rep.budget_violations = int(doc.get("budget_violations", 0))
        rep.pixel_violations = int(doc.get("pixel_violations", 0))
        rep.worst_case_over = list(doc.get("worst_case_over", []))
        return rep

    def __eq__(self, other) -> bool:
        if not isinstance(other, RobustnessReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()


# -- verification -------------------------------------------------------------------


def _norm_rows(d: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.abs(d).max(axis=1)
    if norm == "l2":
        return np.sqrt((d * d).sum(axis=1))
    if norm == "l1":
        return np.abs(d).sum(axis=1)
    raise ValueError(f"unknown norm {norm!r}")


def _verify(spec: AttackSpec, x_adv: np.ndarray, aux: dict, gen) -> tuple[int, int]:
    """Independent budget and pixel-range check; returns violation counts."""
    budget_bad = 0
    if spec.space == "image":
        norms = _norm_rows(x_adv - aux["x_base"], spec.norm)
        budget_bad = int((norms > spec.budget + BUDGET_TOL).sum())
    elif spec.space == "latent":
        norms = _norm_rows(aux["w_adv"] - aux["w_base"], "linf")
        budget_bad = int((norms > spec.budget + BUDGET_TOL).sum())
        from .models import generator_forward

        if not np.array_equal(x_adv, generator_forward(gen, aux["w_adv"])):
            budget_bad += x_adv.shape[0]  # off-manifold output: count whole batch
    elif spec.space == "corruption":
        norms = np.abs(aux["theta"]).max(axis=1)
        budget_bad = int((norms > spec.budget + BUDGET_TOL).sum())
        basis = get_basis(spec.corruption_kind, spec.seed)
        ref = apply_corruption(basis, aux["x_base"], aux["theta"])
        if not np.allclose(x_adv, ref, atol=1e-9):
            budget_bad += x_adv.shape[0]
    pixel_bad = int(((x_adv < 0.0) | (x_adv > 1.0)).any(axis=1).sum())
    return budget_bad, pixel_bad


# -- evaluation ---------------------------------------------------------------------


def evaluate(
    model: ModelParams,
    records: SampleSet,
    suite: list,
    eval_set: str,
    *,
    gen: ModelParams | None = None,
    worst_case_over: list | None = None,
    regime: str = "",
    capture_differences: bool = True,
) -> EvalFragment:
    """Accuracy of one model against each attack in the suite on one eval set.

    Latent attacks use the records' latent coordinates; requesting one on a
    record set without them is an error.  Budget compliance of every attack
    output is re-checked here, independent of the attack implementation.
    """
    if eval_set not in EVAL_SETS:
        raise ValueError(f"unknown eval set {eval_set!r}")
    x = records.images(eval_set)
    y = records.y
    frag = EvalFragment(
        regime=regime,
        eval_set=eval_set,
        standard=float((predict(model, x) == y).mean()),
        per_attack={},
        worst_case=None,
        n_samples=len(records),
        budget_violations=0,
        pixel_violations=0,
    )
    for spec in suite:
        x_adv, aux = craft(model, spec, x=x, y=y, w=records.w, gen=gen)
        bad_budget, bad_pixel = _verify(spec, x_adv, aux, gen)
        frag.budget_violations += bad_budget
        frag.pixel_violations += bad_pixel
        correct = predict(model, x_adv) == y
        frag.correct[spec.name] = correct
        frag.per_attack[spec.name] = float(correct.mean())
        if capture_differences:
            k = min(N_DIFF_SAMPLES, x.shape[0])
            frag.differences[spec.name] = (x_adv - x)[:k]
    if worst_case_over:
        missing = [n for n in worst_case_over if n not in frag.correct]
        if missing:
            raise ValueError(f"worst-case attacks {missing} not in suite")
        mask = np.ones(len(records), dtype=bool)
        for name in worst_case_over:
            mask &= frag.correct[name]
        frag.worst_case = float(mask.mean())
    return frag


def snapshot_curves(
    snapshots: list,
    records: SampleSet,
    gen: ModelParams,
    *,
    eps: float = 4.0 / 255.0,
    eta: float = 0.02,
    steps: int = 50,
    seed: int = 0,
) -> list:
    """Standard / PGD / latent-PGD accuracy for each training snapshot."""
    if not snapshots:
        raise ValueError("need at least one snapshot")
    pgd_spec = AttackSpec(
        name="pgd50", space="image", norm="linf", budget=eps, steps=steps,
        random_start=True, seed=seed + 2,
    )
    om_spec = AttackSpec(
        name="om_pgd50", space="latent", norm="linf", budget=eta, steps=steps,
        random_start=True, seed=seed + 4,
    )
    rows = []
    for epoch, params in snapshots:
        std = float((predict(params, records.x_on) == records.y).mean())
        x_adv, _ = craft(params, pgd_spec, x=records.x_on, y=records.y)
        pgd_acc = float((predict(params, x_adv) == records.y).mean())
        x_adv, _ = craft(params, om_spec, x=records.x_on, y=records.y, w=records.w, gen=gen)
        om_acc = float((predict(params, x_adv) == records.y).mean())
        rows.append(
            {"epoch": epoch, "standard": std, "pgd50": pgd_acc, "om_pgd50": om_acc}
        )
    return rows


# -- report files -------------------------------------------------------------------


def _fmt(acc: float) -> str:
    return f"{acc:.6f}"


def _write_csv(path: Path, header: list, rows: list) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")


def emit_report(report: RobustnessReport, out_dir) -> list:
    """Write the machine-readable report plus CSV mirrors of the four result
    tables, curve tables, difference tensors, and (optionally) figures.
    Contents are deterministic for a given report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []

    doc = report.to_dict()
    path = out / "report.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    files.append(path)

    # Long form: one row per (regime, eval_set, attack-or-standard) plus
    # one row per worst-case cell.
    rows = [
        [r, s, a, _fmt(acc)]
        for (r, s, a), acc in sorted(report.cells.items())
    ]
    rows += [
        [r, s, "worst_case", _fmt(acc)] for (r, s), acc in sorted(report.worst.items())
    ]
    path = out / "report_cells.csv"
    _write_csv(path, ["regime", "eval_set", "attack", "accuracy"], rows)
    files.append(path)

    def cell(regime, eval_set, attack):
        if attack == "standard":
            key = (regime, eval_set, "standard")
        elif attack == "worst_case":
            return report.worst.get((regime, eval_set))
        else:
            key = (regime, eval_set, attack)
        return report.cells.get(key)

    def table(path_name, regimes, eval_set, columns):
        rows = []
        for regime in regimes:
            if (regime, eval_set, "standard") not in report.cells:
                continue
            row = [regime]
            for col in columns:
                acc = cell(regime, eval_set, col)
                row.append("" if acc is None else _fmt(acc))
            rows.append(row)
        path = out / path_name
        _write_csv(path, ["regime", *columns], rows)
        files.append(path)

    all_regimes = report.regimes()
    table("table_known_attacks.csv", all_regimes, "on_manifold", _KNOWN_COLUMNS)
    table("table_unseen_attacks.csv", all_regimes, "on_manifold", _UNSEEN_COLUMNS)
    table("table_trades.csv", [r for r in _TRADES_ROWS if r in all_regimes],
          "on_manifold", _TRADES_COLUMNS)
    table("table_natural.csv", all_regimes, "natural", _NATURAL_COLUMNS)

    curve_rows = []
    for regime, rows_ in sorted(report.curves.items()):
        for row in rows_:
            curve_rows.append(
                [regime, str(row["epoch"]), _fmt(row["standard"]),
                 _fmt(row["pgd50"]), _fmt(row["om_pgd50"])]
            )
    path = out / "curves.csv"
    _write_csv(path, ["regime", "epoch", "standard", "pgd50", "om_pgd50"], curve_rows)
    files.append(path)

    return [str(p) for p in files]


def load_report(path) -> RobustnessReport:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise FileFormatError(f"cannot read report {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: corrupt report: {exc}") from exc
    return RobustnessReport.from_dict(doc)


def _write_differences(out: Path, fragments: list) -> list:
    files = []
    diff_dir = out / "differences"
    diff_dir.mkdir(parents=True, exist_ok=True)
    for frag in fragments:
        for name, diffs in sorted(frag.differences.items()):
            path = diff_dir / f"{frag.regime}_{frag.eval_set}_{name}.csv"
            rows = [[str(i)] + [repr(v) for v in row] for i, row in enumerate(diffs)]
            _write_csv(path, ["sample"] + [f"p{j}" for j in range(diffs.shape[1])], rows)
            files.append(str(path))
    return files


# -- experiment config files ----------------------------------------------------------


def save_experiment_config(path, cfg: ExperimentConfig) -> None:
    doc = {
        "format": EXP_MAGIC,
        "seed": cfg.seed,
        "dataset": cfg.dataset if isinstance(cfg.dataset, str) else cfg.dataset.to_dict(),
        "train_configs": [tc.to_dict() for tc in cfg.train_configs],
        "suite": cfg.suite if cfg.suite is None or isinstance(cfg.suite, str)
        else [s.to_dict() for s in cfg.suite],
        "worst_case_over": list(cfg.worst_case_over),
        "eval_sets": list(cfg.eval_sets),
        "curve_regimes": list(cfg.curve_regimes),
        "curve_samples": cfg.curve_samples,
        "emit_figures": cfg.emit_figures,
        "out_dir": cfg.out_dir,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise FileFormatError(f"cannot read experiment config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: corrupt experiment config: {exc}") from exc
    if doc.get("format") != EXP_MAGIC:
        raise FileFormatError(
            f"{path}: bad format {doc.get('format')!r}, expected {EXP_MAGIC!r}"
        )
    dataset = doc["dataset"]
    if not isinstance(dataset, str):
        dataset = DatasetConfig.from_dict(dataset)
    suite = doc.get("suite")
    if isinstance(suite, list):
        suite = [AttackSpec.from_dict(d) for d in suite]
    return ExperimentConfig(
        seed=int(doc.get("seed", 0)),
        dataset=dataset,
        train_configs=[TrainConfig.from_dict(d) for d in doc["train_configs"]],
        suite=suite,
        worst_case_over=list(doc.get("worst_case_over", ["fgsm", "pgd50", "mia"])),
        eval_sets=tuple(doc.get("eval_sets", EVAL_SETS)),
        curve_regimes=tuple(doc.get("curve_regimes", DEFAULT_CURVE_REGIMES)),
        curve_samples=int(doc.get("curve_samples", 250)),
        emit_figures=bool(doc.get("emit_figures", True)),
        out_dir=doc.get("out_dir", "runs/default"),
    )


# -- the full pipeline ----------------------------------------------------------------


def _resolve_out_dir(out_dir) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    path = Path(out_dir)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _load_or_train(cfg: TrainConfig, dataset, gen, ckpt_dir: Path) -> TrainRun:
    """Reuse checkpoints from a previous identical run, else train and save."""
    regime_dir = ckpt_dir / cfg.regime
    final_path = regime_dir / "final.ckpt"
    cfg_echo = cfg.to_dict()
    if final_path.exists():
        params, _, extra = load_checkpoint(final_path)
        if extra.get("train_config") == cfg_echo:
            snapshots = []
            for epoch in extra.get("snapshot_epochs", []):
                sp, _, _ = load_checkpoint(regime_dir / f"epoch_{epoch:03d}.ckpt")
                snapshots.append((epoch, sp.freeze()))
            return TrainRun(final=params.freeze(), snapshots=snapshots,
                            metrics=extra.get("metrics", []))
    run = train(dataset, cfg, gen)
    regime_dir.mkdir(parents=True, exist_ok=True)
    snapshot_epochs = [e for e, _ in run.snapshots]
    for epoch, params in run.snapshots:
        vel = run.velocity_by_epoch.get(epoch)
        flat_vel = velocity_to_flat(params, vel) if vel is not None else None
        save_checkpoint(
            params, regime_dir / f"epoch_{epoch:03d}.ckpt",
            optimizer_state=flat_vel,
            extra={"train_config": cfg_echo, "epoch": epoch, "next_epoch": epoch + 1},
        )
    save_checkpoint(
        run.final, final_path,
        extra={
            "train_config": cfg_echo,
            "snapshot_epochs": snapshot_epochs,
            "metrics": run.metrics,
        },
    )
    return run


def run_experiment(config, out_dir=None) -> int:
    """Full pipeline: dataset -> regimes -> evaluation -> reports.

    Returns a process exit code; on failure, whatever was produced is flushed
    and the MANIFEST records the incompleteness and the error.
    """
    if isinstance(config, (str, Path)):
        config = load_experiment_config(config)
    out = _resolve_out_dir(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: list = []
    complete = False
    error = None
    try:
        files = _run_pipeline(config, out)
        complete = True
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports everything
        error = f"{type(exc).__name__}: {exc}"
        traceback.print_exc()
    manifest = {
        "format": MANIFEST_MAGIC,
        "complete": complete,
        "files": sorted(str(Path(f).relative_to(out)) for f in files),
        "error": error,
    }
    (out / "MANIFEST.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    if not complete:
        print(f"experiment failed: {error}")
        return 1
    return 0


def _run_pipeline(config: ExperimentConfig, out: Path) -> list:
    files: list = []
    gen = make_generator(GENERATOR_SEED)
    teacher = make_teacher(TEACHER_SEED, gen)

    if isinstance(config.dataset, str):
        train_set, test_set, data_cfg = load_dataset(config.dataset)
    else:
        data_cfg = config.dataset
        train_set, test_set = build_dataset(data_cfg, gen, teacher)
        data_path = out / "dataset.bin"
        save_dataset(data_path, train_set, test_set, data_cfg)
        files.append(str(data_path))

    specs, worst_over = config.resolve_suite()
    suite_path = out / "suite.json"
    save_suite(suite_path, specs, worst_over)
    files.append(str(suite_path))

    ckpt_dir = out / "checkpoints"
    runs: dict[str, TrainRun] = {}
    for tc in config.train_configs:
        runs[tc.regime] = _load_or_train(tc, (train_set, test_set), gen, ckpt_dir)
        metrics_path = out / f"metrics_{tc.regime}.csv"
        write_metrics_csv(metrics_path, runs[tc.regime].metrics)
        files.append(str(metrics_path))
        regime_dir = ckpt_dir / tc.regime
        files.extend(str(p) for p in sorted(regime_dir.glob("*.ckpt")))

    report = RobustnessReport()
    report.worst_case_over = list(worst_over)
    fragments = []
    latent_free = [s for s in specs if s.space != "latent"]
    for tc in config.train_configs:
        model = runs[tc.regime].final
        for eval_set in config.eval_sets:
            suite_for_set = specs if eval_set == "on_manifold" else latent_free
            frag = evaluate(
                model, test_set, suite_for_set, eval_set,
                gen=gen, worst_case_over=worst_over, regime=tc.regime,
            )
            report.add_fragment(frag)
            fragments.append(frag)

    curve_records = test_set.subset(min(config.curve_samples, len(test_set)))
    for tc in config.train_configs:
        if tc.regime not in config.curve_regimes:
            continue
        report.curves[tc.regime] = snapshot_curves(
            runs[tc.regime].snapshots, curve_records, gen,
            eps=tc.eps, eta=tc.eta, seed=config.seed,
        )

    files.extend(emit_report(report, out))
    files.extend(_write_differences(out, fragments))

    if config.emit_figures:
        from .figures import render_all

        files.extend(render_all(report, out / "figures"))
    return files
