"""Command-line pipeline: generate, cohort, featurize, train, calibrate,
evaluate, report, importance, or the whole chain at once.

Every stage reads one JSON config, writes into its own subdirectory of the
run directory, and records a manifest with SHA-256 hashes of everything it
read and wrote. A stage refuses to run when an input does not match the
hash its producer recorded, so stale or hand-edited artifacts fail loudly
instead of silently skewing results downstream.

Exit codes: 0 success, 2 invalid input or config, 3 missing/stale
prerequisite artifacts, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import flatten, make_lr_runner
from .calibration import Calibrator, ece, fit_platt, fit_temperature, nll
from .claims import (
    SyntheticConfig,
    day_to_iso,
    generate_population,
    ingest_claims,
    iso_to_day,
    write_ground_truth,
    write_population,
)
from .cohort import IndexEvent, build_cohort, cohort_summary, resolve_stays
from .errors import (
    CalibrationError,
    MetricUndefinedError,
    NumericsError,
    ParseError,
    PrerequisiteError,
    SeqfuseError,
    ValidationError,
)
from .features import PatientSequence, SequenceOptions, SequenceStep, featurize_events
from .knowledge import CcsMap, load_bundle
from .metrics import (
    auc,
    recall_at_top_k,
    recall_precision_at_threshold,
    subgroup_report,
    surrogate_importance,
)
from .model import load_model, load_pretrained_embedding, save_model, write_random_embedding
from .rng import derive_seed
from .training import (
    config_hash,
    grid_search,
    make_deep_runner,
    split_patients,
)

STAGES = ("generate", "cohort", "featurize", "train", "calibrate", "evaluate", "report", "importance")
TASKS = ("readmission", "mortality")
ALGORITHMS = ("lr", "rnn", "early_fusion", "late_fusion")
ALGORITHM_LABELS = {"lr": "LR", "rnn": "RNN", "early_fusion": "Early Fusion", "late_fusion": "Late Fusion"}
FUSION_OF = {"rnn": "none", "early_fusion": "early", "late_fusion": "late"}
EMBEDDING_MODES = ("linear", "pretrained")


def default_config(outdir: str = "runs/demo", n_patients: int = 2000, seed: int = 20110901) -> dict:
    return {
        "outdir": outdir,
        "seed": seed,
        "task": "readmission",
        "generate": {
            "n_patients": n_patients,
            "dx_vocab": 90,
            "proc_vocab": 36,
            "mean_claims_per_patient": 6.0,
        },
        "features": {
            "include_outpatient": True,
            "exclude_index_step": False,
            "lookback_days": 365,
            "pretrained_embed_dim": 16,
        },
        "train": {
            "algorithms": ["lr", "early_fusion", "late_fusion"],
            "embedding_modes": ["linear"],
            "fractions": [0.70, 0.15, 0.05, 0.10],
            "epochs": 15,
            "patience": 3,
            "optimizer": "adam",
            "w_neg": 1.0,
            "jobs": 1,
            "grid": {
                "embed_dim": [16],
                "hidden_dim": [24],
                "n_gru_layers": [1],
                "mlp_hidden_dims": [[16]],
                "lr": [0.02],
                "batch_size": [32],
                "w_pos": [2.0],
            },
            "lr_grid": {"l2": [0.1, 0.01], "smote": [True]},
        },
        "calibrate": {"method_deep": "temperature", "method_lr": "platt"},
        "evaluate": {"threshold": 0.5, "top_k": [50], "n_min": 50},
        "knowledge": {},
    }


_TOP_KEYS = {"outdir", "seed", "task", "generate", "features", "train", "calibrate", "evaluate", "knowledge"}


def validate_config(cfg: dict) -> list[str]:
    """Collects every problem instead of stopping at the first."""
    problems: list[str] = []
    unknown = set(cfg) - _TOP_KEYS
    if unknown:
        problems.append(f"unknown config keys: {sorted(unknown)}")
    if not isinstance(cfg.get("outdir"), str) or not cfg.get("outdir"):
        problems.append("outdir must be a non-empty string")
    if not isinstance(cfg.get("seed"), int):
        problems.append("seed must be an integer")
    if cfg.get("task") not in TASKS:
        problems.append(f"task must be one of {TASKS}")

    gen = cfg.get("generate", {})
    if not isinstance(gen.get("n_patients"), int) or gen.get("n_patients", 0) <= 0:
        problems.append("generate.n_patients must be a positive integer")
    if gen.get("mean_claims_per_patient", 1) <= 0:
        problems.append("generate.mean_claims_per_patient must be positive")

    feats = cfg.get("features", {})
    if feats.get("lookback_days", 365) <= 0:
        problems.append("features.lookback_days must be positive")
    if feats.get("pretrained_embed_dim", 16) <= 0:
        problems.append("features.pretrained_embed_dim must be positive")

    train = cfg.get("train", {})
    algorithms = train.get("algorithms", [])
    if not algorithms or any(a not in ALGORITHMS for a in algorithms):
        problems.append(f"train.algorithms must be a non-empty subset of {ALGORITHMS}")
    modes = train.get("embedding_modes", ["linear"])
    if not modes or any(m not in EMBEDDING_MODES for m in modes):
        problems.append(f"train.embedding_modes must be a non-empty subset of {EMBEDDING_MODES}")
    fractions = train.get("fractions", [0.70, 0.15, 0.05, 0.10])
    if len(fractions) != 4 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        problems.append("train.fractions must be four non-negative numbers summing to 1")
    if train.get("epochs", 1) <= 0:
        problems.append("train.epochs must be positive")
    if train.get("patience", 0) < 0:
        problems.append("train.patience must be non-negative")
    if train.get("jobs", 1) < 1:
        problems.append("train.jobs must be at least 1")
    grid = train.get("grid", {})
    if any(a in FUSION_OF for a in algorithms):
        for axis in ("embed_dim", "hidden_dim", "lr"):
            if not grid.get(axis):
                problems.append(f"train.grid.{axis} must be a non-empty list")
        if "pretrained" in modes:
            dim = feats.get("pretrained_embed_dim", 16)
            bad = [e for e in grid.get("embed_dim", []) if e != dim]
            if bad:
                problems.append(
                    f"train.grid.embed_dim values {bad} clash with features.pretrained_embed_dim={dim}"
                )
    if "lr" in algorithms and not train.get("lr_grid", {}).get("l2"):
        problems.append("train.lr_grid.l2 must be a non-empty list")

    cal = cfg.get("calibrate", {})
    if cal.get("method_deep", "temperature") not in ("temperature", "platt"):
        problems.append("calibrate.method_deep must be 'temperature' or 'platt'")
    if cal.get("method_lr", "platt") not in ("temperature", "platt"):
        problems.append("calibrate.method_lr must be 'temperature' or 'platt'")

    ev = cfg.get("evaluate", {})
    threshold = ev.get("threshold", 0.5)
    if not 0.0 < threshold < 1.0:
        problems.append("evaluate.threshold must be in (0, 1)")
    if any(not isinstance(k, int) or k < 1 for k in ev.get("top_k", [])):
        problems.append("evaluate.top_k must hold positive integers")
    if ev.get("n_min", 50) < 1:
        problems.append("evaluate.n_min must be at least 1")
    return problems


def load_config(path: str, outdir: str | None = None, jobs: int | None = None) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ValidationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, f"config is not valid JSON: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError("config root must be a JSON object")
    merged = default_config()
    for key, value in cfg.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    if outdir is not None:
        merged["outdir"] = outdir
    if jobs is not None:
        merged.setdefault("train", {})["jobs"] = jobs
    problems = validate_config(merged)
    if problems:
        raise ValidationError("invalid config:\n  " + "\n  ".join(problems))
    return merged


# --- manifests -------------------------------------------------------------


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _hash_tree(outdir: Path, relpaths: list[str]) -> dict[str, str]:
    return {rel: _sha256(outdir / rel) for rel in sorted(relpaths)}


def write_manifest(outdir: Path, stage: str, cfg: dict, inputs: dict[str, str], outputs: list[str]) -> None:
    manifest = {
        "stage": stage,
        "version": __version__,
        "seed": cfg["seed"],
        # Hash everything but the run location, so moving a run does not
        # change what experiment the manifests claim it was.
        "config_hash": config_hash({k: v for k, v in cfg.items() if k != "outdir"}),
        "inputs": inputs,
        "outputs": _hash_tree(outdir, outputs),
    }
    path = outdir / stage / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def require_inputs(outdir: Path, relpaths: list[str]) -> dict[str, str]:
    """Verifies each input against its producing stage's manifest and
    returns {relpath: hash} for recording in the consumer's manifest."""
    verified: dict[str, str] = {}
    for rel in sorted(relpaths):
        producer = rel.split("/", 1)[0]
        manifest_path = outdir / producer / "manifest.json"
        if not manifest_path.is_file():
            raise PrerequisiteError(f"missing {manifest_path}; run `seqfuse {producer}` first")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        declared = manifest.get("outputs", {}).get(rel)
        if declared is None:
            raise PrerequisiteError(f"stage {producer!r} does not declare output {rel!r}; rerun it")
        live_path = outdir / rel
        if not live_path.is_file():
            raise PrerequisiteError(f"missing artifact {rel!r}; rerun `seqfuse {producer}`")
        live = _sha256(live_path)
        if live != declared:
            raise PrerequisiteError(
                f"artifact {rel!r} does not match the hash recorded by stage {producer!r}; rerun it"
            )
        verified[rel] = live
    return verified


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


# --- stage helpers ----------------------------------------------------------


def _knowledge_bundle(cfg: dict, outdir: Path):
    ccs = CcsMap.from_csv(outdir / "generate" / "ccs_map.csv")
    paths = {k: v for k, v in cfg.get("knowledge", {}).items() if v}
    return load_bundle(ccs, paths)


def _cells(cfg: dict) -> list[tuple[str, str]]:
    """(algorithm, embedding mode) pairs; the flat baseline has no
    embedding, so it runs once under the linear column."""
    cells: list[tuple[str, str]] = []
    for algorithm in ALGORITHMS:
        if algorithm not in cfg["train"]["algorithms"]:
            continue
        if algorithm == "lr":
            cells.append((algorithm, "linear"))
        else:
            cells.extend((algorithm, mode) for mode in cfg["train"]["embedding_modes"])
    return cells


def _cell_name(algorithm: str, mode: str) -> str:
    return f"{algorithm}__{mode}"


def _load_sequences(outdir: Path) -> tuple[list[PatientSequence], dict]:
    features_meta = _read_json(outdir / "featurize" / "features.json")
    sequences: list[PatientSequence] = []
    with open(outdir / "featurize" / "sequences.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            sequences.append(
                PatientSequence(
                    event_id=obj["event_id"],
                    beneficiary_id=obj["beneficiary_id"],
                    steps=[SequenceStep(day_offset=o, indices=tuple(ix)) for o, ix in obj["steps"]],
                    z=list(obj["z"]),
                    readmit_label=bool(obj["readmit_label"]),
                    mortality_label=bool(obj["mortality_label"]),
                    mortality_excluded=bool(obj["mortality_excluded"]),
                    subgroup=obj["subgroup"],
                )
            )
    return sequences, features_meta


def _task_sequences(sequences: list[PatientSequence], task: str) -> list[PatientSequence]:
    if task == "mortality":
        return [s for s in sequences if not s.mortality_excluded]
    return sequences


def _fold_indices(sequences: list[PatientSequence], patient_folds: dict[str, str]) -> dict[str, list[int]]:
    fold_idx: dict[str, list[int]] = {name: [] for name in ("train", "valid", "calibration", "test")}
    for i, seq in enumerate(sequences):
        fold_idx[patient_folds[seq.beneficiary_id]].append(i)
    return fold_idx


# --- stages ------------------------------------------------------------------


def stage_generate(cfg: dict) -> None:
    outdir = Path(cfg["outdir"])
    stage_dir = outdir / "generate"
    stage_dir.mkdir(parents=True, exist_ok=True)
    gen = cfg["generate"]
    synth = SyntheticConfig(
        n_patients=gen["n_patients"],
        seed=cfg["seed"],
        dx_vocab=gen.get("dx_vocab", 90),
        proc_vocab=gen.get("proc_vocab", 36),
        mean_claims_per_patient=gen.get("mean_claims_per_patient", 6.0),
    )
    population = generate_population(synth)
    write_population(stage_dir / "population.jsonl", population.beneficiaries, population.claims)
    write_ground_truth(stage_dir / "ground_truth.csv", population.truth)
    CcsMap.synthetic(synth.dx_vocab, synth.proc_vocab).to_csv(stage_dir / "ccs_map.csv")
    _write_json(stage_dir / "generator_info.json", population.info)
    write_manifest(
        outdir,
        "generate",
        cfg,
        inputs={},
        outputs=[
            "generate/population.jsonl",
            "generate/ground_truth.csv",
            "generate/ccs_map.csv",
            "generate/generator_info.json",
        ],
    )
    print(
        f"generate: {len(population.beneficiaries)} patients, {len(population.claims)} claims, "
        f"{len(population.truth)} ground-truth events"
    )


def _event_row(event: IndexEvent) -> dict:
    return {
        "event_id": event.event_id,
        "beneficiary_id": event.stay.beneficiary_id,
        "stay_id": event.stay.stay_id,
        "admit_date": day_to_iso(event.stay.admit_date),
        "discharge_date": day_to_iso(event.stay.discharge_date),
        "age": event.age,
        "los": event.stay.los,
        "exclusion_reason": event.exclusion_reason,
        "readmit_label": event.readmit_label,
        "readmit_stay_id": event.readmit_stay_id,
        "mortality_label": event.mortality_label,
        "mortality_exclusion": event.mortality_exclusion,
    }


def stage_cohort(cfg: dict) -> None:
    outdir = Path(cfg["outdir"])
    inputs = require_inputs(outdir, ["generate/population.jsonl", "generate/ccs_map.csv"])
    stage_dir = outdir / "cohort"
    stage_dir.mkdir(parents=True, exist_ok=True)
    beneficiaries, claims = ingest_claims(outdir / "generate" / "population.jsonl")
    bundle = _knowledge_bundle(cfg, outdir)
    events, stays, audit = build_cohort(beneficiaries, claims, bundle.planned_rules, bundle.ccs, bundle.acute_drgs)
    with open(stage_dir / "index_events.jsonl", "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(json.dumps(_event_row(event), sort_keys=True) + "\n")
    ben_map = {b.beneficiary_id: b for b in beneficiaries}
    (stage_dir / "summary.csv").write_text(cohort_summary(events, ben_map), encoding="utf-8")
    _write_json(stage_dir / "audit.json", audit)
    write_manifest(
        outdir,
        "cohort",
        cfg,
        inputs=inputs,
        outputs=["cohort/index_events.jsonl", "cohort/summary.csv", "cohort/audit.json"],
    )
    print(
        f"cohort: {audit['n_events']} events, {audit['n_eligible']} eligible, "
        f"{audit['readmit_positive']} readmissions, {audit['mortality_positive']} deaths"
    )


def stage_featurize(cfg: dict) -> None:
    outdir = Path(cfg["outdir"])
    inputs = require_inputs(
        outdir,
        ["generate/population.jsonl", "generate/ccs_map.csv", "cohort/index_events.jsonl"],
    )
    stage_dir = outdir / "featurize"
    stage_dir.mkdir(parents=True, exist_ok=True)
    beneficiaries, claims = ingest_claims(outdir / "generate" / "population.jsonl")
    bundle = _knowledge_bundle(cfg, outdir)
    events, stays, _ = build_cohort(beneficiaries, claims, bundle.planned_rules, bundle.ccs, bundle.acute_drgs)
    feats = cfg["features"]
    opts = SequenceOptions(
        include_outpatient=feats.get("include_outpatient", True),
        exclude_index_step=feats.get("exclude_index_step", False),
        lookback_days=feats.get("lookback_days", 365),
    )
    ben_map = {b.beneficiary_id: b for b in beneficiaries}
    sequences, z_names = featurize_events(events, ben_map, claims, stays, bundle, opts)
    if not sequences:
        raise ValidationError("no eligible events to featurize")
    with open(stage_dir / "sequences.jsonl", "w", encoding="utf-8") as fh:
        for seq in sequences:
            obj = {
                "event_id": seq.event_id,
                "beneficiary_id": seq.beneficiary_id,
                "steps": [[step.day_offset, list(step.indices)] for step in seq.steps],
                "z": seq.z,
                "readmit_label": int(seq.readmit_label),
                "mortality_label": int(seq.mortality_label),
                "mortality_excluded": seq.mortality_excluded,
                "subgroup": {
                    **{k: v for k, v in seq.subgroup.items() if k != "proc_ccs"},
                    "proc_ccs": list(seq.subgroup["proc_ccs"]),
                },
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    embed_dim = feats.get("pretrained_embed_dim", 16)
    write_random_embedding(
        stage_dir / "pretrained_embedding",
        input_dim=bundle.ccs.input_dim,
        embed_dim=embed_dim,
        seed=cfg["seed"],
    )
    _write_json(
        stage_dir / "features.json",
        {
            "z_names": z_names,
            "n_dx_columns": bundle.ccs.n_dx_columns,
            "n_proc_columns": bundle.ccs.n_proc_columns,
            "input_dim": bundle.ccs.input_dim,
            "options": {
                "include_outpatient": opts.include_outpatient,
                "exclude_index_step": opts.exclude_index_step,
                "lookback_days": opts.lookback_days,
            },
            "n_events": len(sequences),
        },
    )
    write_manifest(
        outdir,
        "featurize",
        cfg,
        inputs=inputs,
        outputs=[
            "featurize/sequences.jsonl",
            "featurize/features.json",
            "featurize/pretrained_embedding/manifest.json",
            "featurize/pretrained_embedding/weights.bin",
        ],
    )
    print(f"featurize: {len(sequences)} sequences, |z| = {len(z_names)}")


def stage_train(cfg: dict) -> None:
    outdir = Path(cfg["outdir"])
    inputs = require_inputs(
        outdir,
        [
            "featurize/sequences.jsonl",
            "featurize/features.json",
            "featurize/pretrained_embedding/manifest.json",
            "featurize/pretrained_embedding/weights.bin",
        ],
    )
    stage_dir = outdir / "train"
    stage_dir.mkdir(parents=True, exist_ok=True)
    task = cfg["task"]
    train_cfg = cfg["train"]
    all_sequences, features_meta = _load_sequences(outdir)
    sequences = _task_sequences(all_sequences, task)
    labels = np.array([float(s.label_for(task)) for s in sequences])
    z = np.array([s.z for s in sequences], dtype=np.float64)
    steps = [[list(step.indices) for step in s.steps] for s in sequences]

    positives: dict[str, int] = {}
    for seq, label in zip(sequences, labels):
        positives[seq.beneficiary_id] = positives.get(seq.beneficiary_id, 0) + int(label)
    folds, warnings = split_patients(positives, cfg["seed"], tuple(train_cfg["fractions"]))
    patient_folds = {pid: name for name, pids in folds.items() for pid in pids}
    fold_idx = _fold_indices(sequences, patient_folds)
    for name in ("train", "valid", "test"):
        if not fold_idx[name]:
            raise ValidationError(f"fold {name!r} received no events; increase the population")
    _write_json(
        stage_dir / "split.json",
        {
            "task": task,
            "seed": cfg["seed"],
            "fractions": train_cfg["fractions"],
            "warnings": warnings,
            "patients": folds,
            "events": {name: [sequences[i].event_id for i in idx] for name, idx in fold_idx.items()},
        },
    )

    pretrained = load_pretrained_embedding(outdir / "featurize" / "pretrained_embedding")
    jobs = int(train_cfg.get("jobs", 1))
    summary: dict[str, dict] = {}
    trial_rows: list[dict] = []
    for algorithm, mode in _cells(cfg):
        cell = _cell_name(algorithm, mode)
        cell_seed_label = f"{task}/{cell}"
        if algorithm == "lr":
            table = flatten(
                sequences,
                features_meta["n_dx_columns"],
                features_meta["n_proc_columns"],
                features_meta["z_names"],
            )
            runner = make_lr_runner(table.matrix, labels.astype(np.int64), fold_idx)
            axes = {k: list(v) for k, v in train_cfg["lr_grid"].items()}
        else:
            runner = make_deep_runner(
                steps,
                z,
                labels,
                fold_idx,
                input_dim=features_meta["input_dim"],
                domain_dim=z.shape[1],
                fusion=FUSION_OF[algorithm],
                embedding=mode,
                pretrained=pretrained if mode == "pretrained" else None,
                epochs=int(train_cfg.get("epochs", 15)),
                patience=int(train_cfg.get("patience", 3)),
                w_neg=float(train_cfg.get("w_neg", 1.0)),
                optimizer=train_cfg.get("optimizer", "adam"),
            )
            axes = {k: list(v) for k, v in train_cfg["grid"].items()}
        result = grid_search(axes, runner, derive_seed(cfg["seed"], cell_seed_label), jobs=jobs)
        for trial in result.trials:
            trial_rows.append(
                {
                    "cell": cell,
                    "config_hash": trial.config_hash,
                    "status": trial.status,
                    "valid_auc": trial.valid_auc,
                    "test_auc": trial.test_auc,
                    "seed": trial.seed,
                    "config": json.dumps(trial.config, sort_keys=True),
                }
            )
        best = result.best
        if best is None:
            raise NumericsError(f"every trial failed for {cell}")
        model_dir = stage_dir / "models" / cell / "best"
        model_dir.mkdir(parents=True, exist_ok=True)
        if algorithm == "lr":
            lr_model = best.payload["model"]
            _write_json(
                model_dir / "model.json",
                {
                    "kind": "logistic",
                    "weights": lr_model.weights.tolist(),
                    "intercept": lr_model.intercept,
                    "z_mean": best.payload["z_mean"].tolist(),
                    "z_std": best.payload["z_std"].tolist(),
                    "config": best.config,
                    "task": task,
                },
            )
        else:
            save_model(
                model_dir,
                best.payload["model"],
                meta={
                    "task": task,
                    "cell": cell,
                    "z_mean": best.payload["z_mean"].tolist(),
                    "z_std": best.payload["z_std"].tolist(),
                    "trial": {"config": best.config, "config_hash": best.config_hash, "seed": best.seed},
                },
            )
        summary[cell] = {
            "algorithm": algorithm,
            "embedding_mode": mode,
            "n_trials": len(result.trials),
            "n_failed": sum(1 for t in result.trials if t.status != "ok"),
            "top_test_auc_mean": result.top_test_mean,
            "top_test_auc_std": result.top_test_std,
            "n_top": result.n_top,
            "best": {
                "config": best.config,
                "config_hash": best.config_hash,
                "valid_auc": best.valid_auc,
                "test_auc": best.test_auc,
            },
        }

    with open(stage_dir / "trials.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["cell", "config_hash", "status", "valid_auc", "test_auc", "seed", "config"],
            lineterminator="\n",
        )
        writer.writeheader()
        writer.writerows(trial_rows)
    _write_json(stage_dir / "summary.json", {"task": task, "cells": summary})

    outputs = ["train/split.json", "train/trials.csv", "train/summary.json"]
    for algorithm, mode in _cells(cfg):
        cell = _cell_name(algorithm, mode)
        if algorithm == "lr":
            outputs.append(f"train/models/{cell}/best/model.json")
        else:
            outputs.append(f"train/models/{cell}/best/manifest.json")
            outputs.append(f"train/models/{cell}/best/weights.bin")
    write_manifest(outdir, "train", cfg, inputs=inputs, outputs=outputs)
    cells = ", ".join(f"{c}={s['best']['valid_auc']:.3f}" for c, s in summary.items())
    print(f"train: best valid AUC by cell: {cells}")


def _model_artifacts(cfg: dict) -> list[str]:
    artifacts = []
    for algorithm, mode in _cells(cfg):
        cell = _cell_name(algorithm, mode)
        if algorithm == "lr":
            artifacts.append(f"train/models/{cell}/best/model.json")
        else:
            artifacts.append(f"train/models/{cell}/best/manifest.json")
            artifacts.append(f"train/models/{cell}/best/weights.bin")
    return artifacts


def _raw_scores_for_cell(
    outdir: Path,
    cfg: dict,
    algorithm: str,
    cell: str,
    sequences: list[PatientSequence],
    features_meta: dict,
) -> np.ndarray:
    """Uncalibrated margins/logits for every event, in sequence order."""
    if algorithm == "lr":
        spec = _read_json(outdir / "train" / "models" / cell / "best" / "model.json")
        table = flatten(
            sequences,
            features_meta["n_dx_columns"],
            features_meta["n_proc_columns"],
            features_meta["z_names"],
        )
        standardized = (table.matrix - np.array(spec["z_mean"])) / np.array(spec["z_std"])
        return standardized @ np.array(spec["weights"]) + spec["intercept"]
    model, meta = load_model(outdir / "train" / "models" / cell / "best")
    z = np.array([s.z for s in sequences], dtype=np.float64)
    z_std = (z - np.array(meta["z_mean"])) / np.array(meta["z_std"])
    steps = [[list(step.indices) for step in s.steps] for s in sequences]
    _, logits, _ = model.predict(steps, z_std if model.config.fusion != "none" else None)
    return logits


def stage_calibrate(cfg: dict) -> None:
    outdir = Path(cfg["outdir"])
    inputs = require_inputs(
        outdir,
        ["featurize/sequences.jsonl", "featurize/features.json", "train/split.json", "train/summary.json"]
        + _model_artifacts(cfg),
    )
    stage_dir = outdir / "calibrate"
    stage_dir.mkdir(parents=True, exist_ok=True)
    task = cfg["task"]
    all_sequences, features_meta = _load_sequences(outdir)
    sequences = _task_sequences(all_sequences, task)
    labels = np.array([float(s.label_for(task)) for s in sequences])
    split = _read_json(outdir / "train" / "split.json")
    patient_folds = {pid: name for name, pids in split["patients"].items() for pid in pids}
    fold_idx = _fold_indices(sequences, patient_folds)
    calib_idx = fold_idx["calibration"]
    if not calib_idx:
        raise ValidationError("calibration fold received no events; adjust train.fractions")

    calibrators: dict[str, dict] = {}
    for algorithm, mode in _cells(cfg):
        cell = _cell_name(algorithm, mode)
        raw = _raw_scores_for_cell(outdir, cfg, algorithm, cell, sequences, features_meta)
        method = cfg["calibrate"]["method_lr" if algorithm == "lr" else "method_deep"]
        fit = fit_platt if method == "platt" else fit_temperature
        calibrator = fit(raw[calib_idx], labels[calib_idx], fold="calibration")
        calibrators[cell] = calibrator.to_json_obj()
    _write_json(stage_dir / "calibrators.json", {"task": task, "cells": calibrators})
    write_manifest(outdir, "calibrate", cfg, inputs=inputs, outputs=["calibrate/calibrators.json"])
    summary = ", ".join(
        f"{cell}: {obj['kind']}"
        + (f"(T={obj['temperature']:.2f})" if obj["kind"] == "temperature" else f"(a={obj['a']:.2f}, b={obj['b']:.2f})")
        for cell, obj in calibrators.items()
    )
    print(f"calibrate: {summary}")


def stage_evaluate(cfg: dict) -> None:
    outdir = Path(cfg["outdir"])
    inputs = require_inputs(
        outdir,
        [
            "featurize/sequences.jsonl",
            "featurize/features.json",
            "train/split.json",
            "train/summary.json",
            "calibrate/calibrators.json",
        ]
        + _model_artifacts(cfg),
    )
    stage_dir = outdir / "evaluate"
    stage_dir.mkdir(parents=True, exist_ok=True)
    task = cfg["task"]
    threshold = cfg["evaluate"]["threshold"]
    all_sequences, features_meta = _load_sequences(outdir)
    sequences = _task_sequences(all_sequences, task)
    labels = np.array([int(s.label_for(task)) for s in sequences])
    split = _read_json(outdir / "train" / "split.json")
    patient_folds = {pid: name for name, pids in split["patients"].items() for pid in pids}
    fold_idx = _fold_indices(sequences, patient_folds)
    test_idx = np.array(fold_idx["test"], dtype=np.int64)
    calibrators = _read_json(outdir / "calibrate" / "calibrators.json")["cells"]
    train_summary = _read_json(outdir / "train" / "summary.json")["cells"]

    metrics: dict[str, dict] = {}
    outputs = []
    for algorithm, mode in _cells(cfg):
        cell = _cell_name(algorithm, mode)
        raw = _raw_scores_for_cell(outdir, cfg, algorithm, cell, sequences, features_meta)
        calibrator = Calibrator.from_json_obj(calibrators[cell])
        prob_raw = Calibrator(kind="identity").apply(raw)
        prob_cal = calibrator.apply(raw)
        scores_path = stage_dir / f"scores_{cell}.csv"
        with open(scores_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["event_id", "fold", "label", "raw", "prob_raw", "prob_cal"])
            for i, seq in enumerate(sequences):
                writer.writerow(
                    [
                        seq.event_id,
                        patient_folds[seq.beneficiary_id],
                        labels[i],
                        f"{raw[i]:.10g}",
                        f"{prob_raw[i]:.10g}",
                        f"{prob_cal[i]:.10g}",
                    ]
                )
        outputs.append(f"evaluate/scores_{cell}.csv")
        test_labels = labels[test_idx]
        test_cal = prob_cal[test_idx]
        test_raw_prob = prob_raw[test_idx]
        try:
            recall, precision = recall_precision_at_threshold(test_cal, test_labels, threshold)
        except MetricUndefinedError:
            recall, precision = None, None
        top_k = {}
        for k in cfg["evaluate"].get("top_k", []):
            if 1 <= k <= len(test_idx):
                top_k[str(k)] = recall_at_top_k(test_cal, test_labels, k)
        metrics[cell] = {
            "algorithm": algorithm,
            "embedding_mode": mode,
            "n_test": int(len(test_idx)),
            "test_prevalence": float(test_labels.mean()),
            "auc": auc(test_cal, test_labels),
            "recall_at_threshold": recall,
            "precision_at_threshold": precision,
            "recall_at_top_k": top_k,
            "nll_raw": nll(test_raw_prob, test_labels),
            "nll_cal": nll(test_cal, test_labels),
            "ece_raw": ece(test_raw_prob, test_labels),
            "ece_cal": ece(test_cal, test_labels),
            "top_test_auc_mean": train_summary[cell]["top_test_auc_mean"],
            "top_test_auc_std": train_summary[cell]["top_test_auc_std"],
            "best_valid_auc": train_summary[cell]["best"]["valid_auc"],
        }

    deep_cells = [c for c in metrics if metrics[c]["algorithm"] != "lr"]
    pool = deep_cells or list(metrics)
    best_cell = max(pool, key=lambda c: (metrics[c]["best_valid_auc"], c))
    payload = {
        "task": task,
        "threshold": threshold,
        "cells": metrics,
        "best_cell": best_cell,
    }
    _write_json(stage_dir / "metrics.json", payload)
    outputs.append("evaluate/metrics.json")
    write_manifest(outdir, "evaluate", cfg, inputs=inputs, outputs=outputs)
    lines = ", ".join(f"{cell}: AUC {m['auc']:.3f}" for cell, m in metrics.items())
    print(f"evaluate [{task}]: {lines}")


def _fmt(value, digits: int = 4) -> str:
    return "" if value is None else f"{value:.{digits}f}"


def stage_report(cfg: dict) -> None:
    outdir = Path(cfg["outdir"])
    inputs = require_inputs(outdir, ["evaluate/metrics.json"])
    metrics_all = _read_json(outdir / "evaluate" / "metrics.json")
    best_cell = metrics_all["best_cell"]
    inputs.update(
        require_inputs(
            outdir,
            [
                "featurize/sequences.jsonl",
                "featurize/features.json",
                "train/split.json",
                "train/summary.json",
                f"evaluate/scores_{best_cell}.csv",
            ],
        )
    )
    stage_dir = outdir / "report"
    stage_dir.mkdir(parents=True, exist_ok=True)
    task = cfg["task"]
    cells = metrics_all["cells"]
    modes = [m for m in EMBEDDING_MODES if m in cfg["train"]["embedding_modes"]]

    header = ["Algorithm"]
    for mode in modes:
        header += [f"AUC_{mode}", f"AUC_std_{mode}", f"Recall_{mode}"]
    rows = [header]
    for algorithm in ALGORITHMS:
        if algorithm not in cfg["train"]["algorithms"]:
            continue
        row = [ALGORITHM_LABELS[algorithm]]
        for mode in modes:
            cell = _cell_name(algorithm, "linear" if algorithm == "lr" else mode)
            if algorithm == "lr" and mode != "linear":
                row += ["", "", ""]  # the flat baseline has no embedding
                continue
            m = cells.get(cell)
            if m is None:
                row += ["", "", ""]
            else:
                row += [
                    _fmt(m["top_test_auc_mean"]),
                    _fmt(m["top_test_auc_std"]),
                    _fmt(m["recall_at_threshold"]),
                ]
        rows.append(row)
    with open(stage_dir / "table3.csv", "w", encoding="utf-8", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)

    # Subgroup breakdown of the best model's calibrated test-fold scores.
    all_sequences, _ = _load_sequences(outdir)
    sequences = _task_sequences(all_sequences, task)
    split = _read_json(outdir / "train" / "split.json")
    patient_folds = {pid: name for name, pids in split["patients"].items() for pid in pids}
    scores_by_event: dict[str, float] = {}
    with open(outdir / "evaluate" / f"scores_{best_cell}.csv", "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["fold"] == "test":
                scores_by_event[row["event_id"]] = float(row["prob_cal"])
    test_sequences = [s for s in sequences if s.event_id in scores_by_event]
    scores = np.array([scores_by_event[s.event_id] for s in test_sequences])
    labels = np.array([int(s.label_for(task)) for s in test_sequences])
    n_proc_columns = _read_json(outdir / "featurize" / "features.json")["n_proc_columns"]
    groups: dict[str, list[str]] = {}
    for key in ("age_range", "gender", "race", "medicare_status", "charlson_band"):
        groups[key] = [str(s.subgroup[key]) for s in test_sequences]
    for cat in range(n_proc_columns):
        label = "other" if cat == n_proc_columns - 1 else str(cat)
        groups[f"proc_ccs_{label}"] = [
            "present" if cat in set(s.subgroup["proc_ccs"]) else "absent" for s in test_sequences
        ]
    report_rows = subgroup_report(scores, labels, groups, n_min=cfg["evaluate"]["n_min"], threshold=cfg["evaluate"]["threshold"])
    with open(stage_dir / "subgroups.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["partition", "group", "n", "prevalence", "auc", "recall", "small_n"])
        for row in report_rows:
            writer.writerow(
                [
                    row["partition"],
                    row["group"],
                    row["n"],
                    _fmt(row["prevalence"]),
                    _fmt(row["auc"]),
                    _fmt(row["recall"]),
                    int(row["small_n"]),
                ]
            )
    _write_json(
        stage_dir / "report_info.json",
        {"task": task, "best_cell": best_cell, "n_test_events": int(len(test_sequences))},
    )
    write_manifest(
        outdir,
        "report",
        cfg,
        inputs=inputs,
        outputs=["report/table3.csv", "report/subgroups.csv", "report/report_info.json"],
    )
    print(f"report: table3.csv ({len(rows) - 1} rows), subgroups.csv ({len(report_rows)} rows), best cell {best_cell}")


def stage_importance(cfg: dict) -> None:
    outdir = Path(cfg["outdir"])
    inputs = require_inputs(outdir, ["evaluate/metrics.json"])
    metrics_all = _read_json(outdir / "evaluate" / "metrics.json")
    best_cell = metrics_all["best_cell"]
    inputs.update(
        require_inputs(
            outdir,
            [
                "featurize/sequences.jsonl",
                "featurize/features.json",
                f"evaluate/scores_{best_cell}.csv",
            ],
        )
    )
    stage_dir = outdir / "importance"
    stage_dir.mkdir(parents=True, exist_ok=True)
    task = cfg["task"]
    threshold = cfg["evaluate"]["threshold"]
    all_sequences, features_meta = _load_sequences(outdir)
    sequences = _task_sequences(all_sequences, task)
    scores_by_event: dict[str, float] = {}
    with open(outdir / "evaluate" / f"scores_{best_cell}.csv", "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            scores_by_event[row["event_id"]] = float(row["prob_cal"])
    scores = np.array([scores_by_event[s.event_id] for s in sequences])
    table = flatten(
        sequences,
        features_meta["n_dx_columns"],
        features_meta["n_proc_columns"],
        features_meta["z_names"],
    )
    rows = surrogate_importance(table.matrix, table.names, table.categories, scores, threshold=threshold)
    with open(stage_dir / "importance.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["category", "feature", "importance"])
        for row in rows:
            writer.writerow([row["category"], row["feature"], f"{row['importance']:.6f}"])
    _write_json(
        stage_dir / "importance.json",
        {
            "task": task,
            "cell": best_cell,
            "explains": (
                "logistic surrogate fit on all scored events against the model's "
                f"predictions binarized at {threshold}; importances rank what drives "
                "the model, not outcome associations"
            ),
            "n_events": len(sequences),
            "n_predicted_positive": int((scores >= threshold).sum()),
        },
    )
    write_manifest(
        outdir, "importance", cfg, inputs=inputs, outputs=["importance/importance.csv", "importance/importance.json"]
    )
    print(f"importance: {len(rows)} features ranked from cell {best_cell}")


STAGE_FUNCS = {
    "generate": stage_generate,
    "cohort": stage_cohort,
    "featurize": stage_featurize,
    "train": stage_train,
    "calibrate": stage_calibrate,
    "evaluate": stage_evaluate,
    "report": stage_report,
    "importance": stage_importance,
}


def stage_pipeline(cfg: dict) -> None:
    for stage in STAGES:
        STAGE_FUNCS[stage](cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqfuse",
        description="Readmission/mortality prediction pipeline over longitudinal claims.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    demo = sub.add_parser("demo-config", help="write a ready-to-run configuration")
    demo.add_argument("--out", default="-", help="path for the config JSON ('-' for stdout)")
    demo.add_argument("--outdir", default="runs/demo", help="run directory the config points at")
    demo.add_argument("--patients", type=int, default=2000, help="synthetic population size")
    demo.add_argument("--seed", type=int, default=20110901, help="root seed")

    for name in (*STAGES, "pipeline"):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "pipeline" else "run all stages in order")
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--outdir", default=None, help="override the config's run directory")
        p.add_argument("--jobs", type=int, default=None, help="worker threads for the hyperparameter grid")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "demo-config":
            cfg = default_config(outdir=args.outdir, n_patients=args.patients, seed=args.seed)
            text = json.dumps(cfg, indent=2, sort_keys=True) + "\n"
            if args.out == "-":
                sys.stdout.write(text)
            else:
                Path(args.out).parent.mkdir(parents=True, exist_ok=True)
                Path(args.out).write_text(text, encoding="utf-8")
                print(f"wrote {args.out}")
            return 0
        cfg = load_config(args.config, outdir=args.outdir, jobs=args.jobs)
        if args.command == "pipeline":
            stage_pipeline(cfg)
        else:
            STAGE_FUNCS[args.command](cfg)
        return 0
    except PrerequisiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericsError, MetricUndefinedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ValidationError, CalibrationError, SeqfuseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
