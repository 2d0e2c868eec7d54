"""Folds, oversampling, the training loop, and hyperparameter search.

Splitting is patient-level and stratified by each patient's count of
positive events (0, 1, 2+), with largest-remainder rounding so every fold
lands within one patient of its exact share. All shuffling and trial seeds
derive from one root seed, and grid results are ranked by validation AUC
with the config hash as the tiebreak, so search output is independent of
execution order.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Sgd, Tape, backward
from .errors import MetricUndefinedError, NumericsError, ValidationError
from .metrics import auc
from .model import ModelConfig, SeqFuseModel
from .rng import Xoshiro256, derive_seed

FOLD_NAMES = ("train", "valid", "calibration", "test")
DEFAULT_FRACTIONS = (0.70, 0.15, 0.05, 0.10)


def split_patients(
    positive_events: dict[str, int],
    seed: int,
    fractions: tuple[float, float, float, float] = DEFAULT_FRACTIONS,
) -> tuple[dict[str, list[str]], list[str]]:
    """Assigns each patient to one fold, stratified by 0/1/2+ positives.

    Within a stratum, patients are shuffled and quotas are filled by
    largest remainder, so each fold holds floor or ceil of its exact share.
    Returns the fold lists and warnings for empty strata.
    """
    if len(fractions) != len(FOLD_NAMES):
        raise ValidationError(f"need {len(FOLD_NAMES)} fractions, got {len(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValidationError("fold fractions must be non-negative and sum to 1")
    strata: dict[int, list[str]] = {0: [], 1: [], 2: []}
    for pid in sorted(positive_events):
        strata[min(positive_events[pid], 2)].append(pid)
    folds: dict[str, list[str]] = {name: [] for name in FOLD_NAMES}
    warnings: list[str] = []
    for stratum, ids in sorted(strata.items()):
        if not ids:
            warnings.append(f"stratum {stratum} is empty")
            continue
        rng = Xoshiro256(derive_seed(seed, "split", stratum))
        rng.shuffle(ids)
        n = len(ids)
        exact = [n * f for f in fractions]
        counts = [int(e) for e in exact]
        leftover = n - sum(counts)
        by_remainder = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - counts[i]), i))
        for i in by_remainder[:leftover]:
            counts[i] += 1
        start = 0
        for name, count in zip(FOLD_NAMES, counts):
            folds[name].extend(ids[start : start + count])
            start += count
    for name in FOLD_NAMES:
        folds[name].sort()
    return folds, warnings


def fit_standardizer(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column means and stds from the training fold only; constant columns
    get std 1 so they standardize to exactly zero."""
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return mean, std


def apply_standardizer(matrix: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (matrix - mean) / std


def smote(
    features: np.ndarray,
    labels: np.ndarray,
    seed: int,
    k: int = 5,
    target_ratio: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic minority oversampling: new points interpolate between a
    minority row and one of its k nearest minority neighbors.

    Original rows come first, unchanged. With target_ratio 1.0 the classes
    balance exactly.
    """
    labels = np.asarray(labels)
    if set(np.unique(labels)) - {0, 1}:
        raise ValidationError("labels must be 0/1")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("SMOTE needs both classes present")
    minority = 1 if n_pos < n_neg else 0
    n_min = min(n_pos, n_neg)
    n_new = int(round(target_ratio * max(n_pos, n_neg))) - n_min
    if n_new <= 0:
        return features.copy(), labels.copy()
    if n_min < k + 1:
        raise ValidationError(
            f"SMOTE with k={k} needs at least {k + 1} minority rows, got {n_min}; "
            "lower k or rebalance by duplication"
        )
    rng = Xoshiro256(derive_seed(seed, "smote"))
    rows = features[labels == minority]
    d2 = ((rows[:, None, :] - rows[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    neighbors = np.argsort(d2, axis=1, kind="mergesort")[:, :k]
    synthetic = np.empty((n_new, features.shape[1]))
    for s in range(n_new):
        i = rng.randint(0, n_min - 1)
        j = int(neighbors[i][rng.randint(0, k - 1)])
        lam = rng.random()
        synthetic[s] = rows[i] + lam * (rows[j] - rows[i])
    out_x = np.vstack([features, synthetic])
    out_y = np.concatenate([labels, np.full(n_new, minority, dtype=labels.dtype)])
    return out_x, out_y


@dataclass
class TrainSettings:
    lr: float = 1e-2
    batch_size: int = 32
    epochs: int = 30
    patience: int = 5
    w_pos: float = 1.0
    w_neg: float = 1.0
    optimizer: str = "adam"

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValidationError("lr, batch_size, and epochs must be positive")
        if self.patience < 0:
            raise ValidationError("patience must be non-negative")
        if self.w_pos <= 0 or self.w_neg <= 0:
            raise ValidationError("class weights must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"optimizer {self.optimizer!r} must be 'adam' or 'sgd'")


@dataclass
class TrainResult:
    status: str
    best_valid_auc: float
    best_epoch: int
    epochs_run: int
    curve: list[dict] = field(default_factory=list)
    failure: str | None = None


def _valid_auc(model: SeqFuseModel, steps, z, labels, idx) -> float:
    z_rows = z[idx] if z is not None else None
    probs, _, _ = model.predict([steps[i] for i in idx], z_rows)
    try:
        return auc(probs, labels[idx])
    except MetricUndefinedError:
        return 0.5


def train_model(
    model: SeqFuseModel,
    steps: list,
    z: np.ndarray | None,
    labels: np.ndarray,
    train_idx: list[int],
    valid_idx: list[int],
    settings: TrainSettings,
    seed: int,
) -> TrainResult:
    """Minibatch training with early stopping on validation AUC.

    The best-epoch weights are restored into the model before returning.
    With patience p, training stops after p+1 consecutive epochs without
    improvement. A non-finite loss marks the run failed instead of raising;
    the model keeps the best weights seen before the blow-up.
    """
    settings.validate()
    if not train_idx or not valid_idx:
        raise ValidationError("train and valid folds must be non-empty")
    labels = np.asarray(labels, dtype=np.float64)
    opt_cls = Adam if settings.optimizer == "adam" else Sgd
    optimizer = opt_cls(model.trainable(), lr=settings.lr)
    rng = Xoshiro256(derive_seed(seed, "shuffle"))
    best_auc = _valid_auc(model, steps, z, labels, valid_idx)
    best_epoch = 0
    snapshot = {name: t.data.copy() for name, t in model.params.items()}
    curve = [{"epoch": 0, "train_loss": None, "valid_auc": best_auc}]
    no_improve = 0
    status, failure = "ok", None
    order = list(train_idx)
    epochs_run = 0
    for epoch in range(1, settings.epochs + 1):
        rng.shuffle(order)
        epoch_loss = 0.0
        try:
            for start in range(0, len(order), settings.batch_size):
                batch = order[start : start + settings.batch_size]
                z_rows = z[batch] if z is not None else None
                with Tape() as tape:
                    loss, _ = model.loss(
                        [steps[i] for i in batch],
                        z_rows,
                        labels[batch],
                        w_pos=settings.w_pos,
                        w_neg=settings.w_neg,
                    )
                    backward(tape, loss)
                optimizer.step()
                optimizer.zero_grad()
                epoch_loss += loss.item() * len(batch)
        except NumericsError as exc:
            status, failure = "failed", str(exc)
            break
        epochs_run = epoch
        valid_auc = _valid_auc(model, steps, z, labels, valid_idx)
        curve.append({"epoch": epoch, "train_loss": epoch_loss / len(order), "valid_auc": valid_auc})
        if valid_auc > best_auc + 1e-12:
            best_auc = valid_auc
            best_epoch = epoch
            snapshot = {name: t.data.copy() for name, t in model.params.items()}
            no_improve = 0
        else:
            no_improve += 1
            if no_improve > settings.patience:
                break
    for name, tensor in model.params.items():
        tensor.data = snapshot[name]
        tensor.zero_grad()
    return TrainResult(
        status=status,
        best_valid_auc=best_auc,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        curve=curve,
        failure=failure,
    )


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass
class Trial:
    config: dict
    config_hash: str
    seed: int
    status: str
    valid_auc: float | None
    test_auc: float | None
    payload: dict = field(default_factory=dict)


@dataclass
class GridSearchResult:
    trials: list[Trial]
    ranked: list[Trial]
    top_test_mean: float | None
    top_test_std: float | None
    n_top: int

    @property
    def best(self) -> Trial | None:
        return self.ranked[0] if self.ranked else None


def enumerate_grid(axes: dict[str, list]) -> list[dict]:
    if not axes:
        return [{}]
    keys = sorted(axes)
    for key in keys:
        if not axes[key]:
            raise ValidationError(f"grid axis {key!r} is empty")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def make_deep_runner(
    steps: list,
    z: np.ndarray,
    labels: np.ndarray,
    fold_idx: dict[str, list[int]],
    *,
    input_dim: int,
    domain_dim: int,
    fusion: str,
    embedding: str = "linear",
    pretrained: np.ndarray | None = None,
    epochs: int = 30,
    patience: int = 5,
    w_neg: float = 1.0,
    optimizer: str = "adam",
):
    """Binds the data and task so grid_search only sees (config, seed).

    Each trial standardizes z on the training fold, trains a fresh model,
    and reports validation/test AUC plus everything needed to persist the
    winner. A numerics blow-up returns a failed trial instead of raising.
    """
    labels = np.asarray(labels, dtype=np.float64)
    use_z = fusion != "none"

    def run(config: dict, seed: int) -> dict:
        model_config = ModelConfig(
            input_dim=input_dim,
            embed_dim=int(config["embed_dim"]),
            hidden_dim=int(config["hidden_dim"]),
            domain_dim=domain_dim,
            n_gru_layers=int(config.get("n_gru_layers", 1)),
            fusion=fusion,
            mlp_hidden_dims=tuple(config.get("mlp_hidden_dims", ())),
            embedding=embedding,
            seed=seed,
        )
        settings = TrainSettings(
            lr=float(config["lr"]),
            batch_size=int(config.get("batch_size", 32)),
            epochs=epochs,
            patience=patience,
            w_pos=float(config.get("w_pos", 1.0)),
            w_neg=w_neg,
            optimizer=optimizer,
        )
        mean, std = fit_standardizer(z[fold_idx["train"]])
        z_std = apply_standardizer(z, mean, std) if use_z else None
        try:
            model = SeqFuseModel(model_config, pretrained_embedding=pretrained)
            result = train_model(
                model, steps, z_std, labels, fold_idx["train"], fold_idx["valid"], settings, seed
            )
        except NumericsError as exc:
            return {"status": "failed", "failure": str(exc)}
        if result.status != "ok":
            return {"status": "failed", "failure": result.failure}
        test_idx = fold_idx["test"]
        probs, _, _ = model.predict(
            [steps[i] for i in test_idx], z_std[test_idx] if use_z else None
        )
        try:
            test_auc = auc(probs, labels[test_idx])
        except MetricUndefinedError:
            test_auc = 0.5
        return {
            "status": "ok",
            "valid_auc": result.best_valid_auc,
            "test_auc": test_auc,
            "model": model,
            "z_mean": mean,
            "z_std": std,
            "best_epoch": result.best_epoch,
            "epochs_run": result.epochs_run,
            "curve": result.curve,
        }

    return run


def grid_search(
    axes: dict[str, list],
    run_trial,
    base_seed: int,
    jobs: int = 1,
    top_n: int = 10,
) -> GridSearchResult:
    """Runs every config in the grid; ranking ignores execution order.

    `run_trial(config, seed)` returns a dict with at least status,
    valid_auc, and test_auc. Each trial's seed derives from the root seed
    and its config hash. Failed trials are kept for the record but excluded
    from ranking and from the top-N summary.
    """
    configs = enumerate_grid(axes)
    hashes = [config_hash(c) for c in configs]
    if len(set(hashes)) != len(hashes):
        raise ValidationError("duplicate configs in grid")
    seeds = [derive_seed(base_seed, "trial", h) for h in hashes]

    def run(i: int) -> dict:
        return run_trial(configs[i], seeds[i])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(run, range(len(configs))))
    else:
        outputs = [run(i) for i in range(len(configs))]

    trials = []
    for config, h, seed, out in zip(configs, hashes, seeds, outputs):
        payload = {k: v for k, v in out.items() if k not in ("status", "valid_auc", "test_auc")}
        trials.append(
            Trial(
                config=config,
                config_hash=h,
                seed=seed,
                status=out["status"],
                valid_auc=out.get("valid_auc"),
                test_auc=out.get("test_auc"),
                payload=payload,
            )
        )
    ranked = sorted(
        (t for t in trials if t.status == "ok"),
        key=lambda t: (-t.valid_auc, t.config_hash),
    )
    top = ranked[:top_n]
    if top:
        values = np.array([t.test_auc for t in top], dtype=np.float64)
        mean, std = float(values.mean()), float(values.std())
    else:
        mean, std = None, None
    return GridSearchResult(trials=trials, ranked=ranked, top_test_mean=mean, top_test_std=std, n_top=len(top))
