"""Per-fold training loop, cross-validation orchestration, checkpointing.

One optimizer step per bag; bags are revisited in a fresh seeded shuffle
every epoch.  Epoch-end validation (accuracy and weighted F1 on the held
fold) drives the plateau scheduler and early stopping, and the returned
checkpoint is always the epoch with the best validation F1.  Folds are
independent experiments: each draws its weights, shuffles, and dropout
masks from fold-specific streams, and class weights come from the fold's
training partition only, so nothing leaks from the validation side.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from raamil.autodiff import backward, forward
from raamil.bags import NUM_CLASSES, TokenBag
from raamil.folds import FoldPlan, stratified_kfold
from raamil.manifest import DatasetManifest
from raamil.metrics import confusion_and_f1, format_mean_std
from raamil.mil import (Checkpoint, MilParams, build_bag_graph, init_mil_params,
                        param_dict, save_checkpoint)
from raamil.objective import LossConfig, class_weights_from_counts, smoothed_target
from raamil.optim import (EarlyStopState, PlateauState, adamw_step, clip_gradients,
                          early_stop_update, init_adamw, plateau_update)
from raamil.raa import RaaParams, init_raa_params
from raamil.rng import Stream, stream


class TrainingError(RuntimeError):
    """Invalid training setup: bad partitions, leakage, dim mismatch."""


@dataclass
class TrainConfig:
    """Every knob of a cross-validated run; defaults are the documented
    baseline and the JSON snapshot of this object reproduces a run."""

    folds: int = 5
    seed: int = 7
    max_epochs: int = 100
    raa_enabled: bool = True
    # optimizer
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2
    grad_clip: float = 0.0          # 0 disables clipping
    # schedule
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6
    early_stop_patience: int = 15
    # objective
    gamma_f: float = 2.0
    label_smoothing: float = 0.05
    # architecture
    dropout: float = 0.25
    attn_hidden: int = 128
    clf_hidden: int = 128
    raa_hidden: int = 16
    k: int = 3
    include_self: bool = True
    # patients reserved for final testing, never seen by any fold
    test_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError(f"cross-validation needs >= 2 folds, got {self.folds}")
        if self.max_epochs < 1:
            raise ValueError(f"epoch cap must be >= 1, got {self.max_epochs}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        self.test_ids = tuple(self.test_ids)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["test_ids"] = list(self.test_ids)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class RunHistory:
    """Per-epoch training curve; all columns stay the same length."""

    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def append(self, epoch: int, train_loss: float, val_acc: float,
               val_f1: float, lr: float) -> None:
        self.epochs.append(int(epoch))
        self.train_loss.append(float(train_loss))
        self.val_acc.append(float(val_acc))
        self.val_f1.append(float(val_f1))
        self.lr.append(float(lr))

    def __len__(self) -> int:
        return len(self.epochs)

    def to_csv(self, path) -> None:
        lines = ["epoch,train_loss,val_acc,val_f1,lr"]
        for i in range(len(self.epochs)):
            lines.append(f"{self.epochs[i]},{self.train_loss[i]:.17g},"
                         f"{self.val_acc[i]:.17g},{self.val_f1[i]:.17g},{self.lr[i]:.17g}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "RunHistory":
        lines = Path(path).read_text().strip().splitlines()
        hist = cls()
        for line in lines[1:]:
            epoch, loss, acc, f1, lr = line.split(",")
            hist.append(int(epoch), float(loss), float(acc), float(f1), float(lr))
        return hist


class _BagModel:
    """Caches one computation graph per bag size; parameter nodes alias the
    live arrays, so optimizer updates are visible without rebuilding."""

    def __init__(self, raa: RaaParams | None, mil: MilParams, rows: int, cols: int,
                 loss: LossConfig | None = None, dropout: bool = False):
        self.raa = raa
        self.mil = mil
        self.rows = rows
        self.cols = cols
        self.loss = loss
        self.dropout = dropout
        self._graphs = {}

    def graph(self, num_patches: int):
        g = self._graphs.get(num_patches)
        if g is None:
            g = build_bag_graph(self.raa, self.mil, num_patches, self.rows, self.cols,
                                dropout=self.dropout, loss=self.loss)
            self._graphs[num_patches] = g
        return g

    def run(self, bag: TokenBag, extra_inputs: dict | None = None) -> dict:
        g = self.graph(bag.num_patches)
        inputs = {"tokens": bag.stacked().reshape(-1, bag.dim)}
        if extra_inputs:
            inputs.update(extra_inputs)
        out = forward(g, inputs)
        out["_graph"] = g
        return out


def _dropout_mask(rng: Stream, dim: int, rate: float) -> np.ndarray:
    """Inverted-dropout mask: kept coordinates scale by 1/(1-rate) so the
    expected embedding is unchanged."""
    keep = rng.uniform(dim) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def _init_model(dim: int, cfg: TrainConfig, fold_id: int) -> tuple[RaaParams | None, MilParams]:
    rng = stream(cfg.seed, "init", fold_id)
    raa = None
    if cfg.raa_enabled:
        raa = init_raa_params(dim, rng, hidden=cfg.raa_hidden, k=cfg.k,
                              include_self=cfg.include_self)
    mil = init_mil_params(dim, rng, attn_hidden=cfg.attn_hidden,
                          clf_hidden=cfg.clf_hidden, dropout=cfg.dropout)
    return raa, mil


def _check_partitions(train_ids, val_ids, test_ids):
    train, val, test = set(train_ids), set(val_ids), set(test_ids)
    if not train or not val:
        raise TrainingError(
            f"empty partition: {len(train)} train / {len(val)} validation patients")
    if train & val:
        raise TrainingError(f"train/validation overlap: {sorted(train & val)[:5]}")
    touched = (train | val) & test
    if touched:
        raise TrainingError(f"test patients inside the CV pool: {sorted(touched)[:5]}")


def _evaluate(model: _BagModel, bags: dict[str, TokenBag], ids: list[str]):
    """Predictions and probabilities with dropout off."""
    probs = np.empty((len(ids), NUM_CLASSES))
    truth = np.empty(len(ids), dtype=np.int64)
    for i, pid in enumerate(ids):
        probs[i] = model.run(bags[pid])["probs"]
        truth[i] = bags[pid].label
    preds = np.argmax(probs, axis=1)
    return preds, probs, truth


def train_fold(manifest: DatasetManifest, plan: FoldPlan, fold_id: int,
               cfg: TrainConfig) -> tuple[Checkpoint, RunHistory]:
    """Train one fold to its best-validation-F1 epoch.

    Deterministic in (manifest contents, plan, fold_id, cfg): reruns yield
    bitwise-identical checkpoints and histories.
    """
    if not 0 <= fold_id < plan.k:
        raise TrainingError(f"fold {fold_id} outside plan with k={plan.k}")
    train_ids = plan.training_ids(fold_id)
    val_ids = plan.validation_ids(fold_id)
    _check_partitions(train_ids, val_ids, cfg.test_ids)

    bags = {pid: manifest.load_bag(pid) for pid in train_ids + val_ids}
    raa, mil = _init_model(manifest.dim, cfg, fold_id)
    params = param_dict(raa, mil)

    counts = manifest.class_counts(train_ids)
    loss_cfg = LossConfig(gamma_f=cfg.gamma_f, epsilon=cfg.label_smoothing,
                          class_weights=class_weights_from_counts(counts))

    opt = init_adamw(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                     eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    plateau = PlateauState(lr=cfg.lr, factor=cfg.plateau_factor,
                           patience=cfg.plateau_patience,
                           threshold=cfg.plateau_threshold, min_lr=cfg.min_lr)
    stopper = EarlyStopState(patience=cfg.early_stop_patience)

    order_rng = stream(cfg.seed, "order", fold_id)
    drop_rng = stream(cfg.seed, "dropout", fold_id)
    use_dropout = cfg.dropout > 0
    train_model = _BagModel(raa, mil, manifest.rows, manifest.cols,
                            loss=loss_cfg, dropout=use_dropout)
    eval_model = _BagModel(raa, mil, manifest.rows, manifest.cols)

    history = RunHistory()
    best_values: dict[str, np.ndarray] = {}
    best_meta: dict = {}

    for epoch in range(1, cfg.max_epochs + 1):
        epoch_lr = opt.lr
        losses = []
        for pid in order_rng.shuffle(train_ids):
            bag = bags[pid]
            extra = {"target": smoothed_target(bag.label, cfg.label_smoothing)}
            if use_dropout:
                extra["dropout_mask"] = _dropout_mask(drop_rng, manifest.dim, cfg.dropout)
            out = train_model.run(bag, extra)
            losses.append(float(out["loss"]))
            grads = backward(out["_graph"], "loss")
            if cfg.grad_clip > 0:
                clip_gradients(grads, cfg.grad_clip)
            adamw_step(params, grads, opt)

        preds, _, truth = _evaluate(eval_model, bags, val_ids)
        core = confusion_and_f1(preds, truth)
        val_acc, val_f1 = core.accuracy, core.weighted_f1

        opt.lr = plateau_update(plateau, val_f1)
        improved, stop = early_stop_update(stopper, val_f1, epoch)
        if improved:
            best_values = {name: arr.copy() for name, arr in params.items()}
            best_meta = {"fold_id": fold_id, "best_epoch": epoch,
                         "val_f1": val_f1, "val_acc": val_acc, "seed": cfg.seed}
        history.append(epoch, float(np.mean(losses)), val_acc, val_f1, epoch_lr)
        if stop:
            break

    best_meta["epochs_run"] = history.epochs[-1]
    best_raa = replace(raa, **{n: best_values["raa." + n] for n in
                               ("w1", "b1", "w2", "b2", "gamma", "ln_scale", "ln_shift")}) \
        if raa is not None else None
    best_mil = replace(mil, **{n: best_values["mil." + n] for n in
                               ("wa", "wb", "wc", "phi_w1", "phi_b1", "phi_w2", "phi_b2")})
    return Checkpoint(raa=best_raa, mil=best_mil, meta=best_meta), history


@dataclass
class CvResult:
    checkpoints: list[Checkpoint]
    histories: list[RunHistory]
    report: dict


def _aggregate_report(checkpoints: list[Checkpoint]) -> dict:
    folds = [{"fold": c.meta["fold_id"], "best_epoch": c.meta["best_epoch"],
              "val_acc": c.meta["val_acc"], "val_f1": c.meta["val_f1"]}
             for c in checkpoints]
    accs = np.array([f["val_acc"] for f in folds])
    f1s = np.array([f["val_f1"] for f in folds])
    return {
        "folds": folds,
        "mean_val_acc": float(accs.mean()),
        "std_val_acc": float(accs.std(ddof=1)),
        "mean_val_f1": float(f1s.mean()),
        "std_val_f1": float(f1s.std(ddof=1)),
        "summary": {
            "val_acc": format_mean_std(accs.mean(), accs.std(ddof=1)),
            "val_f1": format_mean_std(f1s.mean(), f1s.std(ddof=1)),
        },
    }


def run_cv(manifest: DatasetManifest, cfg: TrainConfig, plan: FoldPlan | None = None,
           out_dir=None, parallel: bool = False,
           snapshot_extra: dict | None = None) -> CvResult:
    """Train every fold and aggregate mean +/- sample std across folds.

    When `out_dir` is given it receives a config snapshot, one checkpoint
    and history per fold, and the aggregate report JSON.
    """
    if plan is None:
        pool = {pid: lbl for pid, lbl in manifest.labels.items()
                if pid not in set(cfg.test_ids)}
        plan = stratified_kfold(pool, cfg.folds, cfg.seed)
    elif plan.k != cfg.folds:
        raise TrainingError(f"fold plan has k={plan.k} but config expects {cfg.folds}")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        snapshot = {"train": cfg.to_dict(), **(snapshot_extra or {})}
        (out / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")

    def one(fold_id: int):
        return train_fold(manifest, plan, fold_id, cfg)

    if parallel:
        with ThreadPoolExecutor(max_workers=cfg.folds) as pool_exec:
            results = list(pool_exec.map(one, range(cfg.folds)))
    else:
        results = [one(f) for f in range(cfg.folds)]

    checkpoints = [r[0] for r in results]
    histories = [r[1] for r in results]
    report = _aggregate_report(checkpoints)

    if out is not None:
        for fold_id, (ckpt, hist) in enumerate(zip(checkpoints, histories)):
            save_checkpoint(out / f"fold_{fold_id}.raac", ckpt)
            hist.to_csv(out / f"fold_{fold_id}_history.csv")
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return CvResult(checkpoints=checkpoints, histories=histories, report=report)


def predict(checkpoints: list[Checkpoint], bags: list[TokenBag]) -> np.ndarray:
    """Per-fold class probabilities, shape (folds, bags, 4); dropout off."""
    if not checkpoints:
        raise TrainingError("no checkpoints to predict with")
    probs = np.empty((len(checkpoints), len(bags), NUM_CLASSES))
    if not bags:
        return probs
    for ckpt in checkpoints:
        for bag in bags:
            if bag.dim != ckpt.mil.dim:
                raise TrainingError(
                    f"bag {bag.patient_id!r} dim {bag.dim} != checkpoint dim {ckpt.mil.dim}")
    for f, ckpt in enumerate(checkpoints):
        model = _BagModel(ckpt.raa, ckpt.mil, bags[0].rows, bags[0].cols)
        for i, bag in enumerate(bags):
            probs[f, i] = model.run(bag)["probs"]
    return probs
