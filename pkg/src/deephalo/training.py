"""Loss functions, Adam, the training loop, and evaluation metrics."""

from __future__ import annotations

import csv
import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

LOSSES = ("nll", "mse_onehot")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    """Loss or a gradient became non-finite."""


@dataclass
class TrainConfig:
    loss: str = "nll"
    learning_rate: float = 1e-3
    batch_size: int = 0  # 0 = full batch
    max_epochs: int = 200
    patience: int = 0  # 0 = no early stopping
    seed: int = 0
    lr_schedule: tuple[float, float, int] | None = None  # (rate1, rate2, switch_epoch)
    clip_norm: float = 0.0  # 0 = no clipping

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.lr_schedule is not None:
            r1, r2, switch = self.lr_schedule
            if r1 <= 0 or r2 <= 0:
                raise ValueError("schedule rates must be positive")
            if switch < 1:
                raise ValueError("schedule switch epoch must be >= 1")
        if self.patience < 0 or self.patience > self.max_epochs:
            raise ValueError("patience must lie in [0, max_epochs]")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")

    def rate_for_epoch(self, epoch: int) -> float:
        if self.lr_schedule is None:
            return self.learning_rate
        rate1, rate2, switch = self.lr_schedule
        return rate1 if epoch < switch else rate2


@dataclass
class Metrics:
    nll: float
    accuracy: float
    rmse: float


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_nll: float
    lr: float
    wall_ms: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = 0

    def digest(self) -> str:
        """Hash of the deterministic columns (timing excluded)."""
        h = hashlib.sha256()
        for r in self.records:
            h.update(f"{r.epoch},{r.train_loss!r},{r.val_nll!r},{r.lr!r};".encode())
        return h.hexdigest()


def nll_loss(probabilities: np.ndarray, chosen_slot: int) -> float:
    p = probabilities[chosen_slot]
    if p <= 0.0:
        raise ValueError(
            f"chosen slot {chosen_slot} has probability 0; data and model disagree"
        )
    return -math.log(p)


def mse_onehot_loss(probabilities: np.ndarray, chosen_slot: int, real_slots) -> float:
    real_slots = np.asarray(real_slots)
    onehot = np.zeros_like(probabilities)
    onehot[chosen_slot] = 1.0
    diff = probabilities[real_slots] - onehot[real_slots]
    return float(diff @ diff) / real_slots.size


class AdamState:
    """First/second moment buffers, keyed by parameter-group name."""

    def __init__(self, trainables):
        self.m = {name: np.zeros_like(arr) for name, arr in trainables}
        self.v = {name: np.zeros_like(arr) for name, arr in trainables}


def adam_step(
    trainables,
    grads: dict[str, np.ndarray],
    state: AdamState,
    t: int,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected adaptive-moment update, in place."""
    for name, arr in trainables:
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient in group '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        arr -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor


def _batch_gradients(model, batch, loss_kind):
    nodes = model.make_param_nodes(trainable=True)
    loss = model.loss_node(nodes, batch, loss_kind)
    ad.backward(loss)
    grads = {name: nodes[name].grad for name, _ in model.trainables()}
    return float(loss.value[0, 0]), grads


def train(model, dataset, config: TrainConfig):
    """Seeded mini-batch training with optional early stopping.

    Validation NLL drives early stopping regardless of the training loss;
    when no validation split exists the training observations stand in.
    With patience enabled the best-validation weights are restored at the
    end.  Returns ``(model, History)``.
    """
    train_obs = dataset.observations_for("train")
    if not train_obs:
        raise ValueError("empty training split")
    val_obs = None
    if dataset.splits is not None and dataset.splits.get("val"):
        val_obs = dataset.observations_for("val")

    rng = np.random.default_rng(config.seed)
    state = AdamState(model.trainables())
    history = History()
    best_val = math.inf
    best_snapshot = None
    bad_epochs = 0
    t = 0
    n = len(train_obs)

    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        lr = config.rate_for_epoch(epoch)
        order = rng.permutation(n)
        step = n if config.batch_size == 0 else config.batch_size
        epoch_losses = []
        for lo in range(0, n, step):
            batch = [train_obs[i] for i in order[lo : lo + step]]
            loss_value, grads = _batch_gradients(model, batch, config.loss)
            if not math.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {lo // step}"
                )
            if config.clip_norm > 0:
                _clip_gradients(grads, config.clip_norm)
            t += 1
            adam_step(model.trainables(), grads, state, t, lr)
            epoch_losses.append(loss_value * len(batch))
        train_loss = math.fsum(epoch_losses) / n

        val_nll = _mean_nll(model, val_obs if val_obs is not None else train_obs)
        wall_ms = (time.perf_counter() - start) * 1000.0
        history.records.append(EpochRecord(epoch, train_loss, val_nll, lr, wall_ms))

        if config.patience > 0:
            if val_nll < best_val:
                best_val = val_nll
                best_snapshot = model.snapshot()
                history.best_epoch = epoch
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= config.patience:
                    history.stopped_early = True
                    break
    if best_snapshot is not None:
        model.restore(best_snapshot)
    if history.best_epoch == 0 and history.records:
        history.best_epoch = history.records[-1].epoch
    return model, history


def _grouped_predictions(model, observations):
    """One prediction per distinct offered configuration."""
    groups: dict = {}
    for obs in observations:
        key = model.group_key(obs)
        if key not in groups:
            probs, slots, _ = model.predict(obs)
            groups[key] = [probs, slots, []]
        groups[key][2].append(obs)
    return groups


def _mean_nll(model, observations) -> float:
    total = []
    for probs, slots, members in _grouped_predictions(model, observations).values():
        for obs in members:
            total.append(nll_loss(probs, model.chosen_slot(obs)))
    return math.fsum(total) / len(observations)


def evaluate(model, dataset, split: str | None = None) -> Metrics:
    """Mean NLL, top-1 accuracy (lowest slot wins ties), frequency RMSE."""
    observations = dataset.observations_for(split)
    if not observations:
        raise ValueError("cannot evaluate an empty dataset")
    groups = _grouped_predictions(model, observations)
    nll_terms = []
    hits = 0
    sq_err = []
    slot_count = 0
    for probs, slots, members in groups.values():
        predicted_slot = int(np.argmax(probs))
        freq = np.zeros(slots.size)
        slot_pos = {int(s): i for i, s in enumerate(slots)}
        for obs in members:
            chosen_slot = model.chosen_slot(obs)
            nll_terms.append(nll_loss(probs, chosen_slot))
            hits += int(predicted_slot == chosen_slot)
            freq[slot_pos[chosen_slot]] += 1.0
        freq /= len(members)
        diff = probs[slots] - freq
        sq_err.extend((diff * diff).tolist())
        slot_count += slots.size
    return Metrics(
        nll=math.fsum(nll_terms) / len(observations),
        accuracy=hits / len(observations),
        rmse=math.sqrt(math.fsum(sq_err) / slot_count),
    )


def rmse_vs_frequencies(model, table) -> float:
    """RMSE between model probabilities and a per-set frequency table.

    Squared errors pool over every (set, slot) pair before the root.
    """
    if not table:
        raise ValueError("empty frequency table")
    sq_err = []
    slots = 0
    for ids, freq in table.items():
        ids = tuple(ids)
        probs = model.probabilities(ids)
        diff = probs[list(ids)] - np.asarray(freq, dtype=float)
        sq_err.extend((diff * diff).tolist())
        slots += len(ids)
    return math.sqrt(math.fsum(sq_err) / slots)


def write_history_csv(history: History, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_nll", "lr", "wall_ms"])
        for r in history.records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_nll), repr(r.lr), f"{r.wall_ms:.3f}"])
