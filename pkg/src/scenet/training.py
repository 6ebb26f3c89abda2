"""Deterministic minibatch training with a self-contained Adam optimizer.

Determinism contract: (seed, config, data) fully determine the final
parameters and the history.  The config seed is split into independent
streams for the validation split, noise injection, and epoch shuffling,
so changing one knob does not silently reseed the others.  Noise is
injected once, into the training partition only, so held-out metrics are
always measured on clean triplets.
"""

from __future__ import annotations

import json
import hashlib
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .data import ItemTable, TripletSet, inject_noise
from .errors import ConfigError, DataError, InputError, NumericError
from .losses import LossWeights, TripletBatch, total_objective
from .model import MODES, SceModel, load_model, save_model


@dataclass(frozen=True)
class TrainConfig:
    """Everything needed to reproduce a run, minus the data files."""

    d_dim: int = 16
    n_masks: int = 4
    mode: str = "pair-visual"
    weighting: str | None = None  # None picks per-pair, or shared-triplet for triplet mode
    encoder_hidden: tuple[int, ...] = ()
    branch_hidden: tuple[int, ...] | None = None
    margin: float = 0.2
    l1: float = 5e-4
    l2: float = 5e-4
    vse: float = 5e-5
    sim: float = 5e-5
    use_vse_sim: bool = False
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    noise_fraction: float = 0.0
    val_fraction: float = 0.1
    eval_every: int = 1

    def __post_init__(self):
        if self.d_dim < 1 or self.n_masks < 1:
            raise ConfigError("d_dim and n_masks must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown branch mode {self.mode!r}")
        if self.weighting not in (None, "per-pair", "shared-triplet"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ConfigError("batch_size >= 1, epochs >= 0 and eval_every >= 1 required")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ConfigError("learning_rate and epsilon must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("moment decays must lie in [0, 1)")
        if not 0 <= self.noise_fraction <= 1:
            raise ConfigError(f"noise_fraction must lie in [0, 1], got {self.noise_fraction}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))
        if self.branch_hidden is not None:
            object.__setattr__(self, "branch_hidden", tuple(int(h) for h in self.branch_hidden))
        self.loss_weights()  # validates margin and the lambdas

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.margin, self.l1, self.l2, self.vse, self.sim)

    def resolved_weighting(self) -> str:
        if self.weighting is not None:
            return self.weighting
        return "shared-triplet" if self.mode == "triplet-visual" else "per-pair"

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown training config keys {sorted(extra)}")
        d = dict(d)
        if d.get("encoder_hidden") is not None:
            d["encoder_hidden"] = tuple(d["encoder_hidden"])
        if d.get("branch_hidden") is not None:
            d["branch_hidden"] = tuple(d["branch_hidden"])
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("ascii")).hexdigest()[:16]


@dataclass
class TrainHistory:
    """Per-epoch loss, metric snapshots, and wall-clock seconds."""

    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)

    def record_epoch(self, epoch: int, loss: float, seconds: float) -> None:
        if self.epochs and epoch <= self.epochs[-1]:
            raise ConfigError("epoch indices must increase")
        self.epochs.append(epoch)
        self.train_loss.append(loss)
        self.wall_clock.append(seconds)

    def record_snapshot(self, epoch: int, metrics: dict) -> None:
        self.snapshots.append({"epoch": epoch, **metrics})

    def val_errors(self) -> list[float]:
        return [s["val_error"] for s in self.snapshots if "val_error" in s]

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "train_loss": self.train_loss,
            "snapshots": self.snapshots,
            "wall_clock": self.wall_clock,
        }


# ------------------------------------------------------------------- adam --


def adam_step(
    params,
    state: dict | None,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> dict:
    """One bias-corrected adaptive update from the accumulated gradients.

    Mutates parameter values in place, zeroes the gradients, and returns
    the updated state (pass ``None`` the first time).
    """
    if lr <= 0 or epsilon <= 0 or not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ConfigError("adam: lr > 0, epsilon > 0, decays in [0, 1) required")
    if state is None:
        state = {
            "t": 0,
            "m": {name: np.zeros_like(t.value) for name, t in params.items()},
            "v": {name: np.zeros_like(t.value) for name, t in params.items()},
        }
    state["t"] += 1
    t = state["t"]
    for name, p in params.items():
        g = p.grad
        if g is None:
            # Parameter took no part in the step's graph (fixed-weight
            # variants leave the branch untouched); leave it alone.
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + epsilon)
    params.zero_grad()
    return state


class Adam:
    """Stateful wrapper over adam_step bound to one ParamSet."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if lr <= 0 or epsilon <= 0 or not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ConfigError("adam: lr > 0, epsilon > 0, decays in [0, 1) required")
        self.params = params
        self.lr, self.beta1, self.beta2, self.epsilon = lr, beta1, beta2, epsilon
        self.state: dict | None = None

    def step(self) -> None:
        self.state = adam_step(
            self.params, self.state, self.lr, self.beta1, self.beta2, self.epsilon
        )


# --------------------------------------------------------------- training --


def build_model(config: TrainConfig, f_dim: int, t_dim: int | None = None) -> SceModel:
    """Fresh model matching the config, initialized from the config seed."""
    return SceModel(
        f_dim=f_dim,
        d_dim=config.d_dim,
        n_masks=config.n_masks,
        mode=config.mode,
        t_dim=t_dim,
        encoder_hidden=config.encoder_hidden,
        branch_hidden=config.branch_hidden,
        seed=config.seed,
    )


def _needs_text(model: SceModel, config: TrainConfig) -> bool:
    return config.use_vse_sim or model.mode in ("pair-text", "pair-visual-text")


@dataclass
class _ResolvedTriplets:
    """Raw feature arrays for a triplet list, gathered once up front."""

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    anchor_text: np.ndarray | None
    positive_text: np.ndarray | None
    negative_text: np.ndarray | None
    label_indices: np.ndarray | None

    @classmethod
    def gather(cls, triplets: TripletSet, items: ItemTable, with_text: bool, with_labels: bool,
               label_names: list[str] | None):
        a_idx, p_idx, n_idx = triplets.index_arrays(items)
        texts = (None, None, None)
        if with_text:
            all_text = items.text_matrix()
            texts = (all_text[a_idx], all_text[p_idx], all_text[n_idx])
        labels = triplets.label_indices(label_names) if with_labels else None
        vis = items.visual_all
        return cls(vis[a_idx], vis[p_idx], vis[n_idx], *texts, labels)

    def batch(self, sel: np.ndarray) -> TripletBatch:
        pick = lambda arr: None if arr is None else arr[sel]
        return TripletBatch(
            self.anchor[sel],
            self.positive[sel],
            self.negative[sel],
            pick(self.anchor_text),
            pick(self.positive_text),
            pick(self.negative_text),
            pick(self.label_indices),
        )

    def __len__(self) -> int:
        return self.anchor.shape[0]


def holdout_error(
    model: SceModel, resolved: _ResolvedTriplets, weighting: str, chunk: int = 4096
) -> float:
    """Triplet error (ties count as errors) over pre-gathered arrays."""
    n = len(resolved)
    if n == 0:
        raise InputError("holdout set is empty")
    wrong = 0
    for lo in range(0, n, chunk):
        sel = np.arange(lo, min(lo + chunk, n))
        b = resolved.batch(sel)
        texts = None
        if b.anchor_text is not None:
            texts = (b.anchor_text, b.positive_text, b.negative_text)
        d_pos, d_neg = model.triplet_distances(
            b.anchor, b.positive, b.negative, texts=texts,
            weighting=weighting, label_indices=b.label_indices,
        )
        wrong += int(np.sum(d_pos >= d_neg))
    return wrong / n


def train(
    model: SceModel, items: ItemTable, triplets: TripletSet, config: TrainConfig
) -> tuple[SceModel, TrainHistory]:
    """Run the configured number of shuffled-minibatch epochs in place."""
    if model.f_dim != items.f_dim:
        raise ConfigError(f"model expects F={model.f_dim} but items have F={items.f_dim}")
    if len(triplets) == 0:
        raise InputError("training triplet set is empty")
    with_text = _needs_text(model, config)
    if with_text and not items.has_all_text():
        raise InputError("configuration needs text features but some items have none")
    with_labels = model.branch_override == "label"
    label_names = triplets.condition_names() if with_labels else None

    split_ss, noise_ss, shuffle_ss = np.random.SeedSequence(config.seed).spawn(3)
    split_rng = np.random.default_rng(split_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)

    perm = split_rng.permutation(len(triplets))
    n_val = int(np.floor(config.val_fraction * len(triplets)))
    val_set = triplets.subset(perm[:n_val])
    train_set = triplets.subset(perm[n_val:])
    if len(train_set) == 0:
        raise InputError("validation split leaves no training triplets")
    if config.noise_fraction > 0:
        train_set = inject_noise(train_set, config.noise_fraction, items, noise_ss)

    weighting = config.resolved_weighting()
    weights = config.loss_weights()
    resolved = _ResolvedTriplets.gather(train_set, items, with_text, with_labels, label_names)
    resolved_val = None
    if n_val > 0:
        resolved_val = _ResolvedTriplets.gather(val_set, items, with_text, with_labels, label_names)

    history = TrainHistory()
    adam = Adam(model.params, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    n_train = len(resolved)
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(n_train)
        loss_sum = 0.0
        for bi, lo in enumerate(range(0, n_train, config.batch_size)):
            sel = order[lo : lo + config.batch_size]
            try:
                loss = total_objective(
                    model, resolved.batch(sel), weights, config.use_vse_sim, weighting
                )
                adam.step()
            except (NumericError, InputError) as exc:
                if isinstance(exc, DataError):
                    raise
                raise exc.__class__(f"epoch {epoch}, batch {bi}: {exc}") from exc
            loss_sum += loss * sel.shape[0]
        for name, p in model.params.items():
            if not np.all(np.isfinite(p.value)):
                raise NumericError(f"parameter {name!r} became non-finite after epoch {epoch}")
        history.record_epoch(epoch, loss_sum / n_train, time.perf_counter() - started)
        if resolved_val is not None and epoch % config.eval_every == 0:
            history.record_snapshot(
                epoch, {"val_error": holdout_error(model, resolved_val, weighting)}
            )
    return model, history


def save_checkpoint(model: SceModel, path) -> None:
    save_model(model, path)


def load_checkpoint(path) -> SceModel:
    return load_model(path)
