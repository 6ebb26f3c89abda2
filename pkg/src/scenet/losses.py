"""Training objectives.

The composite objective is a batch-mean triplet hinge on the final
(condition-weighted) embeddings plus an l1 penalty on the mask bank and an
l2 penalty on the general embeddings.  Two optional terms tie text into
the general space: a visual-semantic hinge that pulls each image toward
its own description and away from the other two in the triplet, and a
similarity hinge that keeps the two same-category items of a triplet
closer to each other than the anchor is to the positive.

Scalar forms here are the reference definitions used by the tests; the
tensor forms build the differentiable batch objective for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, InputError
from .model import SceModel


@dataclass(frozen=True)
class LossWeights:
    """Hinge margin and the four penalty coefficients."""

    margin: float = 0.2
    l1: float = 5e-4
    l2: float = 5e-4
    vse: float = 5e-5
    sim: float = 5e-5

    def __post_init__(self):
        for name in ("margin", "l1", "l2", "vse", "sim"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {v!r}")

    def to_dict(self) -> dict:
        return {"margin": self.margin, "l1": self.l1, "l2": self.l2, "vse": self.vse, "sim": self.sim}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {"margin", "l1", "l2", "vse", "sim"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown loss weight keys {sorted(extra)}")
        return cls(**d)


@dataclass
class TripletBatch:
    """Resolved feature arrays for a batch of triplets, shapes (B, F) / (B, T)."""

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    anchor_text: np.ndarray | None = None
    positive_text: np.ndarray | None = None
    negative_text: np.ndarray | None = None
    label_indices: np.ndarray | None = None

    def __len__(self) -> int:
        return self.anchor.shape[0]

    def has_text(self) -> bool:
        return (
            self.anchor_text is not None
            and self.positive_text is not None
            and self.negative_text is not None
        )


# ------------------------------------------------------- scalar reference --


def triplet_loss(d_pos: float, d_neg: float, margin: float) -> float:
    """Hinge on the distance gap: zero once the negative is margin-farther."""
    if d_pos < 0 or d_neg < 0:
        raise ContractError(f"distances must be nonnegative, got {d_pos!r}, {d_neg!r}")
    return max(0.0, d_pos - d_neg + margin)


def l1_mask_penalty(bank) -> float:
    """Mean absolute value over all mask entries."""
    bank = np.asarray(bank, dtype=np.float64)
    return float(np.mean(np.abs(bank)))


def l2_embedding_penalty(v_batch) -> float:
    """Mean squared Euclidean norm over a batch of general embeddings."""
    arr = np.asarray(v_batch, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.size == 0:
        raise InputError("l2_embedding_penalty: empty batch")
    return float(np.mean(np.sum(arr * arr, axis=-1)))


def _check_same_dim(*vs):
    shapes = {np.asarray(v).shape for v in vs}
    if len(shapes) != 1:
        raise DimensionError(f"vectors disagree in shape: {sorted(shapes)}")


def vse_loss(v_i, t_proj_i, t_proj_j, t_proj_k, margin: float) -> float:
    """Both hinges for one anchor: own description beats the other two by the margin."""
    _check_same_dim(v_i, t_proj_i, t_proj_j, t_proj_k)
    v_i = np.asarray(v_i, dtype=np.float64)
    d_own = float(np.linalg.norm(v_i - np.asarray(t_proj_i, dtype=np.float64)))
    d_j = float(np.linalg.norm(v_i - np.asarray(t_proj_j, dtype=np.float64)))
    d_k = float(np.linalg.norm(v_i - np.asarray(t_proj_k, dtype=np.float64)))
    return max(0.0, d_own - d_j + margin) + max(0.0, d_own - d_k + margin)


def sim_loss(v_j, v_k, v_i, margin: float) -> float:
    """Hinge keeping the candidate pair (j, k) closer than anchor-to-positive."""
    _check_same_dim(v_j, v_k, v_i)
    v_j = np.asarray(v_j, dtype=np.float64)
    v_k = np.asarray(v_k, dtype=np.float64)
    v_i = np.asarray(v_i, dtype=np.float64)
    return max(0.0, float(np.linalg.norm(v_j - v_k)) - float(np.linalg.norm(v_i - v_j)) + margin)


# ------------------------------------------------------------ tensor path --


def _hinge_mean(gap: Tensor, margin: float) -> Tensor:
    return ad.mean(ad.relu(ad.add(gap, margin)))


def _sub(a: Tensor, b: Tensor) -> Tensor:
    return ad.add(a, ad.scale(b, -1.0))


def _resolve_weighting(model: SceModel, weighting: str | None) -> str:
    if weighting is None:
        return "shared-triplet" if model.mode == "triplet-visual" else "per-pair"
    if weighting not in ("per-pair", "shared-triplet"):
        raise ContractError(f"unknown weighting {weighting!r}")
    return weighting


def objective_tensor(
    model: SceModel,
    batch: TripletBatch,
    weights: LossWeights,
    use_vse_sim: bool = False,
    weighting: str | None = None,
) -> Tensor:
    """Differentiable composite objective for one batch (scalar Tensor)."""
    if len(batch) == 0:
        raise InputError("objective: empty batch")
    weighting = _resolve_weighting(model, weighting)
    needs_text = use_vse_sim or model.mode in ("pair-text", "pair-visual-text")
    if needs_text and not batch.has_text():
        raise InputError("objective: batch lacks text features required by the configuration")

    va = model.encode(batch.anchor)
    vp = model.encode(batch.positive)
    vn = model.encode(batch.negative)

    if weighting == "shared-triplet":
        if model.mode != "triplet-visual" and model.branch_override is None:
            raise ContractError("shared-triplet weighting requires the triplet-visual mode")
        w = model.condition_weights(va, vp, vn, label_indices=batch.label_indices)
        d_pos = ad.euclidean_distance(model.compose(va, w), model.compose(vp, w))
        d_neg = ad.euclidean_distance(model.compose(va, w), model.compose(vn, w))
    else:
        if model.mode == "triplet-visual" and model.branch_override is None:
            raise ContractError("per-pair weighting undefined for a triplet-input branch")
        if model.mode == "pair-text":
            w_ap = model.condition_weights(
                batch.anchor_text, batch.positive_text, label_indices=batch.label_indices
            )
            w_an = model.condition_weights(
                batch.anchor_text, batch.negative_text, label_indices=batch.label_indices
            )
        elif model.mode == "pair-visual-text":
            w_ap = model.condition_weights(
                va, batch.anchor_text, vp, batch.positive_text, label_indices=batch.label_indices
            )
            w_an = model.condition_weights(
                va, batch.anchor_text, vn, batch.negative_text, label_indices=batch.label_indices
            )
        else:
            w_ap = model.condition_weights(va, vp, label_indices=batch.label_indices)
            w_an = model.condition_weights(va, vn, label_indices=batch.label_indices)
        d_pos = ad.euclidean_distance(model.compose(va, w_ap), model.compose(vp, w_ap))
        d_neg = ad.euclidean_distance(model.compose(va, w_an), model.compose(vn, w_an))

    total = _hinge_mean(_sub(d_pos, d_neg), weights.margin)

    if weights.l1 > 0:
        total = ad.add(total, ad.scale(ad.mean(ad.absolute(model.mask_tensor)), weights.l1))
    if weights.l2 > 0:
        sq_norms = [ad.sum_lastaxis(ad.hadamard(v, v)) for v in (va, vp, vn)]
        total = ad.add(total, ad.scale(ad.mean(ad.concat(sq_norms, axis=0)), weights.l2))

    if use_vse_sim:
        if weights.vse > 0:
            ta = model.project_text(batch.anchor_text)
            tp = model.project_text(batch.positive_text)
            tn = model.project_text(batch.negative_text)
            roles = []
            for v, own, other1, other2 in (
                (va, ta, tp, tn),
                (vp, tp, ta, tn),
                (vn, tn, ta, tp),
            ):
                d_own = ad.euclidean_distance(v, own)
                h1 = _hinge_mean(_sub(d_own, ad.euclidean_distance(v, other1)), weights.margin)
                h2 = _hinge_mean(_sub(d_own, ad.euclidean_distance(v, other2)), weights.margin)
                roles.append(ad.add(h1, h2))
            vse = ad.scale(ad.add(ad.add(roles[0], roles[1]), roles[2]), 1.0 / 3.0)
            total = ad.add(total, ad.scale(vse, weights.vse))
        if weights.sim > 0:
            gap = _sub(ad.euclidean_distance(vp, vn), ad.euclidean_distance(va, vp))
            total = ad.add(total, ad.scale(_hinge_mean(gap, weights.margin), weights.sim))

    return total


def total_objective(
    model: SceModel,
    batch: TripletBatch,
    weights: LossWeights,
    use_vse_sim: bool = False,
    weighting: str | None = None,
) -> float:
    """Objective value for the batch; leaves fresh gradients in model.params."""
    model.params.zero_grad()
    out = objective_tensor(model, batch, weights, use_vse_sim, weighting)
    out.backward()
    return float(out.value)


def gradient_suite(
    seed: int = 0,
    f_dim: int = 8,
    d_dim: int = 6,
    n_masks: int = 3,
    t_dim: int = 5,
    batch_size: int = 4,
    modes=None,
    eps: float = 1e-5,
    tol: float = 1e-4,
):
    """Finite-difference check of every parameter in every branch mode,
    with and without the text terms.  Returns [(case name, report)].

    Uses a generous margin so the hinges stay active and their gradients
    are exercised rather than vanishing.
    """
    from .autodiff import KinkTrace, check_gradients
    from .model import MODES

    modes = list(MODES) if modes is None else list(modes)
    weights = LossWeights(margin=1.0, l1=1e-2, l2=1e-2, vse=1e-2, sim=1e-2)
    results = []
    for mode in modes:
        for use_vse_sim in (False, True):
            rng = np.random.default_rng(seed + 7 * len(results))
            model = SceModel(f_dim, d_dim, n_masks, mode=mode, t_dim=t_dim, seed=seed)

            def draw():
                return TripletBatch(
                    anchor=rng.standard_normal((batch_size, f_dim)),
                    positive=rng.standard_normal((batch_size, f_dim)),
                    negative=rng.standard_normal((batch_size, f_dim)),
                    anchor_text=rng.standard_normal((batch_size, t_dim)),
                    positive_text=rng.standard_normal((batch_size, t_dim)),
                    negative_text=rng.standard_normal((batch_size, t_dim)),
                )

            # Redraw batches whose forward pass lands within 100*eps of a
            # rectifier/hinge kink; finite differences straddle it there.
            batch = draw()
            for _ in range(50):
                with KinkTrace() as trace:
                    objective_tensor(model, batch, weights, use_vse_sim)
                if trace.min_margin > 100 * eps:
                    break
                batch = draw()
            loss_fn = lambda: objective_tensor(model, batch, weights, use_vse_sim)
            report = check_gradients(loss_fn, model.params, eps=eps, tol=tol)
            suffix = "+vse-sim" if use_vse_sim else "plain"
            results.append((f"{mode}/{suffix}", report))
    return results
