"""The conditional-similarity embedding model.

An item's raw feature vector is projected by a small general encoder into a
shared D-dimensional space.  A bank of M learnable masks reweights that
space into M semantic subspaces, and a weight branch looks at the items
being compared and produces a softmax distribution over the masks.  The
final embedding of an item is the weight-convex combination of its masked
embeddings, so the metric adapts to whichever notion of similarity the
pair (or triplet) appears to be about.

Branch input modes
------------------
* ``pair-visual``       concat of the two general embeddings (width 2D)
* ``triplet-visual``    concat of all three embeddings in a triplet (3D)
* ``pair-text``         concat of the two raw text features (2T)
* ``pair-visual-text``  concat of (V ⊙ проj(T)) for both items (2D), where
  proj is a learned affine map from text dim T to D

Baseline variants (uniform, random, label-driven weights; frozen masks)
are expressed through ``branch_override`` / ``fixed_masks`` so that the
same training and evaluation code paths serve them all.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .errors import CheckpointError, ConfigError, ContractError, DimensionError, InputError

MODES = ("pair-visual", "triplet-visual", "pair-text", "pair-visual-text")
WEIGHTINGS = ("per-pair", "shared-triplet")
OVERRIDES = (None, "uniform", "random", "label")

CHECKPOINT_FORMAT = "scenet-checkpoint"
CHECKPOINT_VERSION = 1


def apply_masks(v: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """Mask a general embedding with every row of the bank: row j = bank[j] * v."""
    v = np.asarray(v, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    if bank.ndim != 2 or v.ndim != 1 or bank.shape[1] != v.shape[0]:
        raise DimensionError(f"apply_masks: bank {bank.shape} does not conform to item {v.shape}")
    return bank * v


def compose_embedding(masked: np.ndarray, w: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Convex combination of masked embeddings; ``w`` must lie on the simplex."""
    masked = np.asarray(masked, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if masked.ndim != 2 or w.shape != (masked.shape[0],):
        raise DimensionError(f"compose_embedding: masked {masked.shape}, weights {w.shape}")
    if abs(w.sum() - 1.0) > tol or (w < -tol).any():
        raise ContractError(f"compose_embedding: weights are not on the simplex (sum={w.sum()!r})")
    return w @ masked


def _glorot(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


class AffineStack:
    """A chain of affine layers; rectifiers between layers, linear output."""

    def __init__(self, params: ParamSet, prefix: str, dims: list[int], rng: np.random.Generator):
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ConfigError(f"{prefix}: layer dims must be positive, got {dims}")
        self.dims = list(dims)
        self.layers = []
        for k, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            activation = "rectifier" if k < len(dims) - 2 else "none"
            w = params.add(f"{prefix}.{k}.w", _glorot(rng, d_out, d_in))
            # Small positive bias keeps rectifier units off the kink at init.
            b_init = np.full(d_out, 0.1) if activation == "rectifier" else np.zeros(d_out)
            b = params.add(f"{prefix}.{k}.b", b_init)
            self.layers.append((w, b, activation))

    def __call__(self, x: Tensor) -> Tensor:
        for w, b, activation in self.layers:
            x = ad.affine_forward(x, w, b, activation)
        return x


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.constant(x)


class SceModel:
    """Encoder + mask bank + condition weight branch, trained as one unit."""

    def __init__(
        self,
        f_dim: int,
        d_dim: int,
        n_masks: int,
        mode: str = "pair-visual",
        t_dim: int | None = None,
        encoder_hidden: tuple[int, ...] = (),
        branch_hidden: tuple[int, ...] | None = None,
        seed: int = 0,
        branch_override: str | None = None,
        override_seed: int | None = None,
        fixed_masks: np.ndarray | None = None,
    ):
        if mode not in MODES:
            raise ConfigError(f"unknown branch mode {mode!r}")
        if branch_override not in OVERRIDES:
            raise ConfigError(f"unknown branch override {branch_override!r}")
        if min(f_dim, d_dim, n_masks) < 1:
            raise ConfigError("f_dim, d_dim and n_masks must all be >= 1")
        if mode in ("pair-text", "pair-visual-text") and t_dim is None:
            raise ConfigError(f"mode {mode!r} requires a text dimension")
        self.f_dim = int(f_dim)
        self.d_dim = int(d_dim)
        self.n_masks = int(n_masks)
        self.t_dim = None if t_dim is None else int(t_dim)
        self.mode = mode
        self.encoder_hidden = tuple(int(h) for h in encoder_hidden)
        if branch_hidden is None:
            branch_hidden = (2 * self.n_masks, 2 * self.n_masks)
        self.branch_hidden = tuple(int(h) for h in branch_hidden)
        self.seed = int(seed)
        self.branch_override = branch_override
        self.override_seed = self.seed if override_seed is None else int(override_seed)
        self._override_rng = np.random.default_rng(self.override_seed)

        rng = np.random.default_rng(self.seed)
        self.params = ParamSet()
        self.encoder = AffineStack(
            self.params, "enc", [self.f_dim, *self.encoder_hidden, self.d_dim], rng
        )
        if fixed_masks is not None:
            fixed_masks = np.asarray(fixed_masks, dtype=np.float64)
            if fixed_masks.shape != (self.n_masks, self.d_dim):
                raise ConfigError(
                    f"fixed masks shape {fixed_masks.shape} != ({self.n_masks}, {self.d_dim})"
                )
            self.mask_tensor = ad.constant(fixed_masks.copy())
            self.masks_fixed = True
        else:
            # Near-identity start: early training behaves like a single shared space.
            self.mask_tensor = self.params.add(
                "masks", rng.uniform(0.9, 1.1, size=(self.n_masks, self.d_dim))
            )
            self.masks_fixed = False
        self.branch = AffineStack(
            self.params, "branch", [self._branch_input_width(), *self.branch_hidden, self.n_masks], rng
        )
        if self.t_dim is not None:
            self.text_w = self.params.add("text_proj.w", _glorot(rng, self.d_dim, self.t_dim))
            self.text_b = self.params.add("text_proj.b", np.zeros(self.d_dim))
        else:
            self.text_w = self.text_b = None

    def _branch_input_width(self) -> int:
        if self.mode == "pair-visual":
            return 2 * self.d_dim
        if self.mode == "triplet-visual":
            return 3 * self.d_dim
        if self.mode == "pair-text":
            return 2 * self.t_dim
        return 2 * self.d_dim  # pair-visual-text: two V ⊙ proj(T) blocks

    @property
    def mask_bank(self) -> np.ndarray:
        return self.mask_tensor.value

    # ----------------------------------------------------------- forward --

    def encode(self, raw) -> Tensor:
        """General embedding V = g(raw); accepts a vector or a (B, F) batch."""
        x = _as_tensor(raw)
        if x.value.shape[-1] != self.f_dim:
            raise DimensionError(
                f"encode: raw feature width {x.value.shape[-1]} != F={self.f_dim}"
            )
        return self.encoder(x)

    def project_text(self, text) -> Tensor:
        if self.text_w is None:
            raise ContractError("model has no text projection (t_dim not set)")
        t = _as_tensor(text)
        if t.value.shape[-1] != self.t_dim:
            raise DimensionError(f"text width {t.value.shape[-1]} != T={self.t_dim}")
        return ad.affine_forward(t, self.text_w, self.text_b, "none")

    def _override_weights(self, batch_shape, label_indices) -> Tensor:
        m = self.n_masks
        if self.branch_override == "uniform":
            value = np.full(batch_shape + (m,), 1.0 / m)
        elif self.branch_override == "random":
            n = int(np.prod(batch_shape)) if batch_shape else 1
            draws = self._override_rng.dirichlet(np.ones(m), size=n)
            value = draws.reshape(batch_shape + (m,))
        else:  # label
            if label_indices is None:
                raise InputError("label-driven weighting requires condition labels")
            idx = np.asarray(label_indices)
            if idx.shape != batch_shape:
                raise DimensionError(f"label indices shape {idx.shape} != batch {batch_shape}")
            if idx.size and (idx.min() < 0 or idx.max() >= m):
                raise InputError(f"condition index out of range for M={m}")
            value = np.zeros(batch_shape + (m,))
            np.put_along_axis(value, idx[..., None], 1.0, axis=-1)
        return ad.constant(value)

    def condition_weights(self, *inputs, label_indices=None) -> Tensor:
        """Softmax mask weights for the items being compared.

        Input bundle by mode: (V_i, V_j) for pair-visual, (V_i, V_j, V_k)
        for triplet-visual, (T_i, T_j) for pair-text and (V_i, T_i, V_j,
        T_j) for pair-visual-text.  Visual inputs are general embeddings
        (already encoded); text inputs are raw text features.
        """
        tensors = [_as_tensor(x) for x in inputs]
        if self.branch_override is not None:
            if not tensors:
                raise ContractError("condition_weights: need at least one input for shapes")
            return self._override_weights(tensors[0].value.shape[:-1], label_indices)
        if self.mode == "pair-visual":
            if len(tensors) != 2:
                raise ContractError("pair-visual mode takes exactly two visual inputs")
            y = ad.concat(tensors)
        elif self.mode == "triplet-visual":
            if len(tensors) != 3:
                raise ContractError("triplet-visual mode takes exactly three visual inputs")
            y = ad.concat(tensors)
        elif self.mode == "pair-text":
            if len(tensors) != 2:
                raise ContractError("pair-text mode takes exactly two text inputs")
            y = ad.concat(tensors)
        else:  # pair-visual-text
            if len(tensors) != 4:
                raise ContractError("pair-visual-text mode takes (V_i, T_i, V_j, T_j)")
            vi, ti, vj, tj = tensors
            y = ad.concat(
                [ad.hadamard(vi, self.project_text(ti)), ad.hadamard(vj, self.project_text(tj))]
            )
        return ad.softmax(self.branch(y))

    def compose(self, v: Tensor, w: Tensor) -> Tensor:
        """Final embedding: weight-convex combination of the masked embeddings."""
        return ad.masked_compose(v, self.mask_tensor, w)

    # ------------------------------------------------- item-level helpers --

    def _check_pair_texts(self, text_i, text_j):
        if self.mode in ("pair-text", "pair-visual-text") and (text_i is None or text_j is None):
            raise InputError(f"mode {self.mode!r} requires text features for both items")

    def embed_pair(self, raw_i, raw_j, text_i=None, text_j=None):
        """Embed two items under one shared weight vector.

        Returns ``(E_i, E_j, w)`` as numpy arrays.
        """
        self._check_pair_texts(text_i, text_j)
        vi = self.encode(raw_i)
        vj = self.encode(raw_j)
        if self.mode == "pair-text":
            w = self.condition_weights(text_i, text_j)
        elif self.mode == "pair-visual-text":
            w = self.condition_weights(vi, text_i, vj, text_j)
        else:
            if self.mode == "triplet-visual" and self.branch_override is None:
                raise ContractError("pairwise embedding undefined for a triplet-input branch")
            w = self.condition_weights(vi, vj)
        ei = self.compose(vi, w)
        ej = self.compose(vj, w)
        return ei.value.copy(), ej.value.copy(), w.value.copy()

    def embed_triplet(self, raw_a, raw_p, raw_n, texts=None, weighting="per-pair"):
        """Embed a triplet under the chosen weighting scheme.

        ``per-pair`` embeds the anchor twice, once with the weights of each
        pair, and returns ``(E_a_p, E_p, E_a_n, E_n)``.  ``shared-triplet``
        computes one weight vector from all three items (triplet-visual
        branch only) and returns ``(E_a, E_p, E_n)``.
        """
        if weighting not in WEIGHTINGS:
            raise ContractError(f"unknown weighting {weighting!r}")
        va, vp, vn = self.encode(raw_a), self.encode(raw_p), self.encode(raw_n)
        if weighting == "shared-triplet":
            if self.mode != "triplet-visual" and self.branch_override is None:
                raise ContractError("shared-triplet weighting requires the triplet-visual mode")
            w = self.condition_weights(va, vp, vn)
            return tuple(self.compose(v, w).value.copy() for v in (va, vp, vn))
        if self.mode == "triplet-visual" and self.branch_override is None:
            raise ContractError("per-pair weighting undefined for a triplet-input branch")
        t_a = t_p = t_n = None
        if texts is not None:
            t_a, t_p, t_n = texts
        self._check_pair_texts(t_a, t_p)
        if self.mode == "pair-text":
            w_ap = self.condition_weights(t_a, t_p)
            w_an = self.condition_weights(t_a, t_n)
        elif self.mode == "pair-visual-text":
            w_ap = self.condition_weights(va, t_a, vp, t_p)
            w_an = self.condition_weights(va, t_a, vn, t_n)
        else:
            w_ap = self.condition_weights(va, vp)
            w_an = self.condition_weights(va, vn)
        e_a_p = self.compose(va, w_ap)
        e_p = self.compose(vp, w_ap)
        e_a_n = self.compose(va, w_an)
        e_n = self.compose(vn, w_an)
        return tuple(t.value.copy() for t in (e_a_p, e_p, e_a_n, e_n))

    # --------------------------------------------------- batched, no-grad --

    def pair_distances(self, raw_a, raw_b, text_a=None, text_b=None) -> np.ndarray:
        """Final-embedding distances for a batch of pairs, shape (B,)."""
        raw_a = np.atleast_2d(np.asarray(raw_a, dtype=np.float64))
        raw_b = np.atleast_2d(np.asarray(raw_b, dtype=np.float64))
        self._check_pair_texts(text_a, text_b)
        va, vb = self.encode(raw_a), self.encode(raw_b)
        if self.mode == "pair-text":
            w = self.condition_weights(text_a, text_b)
        elif self.mode == "pair-visual-text":
            w = self.condition_weights(va, text_a, vb, text_b)
        else:
            if self.mode == "triplet-visual" and self.branch_override is None:
                raise ContractError("pairwise distances undefined for a triplet-input branch")
            w = self.condition_weights(va, vb)
        d = ad.euclidean_distance(self.compose(va, w), self.compose(vb, w))
        return d.value.copy()

    def triplet_distances(
        self, raw_a, raw_p, raw_n, texts=None, weighting="per-pair", label_indices=None
    ):
        """(d_pos, d_neg) arrays for a batch of triplets."""
        if weighting not in WEIGHTINGS:
            raise ContractError(f"unknown weighting {weighting!r}")
        va = self.encode(np.atleast_2d(np.asarray(raw_a, dtype=np.float64)))
        vp = self.encode(np.atleast_2d(np.asarray(raw_p, dtype=np.float64)))
        vn = self.encode(np.atleast_2d(np.asarray(raw_n, dtype=np.float64)))
        if weighting == "shared-triplet":
            if self.mode != "triplet-visual" and self.branch_override is None:
                raise ContractError("shared-triplet weighting requires the triplet-visual mode")
            w = self.condition_weights(va, vp, vn, label_indices=label_indices)
            ea, ep, en = (self.compose(v, w) for v in (va, vp, vn))
            d_pos = ad.euclidean_distance(ea, ep)
            d_neg = ad.euclidean_distance(ea, en)
        else:
            if self.mode == "triplet-visual" and self.branch_override is None:
                raise ContractError("per-pair weighting undefined for a triplet-input branch")
            t_a = t_p = t_n = None
            if texts is not None:
                t_a, t_p, t_n = texts
            self._check_pair_texts(t_a, t_p)
            if self.mode == "pair-text":
                w_ap = self.condition_weights(t_a, t_p, label_indices=label_indices)
                w_an = self.condition_weights(t_a, t_n, label_indices=label_indices)
            elif self.mode == "pair-visual-text":
                w_ap = self.condition_weights(va, t_a, vp, t_p, label_indices=label_indices)
                w_an = self.condition_weights(va, t_a, vn, t_n, label_indices=label_indices)
            else:
                w_ap = self.condition_weights(va, vp, label_indices=label_indices)
                w_an = self.condition_weights(va, vn, label_indices=label_indices)
            d_pos = ad.euclidean_distance(self.compose(va, w_ap), self.compose(vp, w_ap))
            d_neg = ad.euclidean_distance(self.compose(va, w_an), self.compose(vn, w_an))
        return d_pos.value.copy(), d_neg.value.copy()

    # -------------------------------------------------------- persistence --

    def to_state(self) -> dict:
        state = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dims": {"f": self.f_dim, "d": self.d_dim, "m": self.n_masks, "t": self.t_dim},
            "mode": self.mode,
            "encoder_hidden": list(self.encoder_hidden),
            "branch_hidden": list(self.branch_hidden),
            "seed": self.seed,
            "branch_override": self.branch_override,
            "override_seed": self.override_seed,
            "masks_fixed": self.masks_fixed,
            "params": {name: _encode_array(t.value) for name, t in self.params.items()},
        }
        if self.masks_fixed:
            state["fixed_masks"] = _encode_array(self.mask_tensor.value)
        return state

    @classmethod
    def from_state(cls, state: dict) -> "SceModel":
        try:
            if state.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"not a {CHECKPOINT_FORMAT} payload")
            if state.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {state.get('version')!r}")
            dims = state["dims"]
            fixed = _decode_array(state["fixed_masks"]) if state.get("masks_fixed") else None
            model = cls(
                f_dim=dims["f"],
                d_dim=dims["d"],
                n_masks=dims["m"],
                mode=state["mode"],
                t_dim=dims["t"],
                encoder_hidden=tuple(state["encoder_hidden"]),
                branch_hidden=tuple(state["branch_hidden"]),
                seed=state["seed"],
                branch_override=state["branch_override"],
                override_seed=state["override_seed"],
                fixed_masks=fixed,
            )
            saved = state["params"]
            for name, t in model.params.items():
                if name not in saved:
                    raise CheckpointError(f"checkpoint is missing parameter {name!r}")
                arr = _decode_array(saved[name])
                if arr.shape != t.value.shape:
                    raise CheckpointError(
                        f"parameter {name!r}: checkpoint shape {arr.shape} != model {t.value.shape}"
                    )
                if not np.all(np.isfinite(arr)):
                    raise CheckpointError(f"parameter {name!r} has non-finite values")
                t.value = arr
            extra = set(saved) - set(model.params.names())
            if extra:
                raise CheckpointError(f"checkpoint has unexpected parameters {sorted(extra)}")
            return model
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from exc

    def clone(self) -> "SceModel":
        return SceModel.from_state(self.to_state())


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {
        "shape": list(a.shape),
        "dtype": "float64-le",
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    if d.get("dtype") != "float64-le":
        raise CheckpointError(f"unsupported array dtype {d.get('dtype')!r}")
    raw = base64.b64decode(d["data"])
    shape = tuple(int(s) for s in d["shape"])
    expected = int(np.prod(shape)) * 8 if shape else 8
    if len(raw) != expected:
        raise CheckpointError(f"array payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def save_model(model: SceModel, path) -> None:
    """Write a checkpoint: versioned JSON with base64 little-endian float64 arrays."""
    text = json.dumps(model.to_state(), sort_keys=True, indent=1)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(text)
        fh.write("\n")


def load_model(path) -> SceModel:
    try:
        with open(path, encoding="ascii") as fh:
            state = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: not a valid checkpoint file ({exc})") from exc
    if not isinstance(state, dict):
        raise CheckpointError(f"{path}: not a valid checkpoint file")
    return SceModel.from_state(state)
