"""Metrics, baselines, ablation harnesses, and the text report format.

Tie rules are part of the metric definitions and are deliberately strict:
a triplet with equal distances counts as an error, FITB ties resolve to
the lowest candidate index, AUC ties contribute one half, and top-k ties
order by item id.  Reports serialize to stable tab-separated text so two
identical runs produce byte-identical files.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .data import FitbSet, ItemTable, OutfitSet, TripletSet, write_text
from .errors import ConfigError, ContractError, InputError, NumericError, ParseError
from .model import SceModel

BASELINE_KINDS = ("single-embedding", "uniform-average", "random-weights", "fixed-disjoint")

_CHUNK = 4096


# ----------------------------------------------------------------- report --


@dataclass
class EvalReport:
    """Ordered metric rows plus run metadata, serializable to stable text."""

    metadata: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    def add_meta(self, key: str, value) -> None:
        self.metadata[str(key)] = str(value)

    def add(self, name: str, value: float) -> None:
        value = float(value)
        if not np.isfinite(value):
            raise NumericError(f"metric {name!r} is not finite: {value!r}")
        self.rows.append((str(name), value))

    def get(self, name: str) -> float:
        for n, v in self.rows:
            if n == name:
                return v
        raise InputError(f"report has no metric {name!r}")

    def names(self) -> list[str]:
        return [n for n, _ in self.rows]

    def to_text(self) -> str:
        lines = ["# scenet-report\tv1"]
        for k, v in self.metadata.items():
            lines.append(f"# {k}\t{v}")
        for name, value in self.rows:
            lines.append(f"{name}\t{value!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        lines = text.splitlines()
        if not lines or lines[0] != "# scenet-report\tv1":
            raise InputError("not a scenet report (missing header line)")
        report = cls()
        for i, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            if line.startswith("# "):
                key, _, value = line[2:].partition("\t")
                report.metadata[key] = value
                continue
            name, _, value = line.partition("\t")
            try:
                report.rows.append((name, float(value)))
            except ValueError:
                raise ParseError("<report>", i, f"non-numeric metric value {value!r}") from None
        return report


def write_report(report: EvalReport, path) -> None:
    write_text(path, report.to_text())


def read_report(path) -> EvalReport:
    try:
        with open(path, encoding="utf-8") as fh:
            return EvalReport.from_text(fh.read())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------- metrics --


def _gather_texts(model: SceModel, items: ItemTable, idx_list):
    if model.mode not in ("pair-text", "pair-visual-text"):
        return None
    all_text = items.text_matrix()
    return tuple(all_text[idx] for idx in idx_list)


def triplet_error_rate(
    model: SceModel,
    triplets: TripletSet,
    items: ItemTable,
    weighting: str | None = None,
) -> float:
    """Fraction of triplets with d(anchor, positive) >= d(anchor, negative)."""
    if len(triplets) == 0:
        raise InputError("triplet_error_rate: empty triplet set")
    if weighting is None:
        weighting = "shared-triplet" if model.mode == "triplet-visual" else "per-pair"
    a_idx, p_idx, n_idx = triplets.index_arrays(items)
    labels = None
    if model.branch_override == "label":
        labels = triplets.label_indices()
    vis = items.visual_all
    wrong = 0
    for lo in range(0, len(triplets), _CHUNK):
        sel = slice(lo, lo + _CHUNK)
        texts = _gather_texts(model, items, (a_idx[sel], p_idx[sel], n_idx[sel]))
        d_pos, d_neg = model.triplet_distances(
            vis[a_idx[sel]],
            vis[p_idx[sel]],
            vis[n_idx[sel]],
            texts=texts,
            weighting=weighting,
            label_indices=None if labels is None else labels[sel],
        )
        wrong += int(np.sum(d_pos >= d_neg))
    return wrong / len(triplets)


def roc_auc(pos_scores, neg_scores) -> float:
    """Mann-Whitney statistic via average ranks; ties contribute one half."""
    pos = np.asarray(list(pos_scores), dtype=np.float64)
    neg = np.asarray(list(neg_scores), dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise InputError("roc_auc: both score lists must be nonempty")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise InputError("roc_auc: scores must be finite")
    scores = np.concatenate([pos, neg])
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    n = scores.size
    ranks_sorted = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # 1-based ranks i+1..j+1 share the average (i + j + 2) / 2.
        ranks_sorted[i : j + 1] = (i + j + 2) / 2.0
        i = j + 1
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = ranks_sorted
    p = pos.size
    u = ranks[:p].sum() - p * (p + 1) / 2.0
    return u / (p * neg.size)


def _pair_distance_rows(model: SceModel, items: ItemTable, left_idx, right_idx) -> np.ndarray:
    vis = items.visual_all
    out = np.empty(len(left_idx))
    for lo in range(0, len(left_idx), _CHUNK):
        sel = slice(lo, lo + _CHUNK)
        texts = _gather_texts(model, items, (left_idx[sel], right_idx[sel]))
        ta, tb = texts if texts is not None else (None, None)
        out[lo : lo + _CHUNK] = model.pair_distances(
            vis[left_idx[sel]], vis[right_idx[sel]], ta, tb
        )
    return out


def outfit_score(model: SceModel, item_ids, items: ItemTable) -> float:
    """Negated mean pairwise distance over all unordered item pairs."""
    idx = items.indices(item_ids)
    if idx.shape[0] < 2:
        raise InputError(f"outfit_score: need at least 2 items, got {idx.shape[0]}")
    # Pair weights depend on argument order, so orient every unordered pair
    # by table index to keep the score independent of the listing order.
    idx = np.sort(idx)
    pairs = np.array(list(itertools.combinations(range(idx.shape[0]), 2)))
    d = _pair_distance_rows(model, items, idx[pairs[:, 0]], idx[pairs[:, 1]])
    return -float(np.mean(d))


def compatibility_auc(model: SceModel, outfits: OutfitSet, items: ItemTable) -> float:
    """ROC AUC separating compatible from incompatible outfit scores."""
    pos, neg = [], []
    for outfit in outfits:
        score = outfit_score(model, outfit.item_ids, items)
        (pos if outfit.label == "compatible" else neg).append(score)
    if not pos or not neg:
        raise InputError("compatibility_auc: need both compatible and incompatible outfits")
    return roc_auc(pos, neg)


def fitb_accuracy(model: SceModel, fitb: FitbSet, items: ItemTable) -> float:
    """Fraction of questions whose summed-distance argmin is the answer.

    Ties resolve to the lowest candidate index.
    """
    if len(fitb) == 0:
        raise InputError("fitb_accuracy: empty question set")
    correct = 0
    for q in fitb:
        part = items.indices(q.partial)
        cand = items.indices(q.candidates)
        # One row per (candidate, partial item) pair.
        c_rep = np.repeat(np.arange(cand.shape[0]), part.shape[0])
        p_rep = np.tile(np.arange(part.shape[0]), cand.shape[0])
        d = _pair_distance_rows(model, items, cand[c_rep], part[p_rep])
        sums = d.reshape(cand.shape[0], part.shape[0]).sum(axis=1)
        if int(np.argmin(sums)) == q.answer_index:
            correct += 1
    return correct / len(fitb)


def condition_purity(model: SceModel, triplets: TripletSet, items: ItemTable) -> float:
    """Majority-label agreement of argmax weight-branch groups.

    Each triplet is assigned to the mask with the largest shared-triplet
    weight; purity is the size-weighted mean of each group's majority
    true-label fraction.
    """
    if len(triplets) == 0:
        raise InputError("condition_purity: empty triplet set")
    if any(r.condition is None for r in triplets):
        raise InputError("condition_purity: every triplet needs a condition label")
    if model.mode != "triplet-visual" and model.branch_override is None:
        raise ContractError("condition_purity requires shared-triplet weighting")
    a_idx, p_idx, n_idx = triplets.index_arrays(items)
    labels = triplets.label_indices()
    vis = items.visual_all
    assigned = np.empty(len(triplets), dtype=np.int64)
    for lo in range(0, len(triplets), _CHUNK):
        sel = slice(lo, lo + _CHUNK)
        va = model.encode(vis[a_idx[sel]])
        vp = model.encode(vis[p_idx[sel]])
        vn = model.encode(vis[n_idx[sel]])
        w = model.condition_weights(
            va, vp, vn,
            label_indices=None if model.branch_override != "label" else labels[sel],
        )
        assigned[lo : lo + _CHUNK] = np.argmax(w.value, axis=-1)
    agree = 0
    for g in np.unique(assigned):
        members = labels[assigned == g]
        agree += int(np.bincount(members).max())
    return agree / len(triplets)


def top_k_compatible(model: SceModel, query_id: str, candidate_ids, items: ItemTable, k: int):
    """The k candidates nearest to the query in the final space, ties by id."""
    if k <= 0:
        raise InputError(f"top_k_compatible: k must be positive, got {k}")
    candidate_ids = list(candidate_ids)
    if not candidate_ids:
        raise InputError("top_k_compatible: empty candidate list")
    q_idx = np.full(len(candidate_ids), items.index(query_id))
    c_idx = items.indices(candidate_ids)
    d = _pair_distance_rows(model, items, q_idx, c_idx)
    ranked = sorted(zip(d, candidate_ids))
    return [item_id for _, item_id in ranked[:k]]


# --------------------------------------------------------------- baselines --


def _disjoint_masks(m: int, d: int) -> np.ndarray:
    if d % m != 0:
        raise ConfigError(f"fixed-disjoint masks need D divisible by M, got D={d}, M={m}")
    width = d // m
    masks = np.zeros((m, d))
    for j in range(m):
        masks[j, j * width : (j + 1) * width] = 1.0
    return masks


def make_baseline(kind: str, reference, seed: int = 0, f_dim: int | None = None,
                  t_dim: int | None = None) -> SceModel:
    """Build an evaluable baseline model.

    ``reference`` is either a trained SceModel (uniform/random baselines
    keep its parameters; structural baselines restart from the same seed)
    or a TrainConfig, in which case ``f_dim`` must be given and the model
    starts fresh.
    """
    from .training import TrainConfig, build_model  # local import breaks the module cycle

    if kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")
    if isinstance(reference, TrainConfig):
        if f_dim is None:
            raise ConfigError("make_baseline from a config needs f_dim")
        if kind == "single-embedding":
            reference = replace(reference, n_masks=1)
        model = build_model(reference, f_dim, t_dim)
    elif isinstance(reference, SceModel):
        model = reference.clone()
    else:
        raise ConfigError(f"reference must be a SceModel or TrainConfig, got {type(reference)!r}")

    state = model.to_state()
    if kind == "uniform-average":
        state["branch_override"] = "uniform"
    elif kind == "random-weights":
        state["branch_override"] = "random"
        state["override_seed"] = seed
    elif kind == "single-embedding":
        if state["dims"]["m"] != 1:
            # Rebuild with one mask; the trained encoder carries over.
            single = SceModel(
                f_dim=state["dims"]["f"],
                d_dim=state["dims"]["d"],
                n_masks=1,
                mode=state["mode"],
                t_dim=state["dims"]["t"],
                encoder_hidden=tuple(state["encoder_hidden"]),
                seed=state["seed"],
                fixed_masks=np.ones((1, state["dims"]["d"])),
            )
            for name, t in model.params.items():
                if name.startswith(("enc.", "text_proj.")) and name in single.params:
                    single.params[name].value = t.value.copy()
            return single
        fixed = np.ones((1, state["dims"]["d"]))
        state["masks_fixed"] = True
        state["fixed_masks"] = _encode(fixed)
        state["params"].pop("masks", None)
    else:  # fixed-disjoint
        fixed = _disjoint_masks(state["dims"]["m"], state["dims"]["d"])
        state["masks_fixed"] = True
        state["fixed_masks"] = _encode(fixed)
        state["params"].pop("masks", None)
        state["branch_override"] = "label"
    return SceModel.from_state(state)


def _encode(arr: np.ndarray) -> dict:
    from .model import _encode_array

    return _encode_array(arr)


# --------------------------------------------------------------- ablations --


@dataclass
class AblationResult:
    axis: str
    values: list
    errors: list[float]
    extra: list[dict] = field(default_factory=list)

    def to_report(self, metadata: dict | None = None) -> EvalReport:
        report = EvalReport()
        report.add_meta("ablation_axis", self.axis)
        for k, v in (metadata or {}).items():
            report.add_meta(k, v)
        for value, err in zip(self.values, self.errors):
            report.add(f"{self.axis}={value}", err)
        return report


ABLATION_AXES = ("n_masks", "noise_fraction", "train_size")


def ablation_sweep(
    base_config,
    axis: str,
    values,
    items: ItemTable,
    train_triplets: TripletSet,
    eval_triplets: TripletSet,
) -> AblationResult:
    """Train one model per axis value, otherwise identical, and measure
    held-out triplet error on a fixed clean evaluation set."""
    from .training import build_model, train  # local import breaks the module cycle

    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    values = list(values)
    if not values:
        raise InputError("ablation_sweep: empty value list")
    subset_order = None
    if axis == "train_size":
        subset_order = np.random.default_rng(base_config.seed).permutation(len(train_triplets))
    result = AblationResult(axis, values, [])
    for value in values:
        if axis == "n_masks":
            config = replace(base_config, n_masks=int(value))
            triplets = train_triplets
        elif axis == "noise_fraction":
            config = replace(base_config, noise_fraction=float(value))
            triplets = train_triplets
        else:
            size = int(value)
            if not 1 <= size <= len(train_triplets):
                raise InputError(
                    f"train_size {size} out of range for {len(train_triplets)} triplets"
                )
            config = base_config
            triplets = train_triplets.subset(subset_order[:size])
        model = build_model(config, items.f_dim, items.t_dim)
        model, _ = train(model, items, triplets, config)
        err = triplet_error_rate(model, eval_triplets, items, config.resolved_weighting())
        result.errors.append(err)
    return result


# ------------------------------------------------------------------ export --


def export_condition_embeddings(model: SceModel, items: ItemTable, path) -> None:
    """Write ``id <TAB> mask_index <TAB> masked embedding`` rows, one per
    item and mask, in table order."""
    v = model.encode(items.visual_all).value
    masks = model.mask_bank
    lines = []
    for i, item in enumerate(items):
        for j in range(model.n_masks):
            row = masks[j] * v[i]
            lines.append(f"{item.id}\t{j}\t" + ",".join(repr(float(x)) for x in row))
    write_text(path, "\n".join(lines) + "\n")


def load_condition_embeddings(path):
    """Read an export back: (ids in first-seen order, array (n_items, M, D))."""
    rows: dict[str, dict[int, np.ndarray]] = {}
    ids: list[str] = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    with fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, line_no, f"expected 3 fields, got {len(parts)}")
            item_id, j_str, vec_str = parts
            try:
                j = int(j_str)
            except ValueError:
                raise ParseError(path, line_no, f"non-integer mask index {j_str!r}") from None
            try:
                vec = np.array([float(t) for t in vec_str.split(",")])
            except ValueError:
                raise ParseError(path, line_no, "non-numeric embedding value") from None
            if item_id not in rows:
                rows[item_id] = {}
                ids.append(item_id)
            rows[item_id][j] = vec
    if not ids:
        raise ParseError(path, 0, "no embedding rows found")
    m = max(max(d) for d in rows.values()) + 1
    dim = len(next(iter(rows[ids[0]].values())))
    out = np.zeros((len(ids), m, dim))
    for i, item_id in enumerate(ids):
        for j in range(m):
            if j not in rows[item_id]:
                raise ParseError(path, 0, f"item {item_id!r} is missing mask row {j}")
            out[i, j] = rows[item_id][j]
    return ids, out


# ------------------------------------------------------------ full reports --


def evaluate(
    model: SceModel,
    items: ItemTable,
    triplets: TripletSet | None = None,
    outfits: OutfitSet | None = None,
    fitb: FitbSet | None = None,
    weighting: str | None = None,
    metadata: dict | None = None,
) -> EvalReport:
    """Compute every metric the provided evaluation sets support."""
    report = EvalReport()
    for k, v in (metadata or {}).items():
        report.add_meta(k, v)
    report.add_meta("items_hash", items.content_hash())
    if triplets is not None and len(triplets) > 0:
        report.add_meta("triplets_hash", triplets.content_hash())
        report.add("triplet_error", triplet_error_rate(model, triplets, items, weighting))
        if all(r.condition is not None for r in triplets) and (
            model.mode == "triplet-visual" or model.branch_override is not None
        ):
            report.add("condition_purity", condition_purity(model, triplets, items))
    if outfits is not None and len(outfits) > 0:
        report.add_meta("outfits_hash", outfits.content_hash())
        report.add("compatibility_auc", compatibility_auc(model, outfits, items))
    if fitb is not None and len(fitb) > 0:
        report.add_meta("fitb_hash", fitb.content_hash())
        report.add("fitb_accuracy", fitb_accuracy(model, fitb, items))
    if not report.rows:
        raise InputError("evaluate: no evaluation sets provided")
    return report
