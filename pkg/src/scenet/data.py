"""Data ingestion and synthetic dataset generation.

File formats are line-oriented text (tab-separated fields, comma-joined
value lists, ``#`` comments and blank lines ignored):

* features    ``id <TAB> category <TAB> v1,...,vF [<TAB> t1,...,tT]``
* triplets    ``anchor positive negative [condition_label]`` (whitespace)
* outfits     ``outfit_id <TAB> {compatible|incompatible} <TAB> id1,id2,...``
* fitb        ``partial_ids <TAB> candidate_ids <TAB> answer_index``

Loaders report the 1-based line number of the first offending line.
Writers emit floats with repr so a save/load round trip is lossless.

The synthetic generator plants K latent condition blocks per item and
derives every supervision artifact from them: triplets ordered by
within-block distance, outfits as within-block proximity clusters, and
FITB questions with same-category distractors.  Raw features are a fixed
random linear mix of the latents plus Gaussian noise, so the latent
structure is recoverable but not directly observable.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    InputError,
    ParseError,
    UnknownIdError,
    ValidationError,
)

OUTFIT_LABELS = ("compatible", "incompatible")


def _check_token(token: str, what: str) -> str:
    if not token or any(c.isspace() for c in token) or "," in token:
        raise InputError(f"{what} {token!r} contains whitespace/comma or is empty")
    return token


def _parse_float(tok: str, path, line_no: int, what: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(path, line_no, f"non-numeric {what} {tok!r}") from None
    if not math.isfinite(v):
        raise ParseError(path, line_no, f"non-finite {what} {tok!r}")
    return v


def _data_lines(path):
    """Yield (line_no, stripped_line), skipping blanks and # comments."""
    try:
        with open(path, encoding="utf-8") as fh:
            for i, raw in enumerate(fh, start=1):
                line = raw.strip()
                if line and not line.startswith("#"):
                    yield i, line
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


# -------------------------------------------------------------- item table --


@dataclass(frozen=True)
class Item:
    id: str
    category: str
    visual: np.ndarray
    text: np.ndarray | None = None


class ItemTable:
    """Items indexed by id, with stacked feature matrices for batch access."""

    def __init__(self, items):
        self.items = list(items)
        self._index: dict[str, int] = {}
        for pos, it in enumerate(self.items):
            if it.id in self._index:
                raise InputError(f"duplicate item id {it.id!r}")
            self._index[it.id] = pos
        widths = {it.visual.shape for it in self.items}
        if len(widths) > 1:
            raise InputError(f"inconsistent visual feature widths: {sorted(widths)}")
        t_widths = {it.text.shape for it in self.items if it.text is not None}
        if len(t_widths) > 1:
            raise InputError(f"inconsistent text feature widths: {sorted(t_widths)}")
        self.f_dim = self.items[0].visual.shape[0] if self.items else 0
        self.t_dim = next(iter(t_widths))[0] if t_widths else None
        if self.items:
            self.visual_all = np.stack([it.visual for it in self.items]).astype(np.float64)
        else:
            self.visual_all = np.zeros((0, 0))

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]

    def categories(self) -> list[str]:
        return sorted({it.category for it in self.items})

    def index(self, item_id: str) -> int:
        try:
            return self._index[item_id]
        except KeyError:
            raise InputError(f"unknown item id {item_id!r}") from None

    def get(self, item_id: str) -> Item:
        return self.items[self.index(item_id)]

    def indices(self, item_ids) -> np.ndarray:
        return np.array([self.index(i) for i in item_ids], dtype=np.int64)

    def visual_matrix(self, item_ids=None) -> np.ndarray:
        if item_ids is None:
            return self.visual_all
        return self.visual_all[self.indices(item_ids)]

    def has_all_text(self) -> bool:
        return bool(self.items) and all(it.text is not None for it in self.items)

    def text_matrix(self, item_ids=None) -> np.ndarray:
        rows = self.items if item_ids is None else [self.get(i) for i in item_ids]
        missing = [it.id for it in rows if it.text is None]
        if missing:
            raise InputError(f"items lack text features: {missing[:5]}")
        return np.stack([it.text for it in rows]).astype(np.float64)

    def subset(self, keep) -> "ItemTable":
        """New table with the items whose id passes ``keep``."""
        return ItemTable([it for it in self.items if keep(it)])

    def serialize(self) -> str:
        lines = []
        for it in self.items:
            fields = [
                _check_token(it.id, "item id"),
                _check_token(it.category, "category"),
                ",".join(repr(float(v)) for v in it.visual),
            ]
            if it.text is not None:
                fields.append(",".join(repr(float(v)) for v in it.text))
            lines.append("\t".join(fields))
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()[:16]


def load_feature_table(path) -> ItemTable:
    items: list[Item] = []
    seen: dict[str, int] = {}
    f_dim = t_dim = None
    for line_no, line in _data_lines(path):
        fields = line.split("\t")
        if len(fields) not in (3, 4):
            raise ParseError(path, line_no, f"expected 3 or 4 tab-separated fields, got {len(fields)}")
        item_id, category, visual_str = fields[0], fields[1], fields[2]
        if not item_id or not category:
            raise ParseError(path, line_no, "empty id or category field")
        if item_id in seen:
            raise ParseError(
                path, line_no, f"duplicate item id {item_id!r} (first seen on line {seen[item_id]})"
            )
        seen[item_id] = line_no
        visual = np.array(
            [_parse_float(t, path, line_no, "visual value") for t in visual_str.split(",")]
        )
        if f_dim is None:
            f_dim = visual.shape[0]
        elif visual.shape[0] != f_dim:
            raise ParseError(path, line_no, f"expected {f_dim} visual values, got {visual.shape[0]}")
        text = None
        if len(fields) == 4:
            text = np.array(
                [_parse_float(t, path, line_no, "text value") for t in fields[3].split(",")]
            )
            if t_dim is None:
                t_dim = text.shape[0]
            elif text.shape[0] != t_dim:
                raise ParseError(path, line_no, f"expected {t_dim} text values, got {text.shape[0]}")
        items.append(Item(item_id, category, visual, text))
    if not items:
        raise ParseError(path, 0, "no item records found")
    return ItemTable(items)


def save_feature_table(items: ItemTable, path) -> None:
    write_text(path, items.serialize())


def write_text(path, text: str) -> None:
    from .errors import IoError

    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------- triplets --


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str
    condition: str | None = None


class TripletSet:
    def __init__(self, records):
        self.records = list(records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def subset(self, positions) -> "TripletSet":
        return TripletSet([self.records[i] for i in positions])

    def condition_names(self) -> list[str]:
        return sorted({r.condition for r in self.records if r.condition is not None})

    def index_arrays(self, items: ItemTable):
        a = items.indices([r.anchor for r in self.records])
        p = items.indices([r.positive for r in self.records])
        n = items.indices([r.negative for r in self.records])
        return a, p, n

    def label_indices(self, names: list[str] | None = None) -> np.ndarray:
        """Map condition labels to integer indices (sorted-name order)."""
        missing = sum(1 for r in self.records if r.condition is None)
        if missing:
            raise InputError(f"{missing} triplets lack a condition label")
        if names is None:
            names = self.condition_names()
        lookup = {name: i for i, name in enumerate(names)}
        try:
            return np.array([lookup[r.condition] for r in self.records], dtype=np.int64)
        except KeyError as exc:
            raise InputError(f"condition label {exc.args[0]!r} not in {names}") from None

    def serialize(self) -> str:
        lines = []
        for r in self.records:
            toks = [r.anchor, r.positive, r.negative]
            if r.condition is not None:
                toks.append(_check_token(r.condition, "condition label"))
            lines.append(" ".join(toks))
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()[:16]


def load_triplets(path, items: ItemTable) -> TripletSet:
    records = []
    for line_no, line in _data_lines(path):
        toks = line.split()
        if len(toks) not in (3, 4):
            raise ParseError(path, line_no, f"expected 3 or 4 tokens, got {len(toks)}")
        a, p, n = toks[0], toks[1], toks[2]
        for tok in (a, p, n):
            if tok not in items:
                raise UnknownIdError(path, line_no, f"unknown item id {tok!r}")
        if len({a, p, n}) != 3:
            raise ValidationError(path, line_no, f"triplet repeats an item id: {a} {p} {n}")
        records.append(Triplet(a, p, n, toks[3] if len(toks) == 4 else None))
    return TripletSet(records)


def save_triplets(triplets: TripletSet, path) -> None:
    write_text(path, triplets.serialize())


# ----------------------------------------------------------------- outfits --


@dataclass(frozen=True)
class Outfit:
    outfit_id: str
    item_ids: tuple[str, ...]
    label: str


class OutfitSet:
    def __init__(self, records):
        self.records = list(records)
        for r in self.records:
            if r.label not in OUTFIT_LABELS:
                raise InputError(f"outfit {r.outfit_id}: bad label {r.label!r}")
            if len(r.item_ids) < 2:
                raise InputError(f"outfit {r.outfit_id}: needs at least 2 items")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def labels(self) -> list[str]:
        return [r.label for r in self.records]

    def serialize(self) -> str:
        lines = [
            "\t".join([r.outfit_id, r.label, ",".join(r.item_ids)]) for r in self.records
        ]
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()[:16]


def load_outfits(path, items: ItemTable) -> OutfitSet:
    records = []
    for line_no, line in _data_lines(path):
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(path, line_no, f"expected 3 tab-separated fields, got {len(fields)}")
        outfit_id, label, ids_str = fields
        if label not in OUTFIT_LABELS:
            raise ParseError(path, line_no, f"label must be one of {OUTFIT_LABELS}, got {label!r}")
        ids = tuple(ids_str.split(",")) if ids_str else ()
        if len(ids) < 2:
            raise ValidationError(path, line_no, f"outfit needs at least 2 items, got {len(ids)}")
        for tok in ids:
            if tok not in items:
                raise UnknownIdError(path, line_no, f"unknown item id {tok!r}")
        records.append(Outfit(outfit_id, ids, label))
    return OutfitSet(records)


def save_outfits(outfits: OutfitSet, path) -> None:
    write_text(path, outfits.serialize())


# -------------------------------------------------------------------- fitb --


@dataclass(frozen=True)
class FitbQuestion:
    partial: tuple[str, ...]
    candidates: tuple[str, ...]
    answer_index: int


class FitbSet:
    def __init__(self, records):
        self.records = list(records)
        for i, q in enumerate(self.records):
            if not q.partial or not q.candidates:
                raise InputError(f"fitb question {i}: empty partial outfit or candidate list")
            if not 0 <= q.answer_index < len(q.candidates):
                raise InputError(f"fitb question {i}: answer index {q.answer_index} out of range")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, positions) -> "FitbSet":
        return FitbSet([self.records[i] for i in positions])

    def serialize(self) -> str:
        lines = [
            "\t".join([",".join(q.partial), ",".join(q.candidates), str(q.answer_index)])
            for q in self.records
        ]
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()[:16]


def load_fitb(path, items: ItemTable) -> FitbSet:
    records = []
    for line_no, line in _data_lines(path):
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(path, line_no, f"expected 3 tab-separated fields, got {len(fields)}")
        partial = tuple(t for t in fields[0].split(",") if t)
        candidates = tuple(t for t in fields[1].split(",") if t)
        if not partial or not candidates:
            raise ValidationError(path, line_no, "empty partial outfit or candidate list")
        try:
            answer = int(fields[2])
        except ValueError:
            raise ParseError(path, line_no, f"non-integer answer index {fields[2]!r}") from None
        if not 0 <= answer < len(candidates):
            raise ValidationError(
                path, line_no, f"answer index {answer} out of range for {len(candidates)} candidates"
            )
        for tok in (*partial, *candidates):
            if tok not in items:
                raise UnknownIdError(path, line_no, f"unknown item id {tok!r}")
        records.append(FitbQuestion(partial, candidates, answer))
    return FitbSet(records)


def save_fitb(fitb: FitbSet, path) -> None:
    write_text(path, fitb.serialize())


# ----------------------------------------------------------- noise & filter --


def _sample_distinct_trios(rng: np.random.Generator, n_items: int, count: int) -> np.ndarray:
    """(count, 3) index rows with all-distinct entries, rejection-sampled."""
    rows = []
    need = count
    while need > 0:
        cand = rng.integers(0, n_items, size=(max(2 * need, 64), 3))
        ok = (
            (cand[:, 0] != cand[:, 1])
            & (cand[:, 0] != cand[:, 2])
            & (cand[:, 1] != cand[:, 2])
        )
        cand = cand[ok][:need]
        rows.append(cand)
        need -= cand.shape[0]
    return np.concatenate(rows, axis=0)


def inject_noise(triplets: TripletSet, p: float, items: ItemTable, seed: int) -> TripletSet:
    """Replace floor(p·N) records with uniformly random distinct-id triplets."""
    if not 0.0 <= p <= 1.0:
        raise InputError(f"noise fraction must lie in [0, 1], got {p!r}")
    n = len(triplets)
    n_replace = math.floor(p * n)
    if n_replace == 0:
        return TripletSet(list(triplets.records))
    if len(items) < 3:
        raise InputError("noise injection needs at least 3 items")
    rng = np.random.default_rng(seed)
    positions = rng.choice(n, size=n_replace, replace=False)
    trios = _sample_distinct_trios(rng, len(items), n_replace)
    ids = items.ids
    records = list(triplets.records)
    for pos, trio in zip(positions, trios):
        records[pos] = Triplet(ids[trio[0]], ids[trio[1]], ids[trio[2]], condition=None)
    return TripletSet(records)


@dataclass(frozen=True)
class FilteredData:
    train_items: ItemTable
    train_triplets: TripletSet
    eval_fitb: FitbSet


def filter_categories(
    items: ItemTable, triplets: TripletSet, fitb: FitbSet, excluded
) -> FilteredData:
    """Drop excluded categories from training; keep FITB questions whose
    candidates all belong to excluded categories as the evaluation set."""
    excluded = set(excluded)
    known = set(items.categories())
    unknown = excluded - known
    if unknown:
        raise InputError(f"excluded categories not present in the table: {sorted(unknown)}")
    if not excluded:
        return FilteredData(items, triplets, FitbSet([]))
    keep_ids = {it.id for it in items if it.category not in excluded}
    if not keep_ids:
        raise InputError("excluding these categories removes every item")
    train_items = items.subset(lambda it: it.id in keep_ids)
    train_triplets = TripletSet(
        [
            r
            for r in triplets
            if r.anchor in keep_ids and r.positive in keep_ids and r.negative in keep_ids
        ]
    )
    if len(train_triplets) == 0:
        raise InputError("excluding these categories removes every training triplet")
    eval_questions = [
        q
        for q in fitb
        if all(items.get(c).category in excluded for c in q.candidates)
    ]
    return FilteredData(train_items, train_triplets, FitbSet(eval_questions))


def hash_text_features(tokens, t_dim: int) -> np.ndarray:
    """Order-independent signed token-hash bag, L2-normalized when nonzero."""
    if t_dim < 1:
        raise InputError(f"text dimension must be >= 1, got {t_dim}")
    v = np.zeros(t_dim)
    for tok in tokens:
        digest = hashlib.sha256(str(tok).encode("utf-8")).digest()
        idx = int.from_bytes(digest[:8], "little") % t_dim
        sign = 1.0 if digest[8] % 2 == 0 else -1.0
        v[idx] += sign
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


# ----------------------------------------------------------------- synthetic --


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a planted-condition dataset; every output is seed-determined.

    Each latent block models one similarity condition as a discrete
    attribute: every item gets one of ``n_levels`` level centroids per
    block plus bounded jitter, so items sharing a level are strictly
    closer within that block than items that do not.
    """

    k: int
    n_items: int
    f_dim: int
    d_latent: int
    block_widths: tuple[int, ...] | None = None
    n_levels: int = 4
    jitter: float = 0.25
    noise_scale: float = 0.05
    seed: int = 0
    n_triplets: int = 0
    n_outfits: int = 0
    outfit_size: int = 4
    n_fitb: int = 0
    n_candidates: int = 4
    n_categories: int = 6
    min_gap: float = 0.1
    t_dim: int | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        for name in ("n_items", "f_dim", "d_latent", "outfit_size", "n_candidates", "n_categories"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_levels < 2:
            raise ConfigError(f"n_levels must be >= 2, got {self.n_levels}")
        for name in ("n_triplets", "n_outfits", "n_fitb"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.noise_scale < 0 or self.min_gap < 0 or self.jitter < 0:
            raise ConfigError("noise_scale, jitter and min_gap must be >= 0")
        if self.block_widths is not None:
            widths = tuple(int(w) for w in self.block_widths)
            object.__setattr__(self, "block_widths", widths)
            if len(widths) != self.k or any(w < 1 for w in widths):
                raise ConfigError(f"need {self.k} positive block widths, got {widths}")
            if sum(widths) != self.d_latent:
                raise ConfigError(
                    f"block widths sum to {sum(widths)} but d_latent is {self.d_latent}"
                )
        elif self.d_latent % self.k != 0:
            raise ConfigError(
                f"d_latent {self.d_latent} not divisible by k={self.k}; give explicit block_widths"
            )

    def block_slices(self) -> list[slice]:
        widths = self.block_widths or (self.d_latent // self.k,) * self.k
        edges = np.cumsum((0,) + tuple(widths))
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def to_dict(self) -> dict:
        d = {
            "k": self.k,
            "n_items": self.n_items,
            "f_dim": self.f_dim,
            "d_latent": self.d_latent,
            "block_widths": list(self.block_widths) if self.block_widths else None,
            "n_levels": self.n_levels,
            "jitter": self.jitter,
            "noise_scale": self.noise_scale,
            "seed": self.seed,
            "n_triplets": self.n_triplets,
            "n_outfits": self.n_outfits,
            "outfit_size": self.outfit_size,
            "n_fitb": self.n_fitb,
            "n_candidates": self.n_candidates,
            "n_categories": self.n_categories,
            "min_gap": self.min_gap,
            "t_dim": self.t_dim,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown synthetic spec keys {sorted(extra)}")
        missing = {"k", "n_items", "f_dim", "d_latent"} - set(d)
        if missing:
            raise ConfigError(f"synthetic spec missing required keys {sorted(missing)}")
        d = dict(d)
        if d.get("block_widths") is not None:
            d["block_widths"] = tuple(d["block_widths"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic spec: {exc}") from exc


@dataclass
class SyntheticData:
    """Generated artifacts plus the planted structure for oracle checks."""

    spec: SyntheticSpec
    items: ItemTable
    triplets: TripletSet
    outfits: OutfitSet
    fitb: FitbSet
    latents: np.ndarray
    mixing: np.ndarray
    levels: np.ndarray  # (n_items, k) planted attribute level per block

    def condition_name(self, c: int) -> str:
        return f"cond{c}"


def _sample_condition_triplets(
    rng: np.random.Generator,
    latents: np.ndarray,
    sl: slice,
    c: int,
    levels: np.ndarray,
    pools_c: list[np.ndarray],
    count: int,
    min_gap: float,
) -> np.ndarray:
    """(count, 3) rows (anchor, positive, negative) for one condition.

    The positive shares the anchor's level in block ``c`` and in no other
    block, so the similarity signature identifies the condition; the
    negative differs in block ``c``.  The within-block distance ordering
    is verified with at least ``min_gap`` slack (violations resampled).
    """
    n, k = levels.shape
    z = latents[:, sl]
    others = [cc for cc in range(k) if cc != c]
    out = []
    need = count
    while need > 0:
        m = max(2 * need, 64)
        anchors = rng.integers(0, n, size=m)
        pos = np.array([pools_c[levels[a, c]][rng.integers(pools_c[levels[a, c]].size)]
                        for a in anchors])
        neg = rng.integers(0, n, size=m)
        ok = (pos != anchors) & (neg != anchors) & (levels[neg, c] != levels[anchors, c])
        if others:
            ok &= np.all(levels[pos][:, others] != levels[anchors][:, others], axis=1)
        anchors, pos, neg = anchors[ok], pos[ok], neg[ok]
        d_pos = np.linalg.norm(z[anchors] - z[pos], axis=1)
        d_neg = np.linalg.norm(z[anchors] - z[neg], axis=1)
        ordered = d_neg - d_pos >= min_gap
        trio = np.stack([anchors[ordered], pos[ordered], neg[ordered]], axis=1)[:need]
        out.append(trio)
        need -= trio.shape[0]
    return np.concatenate(out, axis=0)


def _item_tokens(levels_row: np.ndarray, category: str) -> list[str]:
    tokens = [f"category:{category}"]
    for j, lv in enumerate(levels_row):
        tokens.append(f"block{j}:level{int(lv)}")
    return tokens


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Draw the full dataset; independent per-artifact streams keep the
    items stable when only the supervision counts change."""
    ss = np.random.SeedSequence(spec.seed)
    rng_items, rng_trip, rng_outfit, rng_fitb = (
        np.random.default_rng(child) for child in ss.spawn(4)
    )
    n = spec.n_items
    slices = spec.block_slices()

    # Per block: level centroids plus bounded jitter around them.
    levels = rng_items.integers(0, spec.n_levels, size=(n, spec.k))
    latents = np.empty((n, spec.d_latent))
    for c, sl in enumerate(slices):
        w = sl.stop - sl.start
        centroids = rng_items.standard_normal((spec.n_levels, w))
        jitter = spec.jitter * rng_items.uniform(-1.0, 1.0, size=(n, w))
        latents[:, sl] = centroids[levels[:, c]] + jitter
    mixing = rng_items.standard_normal((spec.f_dim, spec.d_latent)) / np.sqrt(spec.d_latent)
    raw = latents @ mixing.T
    if spec.noise_scale > 0:
        raw = raw + spec.noise_scale * rng_items.standard_normal((n, spec.f_dim))
    cat_idx = rng_items.integers(0, spec.n_categories, size=n)

    width = max(5, len(str(n - 1)))
    ids = [f"item{i:0{width}d}" for i in range(n)]
    cats = [f"cat{c}" for c in cat_idx]
    items_list = []
    for i in range(n):
        text = None
        if spec.t_dim is not None:
            text = hash_text_features(_item_tokens(levels[i], cats[i]), spec.t_dim)
        items_list.append(Item(ids[i], cats[i], raw[i].copy(), text))
    items = ItemTable(items_list)

    level_pools = [
        [np.flatnonzero(levels[:, c] == lv) for lv in range(spec.n_levels)]
        for c in range(spec.k)
    ]
    for c in range(spec.k):
        if spec.n_triplets > 0 and any(p.size < 2 for p in level_pools[c]):
            raise ConfigError(
                f"block {c} has a level with fewer than 2 items; increase n_items"
            )

    records: list[Triplet] = []
    if spec.n_triplets > 0:
        per = [spec.n_triplets // spec.k + (c < spec.n_triplets % spec.k) for c in range(spec.k)]
        grouped = []
        for c in range(spec.k):
            trios = _sample_condition_triplets(
                rng_trip, latents, slices[c], c, levels, level_pools[c], per[c], spec.min_gap
            )
            grouped.extend(
                Triplet(ids[a], ids[p], ids[ng], f"cond{c}") for a, p, ng in trios
            )
        order = rng_trip.permutation(len(grouped))
        records = [grouped[i] for i in order]
    triplets = TripletSet(records)

    outfit_records: list[Outfit] = []
    if spec.n_outfits > 0:
        if spec.outfit_size > n:
            raise ConfigError("outfit_size exceeds the number of items")
        smallest = min(p.size for pools in level_pools for p in pools)
        if smallest < spec.outfit_size:
            raise ConfigError("outfit_size exceeds the smallest level pool; increase n_items")
        n_good = spec.n_outfits // 2 + spec.n_outfits % 2
        by_cat = {c: np.flatnonzero(cat_idx == c) for c in range(spec.n_categories)}
        for o in range(spec.n_outfits):
            c = o % spec.k
            pool = level_pools[c][int(rng_outfit.integers(spec.n_levels))]
            members = rng_outfit.choice(pool, size=spec.outfit_size, replace=False)
            if o < n_good:
                label = "compatible"
            else:
                # Negative outfits: per-slot random substitution within category.
                label = "incompatible"
                members = np.array(
                    [int(rng_outfit.choice(by_cat[cat_idx[m]])) for m in members]
                )
            outfit_records.append(
                Outfit(f"outfit{o:05d}", tuple(ids[m] for m in members), label)
            )
    outfits = OutfitSet(outfit_records)

    fitb_records: list[FitbQuestion] = []
    if spec.n_fitb > 0:
        if spec.n_candidates > n:
            raise ConfigError("n_candidates exceeds the number of items")
        cat_pools = {c: np.flatnonzero(cat_idx == c) for c in range(spec.n_categories)}
        for q in range(spec.n_fitb):
            c = q % spec.k
            for _ in range(200):
                lv = int(rng_fitb.integers(spec.n_levels))
                pool = level_pools[c][lv]
                if pool.size < spec.outfit_size:
                    continue
                members = rng_fitb.choice(pool, size=spec.outfit_size, replace=False)
                answer = int(members[-1])
                # Distractors share the answer's category but sit at a
                # different level of the question's condition block.
                wrong = cat_pools[cat_idx[answer]]
                wrong = wrong[(levels[wrong, c] != lv) & ~np.isin(wrong, members)]
                if wrong.shape[0] >= spec.n_candidates - 1:
                    break
            else:
                raise ConfigError(
                    "cannot build FITB distractors; need more items per category"
                )
            distractors = rng_fitb.choice(wrong, size=spec.n_candidates - 1, replace=False)
            cands = np.concatenate(([answer], distractors))
            perm = rng_fitb.permutation(spec.n_candidates)
            cands = cands[perm]
            answer_index = int(np.flatnonzero(perm == 0)[0])
            fitb_records.append(
                FitbQuestion(
                    tuple(ids[m] for m in members[:-1]),
                    tuple(ids[i] for i in cands),
                    answer_index,
                )
            )
    fitb = FitbSet(fitb_records)

    return SyntheticData(spec, items, triplets, outfits, fitb, latents, mixing, levels)
