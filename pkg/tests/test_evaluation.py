"""Metric definitions, report serialization, baselines, ablations, and the
condition-embedding export."""

import itertools
from dataclasses import replace

import numpy as np
import pytest

from scenet.data import (
    FitbQuestion,
    FitbSet,
    Item,
    ItemTable,
    Outfit,
    OutfitSet,
    SyntheticSpec,
    Triplet,
    TripletSet,
    generate_synthetic,
)
from scenet.errors import (
    ConfigError,
    ContractError,
    InputError,
    NumericError,
    ParseError,
)
from scenet.evaluation import (
    AblationResult,
    EvalReport,
    ablation_sweep,
    compatibility_auc,
    condition_purity,
    evaluate,
    export_condition_embeddings,
    fitb_accuracy,
    load_condition_embeddings,
    make_baseline,
    outfit_score,
    read_report,
    roc_auc,
    top_k_compatible,
    triplet_error_rate,
    write_report,
)
from scenet.model import SceModel
from scenet.training import TrainConfig, build_model, train
from tests.conftest import build_items, build_triplets


def fresh_model(items, n_masks=2, mode="pair-visual", **kwargs):
    return SceModel(f_dim=items.f_dim, d_dim=6, n_masks=n_masks, mode=mode, seed=1, **kwargs)


# ------------------------------------------------------------------- report


def test_report_rejects_nonfinite_metric():
    report = EvalReport()
    with pytest.raises(NumericError):
        report.add("auc", float("nan"))
    with pytest.raises(NumericError):
        report.add("auc", float("inf"))


def test_report_text_roundtrip_preserves_exact_values():
    report = EvalReport()
    report.add_meta("config_hash", "abc123")
    report.add("triplet_error", 0.1 + 0.2)
    report.add("fitb_accuracy", 1.0 / 3.0)
    again = EvalReport.from_text(report.to_text())
    assert again.rows == report.rows
    assert again.metadata == report.metadata


def test_report_file_roundtrip(tmp_path):
    report = EvalReport()
    report.add("m", 0.25)
    path = tmp_path / "report.tsv"
    write_report(report, path)
    assert read_report(path).rows == report.rows


def test_report_parse_failures():
    with pytest.raises(InputError):
        EvalReport.from_text("bogus\n")
    with pytest.raises(ParseError):
        EvalReport.from_text("# scenet-report\tv1\nauc\tnot-a-number\n")
    report = EvalReport()
    with pytest.raises(InputError):
        report.get("absent")


# ------------------------------------------------------------- triplet error


def test_triplet_error_zero_and_one_by_construction():
    items = ItemTable(
        [
            Item("a", "c", np.array([1.0, 2.0, 3.0])),
            Item("b", "c", np.array([1.0, 2.0, 3.0])),  # clone of a
            Item("far", "c", np.array([9.0, -7.0, 4.0])),
        ]
    )
    model = fresh_model(items)
    perfect = TripletSet([Triplet("a", "b", "far")])
    assert triplet_error_rate(model, perfect, items) == 0.0
    # Tie at d_neg = 0 counts as an error.
    flipped = TripletSet([Triplet("a", "far", "b")])
    assert triplet_error_rate(model, flipped, items) == 1.0


def test_triplet_error_label_flip_complement(tiny_items, tiny_triplets):
    model = fresh_model(tiny_items)
    err = triplet_error_rate(model, tiny_triplets, tiny_items)
    swapped = TripletSet(
        [Triplet(r.anchor, r.negative, r.positive, r.condition) for r in tiny_triplets.records]
    )
    # Random features make exact distance ties vanishingly unlikely.
    assert err + triplet_error_rate(model, swapped, tiny_items) == pytest.approx(1.0)


def test_triplet_error_empty_rejected(tiny_items):
    model = fresh_model(tiny_items)
    with pytest.raises(InputError):
        triplet_error_rate(model, TripletSet([]), tiny_items)


# ---------------------------------------------------------------------- auc


def test_roc_auc_frozen_examples():
    assert roc_auc([0.9, 0.4], [0.5, 0.1]) == 0.75
    assert roc_auc([1.0, 2.0], [0.0, 0.5]) == 1.0
    assert roc_auc([0.3, 0.3], [0.3, 0.3]) == 0.5
    assert roc_auc([0.5], [0.5, 0.5, 0.5]) == 0.5


def test_roc_auc_input_validation():
    with pytest.raises(InputError):
        roc_auc([], [0.1])
    with pytest.raises(InputError):
        roc_auc([0.1], [])
    with pytest.raises(InputError):
        roc_auc([np.nan], [0.1])


def brute_force_auc(pos, neg):
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def test_roc_auc_matches_pairwise_count_over_random_instances():
    rng = np.random.default_rng(42)
    for trial in range(200):
        n_pos = int(rng.integers(1, 12))
        n_neg = int(rng.integers(1, 12))
        if trial % 2 == 0:
            pos = rng.normal(0.3, 1.0, n_pos)
            neg = rng.normal(0.0, 1.0, n_neg)
        else:
            # Discretized scores force many exact ties.
            pos = rng.integers(0, 4, n_pos).astype(float)
            neg = rng.integers(0, 4, n_neg).astype(float)
        assert roc_auc(pos, neg) == pytest.approx(brute_force_auc(pos, neg), abs=1e-12)


# ------------------------------------------------------------- outfit score


def test_outfit_score_identical_pair_is_zero():
    items = ItemTable(
        [Item("a", "c", np.array([1.0, -1.0])), Item("b", "c", np.array([1.0, -1.0]))]
    )
    model = fresh_model(items)
    assert outfit_score(model, ["a", "b"], items) == 0.0


def test_outfit_score_order_invariant(tiny_items):
    model = fresh_model(tiny_items)
    ids = tiny_items.ids[:4]
    base = outfit_score(model, ids, tiny_items)
    assert outfit_score(model, list(reversed(ids)), tiny_items) == pytest.approx(base, abs=1e-12)


def test_outfit_score_is_negated_mean_pair_distance(tiny_items):
    model = fresh_model(tiny_items)
    ids = tiny_items.ids[:3]
    vis = tiny_items.visual_all[tiny_items.indices(ids)]
    ds = []
    for i, j in itertools.combinations(range(3), 2):
        ds.append(model.pair_distances(vis[i : i + 1], vis[j : j + 1])[0])
    expected = -float(np.mean(ds))
    assert outfit_score(model, ids, tiny_items) == pytest.approx(expected, abs=1e-12)


def test_outfit_score_needs_two_items(tiny_items):
    model = fresh_model(tiny_items)
    with pytest.raises(InputError):
        outfit_score(model, tiny_items.ids[:1], tiny_items)


def test_compatibility_auc_validation_and_degenerate_case():
    items = ItemTable(
        [Item(f"i{k}", "c", np.array([1.0, 2.0])) for k in range(4)]
    )
    model = fresh_model(items)
    only_pos = OutfitSet([Outfit("o1", ("i0", "i1"), "compatible")])
    with pytest.raises(InputError):
        compatibility_auc(model, only_pos, items)
    both = OutfitSet(
        [
            Outfit("o1", ("i0", "i1"), "compatible"),
            Outfit("o2", ("i2", "i3"), "incompatible"),
        ]
    )
    # Identical features everywhere: every score ties, AUC collapses to 1/2.
    assert compatibility_auc(model, both, items) == 0.5


# --------------------------------------------------------------------- fitb


def test_fitb_selects_identical_candidate():
    items = ItemTable(
        [
            Item("x", "c", np.array([2.0, 0.5])),
            Item("xc", "c", np.array([2.0, 0.5])),  # clone of x
            Item("far1", "c", np.array([50.0, -9.0])),
            Item("far2", "c", np.array([-40.0, 8.0])),
        ]
    )
    model = fresh_model(items)
    fitb = FitbSet([FitbQuestion(("x",), ("far1", "xc", "far2"), 1)])
    assert fitb_accuracy(model, fitb, items) == 1.0


def test_fitb_all_identical_candidates_tie_to_index_zero(tiny_items):
    items = ItemTable(
        [
            Item("p", "c", np.array([1.0, 0.0])),
            Item("c0", "c", np.array([3.0, 1.0])),
            Item("c1", "c", np.array([3.0, 1.0])),
        ]
    )
    model = fresh_model(items)
    wins = FitbSet([FitbQuestion(("p",), ("c0", "c1"), 0)])
    loses = FitbSet([FitbQuestion(("p",), ("c0", "c1"), 1)])
    assert fitb_accuracy(model, wins, items) == 1.0
    assert fitb_accuracy(model, loses, items) == 0.0


def test_fitb_duplicated_partial_preserves_decisions(tiny_items):
    model = fresh_model(tiny_items)
    ids = tiny_items.ids
    base = FitbSet(
        [
            FitbQuestion((ids[0], ids[1]), (ids[2], ids[3], ids[4]), 1),
            FitbQuestion((ids[5], ids[6]), (ids[7], ids[8], ids[9]), 2),
        ]
    )
    doubled = FitbSet(
        [FitbQuestion(q.partial * 2, q.candidates, q.answer_index) for q in base]
    )
    assert fitb_accuracy(model, base, tiny_items) == fitb_accuracy(model, doubled, tiny_items)


def test_fitb_empty_rejected(tiny_items):
    model = fresh_model(tiny_items)
    with pytest.raises(InputError):
        fitb_accuracy(model, FitbSet([]), tiny_items)


# ------------------------------------------------------------------- purity


@pytest.fixture()
def labeled_triplets(tiny_items):
    return build_triplets(tiny_items, 60, seed=8, conditions=["cond0", "cond1", "cond2"])


def test_purity_label_override_is_perfect(tiny_items, labeled_triplets):
    model = fresh_model(tiny_items, n_masks=3, branch_override="label")
    assert condition_purity(model, labeled_triplets, tiny_items) == 1.0


def test_purity_uniform_override_collapses_to_majority_fraction(tiny_items):
    records = build_triplets(tiny_items, 30, seed=8, conditions=["cond0"]).records
    records += build_triplets(tiny_items, 20, seed=9, conditions=["cond1"]).records
    records += build_triplets(tiny_items, 10, seed=10, conditions=["cond2"]).records
    ts = TripletSet(records)
    model = fresh_model(tiny_items, n_masks=3, branch_override="uniform")
    # Uniform weights put every triplet in group 0, so purity equals the
    # frequency of the most common label.
    assert condition_purity(model, ts, tiny_items) == 0.5


def test_purity_random_override_near_chance(tiny_items):
    ts = build_triplets(tiny_items, 600, seed=12, conditions=["cond0", "cond1", "cond2"])
    model = fresh_model(tiny_items, n_masks=3, branch_override="random")
    purity = condition_purity(model, ts, tiny_items)
    assert 0.28 < purity < 0.48


def test_purity_requires_labels_and_shared_weighting(tiny_items, labeled_triplets):
    model = fresh_model(tiny_items, n_masks=3, branch_override="uniform")
    unlabeled = TripletSet([Triplet("it000", "it001", "it002")])
    with pytest.raises(InputError):
        condition_purity(model, unlabeled, tiny_items)
    with pytest.raises(InputError):
        condition_purity(model, TripletSet([]), tiny_items)
    pairwise = fresh_model(tiny_items, n_masks=3, mode="pair-visual")
    with pytest.raises(ContractError):
        condition_purity(pairwise, labeled_triplets, tiny_items)


# -------------------------------------------------------------------- top-k


def test_top_k_query_clone_ranks_first():
    items = ItemTable(
        [
            Item("q", "c", np.array([1.0, 1.0])),
            Item("clone", "c", np.array([1.0, 1.0])),
            Item("other", "c", np.array([4.0, -2.0])),
        ]
    )
    model = fresh_model(items)
    assert top_k_compatible(model, "q", ["other", "clone"], items, 1) == ["clone"]


def test_top_k_ties_resolve_by_id():
    items = ItemTable(
        [
            Item("q", "c", np.array([0.0, 0.0])),
            Item("zz", "c", np.array([2.0, 2.0])),
            Item("aa", "c", np.array([2.0, 2.0])),
        ]
    )
    model = fresh_model(items)
    assert top_k_compatible(model, "q", ["zz", "aa"], items, 2) == ["aa", "zz"]


def test_top_k_matches_exhaustive_sort(tiny_items):
    model = fresh_model(tiny_items)
    query = tiny_items.ids[0]
    cands = tiny_items.ids[1:]
    vis = tiny_items.visual_all
    q_row = vis[tiny_items.indices([query] * len(cands))]
    d = model.pair_distances(q_row, vis[tiny_items.indices(cands)])
    expected = [item_id for _, item_id in sorted(zip(d, cands))]
    assert top_k_compatible(model, query, cands, tiny_items, len(cands)) == expected
    # k beyond the candidate count returns everything.
    assert top_k_compatible(model, query, cands, tiny_items, 999) == expected
    assert top_k_compatible(model, query, cands, tiny_items, 3) == expected[:3]


def test_top_k_validation(tiny_items):
    model = fresh_model(tiny_items)
    with pytest.raises(InputError):
        top_k_compatible(model, tiny_items.ids[0], tiny_items.ids[1:], tiny_items, 0)
    with pytest.raises(InputError):
        top_k_compatible(model, tiny_items.ids[0], [], tiny_items, 2)


# ---------------------------------------------------------------- baselines


def test_uniform_baseline_weights_and_embeddings(tiny_items):
    reference = fresh_model(tiny_items, n_masks=3)
    baseline = make_baseline("uniform-average", reference)
    vis = tiny_items.visual_all[:4]
    e_i, e_j, w = baseline.embed_pair(vis, vis)
    assert np.allclose(w, 1.0 / 3.0, atol=1e-15)
    v = baseline.encode(vis).value
    mean_mask = baseline.mask_bank.mean(axis=0)
    assert np.allclose(e_i, mean_mask * v, atol=1e-12)
    # The reference keeps its learned branch untouched.
    assert reference.branch_override is None


def test_single_embedding_baseline_is_plain_encoder_distance(tiny_items):
    reference = fresh_model(tiny_items, n_masks=4)
    baseline = make_baseline("single-embedding", reference)
    assert baseline.n_masks == 1
    assert np.array_equal(baseline.mask_bank, np.ones((1, baseline.d_dim)))
    vis = tiny_items.visual_all
    # Encoder weights carry over from the reference model.
    assert np.array_equal(baseline.encode(vis).value, reference.encode(vis).value)
    d = baseline.pair_distances(vis[:3], vis[3:6])
    v = reference.encode(vis).value
    assert np.allclose(d, np.linalg.norm(v[:3] - v[3:6], axis=1), atol=1e-12)


def test_fixed_disjoint_baseline_masks_partition_dimensions(tiny_items):
    reference = fresh_model(tiny_items, n_masks=3)
    baseline = make_baseline("fixed-disjoint", reference)
    masks = baseline.mask_bank
    assert masks.shape == (3, 6)
    assert set(np.unique(masks)) == {0.0, 1.0}
    assert np.array_equal(masks.sum(axis=0), np.ones(6))
    assert baseline.branch_override == "label"


def test_fixed_disjoint_needs_divisible_width(tiny_items):
    reference = SceModel(f_dim=tiny_items.f_dim, d_dim=7, n_masks=3, mode="pair-visual", seed=1)
    with pytest.raises(ConfigError):
        make_baseline("fixed-disjoint", reference)


def test_fixed_disjoint_requires_labels_at_eval(tiny_items):
    baseline = make_baseline("fixed-disjoint", fresh_model(tiny_items, n_masks=3))
    unlabeled = TripletSet([Triplet("it000", "it001", "it002")])
    with pytest.raises(InputError):
        triplet_error_rate(baseline, unlabeled, tiny_items)


def test_random_baseline_seeded_determinism(tiny_items, tiny_triplets):
    reference = fresh_model(tiny_items, n_masks=3)
    err_a = triplet_error_rate(make_baseline("random-weights", reference, seed=5),
                               tiny_triplets, tiny_items)
    err_b = triplet_error_rate(make_baseline("random-weights", reference, seed=5),
                               tiny_triplets, tiny_items)
    assert err_a == err_b


def test_make_baseline_from_config_and_bad_inputs(tiny_items):
    cfg = TrainConfig(d_dim=6, n_masks=2, seed=1)
    model = make_baseline("uniform-average", cfg, f_dim=tiny_items.f_dim)
    assert model.branch_override == "uniform"
    single = make_baseline("single-embedding", cfg, f_dim=tiny_items.f_dim)
    assert single.n_masks == 1
    with pytest.raises(ConfigError):
        make_baseline("uniform-average", cfg)  # f_dim missing
    with pytest.raises(ConfigError):
        make_baseline("nearest-neighbour", fresh_model(tiny_items))
    with pytest.raises(ConfigError):
        make_baseline("uniform-average", "not a model")


# ---------------------------------------------------------------- ablations


@pytest.fixture(scope="module")
def ablation_data():
    spec = SyntheticSpec(
        k=2, n_items=100, f_dim=10, d_latent=6, n_triplets=500, seed=19, min_gap=0.1
    )
    data = generate_synthetic(spec)
    train_ts = data.triplets.subset(np.arange(400))
    eval_ts = data.triplets.subset(np.arange(400, 500))
    return data.items, train_ts, eval_ts


def test_ablation_singleton_equals_direct_run(ablation_data):
    items, train_ts, eval_ts = ablation_data
    base = TrainConfig(d_dim=6, n_masks=2, epochs=2, batch_size=64,
                       learning_rate=3e-3, seed=3, val_fraction=0.0)
    sweep = ablation_sweep(base, "n_masks", [3], items, train_ts, eval_ts)
    direct_cfg = replace(base, n_masks=3)
    model = build_model(direct_cfg, items.f_dim, items.t_dim)
    model, _ = train(model, items, train_ts, direct_cfg)
    direct = triplet_error_rate(model, eval_ts, items, direct_cfg.resolved_weighting())
    assert sweep.errors == [direct]
    assert sweep.axis == "n_masks"
    assert sweep.values == [3]


def test_ablation_train_size_axis_and_report(ablation_data):
    items, train_ts, eval_ts = ablation_data
    base = TrainConfig(d_dim=6, n_masks=2, epochs=1, batch_size=64, seed=3, val_fraction=0.0)
    sweep = ablation_sweep(base, "train_size", [50, 200], items, train_ts, eval_ts)
    assert len(sweep.errors) == 2
    assert all(0.0 <= e <= 1.0 for e in sweep.errors)
    report = sweep.to_report({"run": "t"})
    assert report.names() == ["train_size=50", "train_size=200"]
    assert report.metadata["ablation_axis"] == "train_size"
    assert report.get("train_size=50") == sweep.errors[0]


def test_ablation_validation(ablation_data):
    items, train_ts, eval_ts = ablation_data
    base = TrainConfig(d_dim=6, n_masks=2, epochs=1, seed=3)
    with pytest.raises(ConfigError):
        ablation_sweep(base, "margin", [0.1], items, train_ts, eval_ts)
    with pytest.raises(InputError):
        ablation_sweep(base, "n_masks", [], items, train_ts, eval_ts)
    with pytest.raises(InputError):
        ablation_sweep(base, "train_size", [10_000], items, train_ts, eval_ts)


# ------------------------------------------------------------------- export


def test_export_embeddings_roundtrip_exact(tmp_path, tiny_items):
    model = fresh_model(tiny_items, n_masks=3)
    path = tmp_path / "emb.tsv"
    export_condition_embeddings(model, tiny_items, path)
    ids, arr = load_condition_embeddings(path)
    assert ids == tiny_items.ids
    assert arr.shape == (len(tiny_items), 3, model.d_dim)
    v = model.encode(tiny_items.visual_all).value
    for j in range(3):
        assert np.array_equal(arr[:, j, :], model.mask_bank[j] * v)


def test_export_single_mask_rows_equal_encoder_output(tmp_path, tiny_items):
    model = SceModel(
        f_dim=tiny_items.f_dim, d_dim=6, n_masks=1, mode="pair-visual", seed=1,
        fixed_masks=np.ones((1, 6)),
    )
    path = tmp_path / "emb.tsv"
    export_condition_embeddings(model, tiny_items, path)
    _, arr = load_condition_embeddings(path)
    assert np.array_equal(arr[:, 0, :], model.encode(tiny_items.visual_all).value)


def test_load_embeddings_malformed(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("a\t0\n")
    with pytest.raises(ParseError):
        load_condition_embeddings(bad)
    missing = tmp_path / "missing.tsv"
    missing.write_text("a\t0\t1.0,2.0\na\t2\t1.0,2.0\n")
    with pytest.raises(ParseError):
        load_condition_embeddings(missing)
    empty = tmp_path / "empty.tsv"
    empty.write_text("# nothing\n")
    with pytest.raises(ParseError):
        load_condition_embeddings(empty)


# ----------------------------------------------------------------- evaluate


def test_evaluate_full_report(tiny_items, labeled_triplets):
    # Uniform override keeps pairwise metrics available while making the
    # purity grouping well defined.
    model = fresh_model(tiny_items, n_masks=3, branch_override="uniform")
    outfits = OutfitSet(
        [
            Outfit("o1", tuple(tiny_items.ids[:3]), "compatible"),
            Outfit("o2", tuple(tiny_items.ids[3:6]), "incompatible"),
        ]
    )
    fitb = FitbSet([FitbQuestion(tuple(tiny_items.ids[:2]), tuple(tiny_items.ids[2:5]), 0)])
    report = evaluate(
        model, tiny_items, labeled_triplets, outfits, fitb, metadata={"run": "unit"}
    )
    assert report.names() == [
        "triplet_error", "condition_purity", "compatibility_auc", "fitb_accuracy",
    ]
    assert report.metadata["run"] == "unit"
    assert report.metadata["items_hash"] == tiny_items.content_hash()
    assert report.get("triplet_error") == triplet_error_rate(model, labeled_triplets, tiny_items)


def test_evaluate_without_sets_rejected(tiny_items):
    model = fresh_model(tiny_items)
    with pytest.raises(InputError):
        evaluate(model, tiny_items)
