"""Release gate: one test per shipped guarantee.

Each test here pins a user-facing promise of the package: exact gradient
correctness, the algebraic invariants of the weighted-mask composition,
metric-oracle equivalence, the headline synthetic-fixture trends, and
end-to-end determinism of the CLI artifacts.  Tolerances are stated
inline and are not to be loosened.
"""

import base64
import itertools
import json
import re
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from scenet import cli
from scenet.data import (
    SyntheticSpec,
    filter_categories,
    generate_synthetic,
)
from scenet.evaluation import (
    compatibility_auc,
    condition_purity,
    export_condition_embeddings,
    fitb_accuracy,
    load_condition_embeddings,
    make_baseline,
    roc_auc,
    triplet_error_rate,
)
from scenet.losses import gradient_suite
from scenet.model import MODES, SceModel, load_model, save_model
from scenet.training import TrainConfig, build_model, train

FIXTURES = Path(__file__).parent / "fixtures"

# Frozen fixture recipes.  The trend tests below depend on these exact
# values; regenerating with another seed requires re-validating margins.

K4_SPEC = SyntheticSpec(
    k=4, n_items=2400, f_dim=48, d_latent=16, n_triplets=44000, seed=21, min_gap=0.1
)
K4_CFG = TrainConfig(
    d_dim=24, n_masks=4, mode="triplet-visual", weighting="shared-triplet",
    branch_hidden=(64,), margin=0.4, epochs=45, batch_size=128,
    learning_rate=3e-3, l1=5e-3, seed=7, val_fraction=0.05,
)

PAIR_SPEC = SyntheticSpec(
    k=4, n_items=2400, f_dim=48, d_latent=16, n_triplets=40000,
    n_outfits=400, n_fitb=400, n_candidates=4, outfit_size=4,
    n_levels=8, seed=21, min_gap=0.1,
)
PAIR_CFG = TrainConfig(
    d_dim=24, n_masks=4, mode="pair-visual", branch_hidden=(48, 24),
    epochs=30, batch_size=128, learning_rate=3e-3, l1=5e-3, seed=7,
    val_fraction=0.05,
)

PURITY_SPEC = SyntheticSpec(
    k=3, n_items=600, f_dim=32, d_latent=12, n_triplets=9000, seed=11, min_gap=0.1
)
PURITY_CFG = TrainConfig(
    d_dim=16, n_masks=3, mode="triplet-visual", weighting="shared-triplet",
    branch_hidden=(32, 16), epochs=60, batch_size=96,
    learning_rate=3e-3, l1=5e-2, seed=5, val_fraction=0.1,
)


@pytest.fixture(scope="module")
def k4_data():
    data = generate_synthetic(K4_SPEC)
    train_ts = data.triplets.subset(np.arange(40_000))
    eval_ts = data.triplets.subset(np.arange(40_000, 44_000))
    return data.items, train_ts, eval_ts


def _train_and_error(items, train_ts, eval_ts, config):
    model = build_model(config, items.f_dim)
    started = time.perf_counter()
    model, _ = train(model, items, train_ts, config)
    seconds = time.perf_counter() - started
    err = triplet_error_rate(model, eval_ts, items, config.resolved_weighting())
    return err, seconds


@pytest.fixture(scope="module")
def k4_errors(k4_data):
    """Every trained variant of the K=4 fixture, shared across trend tests."""
    items, train_ts, eval_ts = k4_data
    out = {}
    for m in (1, 2, 3, 4):
        out[f"m{m}"] = _train_and_error(items, train_ts, eval_ts, replace(K4_CFG, n_masks=m))
    for frac, key in ((0.125, "m4_noise125"), (0.5, "m4_noise50")):
        out[key] = _train_and_error(
            items, train_ts, eval_ts, replace(K4_CFG, noise_fraction=frac)
        )
    return out


@pytest.fixture(scope="module")
def pair_bundle():
    return generate_synthetic(PAIR_SPEC)


@pytest.fixture(scope="module")
def pair_results(pair_bundle):
    """SCE model vs the two fixed-weight baselines, identical budgets."""
    data = pair_bundle

    def fit_and_score(model):
        model, _ = train(model, data.items, data.triplets, PAIR_CFG)
        return {
            "auc": compatibility_auc(model, data.outfits, data.items),
            "fitb": fitb_accuracy(model, data.fitb, data.items),
        }

    results = {"sce": fit_and_score(build_model(PAIR_CFG, data.items.f_dim))}
    for kind, key in (("uniform-average", "uniform"), ("random-weights", "random")):
        baseline = make_baseline(kind, PAIR_CFG, seed=99, f_dim=PAIR_SPEC.f_dim)
        results[key] = fit_and_score(baseline)
    return results


# 1. Exact gradients in every branch mode, with and without the auxiliary
#    losses: max relative error < 1e-4 against central finite differences.


def test_gradient_suite_every_mode_under_tolerance():
    started = time.perf_counter()
    results = gradient_suite(seed=0, eps=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - started
    assert len(results) == 8
    for name, report in results:
        assert report.passed, f"{name}: {report.failures}"
        assert report.max_rel_error < 1e-4, name
    assert elapsed < 60.0


# 2. Simplex and reduction invariants of the weighted-mask composition.


def test_simplex_and_reduction_invariants():
    rng = np.random.default_rng(0)
    # (a) 1000 weight evaluations across all four branch modes sum to 1.
    per_mode = 250
    for mode in MODES:
        model = SceModel(f_dim=8, d_dim=6, n_masks=3, mode=mode, t_dim=5, seed=3)
        v_i = model.encode(rng.standard_normal((per_mode, 8)))
        v_j = model.encode(rng.standard_normal((per_mode, 8)))
        t_i = rng.standard_normal((per_mode, 5))
        t_j = rng.standard_normal((per_mode, 5))
        if mode == "triplet-visual":
            v_k = model.encode(rng.standard_normal((per_mode, 8)))
            w = model.condition_weights(v_i, v_j, v_k).value
        elif mode == "pair-visual":
            w = model.condition_weights(v_i, v_j).value
        elif mode == "pair-text":
            w = model.condition_weights(t_i, t_j).value
        else:
            w = model.condition_weights(v_i, t_i, v_j, t_j).value
        assert np.max(np.abs(w.sum(axis=-1) - 1.0)) < 1e-6, mode

    # (b) all-ones masks: final embeddings equal general embeddings to 1e-12.
    ones = SceModel(
        f_dim=8, d_dim=6, n_masks=3, mode="pair-visual", seed=3,
        fixed_masks=np.ones((3, 6)),
    )
    x_i = rng.standard_normal((64, 8))
    x_j = rng.standard_normal((64, 8))
    e_i, e_j, _ = ones.embed_pair(x_i, x_j)
    assert np.max(np.abs(e_i - ones.encode(x_i).value)) < 1e-12
    assert np.max(np.abs(e_j - ones.encode(x_j).value)) < 1e-12

    # (c) M=1: the forward pass ignores the branch entirely (bit-compare).
    a = SceModel(f_dim=8, d_dim=6, n_masks=1, mode="pair-visual", seed=3)
    b = SceModel(f_dim=8, d_dim=6, n_masks=1, mode="pair-visual", seed=3)
    scramble = np.random.default_rng(123)
    for name, t in b.params.items():
        if name.startswith("branch."):
            t.value = scramble.standard_normal(t.value.shape)
    ea, _, _ = a.embed_pair(x_i, x_j)
    eb, _, _ = b.embed_pair(x_i, x_j)
    assert np.array_equal(ea, eb)


# 3. The rank-based AUC equals brute-force pair counting exactly.


def test_auc_matches_brute_force_on_200_instances():
    rng = np.random.default_rng(7)
    for trial in range(200):
        n_pos = int(rng.integers(1, 15))
        n_neg = int(rng.integers(1, 15))
        if trial % 3 == 0:
            # Heavy ties: scores drawn from four distinct values.
            pos = rng.integers(0, 4, n_pos).astype(float)
            neg = rng.integers(0, 4, n_neg).astype(float)
        else:
            pos = rng.normal(0.4, 1.0, n_pos)
            neg = rng.normal(0.0, 1.0, n_neg)
        brute = 0.0
        for p, n in itertools.product(pos, neg):
            brute += 1.0 if p > n else (0.5 if p == n else 0.0)
        brute /= n_pos * n_neg
        assert roc_auc(pos, neg) == brute, f"trial {trial}"


# 4. Held-out error improves monotonically with the mask count on the K=4
#    fixture, and the full-width model is solidly below 10% error.


def test_error_improves_with_mask_count(k4_errors):
    err2, sec2 = k4_errors["m2"]
    err3, sec3 = k4_errors["m3"]
    err4, sec4 = k4_errors["m4"]
    assert err4 < err3 < err2, (err2, err3, err4)
    assert err4 < 0.10, err4
    assert sec2 + sec3 + sec4 < 900.0


# 5. The learned weight branch beats fixed-weight baselines under identical
#    seeds and budgets: >= 5 points FITB accuracy and >= 0.03 AUC.


def test_learned_weights_beat_fixed_weight_baselines(pair_results):
    sce = pair_results["sce"]
    for key in ("uniform", "random"):
        other = pair_results[key]
        assert sce["fitb"] - other["fitb"] >= 0.05, (key, sce, other)
        assert sce["auc"] - other["auc"] >= 0.03, (key, sce, other)


# 6. Robustness to corrupted supervision: 12.5% random triplets cost at
#    most 2 points of held-out error, and even at 50% noise the model stays
#    below the clean single-mask baseline.


def test_noise_robustness_trends(k4_errors):
    clean, _ = k4_errors["m4"]
    light, _ = k4_errors["m4_noise125"]
    heavy, _ = k4_errors["m4_noise50"]
    single_clean, _ = k4_errors["m1"]
    assert light - clean <= 0.02, (clean, light)
    assert heavy < single_clean, (heavy, single_clean)


# 7. The argmax of the learned weights recovers the planted condition:
#    purity >= 0.8 on the K=3 fixture.


def test_condition_purity_after_training():
    data = generate_synthetic(PURITY_SPEC)
    model = build_model(PURITY_CFG, data.items.f_dim)
    model, _ = train(model, data.items, data.triplets, PURITY_CFG)
    purity = condition_purity(model, data.triplets, data.items)
    assert purity >= 0.8, purity


# 8. Transfer to categories never seen during training: FITB accuracy on
#    excluded-candidate questions beats chance by >= 15 points.


def test_unseen_category_fitb_beats_chance(pair_bundle):
    data = pair_bundle
    split = filter_categories(data.items, data.triplets, data.fitb, ["cat0"])
    assert len(split.eval_fitb) > 0
    model = build_model(PAIR_CFG, split.train_items.f_dim)
    model, _ = train(model, split.train_items, split.train_triplets, PAIR_CFG)
    accuracy = fitb_accuracy(model, split.eval_fitb, data.items)
    chance = 1.0 / PAIR_SPEC.n_candidates
    assert accuracy >= chance + 0.15, (accuracy, chance)


# 9. Determinism and round-trips: byte-identical artifacts from identical
#    inputs, lossless persistence, and line-numbered rejection of every
#    malformed input fixture with the documented exit codes.


MINI_SPEC = {
    "k": 2, "n_items": 80, "f_dim": 8, "d_latent": 4, "n_triplets": 300,
    "n_outfits": 20, "n_fitb": 20, "n_candidates": 3, "outfit_size": 3,
    "seed": 5, "min_gap": 0.1,
}
MINI_CFG = {
    "d_dim": 6, "n_masks": 2, "mode": "pair-visual", "epochs": 2,
    "batch_size": 64, "learning_rate": 3e-3, "seed": 3, "val_fraction": 0.1,
}


def _pipeline(root: Path) -> dict:
    root.mkdir(parents=True, exist_ok=True)
    spec = root / "spec.json"
    spec.write_text(json.dumps(MINI_SPEC))
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(MINI_CFG))
    data, rundir, evaldir = root / "data", root / "run", root / "eval"
    assert cli.main(["gen-synthetic", "--config", str(spec), "--out", str(data)]) == 0
    assert cli.main([
        "train", "--config", str(cfg), "--features", str(data / "features.tsv"),
        "--triplets", str(data / "triplets.txt"), "--out", str(rundir),
    ]) == 0
    assert cli.main([
        "eval", "--checkpoint", str(rundir / "checkpoint.json"),
        "--features", str(data / "features.tsv"),
        "--triplets", str(data / "triplets.txt"),
        "--outfits", str(data / "outfits.txt"),
        "--fitb", str(data / "fitb.txt"), "--out", str(evaldir),
    ]) == 0
    return {
        "features": data / "features.tsv",
        "triplets": data / "triplets.txt",
        "checkpoint": rundir / "checkpoint.json",
        "report": evaldir / "report.tsv",
    }


def test_determinism_and_roundtrips(tmp_path, capsys):
    # (a) Two runs from identical inputs give byte-identical artifacts.
    first = _pipeline(tmp_path / "one")
    second = _pipeline(tmp_path / "two")
    for key in ("features", "triplets", "checkpoint", "report"):
        assert first[key].read_bytes() == second[key].read_bytes(), key

    # (b) Checkpoint persistence is lossless, byte for byte.
    model = load_model(first["checkpoint"])
    resaved = tmp_path / "resaved.json"
    save_model(model, resaved)
    assert resaved.read_bytes() == first["checkpoint"].read_bytes()

    # (b') The embedding export reads back to the exact float64 arrays.
    from scenet.data import load_feature_table

    items = load_feature_table(first["features"])
    export = tmp_path / "emb.tsv"
    export_condition_embeddings(model, items, export)
    ids, arr = load_condition_embeddings(export)
    assert ids == items.ids
    v = model.encode(items.visual_all).value
    for j in range(model.n_masks):
        assert np.array_equal(arr[:, j, :], model.mask_bank[j] * v)

    # (c) Every malformed fixture is rejected: exit code 3 and an error
    #     message carrying its path and line number.
    valid = FIXTURES / "valid"
    bad = sorted((FIXTURES / "bad").iterdir())
    assert len(bad) == 17
    ck = tmp_path / "tiny_ck"
    tiny_cfg = tmp_path / "tiny_cfg.json"
    tiny_cfg.write_text(json.dumps({
        "d_dim": 4, "n_masks": 2, "mode": "pair-visual", "epochs": 0,
        "batch_size": 2, "seed": 0, "val_fraction": 0.0,
    }))
    assert cli.main([
        "train", "--config", str(tiny_cfg), "--features", str(valid / "features.tsv"),
        "--triplets", str(valid / "triplets.txt"), "--out", str(ck),
    ]) == 0
    checkpoint = str(ck / "checkpoint.json")
    capsys.readouterr()
    for path in bad:
        name = path.name
        if name.startswith("features"):
            argv = ["train", "--config", str(tiny_cfg), "--features", str(path),
                    "--triplets", str(valid / "triplets.txt"), "--out", str(tmp_path / "o")]
        elif name.startswith("triplets"):
            argv = ["train", "--config", str(tiny_cfg),
                    "--features", str(valid / "features.tsv"),
                    "--triplets", str(path), "--out", str(tmp_path / "o")]
        elif name.startswith("outfits"):
            argv = ["eval", "--checkpoint", checkpoint,
                    "--features", str(valid / "features.tsv"),
                    "--outfits", str(path), "--out", str(tmp_path / "o")]
        else:
            argv = ["eval", "--checkpoint", checkpoint,
                    "--features", str(valid / "features.tsv"),
                    "--fitb", str(path), "--out", str(tmp_path / "o")]
        assert cli.main(argv) == 3, name
        err = capsys.readouterr().err
        assert re.search(rf"{re.escape(name)}:\d+", err), (name, err)

    # (c') A checkpoint poisoned with non-finite values is refused too.
    state = json.loads(first["checkpoint"].read_text())
    entry = state["params"]["masks"]
    poisoned = np.full(tuple(entry["shape"]), np.inf)
    entry["data"] = base64.b64encode(poisoned.astype("<f8").tobytes()).decode("ascii")
    bad_ck = tmp_path / "poisoned.json"
    bad_ck.write_text(json.dumps(state))
    assert cli.main([
        "eval", "--checkpoint", str(bad_ck), "--features", str(first["features"]),
        "--triplets", str(first["triplets"]), "--out", str(tmp_path / "o2"),
    ]) == 3
