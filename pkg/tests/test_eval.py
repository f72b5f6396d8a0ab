import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facelora.data import DatasetManifest, Pair, Record
from facelora.eval import (
    EmbeddingCache,
    bias_report,
    contiguous_folds,
    evaluate,
    pair_scores,
    roc_curve,
    similarity,
    tar_at_far,
    tenfold_accuracy,
    tenfold_verification,
    threshold_candidates,
)
from group_tables import BIAS_ROWS
from oracles import brute_tar_at_far, brute_tenfold, score_set


def test_similarity_basics():
    assert similarity([1, 0], [2, 0]) == 1.0
    assert similarity([1, 0], [0, 3]) == 0.0
    assert similarity([1, 0], [-1, 0]) == -1.0
    with pytest.raises(ValueError, match="zero-norm"):
        similarity([0, 0], [1, 0])
    a = np.random.default_rng(0).normal(size=(5, 4))
    assert pair_scores(a, a) == pytest.approx(np.ones(5))


def test_separable_scores_give_full_accuracy():
    scores = [0.9, 0.8, 0.7, 0.3, 0.2, 0.1] * 5
    labels = [1, 1, 1, 0, 0, 0] * 5
    folds = contiguous_folds(30)
    assert tenfold_accuracy(scores, labels, folds) == 100.0


def test_threshold_candidates_cover_gaps():
    c = threshold_candidates([0.2, 0.4, 0.4, 0.8])
    assert c.tolist() == [0.2 - 1, 0.30000000000000004, 0.6000000000000001, 1.8]


@pytest.mark.parametrize("seed,quantize", [(0, None), (1, None), (2, 0.05), (3, 0.5)])
def test_tenfold_matches_brute_force(seed, quantize):
    s, y, f = score_set(seed, n=300, quantize=quantize)
    res = tenfold_verification(s, y, f)
    accs, taus = brute_tenfold(s, y, f)
    assert res.fold_accuracies == accs
    assert res.thresholds == taus
    assert res.accuracy == 100.0 * float(np.mean(np.array(accs) / 100.0))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_tar_at_far_matches_brute_force(seed):
    s, y, _ = score_set(seed, n=400, quantize=0.01 if seed == 2 else None)
    for target in (0.5, 0.1, 0.02, 0.005, 1e-3):
        got = tar_at_far(s, y, [target])[0]
        tar, t = brute_tar_at_far(s, y, target)
        assert (got.tar, got.threshold) == (tar, t)
        assert got.far <= target


def test_tar_unattainable_flag():
    s, y, _ = score_set(0, n=200)
    res = {r.far_target: r for r in tar_at_far(s, y, [0.1, 1e-3])}
    assert res[0.1].attainable and not res[1e-3].attainable
    assert res[1e-3].far == 0.0


def test_roc_endpoints():
    s, y, _ = score_set(4, n=100)
    far, tar, t = roc_curve(s, y)
    assert (far[0], tar[0]) == (1.0, 1.0) and (far[-1], tar[-1]) == (0.0, 0.0)
    assert np.all(np.diff(far) <= 0) and np.all(np.diff(tar) <= 0)
    assert t[-1] == math.inf


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_monotone_transform_invariance(seed, kind):
    s, y, f = score_set(seed % 1000, n=200, quantize=0.1 if seed % 3 == 0 else None)
    transforms = {
        1: lambda x: 3 * x + 7,
        2: np.exp,
        3: lambda x: np.arctan(x) ** 3,
        4: lambda x: x + x**3,
        5: lambda x: np.cbrt(x) * 2,
    }
    t = transforms[kind](s)
    assert tenfold_verification(t, y, f).fold_accuracies == tenfold_verification(s, y, f).fold_accuracies
    assert [r.tar for r in tar_at_far(t, y, [0.1, 0.01])] == [r.tar for r in tar_at_far(s, y, [0.1, 0.01])]


def test_tar_monotone_in_target():
    s, y, _ = score_set(5, n=1000)
    targets = [1e-3, 5e-3, 0.01, 0.05, 0.1, 0.5]
    tars = [r.tar for r in tar_at_far(s, y, targets)]
    assert tars == sorted(tars)


def test_fold_errors():
    s, y, _ = score_set(0, n=50)
    with pytest.raises(ValueError, match="missing fold"):
        tenfold_accuracy(s, y, np.zeros(50, int))
    with pytest.raises(ValueError, match="length"):
        tenfold_accuracy(s, y, np.zeros(49, int))
    with pytest.raises(ValueError, match="non-finite"):
        tenfold_accuracy(np.full(50, np.nan), y, contiguous_folds(50))


# -- bias ----------------------------------------------------------------------


def test_bias_hand_example():
    rep = bias_report({"a": 90.0, "b": 80.0})
    assert rep.average == 85.0
    assert rep.std == pytest.approx(math.sqrt(50))
    assert rep.ser == 2.0


@pytest.mark.parametrize("row", BIAS_ROWS, ids=[r[0] for r in BIAS_ROWS])
def test_bias_reproduces_published_rows(row):
    _, *accs, avg, std, ser = row
    rep = bias_report(accs)
    assert abs(rep.average - avg) <= 0.01
    assert abs(rep.std - std) <= 0.01
    assert abs(rep.ser - ser) <= 0.01


def test_population_std_would_miss_published_rows():
    # the sample (n-1) convention is the one the published rows follow
    misses = sum(abs(np.std(r[1:5]) - r[6]) > 0.01 for r in BIAS_ROWS)
    assert misses == len(BIAS_ROWS)


def test_bias_edge_cases():
    assert bias_report([100.0, 100.0]).ser == 1.0
    rep = bias_report([100.0, 90.0])
    assert rep.ser_infinite and rep.to_dict()["ser"] == "inf"
    with pytest.raises(ValueError, match="2 groups"):
        bias_report([90.0])
    with pytest.raises(ValueError, match="percent"):
        bias_report([90.0, 101.0])


# -- evaluate --------------------------------------------------------------------


def _toy_protocol(n_ids=8, per=4, dim=6, seed=0, groups=2):
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(n_ids, dim))
    recs, table = [], {}
    for i in range(n_ids):
        for k in range(per):
            p = f"i{i}/{k}.png"
            recs.append(Record(p, f"i{i}", f"g{i % groups}"))
            table[p] = centres[i] + 0.3 * rng.normal(size=dim)
    pairs = []
    for fold in range(10):
        for j in range(4):
            i = (fold + j) % n_ids
            pairs.append(Pair(f"i{i}/0.png", f"i{i}/{1 + j % 3}.png", True, fold))
            pairs.append(Pair(f"i{i}/0.png", f"i{(i + groups) % n_ids}/{j}.png", False, fold))
    return DatasetManifest(tuple(recs)), table, pairs


def test_evaluate_report_and_bias_block(tmp_path):
    manifest, table, pairs = _toy_protocol()
    rep = evaluate(table, pairs, manifest)
    assert rep.n_pairs == 80 and rep.n_genuine == 40
    assert rep.bias is not None and rep.bias.groups == ["g0", "g1"]
    files = rep.write(tmp_path)
    data = json.loads(files["report"].read_text())
    assert data["accuracy"] == rep.accuracy
    assert files["summary"].read_text().startswith("metric,value\n")
    assert files["roc"].read_text().startswith("far,tar\n")


def test_evaluate_is_json_clean_with_unattainable_targets(tmp_path):
    manifest, table, pairs = _toy_protocol()
    rep = evaluate(table, pairs, manifest, far_targets=(1e-5,))
    json.loads(rep.to_json())  # strict JSON, no bare Infinity
    assert not rep.tar_at_far[0].attainable


def test_evaluate_rejects_unknown_paths():
    manifest, table, pairs = _toy_protocol()
    bad = pairs + [Pair("nope.png", "i0/0.png", False, 0)]
    with pytest.raises(KeyError, match="nope.png"):
        evaluate(table, bad, manifest)
    with pytest.raises(ValueError, match="empty"):
        evaluate(table, [])


def test_embedding_cache_embeds_each_image_once():
    calls = []

    def embed(paths):
        calls.extend(paths)
        return np.ones((len(paths), 3))

    cache = EmbeddingCache(embed)
    cache(["a", "b"])
    cache(["b", "c", "a"])
    assert sorted(calls) == ["a", "b", "c"]
