import numpy as np
import pytest
import scikit_posthocs as sp
from hypothesis import given, settings, strategies as st
from scipy import stats

from oracles import dice_oracle, pr_auc_oracle, pro_auc_oracle, roc_auc_oracle, roc_auc_pairwise
from sae_ocsvm.errors import MetricError
from sae_ocsvm.metrics import (
    ScoredVoxels,
    aggregate_report,
    best_dice,
    connected_components,
    dice_at,
    dunn_test,
    evaluate_map,
    kruskal_wallis,
    pr_auc,
    pro_auc,
    roc_auc,
    to_text,
    to_tsv,
)
from sae_ocsvm.volume import AnomalyMap


def _instance(rng, shape=(5, 10, 10), p_lesion=0.08, levels=None):
    """Random map + lesion mask; ``levels`` quantises scores to force ties."""
    scores = rng.random(shape)
    if levels:
        scores = np.floor(scores * levels) / levels
    labels = rng.random(shape) < p_lesion
    valid = rng.random(shape) < 0.9
    labels[0, 0, 0], labels[0, 0, 1] = True, False
    valid[0, 0, 0] = valid[0, 0, 1] = True
    return AnomalyMap(np.where(valid, scores, 0.0), valid), labels


def _component_ids(labels, valid, connectivity=26):
    lesions = connected_components(labels & valid, connectivity)
    ids = np.zeros(labels.size, dtype=int)
    for k, comp in enumerate(lesions.components, start=1):
        ids[comp] = k
    return ids.reshape(labels.shape)[valid], lesions


# simple cases ---------------------------------------------------------------------
def test_roc_simple_cases():
    sv = ScoredVoxels([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert roc_auc(sv) == 1.0
    assert roc_auc(ScoredVoxels(np.zeros(6), [1, 0, 0, 1, 0, 0])) == 0.5
    with pytest.raises(MetricError):
        roc_auc(ScoredVoxels([0.1, 0.2], [0, 0]))


def test_pr_simple_cases():
    assert pr_auc(ScoredVoxels([0.9, 0.8, 0.2], [1, 1, 0])) == 1.0
    labels = np.array([1, 0, 0, 0, 1, 0, 0, 0])
    assert pr_auc(ScoredVoxels(np.ones(8), labels)) == pytest.approx(0.25)
    with pytest.raises(MetricError):
        pr_auc(ScoredVoxels([0.1], [0]))


def test_best_dice_simple_cases():
    assert best_dice(ScoredVoxels([1.0, 0.0, 1.0], [1, 0, 1]))[0] == 1.0
    assert best_dice(ScoredVoxels([0.9, 0.1, 0.2], [1, 0, 0])) == (1.0, 0.9)


def test_connected_components_connectivity():
    m = np.zeros((4, 4, 4), bool)
    m[1, 1, 1] = True
    assert connected_components(m).sizes == [1]
    m[2, 2, 2] = True  # shares only a corner
    assert len(connected_components(m, 26).components) == 1
    assert len(connected_components(m, 6).components) == 2
    assert connected_components(np.zeros((3, 3, 3), bool)).components == []


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([6, 18, 26]))
def test_components_partition_the_mask(seed, conn):
    m = np.random.default_rng(seed).random((6, 6, 6)) < 0.3
    comps = connected_components(m, conn).components
    flat = np.concatenate(comps) if comps else np.array([], int)
    assert len(flat) == m.sum() == len(set(flat.tolist()))
    assert set(flat.tolist()) == set(np.flatnonzero(m).tolist())


def test_pro_small_lesion_weighs_like_large():
    # lesion A: 1 voxel, top score; lesion B: 100 voxels, middling scores
    shape = (10, 11, 11)
    labels = np.zeros(shape, bool)
    labels[0, 0, 0] = True
    labels[5:9, 2:7, 2:7] = True  # 100 voxels
    rng = np.random.default_rng(0)
    scores = rng.random(shape) * 0.5
    scores[0, 0, 0] = 10.0
    scores[labels & (np.arange(labels.size).reshape(shape) != 0)] = rng.random(100) * 0.5 + 0.25
    amap = AnomalyMap(scores, np.ones(shape, bool))
    sv = ScoredVoxels.from_map(amap, labels)
    lesions = connected_components(labels)
    assert len(lesions.components) == 2
    small = 0.05
    assert pro_auc(sv, lesions, small) > roc_auc(sv, small)
    ids, _ = _component_ids(labels, amap.valid_mask)
    assert pro_auc(sv, lesions, small) == pytest.approx(pro_auc_oracle(sv.scores, sv.labels, ids, small), abs=1e-12)


# oracle equivalence ----------------------------------------------------------------
@pytest.mark.parametrize("seed", range(40))
def test_metrics_match_threshold_enumeration(seed):
    rng = np.random.default_rng(seed)
    amap, labels = _instance(rng, levels=[None, 7, 40][seed % 3])
    sv = ScoredVoxels.from_map(amap, labels)
    ids, lesions = _component_ids(labels, amap.valid_mask)
    s, y = sv.scores, sv.labels
    assert roc_auc(sv) == pytest.approx(roc_auc_oracle(s, y), abs=1e-12)
    assert roc_auc(sv, 0.3) == pytest.approx(roc_auc_oracle(s, y, 0.3), abs=1e-12)
    assert roc_auc(sv, 0.3, normalize=False) == pytest.approx(roc_auc_oracle(s, y, 0.3, False), abs=1e-12)
    assert pr_auc(sv) == pytest.approx(pr_auc_oracle(s, y), abs=1e-12)
    assert pro_auc(sv, lesions) == pytest.approx(pro_auc_oracle(s, y, ids), abs=1e-12)
    assert pro_auc(sv, lesions, 0.3) == pytest.approx(pro_auc_oracle(s, y, ids, 0.3), abs=1e-12)
    d, t = best_dice(sv)
    d_ref, t_ref = dice_oracle(s, y)
    assert d == d_ref and t == t_ref


@pytest.mark.parametrize("seed", range(10))
def test_roc_matches_pairwise_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    scores = np.floor(rng.random(20) * 6)
    labels = rng.random(20) < 0.4
    labels[:2] = [True, False]
    assert roc_auc(ScoredVoxels(scores, labels)) == pytest.approx(roc_auc_pairwise(scores, labels), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_single_lesion_pro_equals_roc(seed, fpr_max):
    rng = np.random.default_rng(seed)
    shape = (6, 8, 8)
    labels = np.zeros(shape, bool)
    labels[2:4, 3:6, 3:5] = True
    scores = np.floor(rng.random(shape) * 9)
    sv = ScoredVoxels.from_map(AnomalyMap(scores, np.ones(shape, bool)), labels)
    lesions = connected_components(labels)
    assert pro_auc(sv, lesions, fpr_max) == roc_auc(sv, fpr_max)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rank_invariance_and_complement(seed):
    rng = np.random.default_rng(seed)
    amap, labels = _instance(rng)
    sv = ScoredVoxels.from_map(amap, labels)
    lesions = connected_components(labels & amap.valid_mask)
    mono = ScoredVoxels(np.exp(3 * sv.scores) - 2.0, sv.labels, sv.flat_index)
    for f in (lambda v: roc_auc(v), lambda v: roc_auc(v, 0.3), pr_auc, lambda v: pro_auc(v, lesions),
              lambda v: best_dice(v)[0]):
        assert f(mono) == pytest.approx(f(sv), abs=1e-12)
    flipped = ScoredVoxels(sv.scores, ~sv.labels)
    assert roc_auc(flipped) == pytest.approx(1 - roc_auc(sv), abs=1e-12)  # continuous scores: tie-free


def test_best_dice_is_maximal():
    rng = np.random.default_rng(7)
    sv = ScoredVoxels(rng.random(300), rng.random(300) < 0.2)
    d, _ = best_dice(sv)
    for t in rng.random(100):
        assert dice_at(sv, t) <= d


def test_evaluate_map_ignores_invalid_voxels():
    rng = np.random.default_rng(8)
    amap, labels = _instance(rng)
    m1 = evaluate_map(amap, labels)
    # change scores and labels outside the valid mask: nothing moves
    junk = AnomalyMap(np.where(amap.valid_mask, amap.scores, 99.0), amap.valid_mask)
    labels2 = labels | ~amap.valid_mask
    m2 = evaluate_map(junk, labels2)
    assert m1 == m2
    assert all(0 <= m1[k] <= 1 for k in ("au_roc", "au_roc_30", "au_prc", "au_pro", "au_pro_30", "best_dice"))


# statistics ---------------------------------------------------------------------------
def test_kruskal_hand_example():
    groups = [[1, 2, 3], [4, 5, 6], [7, 8, 9]]
    h, p = kruskal_wallis(groups)
    assert h == pytest.approx(7.2, abs=1e-12)
    assert p == pytest.approx(np.exp(-3.6), abs=1e-12)  # chi2 with 2 d.f.
    assert p == pytest.approx(0.0273, abs=1e-4)
    assert kruskal_wallis(groups[::-1])[0] == pytest.approx(h, abs=1e-12)
    ref = sp.posthoc_dunn(groups).to_numpy()
    np.testing.assert_allclose(dunn_test(groups), ref, atol=1e-6)


def test_identical_groups():
    assert kruskal_wallis([[1, 2, 3], [1, 2, 3]]) == (0.0, 1.0)
    assert kruskal_wallis([[4, 4], [4, 4, 4]]) == (0.0, 1.0)
    np.testing.assert_array_equal(dunn_test([[5, 5], [5, 5]]), np.ones((2, 2)))


@pytest.mark.parametrize("seed", range(20))
def test_stats_match_reference(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 5))
    groups = [np.round(rng.normal(rng.uniform(0, 1), 1, size=rng.integers(3, 12)), 1) for _ in range(k)]
    h, p = kruskal_wallis(groups)
    h_ref, p_ref = stats.kruskal(*groups)
    assert h == pytest.approx(h_ref, abs=1e-6)
    assert p == pytest.approx(p_ref, abs=1e-6)
    np.testing.assert_allclose(dunn_test(groups), sp.posthoc_dunn(groups).to_numpy(), atol=1e-6)
    np.testing.assert_allclose(dunn_test(groups, bonferroni=True),
                               sp.posthoc_dunn(groups, p_adjust="bonferroni").to_numpy(), atol=1e-6)


def test_bonferroni_definition():
    groups = [[1, 2, 3, 4], [3, 5, 6, 8], [7, 9, 10, 12]]
    raw, adj = dunn_test(groups), dunn_test(groups, bonferroni=True)
    off = ~np.eye(3, dtype=bool)
    np.testing.assert_allclose(adj[off], np.minimum(1.0, raw[off] * 3))


# report ---------------------------------------------------------------------------------
def _rec(v, case="c", group=None):
    keys = ("au_roc", "au_roc_30", "au_prc", "au_pro", "au_pro_30", "best_dice", "au_roc_30_raw", "au_pro_30_raw")
    return dict({k: v for k in keys}, case=case, group=group)


def test_single_patient_report():
    rep = aggregate_report([_rec(0.7)])
    assert rep.summary["all"]["method"]["au_roc"] == (0.7, 0.0, 1)


def test_identical_methods_not_flagged():
    recs = [_rec(v, f"p{k}") for k, v in enumerate([0.5, 0.6, 0.7, 0.8])]
    rep = aggregate_report({"a": recs, "b": recs})
    assert rep.flags["all"]["au_roc"]["significant"] is False
    assert rep.flags["all"]["au_roc"]["bold"] == []


def test_best_method_flagging_by_hand():
    lo = [_rec(v, f"p{k}") for k, v in enumerate(np.linspace(0.1, 0.3, 10))]
    hi = [_rec(v, f"p{k}") for k, v in enumerate(np.linspace(0.7, 0.9, 10))]
    near = [_rec(v, f"p{k}") for k, v in enumerate(np.linspace(0.68, 0.88, 10))]
    rep = aggregate_report({"low": lo, "high": hi, "near": near})
    fl = rep.flags["all"]["au_roc"]
    # ranks: low 1-10, near/high interleave in 11-30 -> KW significant, low clearly worse
    assert fl["significant"] and fl["best"] == "high"
    assert set(fl["bold"]) == {"high", "near"}
    mean, std, n = rep.summary["all"]["low"]["au_roc"]
    assert mean == pytest.approx(0.2) and n == 10
    assert std == pytest.approx(np.std(np.linspace(0.1, 0.3, 10), ddof=1))
    assert "**" in to_text(rep)
    assert to_tsv(rep).splitlines()[0].split("\t") == ["group", "method", "metric", "mean", "std", "n", "bold", "kw_p"]


def test_grouping():
    recs = [_rec(0.2, "a", "h1"), _rec(0.4, "b", "h1"), _rec(0.9, "c", "h2")]
    rep = aggregate_report({"m": recs})
    assert list(rep.summary) == ["all", "h1", "h2"]
    assert rep.summary["h1"]["m"]["au_roc"][0] == pytest.approx(0.3)
    rep2 = aggregate_report({"m": recs}, grouping={"c": "h1"})
    assert rep2.summary["h1"]["m"]["au_roc"][2] == 3
