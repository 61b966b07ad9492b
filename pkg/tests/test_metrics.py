import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from itemized_clip import autograd as ag
from itemized_clip import metrics as M
from itemized_clip.attention import cross_attend
from itemized_clip.batching import Study
from itemized_clip.model import encode_studies, encode_text_array

from conftest import tiny_studies


# -- AUC / accuracy / recall ------------------------------------------------------

def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert M.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert M.roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        M.roc_auc([0.1, 0.2], [1, 1])


@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=40))
def test_auc_matches_pairwise_count(pairs):
    scores = [p[0] for p in pairs]
    labels = [p[1] for p in pairs]
    if all(labels) or not any(labels):
        return
    assert M.roc_auc(scores, labels) == pytest.approx(brute_auc(scores, labels), abs=1e-12)


def test_auc_random_labels_is_half():
    r = np.random.default_rng(0)
    assert abs(M.roc_auc(r.random(10_000), r.random(10_000) < 0.5) - 0.5) < 0.02


def test_balanced_accuracy():
    assert M.balanced_accuracy([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    # class 0 recall 1/2, class 1 recall 1
    assert M.balanced_accuracy([0, 1, 1, 1], [0, 0, 1, 1]) == 0.75
    assert M.binary_balanced_accuracy([-1.0, 0.5, 2.0, -0.1], [0, 1, 1, 0]) == 1.0


def test_recall_at_k():
    assert M.recall_at_k(np.array([[0.3]]), [0], 1) == 1.0
    s = np.random.default_rng(0).random((5, 5))
    assert M.recall_at_k(s, np.arange(5), 5) == 1.0
    with pytest.raises(ValueError):
        M.recall_at_k(s, np.arange(5), 6)


def test_recall_random_rate():
    vals = [M.recall_at_k(np.random.default_rng(seed).random((200, 200)), np.arange(200), 10)
            for seed in range(5)]
    assert abs(np.mean(vals) - 10 / 200) < 0.04


# -- IoU --------------------------------------------------------------------------

def test_iou_examples():
    assert M.iou([1, 2, 3], [1, 2, 3], 8) == 1.0
    assert M.iou([1, 2], [3, 4], 8) == 0.0
    assert M.iou(np.zeros(8, bool), np.zeros(8, bool)) == 1.0
    pred = list(range(30))
    gt = list(range(15, 45))
    assert M.iou(pred, gt, 64) == pytest.approx(1 / 3)


@given(st.sets(st.integers(0, 63), min_size=1))
def test_iou_full_prediction(gt):
    assert M.iou(list(range(64)), sorted(gt), 64) == pytest.approx(len(gt) / 64)


# -- model-based inference -------------------------------------------------------

@pytest.fixture
def encoded_studies(tiny_model):
    studies = tiny_studies(6, 0)
    for s in studies:
        s.masks = [np.eye(4, dtype=bool) for _ in s.items]
    return M.encode_dataset(tiny_model, studies)


def test_zero_shot_logits_formula(tiny_model, rng):
    _, vp = encode_studies(tiny_model, rng.integers(0, 256, (1, 16, 16, 3), dtype=np.uint8))
    prompts = ["a red circle", "a blue cross", "a red circle"]
    logits = M.zero_shot_logits(vp[0], prompts, tiny_model)
    assert logits[0] == logits[2]
    t = encode_text_array(tiny_model, prompts)
    for k in range(3):
        with ag.no_grad():
            z, _ = cross_attend(t[k], vp[0], tiny_model.cross)
            direct = ag.cosine_similarity(ag.Tensor(t[k]), z).item()
        assert logits[k] == pytest.approx(direct, abs=1e-12)
    rev = M.zero_shot_logits(vp[0], prompts[::-1], tiny_model)
    np.testing.assert_array_equal(rev, logits[::-1])
    np.testing.assert_array_equal(M.zero_shot_logits(vp[0], prompts, tiny_model), logits)


def test_region_retrieval_degenerate_and_clamped(tiny_model, rng):
    _, vp = encode_studies(tiny_model, rng.integers(0, 256, (1, 16, 16, 3), dtype=np.uint8))
    corpus = ["a red circle", "a blue cross", "a green square", "a yellow triangle"]
    whole = np.argsort(-M.zero_shot_logits(vp[0], corpus, tiny_model), kind="stable")
    ranked = M.region_text_retrieval(vp[0], np.ones(16, bool), corpus, tiny_model, 10)
    np.testing.assert_array_equal(ranked, whole)
    assert len(M.region_text_retrieval(vp[0], [0, 5], corpus, tiny_model, 2)) == 2
    with pytest.raises(ValueError):
        M.region_text_retrieval(vp[0], np.zeros(16, bool), corpus, tiny_model, 2)


def test_segment_cardinality_and_ties(tiny_model, rng):
    _, vp = encode_studies(tiny_model, rng.integers(0, 256, (1, 16, 16, 3), dtype=np.uint8))
    assert len(M.segment(vp[0], "a red circle", tiny_model, 4)) == 4
    assert len(M.segment(vp[0], "a red circle", tiny_model, 100)) == 16
    with pytest.raises(ValueError):
        M.segment(vp[0], "a red circle", tiny_model, 0)
    tiny_model.cross.q.weight.data[:] = 0.0  # uniform attention
    tiny_model.cross.q.bias.data[:] = 0.0
    assert M.segment(vp[0], "a red circle", tiny_model, 4).tolist() == [0, 1, 2, 3]


def brute_mams(model, data):
    per_study = []
    for i, emb in enumerate(data.item_emb):
        if len(emb) < 2:
            continue
        maps = [cross_attend(e, data.vp[i], model.cross)[1] for e in emb]
        sims = []
        for a in range(len(maps)):
            for b in range(a + 1, len(maps)):
                sims.append(float(np.dot(maps[a], maps[b]) / (np.linalg.norm(maps[a]) * np.linalg.norm(maps[b]))))
        per_study.append(sum(sims) / len(sims))
    return sum(per_study) / len(per_study)


def test_mams_matches_bruteforce(tiny_model, encoded_studies):
    with ag.no_grad():
        ref = brute_mams(tiny_model, encoded_studies)
    assert M.mams(tiny_model, encoded_studies) == pytest.approx(ref, abs=1e-12)


def test_mams_identical_and_disjoint_maps(tiny_model):
    img = np.zeros((16, 16, 3), dtype=np.uint8)
    data = M.encode_dataset(tiny_model, [Study("x", img, ["a red circle", "a red circle"])])
    assert M.mams(tiny_model, data) == pytest.approx(1.0, abs=1e-12)
    single = M.encode_dataset(tiny_model, [Study("y", img, ["a red circle"])])
    with pytest.raises(ValueError):
        M.mams(tiny_model, single)
    onehot = np.eye(16)[[0, 5]]
    assert M._cosine_rows(onehot)[0, 1] == 0.0


def test_mll_arithmetic(monkeypatch, tiny_model, encoded_studies):
    fake = [np.array([0.4, -0.1, 0.3]), np.array([0.3])]
    monkeypatch.setattr(M, "study_tcsims", lambda *a, **k: fake)
    value, x100 = M.mll(tiny_model, encoded_studies)
    assert x100 == pytest.approx(10.0)


def test_mll_bounds_and_order_invariance(tiny_model, encoded_studies):
    value, x100 = M.mll(tiny_model, encoded_studies)
    sims = M.study_tcsims(tiny_model, encoded_studies)
    assert value <= np.mean(np.concatenate(sims)) + 1e-15
    assert -100 <= x100 <= 100
    rev = M.EncodedStudies(encoded_studies.studies[::-1], encoded_studies.vp[::-1],
                           encoded_studies.item_emb[::-1])
    assert M.mll(tiny_model, rev)[0] == pytest.approx(value, abs=1e-15)
    assert M.mams(tiny_model, rev) == pytest.approx(M.mams(tiny_model, encoded_studies), abs=1e-15)


def test_threaded_metrics_match_serial(tiny_model, encoded_studies):
    assert M.mams(tiny_model, encoded_studies, threads=3) == M.mams(tiny_model, encoded_studies)
    assert M.mll(tiny_model, encoded_studies, threads=3) == M.mll(tiny_model, encoded_studies)


def test_zero_shot_task_needs_two_classes():
    with pytest.raises(ValueError):
        M.ZeroShotTask("x", ["only"], [["a"]], np.zeros((2, 1), bool))


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 100))
def test_zero_shot_report_shape(seed):
    from itemized_clip.config import ModelConfig
    from itemized_clip.model import ItemizedCLIP
    from itemized_clip.synthdata import make_studies
    from conftest import shape_vocab

    model = ItemizedCLIP(ModelConfig(dim=16, heads=2, cross_heads=2, visual_layers=1, text_layers=1,
                                     mlp_ratio=1), shape_vocab(), seed)
    studies = make_studies(12, seed, normal_frac=0.0, max_shapes=2)
    data = M.encode_dataset(model, studies)
    res = M.evaluate_zero_shot(M.shape_task(studies), data.vp, model)
    assert 0.0 <= res["balanced_accuracy"] <= 1.0
    assert all(0.0 <= v <= 1.0 for v in res["per_class_auc"].values())
