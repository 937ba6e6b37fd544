import random

import pytest
from hypothesis import given, settings, strategies as st

from fedretro.fingerprint import FingerprintConfig
from fedretro.learner import ModelConfig, Prediction, TrainConfig, encode_pairs, init_params, train_local
from fedretro.metrics import (EvalResult, MissingForwardModel, evaluate_predictions, maxfrag_accuracy,
                              per_class_breakdown, roundtrip_accuracy, topk_accuracy)
from fedretro.smiles import canonicalize

from oracles import naive_topk

POOL = ["CCO", "CC(=O)O", "CCN", "CC(=O)O.CCO", "CC(=O)O.CCN", "OCC.C", "CCCl", "C(", "c1ccccc1", "CC.O"]


def test_rank_three_hit():
    preds = [["CCN", "CCC", "CCO"]]
    assert topk_accuracy(preds, ["CCO"], 1) == 0.0
    assert topk_accuracy(preds, ["CCO"], 3) == 1.0


def test_empty_predictions_miss():
    assert topk_accuracy([[]], ["CCO"], 10) == 0.0
    assert maxfrag_accuracy([[]], ["CCO"], 10) == 0.0


def test_canonicalization_before_compare():
    assert topk_accuracy([["OCC"]], ["CCO"], 1) == 1.0
    assert topk_accuracy([[Prediction("OCC", -0.1, 1)]], ["CCO"], 1) == 1.0


def test_unparseable_never_hits():
    assert topk_accuracy([["C(", "(("]], ["C("], 2) == 0.0


def test_bad_k():
    with pytest.raises(ValueError):
        topk_accuracy([["C"]], ["C"], 0)
    with pytest.raises(ValueError):
        maxfrag_accuracy([["C"]], ["C"], -1)


def test_maxfrag_example():
    preds, truths = [["CC(=O)O.CCN"]], ["CC(=O)O.CCO"]
    assert topk_accuracy(preds, truths, 1) == 0.0
    assert maxfrag_accuracy(preds, truths, 1) == 1.0


def test_maxfrag_counts_parseable_predictions_only():
    # the unparseable entry does not use up one of the K slots
    assert maxfrag_accuracy([["C(", "CC(=O)O"]], ["CC(=O)O.CCO"], 1) == 1.0


def test_maxfrag_equals_exact_for_single_fragments():
    rng = random.Random(0)
    singles = [s for s in POOL if "." not in s and s != "C("]
    preds = [[rng.choice(singles) for _ in range(5)] for _ in range(40)]
    truths = [rng.choice(singles) for _ in range(40)]
    for K in (1, 3, 5):
        assert maxfrag_accuracy(preds, truths, K) == topk_accuracy(preds, truths, K)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.lists(st.sampled_from(POOL), max_size=10), st.sampled_from(POOL[:7])),
                max_size=50))
def test_identities(rows):
    preds = [p for p, _ in rows]
    truths = [t for _, t in rows]
    prev_t = prev_m = 0.0
    for K in (1, 3, 5, 10):
        t, m = topk_accuracy(preds, truths, K), maxfrag_accuracy(preds, truths, K)
        assert 0 <= t <= m <= 1
        assert t >= prev_t and m >= prev_m
        prev_t, prev_m = t, m
        # brute-force oracle on canonical strings
        can = [[canonicalize(x) if x != "C(" else "C(" for x in p] for p in preds]
        assert t == naive_topk(can, [canonicalize(x) for x in truths], K)


def test_order_insensitive():
    rng = random.Random(2)
    rows = [([rng.choice(POOL) for _ in range(4)], rng.choice(POOL[:7])) for _ in range(30)]
    shuffled = rows[:]
    rng.shuffle(shuffled)
    for K in (1, 3):
        assert topk_accuracy(*zip(*rows), K) == topk_accuracy(*zip(*shuffled), K)
        assert maxfrag_accuracy(*zip(*rows), K) == maxfrag_accuracy(*zip(*shuffled), K)


def test_per_class_identities():
    rng = random.Random(3)
    preds = [[rng.choice(POOL) for _ in range(3)] for _ in range(60)]
    truths = [rng.choice(POOL[:7]) for _ in range(60)]
    classes = [rng.choice("ab") for _ in range(60)]
    per = per_class_breakdown(preds, truths, classes, 3)
    counts = {c: classes.count(c) for c in per}
    weighted = sum(per[c] * counts[c] for c in per) / len(truths)
    assert weighted == pytest.approx(topk_accuracy(preds, truths, 3), abs=1e-12)
    assert per_class_breakdown(preds, truths, ["x"] * 60, 3) == {"x": topk_accuracy(preds, truths, 3)}
    assert "c" not in per


def test_eval_result_round_trip_and_bounds():
    r = evaluate_predictions([["CCO"], ["CCN"]], ["CCO", "CCO"], classes=["1", "2"])
    assert r.topk == {1: 0.5, 3: 0.5, 5: 0.5, 10: 0.5}
    assert EvalResult.from_dict(r.to_dict()) == r
    with pytest.raises(ValueError):
        EvalResult({1: 1.2}, {1: 1.0}, 1)


# ---- round trip ---------------------------------------------------------------

CFG = ModelConfig(fp_dim=64, embed_dim=16, hidden_dim=32, max_len=40, fingerprint=FingerprintConfig(2, 256))


@pytest.fixture(scope="module")
def memorizing_forward():
    data = encode_pairs(["CCO.CC(=O)O"], [canonicalize("CCOC(C)=O")], CFG)
    return train_local(init_params(CFG, 0), data, 300, CFG, TrainConfig(lr=1e-2, batch_size=1), seed=0)


def test_roundtrip_hit_and_miss(memorizing_forward):
    prod = canonicalize("CCOC(C)=O")
    assert roundtrip_accuracy([["OCC.OC(C)=O"]], [prod], memorizing_forward, CFG) == 1.0
    assert roundtrip_accuracy([["C("]], [prod], memorizing_forward, CFG) == 0.0
    assert roundtrip_accuracy([[]], [prod], memorizing_forward, CFG) == 0.0


def test_roundtrip_wrong_forward_model(memorizing_forward):
    # the model always writes the ester, so asking for anything else never succeeds
    assert roundtrip_accuracy([["CCO.CC(=O)O"], ["CCN"]], ["CCN", "CO"], memorizing_forward, CFG) == 0.0


def test_roundtrip_needs_model():
    with pytest.raises(MissingForwardModel):
        roundtrip_accuracy([["CC"]], ["C"], None)


def test_evaluate_records_provenance(memorizing_forward):
    r = evaluate_predictions([["CCO.CC(=O)O"]], ["CCO.CC(=O)O"], products=[canonicalize("CCOC(C)=O")],
                             forward_model=memorizing_forward, forward_label="fwd.fpv", cfg=CFG)
    assert r.roundtrip_top1 == 1.0 and r.roundtrip_provenance == "fwd.fpv"
