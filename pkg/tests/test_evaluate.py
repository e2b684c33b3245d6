"""Prediction assembly, metric tables, seed protocol, and bulletins."""

import json

import numpy as np
import pytest

import finfusion.datapipe as dp
import finfusion.evaluate as ev
import finfusion.model as fm
import finfusion.training as tr
from finfusion.errors import ContractError

from tests.test_encoders import tiny_cfg

EXPECTED_KEYS = {
    "micro.directional_accuracy", "micro.mape", "micro.hit_ratio",
    "distress.accuracy", "distress.f1", "distress.roc_auc", "distress.pr_auc",
    "warning.accuracy", "warning.f1", "warning.roc_auc",
}


@pytest.fixture(scope="module")
def world():
    ds = dp.build_dataset(dp.SyntheticConfig(
        n_steps=170, n_assets=2, n_institutions=4, seed=44))
    mcfg = tiny_cfg(price_features=12,
                    graph_features=len(dp.GRAPH_FEATURE_NAMES),
                    vocab_size=len(ds.vocab))
    params = fm.init_model_params(mcfg, np.random.default_rng(8))
    return ds, mcfg, params


def test_predict_micro_covers_every_pair(world):
    ds, mcfg, params = world
    got = ev.predict_micro(ds, params, mcfg, "val")
    n = len(ds.sample_pairs("val"))
    assert got["pred"].shape == (n,)
    assert got["true"].shape == (n,)
    assert np.all(np.isfinite(got["pred"]))


def test_predict_micro_batching_is_transparent(world):
    # chunked forward equals a per-pair forward
    ds, mcfg, params = world
    pairs = ds.sample_pairs("val")[:3]
    full = ev.predict_micro(ds, params, mcfg, "val")
    for i, pair in enumerate(pairs):
        _, w, m, _ = ev._forward_micro(ds, params, mcfg, [pair], ("price", "text",
                                                                  "macro", "graph"))
        point = (w * m).sum(axis=-1)[0]
        raw = point * ds.norm["y_std"] + ds.norm["y_mean"]
        assert full["pred"][i] == pytest.approx(raw, rel=1e-9)


def test_predict_risk_aligns_labels(world):
    ds, mcfg, params = world
    got = ev.predict_risk(ds, params, mcfg, "test")
    dates = ds.splits["test"]
    assert got["score"].shape == (len(dates),)
    assert got["contributions"].shape == (len(dates), ds.n_institutions)
    assert np.all((got["score"] >= 0) & (got["score"] <= 1))
    assert np.array_equal(got["warning"], (got["score"] >= 0.5).astype(int))
    for i, t in enumerate(dates[:5]):
        assert got["crisis"][i] == ds.crisis_next(t)
        assert got["stress"][i] == pytest.approx(ds.stress_next(t))


def test_evaluate_split_key_set_and_ranges(world):
    ds, mcfg, params = world
    out = ev.evaluate_split(ds, params, mcfg, "test")
    assert set(out) == EXPECTED_KEYS
    for key, val in out.items():
        if val is None:
            continue
        if key.endswith("mape"):
            assert val >= 0
        else:
            assert 0.0 <= val <= 1.0


def test_evaluate_split_price_only_runs(world):
    ds, mcfg, params = world
    out = ev.evaluate_split(ds, params, mcfg, "test", kinds=("price",))
    assert set(out) == EXPECTED_KEYS


def test_evaluate_split_differs_across_kinds(world):
    ds, mcfg, params = world
    full = ev.evaluate_split(ds, params, mcfg, "test")
    ablated = ev.evaluate_split(ds, params, mcfg, "test", kinds=("price",))
    assert any(full[k] != ablated[k] for k in EXPECTED_KEYS
               if full[k] is not None and ablated[k] is not None)


def test_empty_kind_set_rejected(world):
    from finfusion.errors import DegenerateInputError
    ds, mcfg, params = world
    with pytest.raises(DegenerateInputError):
        ev.predict_micro(ds, params, mcfg, "val", kinds=())


def test_seed_protocol_aggregates_two_seeds():
    scfg = dp.SyntheticConfig(n_steps=150, n_assets=1, n_institutions=4)
    mcfg = tiny_cfg(price_features=12,
                    graph_features=len(dp.GRAPH_FEATURE_NAMES),
                    vocab_size=len(dp.build_vocab(scfg.n_assets)))
    tcfg = tr.TrainingConfig(micro_batch_size=32, macro_batch_size=16,
                             warmup_steps=1, seeds=(0, 1))
    sched = tr.StageSchedule(epochs={
        "unimodal-pretrain": 1, "multimodal-align": 0,
        "joint-multitask": 1, "rl-finetune": 0})
    report, runs = ev.seed_protocol(scfg, mcfg, tcfg, schedule=sched)
    assert report.n_seeds == 2
    assert len(runs) == 2
    assert len(report.per_seed["micro.directional_accuracy"]) == 2
    assert EXPECTED_KEYS <= set(report.metrics)


def test_vocab_is_seed_invariant():
    # seed_protocol sizes one model for datasets built from many seeds
    a = dp.build_dataset(dp.SyntheticConfig(n_steps=150, n_assets=1,
                                            n_institutions=4, seed=0))
    b = dp.build_dataset(dp.SyntheticConfig(n_steps=150, n_assets=1,
                                            n_institutions=4, seed=9))
    assert a.vocab == b.vocab
    assert len(a.vocab) == len(dp.build_vocab(1))


def test_seed_protocol_deterministic():
    scfg = dp.SyntheticConfig(n_steps=150, n_assets=1, n_institutions=4)
    mcfg = tiny_cfg(price_features=12,
                    graph_features=len(dp.GRAPH_FEATURE_NAMES),
                    vocab_size=len(dp.build_vocab(scfg.n_assets)))
    tcfg = tr.TrainingConfig(warmup_steps=1, seeds=(3,))
    sched = tr.StageSchedule(epochs={
        "unimodal-pretrain": 1, "multimodal-align": 0,
        "joint-multitask": 0, "rl-finetune": 0})
    r1, _ = ev.seed_protocol(scfg, mcfg, tcfg, schedule=sched)
    r2, _ = ev.seed_protocol(scfg, mcfg, tcfg, schedule=sched)
    assert r1.to_json() == r2.to_json()


def test_bulletin_deterministic_and_consistent_with_risk_scores(world):
    ds, mcfg, params = world
    date = ds.splits["test"][0]
    b1 = ev.bulletin_for_date(ds, params, mcfg, date)
    b2 = ev.bulletin_for_date(ds, params, mcfg, date)
    assert b1.text == b2.text

    risk = ev.predict_risk(ds, params, mcfg, "test")
    assert b1.score == pytest.approx(risk["score"][0], abs=1e-9)
    assert f"{b1.score:.6f}" in b1.text


def test_bulletin_rejects_out_of_range_date(world):
    ds, mcfg, params = world
    with pytest.raises(ContractError):
        ev.bulletin_for_date(ds, params, mcfg, ds.n_steps + 5)
    with pytest.raises(ContractError):
        ev.bulletin_for_date(ds, params, mcfg, 0)  # warmup, not usable


def test_node_names_are_stable():
    assert ev.node_names(3) == ["inst_00", "inst_01", "inst_02"]
