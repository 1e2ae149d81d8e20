import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sst import tensor_core as tc
from sst.episodes import sample_episode
from sst.metrics import iou
from sst.model import ModelSpec
from sst.nn import OptimizerConfig
from sst.train_eval import (MetricsRecord, evaluate, summarize, train, train_step, write_metrics)

DESK = OptimizerConfig(learning_rate=0.01)


def rec(cid, v, eid=0, fi=0, fu=0, bi=0, bu=0):
    return MetricsRecord(episode_id=eid, class_id=cid, fg_intersection=fi, fg_union=fu,
                         bg_intersection=bi, bg_union=bu, iou_fg=v)


def test_iou_examples():
    full = np.ones((1, 4, 4))
    left = full.copy()
    left[..., 2:] = 0
    assert iou(full, full) == 1.0
    assert iou(left, 1 - left) == 0.0
    assert iou(left, full) == 0.5
    assert iou(np.zeros((1, 3, 3)), np.zeros((1, 3, 3))) == 1.0
    with pytest.raises(tc.ShapeMismatch):
        iou(full, np.ones((1, 4, 5)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_iou_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((1, 6, 6)) < 0.5, rng.random((1, 6, 6)) < 0.5
    inter = sum(bool(x and y) for x, y in zip(a.flat, b.flat))
    union = sum(bool(x or y) for x, y in zip(a.flat, b.flat))
    assert iou(a, b) == pytest.approx(inter / union if union else 1.0)


def test_mean_iou_is_class_balanced():
    assert summarize([rec(1, 0.2), rec(2, 0.8)])[0] == pytest.approx(0.5)
    skewed = [rec(1, 0.2)] * 97 + [rec(2, 0.8)] * 3
    assert summarize(skewed)[0] == pytest.approx(0.5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 5), st.floats(0, 1)), min_size=1, max_size=40), st.integers(1, 5))
def test_duplicating_episodes_of_one_class_keeps_mean(records, copies):
    base = [rec(c, v) for c, v in records]
    dup_class = base[0].class_id
    more = base + [r for r in base if r.class_id == dup_class] * copies
    assert summarize(more)[0] == pytest.approx(summarize(base)[0])


def test_fb_iou_uses_summed_counts():
    rs = [rec(1, 0.5, fi=1, fu=2, bi=9, bu=10), rec(1, 1.0, fi=9, fu=9, bi=1, bu=1)]
    _, fb, _ = summarize(rs)
    assert fb == pytest.approx((10 / 11 + 10 / 11) / 2)


def test_lambda_accounting(fold0, spec):
    batch = [sample_episode(fold0, "train", 1, [0, b], size=(32, 32)) for b in range(2)]
    r0 = train_step(batch, spec.init(0), DESK, lam=0.0)
    assert r0.total == r0.main_loss
    reports = [train_step(batch, spec.init(0), DESK, lam=lam) for lam in (0.5, 1.0, 2.0)]
    for r in reports:
        assert r.total == r.main_loss + r.lam * r.aux_loss
        assert r.main_loss >= 0 and r.aux_loss > 0
    assert reports[0].total < reports[1].total < reports[2].total


def test_aux_gradient_reaches_encoder(fold0, spec):
    batch = [sample_episode(fold0, "train", 1, 1, size=(32, 32))]
    p_main, p_both = spec.init(0), spec.init(0)
    train_step(batch, p_main, DESK, lam=0.0)
    train_step(batch, p_both, DESK, lam=1.0)
    assert not np.array_equal(p_main["encoder.0.weight"].data, p_both["encoder.0.weight"].data)


def test_training_rejects_bad_batches(fold0, spec):
    with pytest.raises(ValueError):
        train_step([], spec.init(0), DESK)
    with pytest.raises(ValueError):
        train_step([sample_episode(fold0, "train", 5, 0, size=(32, 32))], spec.init(0), DESK)


def test_overfit_one_episode(fold0, spec):
    ep = sample_episode(fold0, "train", 1, 4, size=(32, 32))
    params = spec.init(0)
    cfg = OptimizerConfig(learning_rate=0.01, weight_decay=0.0, momentum=0.9)
    losses = [train_step([ep], params, cfg).main_loss for _ in range(300)]
    assert min(losses) < 0.1


def test_training_is_stable_for_1000_steps(fold0, spec):
    params = spec.init(0)
    reports = train(fold0, params, 1000, 1, DESK, seed=3)
    assert len(reports) == 1000
    assert all(np.isfinite(r.total) for r in reports)
    assert np.mean([r.main_loss for r in reports[-100:]]) < np.mean([r.main_loss for r in reports[:100]])


def test_training_is_deterministic(fold0, spec):
    a, b = spec.init(0), spec.init(0)
    train(fold0, a, 8, 4, DESK, seed=1, size=(32, 32))
    train(fold0, b, 8, 4, DESK, seed=1, size=(32, 32))
    assert a.equals(b)


def test_oracle_and_empty_predictors(fold0, spec):
    params = spec.init(0)
    perfect = evaluate(fold0, params, 40, predictor=lambda ep: ep.query_mask, size=(32, 32))
    assert perfect.mean_iou == 1.0 and perfect.fb_iou == 1.0
    empty = evaluate(fold0, params, 40, predictor=lambda ep: np.zeros_like(ep.query_mask), size=(32, 32))
    assert empty.mean_iou == 0.0


def test_evaluation_is_deterministic_across_thread_counts(fold0, spec):
    params = spec.init(2)
    one = evaluate(fold0, params, 12, seed=5, size=(32, 32), threads=1)
    many = evaluate(fold0, params, 12, seed=5, size=(32, 32), threads=4)
    assert one.records == many.records
    assert [r.episode_id for r in one.records] == list(range(12))
    other = evaluate(fold0, params, 12, seed=6, size=(32, 32), threads=1)
    assert other.records != one.records


def test_five_shot_evaluation_runs(fold0, spec):
    res = evaluate(fold0, spec.init(0), 4, k=5, fusion_mode="maximum", size=(32, 32))
    assert 0 <= res.mean_iou <= 1 and 0 <= res.fb_iou <= 1


def test_evaluate_needs_episodes(fold0, spec):
    with pytest.raises(ValueError):
        evaluate(fold0, spec.init(0), 0)


def test_metrics_file(tmp_path, fold0, spec):
    res = evaluate(fold0, spec.init(0), 6, size=(32, 32))
    write_metrics(tmp_path / "m.jsonl", res, {"seed": 0, "eta": 1.0})
    lines = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert len(lines) == 7
    assert all({"episode_id", "class_id", "iou_fg"} <= set(x) for x in lines[:-1])
    summary = lines[-1]
    assert summary["summary"] is True and summary["config"] == {"seed": 0, "eta": 1.0}
    assert summary["mean_iou"] == pytest.approx(res.mean_iou)
    assert {int(k) for k in summary["per_class"]} == set(res.per_class)
