import json
import re

import numpy as np
import pytest

from sst import episodes, gradcheck
from sst import tensor_core as tc
from sst.cli import RunConfig, ConfigError, gradient_image, main
from sst.model import ModelSpec, encode, self_segment, support_gradient
from sst.nn import OptimizerConfig, save_checkpoint, sgd_step

TINY = {"image_size": 32, "n_train_episodes": 8, "batch_size": 4, "n_eval_episodes": 6,
        "learning_rate": 0.01}


def write_config(path, **kw):
    path.write_text(json.dumps(dict(TINY, **kw)))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = write_config(d / "c.json", out_dir=str(d))
    assert main(["train", "--config", cfg]) == 0
    return d, cfg


def test_missing_config_names_path(capsys, tmp_path):
    missing = tmp_path / "nope.json"
    assert main(["train", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_zero_eval_episodes_rejected(tmp_path, trained):
    cfg = write_config(tmp_path / "c.json", n_eval_episodes=0, out_dir=str(trained[0]))
    assert main(["eval", "--config", cfg]) == 2


def test_unknown_and_mistyped_keys_rejected(tmp_path):
    assert main(["train", "--config", write_config(tmp_path / "a.json", colour="red")]) == 2
    assert main(["train", "--config", write_config(tmp_path / "b.json", seed="zero")]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 2


def test_config_round_trip():
    cfg = RunConfig(seed=3, eta=0.5, fusion_mode="maximum", k=5)
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        RunConfig(fold=7).validate()


def test_train_writes_log_and_is_deterministic(tmp_path, trained):
    d, _ = trained
    again = tmp_path / "again"
    cfg = write_config(tmp_path / "c.json", out_dir=str(again))
    assert main(["train", "--config", cfg]) == 0
    assert (again / "checkpoint.sst").read_bytes() == (d / "checkpoint.sst").read_bytes()
    log = [json.loads(x) for x in (d / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 2 and all(np.isfinite(r["total"]) for r in log)
    assert json.loads((d / "train_config.json").read_text())["image_size"] == 32


def test_eval_all_fusion_modes(trained, capsys):
    d, cfg = trained
    assert main(["eval", "--config", cfg, "--k", "5", "--fusion", "all"]) == 0
    for mode in ("weighted", "average", "maximum"):
        lines = (d / f"metrics_fold0_k5_{mode}_eta1.jsonl").read_text().splitlines()
        summary = json.loads(lines[-1])
        assert summary["summary"] and summary["config"]["fusion_mode"] == mode
        assert set(summary["config"]) == set(RunConfig().to_dict())
    assert len(capsys.readouterr().out.strip().splitlines()) == 3


def test_eval_eta_variants_for_ablation(trained):
    d, cfg = trained
    assert main(["eval", "--config", cfg, "--eta", "0"]) == 0
    assert main(["eval", "--config", cfg, "--eta", "1"]) == 0
    assert (d / "metrics_fold0_k1_weighted_eta0.jsonl").exists()
    assert (d / "metrics_fold0_k1_weighted_eta1.jsonl").exists()


def test_eval_surfaces_checkpoint_errors(tmp_path, trained):
    bad = tmp_path / "bad.sst"
    bad.write_bytes(b"SSTCKPT1\x05")
    cfg = write_config(tmp_path / "c.json", out_dir=str(tmp_path))
    assert main(["eval", "--config", cfg, "--checkpoint", str(bad)]) == 2
    save_checkpoint(ModelSpec(encoder_channels=(3, 8, 16, 32, 64)).init(0), tmp_path / "other.sst")
    assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "other.sst")]) == 2


def test_render_outputs(tmp_path, trained):
    d, cfg = trained
    out = tmp_path / "r0"
    assert main(["render", "--config", cfg, "--checkpoint", str(d / "checkpoint.sst"),
                 "--out", str(out), "--eta", "0"]) == 0
    assert (out / "pred_pre_tuning.pgm").read_bytes() == (out / "pred_post_tuning.pgm").read_bytes()
    assert episodes.load_image_ppm(out / "query.ppm").shape == (3, 32, 32)
    for name in ("ground_truth", "pred_pre_tuning", "pred_post_tuning", "gradient_map"):
        assert episodes.load_mask_pgm(out / f"{name}.pgm").shape == (1, 32, 32)


def test_gradient_map_dark_at_self_segmentation_minimum(fold0):
    ep = episodes.sample_episode(fold0, "train", 1, 3, size=(32, 32))
    img, mask = ep.supports[0]
    params = ModelSpec().init(0)
    cfg = OptimizerConfig(learning_rate=0.01, weight_decay=0.0, momentum=0.9)
    grad0, _, _ = support_gradient(encode(img, params), mask, params)
    assert gradient_image(grad0, (32, 32)).max() == pytest.approx(255)
    for _ in range(200):
        _, loss = self_segment(encode(img, params), mask, params)
        loss.backward()
        sgd_step(params, cfg)
    grad, loss_value, _ = support_gradient(encode(img, params), mask, params)
    assert loss_value < 0.01
    image = gradient_image(grad, (32, 32))
    assert image.max() < 64 and image.std() < 16


def test_gradcheck_command_passes(capsys):
    assert main(["gradcheck", "--trials", "10"]) == 0
    out = capsys.readouterr().out
    listed = re.findall(r"^(\w+)\s+\d+", out, flags=re.M)
    assert sorted(listed) == sorted(gradcheck.CASES)
    assert len(listed) == len(set(listed))


def test_gradcheck_flags_corrupted_conv(monkeypatch, capsys):
    real = tc.conv2d

    def corrupted(x, w, b, stride=1, pad=0):
        # same forward values, doubled gradient
        twice = tc.scale(real(x, w, b, stride=stride, pad=pad), 2.0)
        return twice - tc.Tensor(real(x, w, b, stride=stride, pad=pad).data)

    monkeypatch.setattr(tc, "conv2d", corrupted)
    assert main(["gradcheck", "--trials", "3"]) == 1
    rows = {r.op: r.passed for r in gradcheck.run(trials=3)}
    assert rows["conv2d"] is False
    assert all(ok for op, ok in rows.items() if op != "conv2d")
