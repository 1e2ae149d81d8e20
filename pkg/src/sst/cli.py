"""Command line: ``sst train|eval|gradcheck|render``.

Exit codes: 0 success, 1 a check failed, 2 usage, config or I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import episodes, gradcheck
from .episodes import DirectorySource, make_fold, sample_episode
from .model import FUSION_MODES, ModelSpec, SegOutput, run_episode
from .nn import (CorruptCheckpoint, OptimizerConfig, ShapeConflict, load_checkpoint,
                 save_checkpoint)
from .train_eval import evaluate, train, write_metrics

log = logging.getLogger("sst")

# gradient norms at or below this render as black
GRADMAP_FLOOR = 1e-3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    image_size: int = 64
    fold: int = 0
    fold_stride: int = 5
    k: int = 1
    eta: float = 1.0
    lambda_aux: float = 1.0
    fusion_mode: str = "weighted"
    ssm: bool = True
    inner_steps: int = 1
    score_source: str = "pre"
    learning_rate: float = 0.0005
    weight_decay: float = 0.0005
    momentum: float = 0.9
    lr_decay: float = 0.0
    n_train_episodes: int = 2000
    batch_size: int = 4
    n_eval_episodes: int = 1000
    eval_seed: int = 1
    checkpoint: str = "checkpoint.sst"
    init_checkpoint: Optional[str] = None
    out_dir: str = "runs"
    data_dir: Optional[str] = None

    def validate(self) -> "RunConfig":
        checks = [
            (self.image_size >= 32 and self.image_size % 4 == 0, "image_size must be a multiple of 4, >= 32"),
            (self.fold in (0, 1, 2, 3), "fold must be 0..3"),
            (self.fold_stride in (4, 5), "fold_stride must be 4 or 5"),
            (self.k in (1, 5), "k must be 1 or 5"),
            (self.eta >= 0, "eta must be >= 0"),
            (self.lambda_aux >= 0, "lambda_aux must be >= 0"),
            (self.fusion_mode in FUSION_MODES + ("all",), f"fusion_mode must be one of {FUSION_MODES} or 'all'"),
            (self.inner_steps >= 1, "inner_steps must be >= 1"),
            (self.score_source in ("pre", "post"), "score_source must be 'pre' or 'post'"),
            (self.n_train_episodes >= 1, "n_train_episodes must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.n_eval_episodes >= 1, "n_eval_episodes must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.optimizer()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.learning_rate, self.weight_decay, self.momentum, self.lr_decay)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(eta=self.eta, inner_steps=self.inner_steps, score_source=self.score_source)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in raw.items():
            want = known[key].type
            if want in ("int", "bool") and not isinstance(value, (int, bool)):
                raise ConfigError(f"{key} must be an integer, got {value!r}")
            if want == "float" and not isinstance(value, (int, float)):
                raise ConfigError(f"{key} must be a number, got {value!r}")
            if want == "str" and not isinstance(value, str):
                raise ConfigError(f"{key} must be a string, got {value!r}")
        return cls(**raw).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be an object")
        return cls.from_dict(raw)


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {"fold": args.fold, "k": args.k, "fusion_mode": args.fusion, "eta": args.eta,
                 "seed": args.seed, "checkpoint": args.checkpoint, "out_dir": args.out}
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate()


def _source(cfg: RunConfig):
    return DirectorySource(cfg.data_dir) if cfg.data_dir else None


def _load_params(cfg: RunConfig, path: str):
    return load_checkpoint(path, expected=cfg.model_spec().expected_shapes())


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.model_spec()
    params = _load_params(cfg, cfg.init_checkpoint) if cfg.init_checkpoint else spec.init(cfg.seed)
    split = make_fold(cfg.fold, cfg.fold_stride)
    size = (cfg.image_size, cfg.image_size)
    t0 = time.perf_counter()
    with open(out / "train_log.jsonl", "w") as fh:
        def on_step(step, rep):
            fh.write(json.dumps({"step": step, "main_loss": rep.main_loss, "aux_loss": rep.aux_loss,
                                 "total": rep.total}) + "\n")
            if (step + 1) % 50 == 0:
                log.info("step %d main %.4f aux %.4f", step + 1, rep.main_loss, rep.aux_loss)

        train(split, params, cfg.n_train_episodes, cfg.batch_size, cfg.optimizer(), cfg.lambda_aux,
              cfg.eta, spec, seed=cfg.seed, size=size, tune=cfg.ssm, source=_source(cfg), on_step=on_step)
    ckpt = Path(cfg.checkpoint)
    if not ckpt.is_absolute() and ckpt.parent == Path("."):
        ckpt = out / ckpt
    save_checkpoint(params, ckpt)
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    log.info("trained %d episodes in %.1fs, checkpoint %s", cfg.n_train_episodes,
             time.perf_counter() - t0, ckpt)
    print(json.dumps({"checkpoint": str(ckpt), "seconds": round(time.perf_counter() - t0, 2)}))
    return 0


def _resolve_checkpoint(cfg: RunConfig) -> Path:
    ckpt = Path(cfg.checkpoint)
    if not ckpt.exists() and (Path(cfg.out_dir) / ckpt).exists():
        ckpt = Path(cfg.out_dir) / ckpt
    return ckpt


def cmd_eval(cfg: RunConfig) -> int:
    params = _load_params(cfg, _resolve_checkpoint(cfg))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = make_fold(cfg.fold, cfg.fold_stride)
    modes = FUSION_MODES if cfg.fusion_mode == "all" else (cfg.fusion_mode,)
    if cfg.k == 1:
        modes = modes[:1]
    for mode in modes:
        res = evaluate(split, params, cfg.n_eval_episodes, cfg.k, cfg.eta, mode, cfg.model_spec(),
                       seed=cfg.eval_seed, size=(cfg.image_size, cfg.image_size), tune=cfg.ssm,
                       source=_source(cfg))
        echo = dict(cfg.to_dict(), fusion_mode=mode)
        path = out / f"metrics_fold{cfg.fold}_k{cfg.k}_{mode}_eta{cfg.eta:g}.jsonl"
        write_metrics(path, res, echo)
        print(json.dumps({"metrics": str(path), "fusion_mode": mode, "eta": cfg.eta,
                          "mean_iou": res.mean_iou, "fb_iou": res.fb_iou}))
    return 0


def cmd_gradcheck(seed: int, trials: int = 100) -> int:
    t0 = time.perf_counter()
    reports = gradcheck.run(seed=seed, trials=trials)
    print(gradcheck.format_table(reports))
    ok = all(r.passed for r in reports)
    print(f"{'all ops pass' if ok else 'FAILED'} ({time.perf_counter() - t0:.1f}s)")
    return 0 if ok else 1


def gradient_image(grad_map: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Per-position gradient norm, upsampled (nearest) and scaled to 0..255.

    Scaling divides by ``max(max_norm, GRADMAP_FLOOR)`` so a near-zero
    gradient renders dark instead of being stretched to full contrast.
    """
    norm = np.sqrt((grad_map.astype(np.float64) ** 2).sum(axis=0))
    h, w = norm.shape
    rows = np.arange(size[0]) * h // size[0]
    cols = np.arange(size[1]) * w // size[1]
    big = norm[rows[:, None], cols[None, :]]
    return 255.0 * big / max(big.max(), GRADMAP_FLOOR)


def cmd_render(cfg: RunConfig, episode_index: int = 0) -> int:
    params = _load_params(cfg, _resolve_checkpoint(cfg))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = make_fold(cfg.fold, cfg.fold_stride)
    size = (cfg.image_size, cfg.image_size)
    ep = sample_episode(split, "test", cfg.k, [cfg.eval_seed, 2, episode_index], size,
                        episode_id=episode_index, source=_source(cfg))
    spec = cfg.model_spec()
    frozen = params.frozen()
    pre = run_episode(ep.query_image, ep.support_images, ep.support_masks, frozen, 0.0,
                      fusion=cfg.fusion_mode if cfg.fusion_mode != "all" else "weighted", spec=spec)
    post = run_episode(ep.query_image, ep.support_images, ep.support_masks, frozen, cfg.eta,
                       fusion=cfg.fusion_mode if cfg.fusion_mode != "all" else "weighted", spec=spec)
    episodes.write_image_ppm(ep.query_image, out / "query.ppm")
    episodes.write_mask_pgm(ep.query_mask, out / "ground_truth.pgm")
    episodes.write_mask_pgm(SegOutput.from_logits(pre.logits).mask, out / "pred_pre_tuning.pgm")
    episodes.write_mask_pgm(SegOutput.from_logits(post.logits).mask, out / "pred_post_tuning.pgm")
    episodes.write_gray_pgm(gradient_image(post.tunes[0].grad_map, size), out / "gradient_map.pgm")
    episodes.write_image_ppm(ep.support_images[0], out / "support.ppm")
    episodes.write_mask_pgm(ep.support_masks[0], out / "support_mask.pgm")
    print(json.dumps({"out": str(out), "class_id": ep.class_id, "self_seg_loss": post.tunes[0].loss}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sst", description="Self-supervised tuning for few-shot segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "gradcheck", "render"):
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--checkpoint")
        p.add_argument("--out")
        p.add_argument("--fold", type=int)
        p.add_argument("--k", type=int)
        p.add_argument("--fusion", choices=FUSION_MODES + ("all",))
        p.add_argument("--eta", type=float)
        p.add_argument("--seed", type=int)
        if name == "gradcheck":
            p.add_argument("--trials", type=int, default=100)
        if name == "render":
            p.add_argument("--episode", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed or 0, args.trials)
        cfg = _config_from_args(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_render(cfg, args.episode)
    except (ConfigError, CorruptCheckpoint, ShapeConflict, OSError) as e:
        print(f"sst {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
