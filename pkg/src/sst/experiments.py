"""Desk-scale experiments: component ablation, 5-shot fusion, trained competence.

Trained weights are cached on disk keyed by the full training configuration,
so the ablation, fusion and competence studies share the same models.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cli import RunConfig
from .episodes import make_fold, sample_episode
from .metrics import iou
from .model import FUSION_MODES, SegOutput, decode, encode, fuse_relation_maps, run_episode, self_segment
from .nn import ParameterStore, load_checkpoint, save_checkpoint
from .tensor_core import Tensor
from .train_eval import evaluate, record_for, summarize, train

log = logging.getLogger(__name__)

ROOT = Path(__file__).resolve().parents[2]
DESK_CONFIG = ROOT / "configs" / "desk.json"


@dataclass(frozen=True)
class Variant:
    name: str
    ssm: bool
    lambda_aux: float


VARIANTS = (
    Variant("baseline", ssm=False, lambda_aux=0.0),
    Variant("ssm", ssm=True, lambda_aux=0.0),
    Variant("aux", ssm=False, lambda_aux=1.0),
    Variant("full", ssm=True, lambda_aux=1.0),
)
VARIANT = {v.name: v for v in VARIANTS}


def desk_config(**overrides) -> RunConfig:
    cfg = RunConfig.load(DESK_CONFIG) if DESK_CONFIG.exists() else RunConfig()
    return replace(cfg, **overrides).validate()


def cache_dir() -> Path:
    d = Path(os.environ.get("SST_CACHE_DIR", ROOT / "results" / "cache"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _train_key(cfg: RunConfig) -> str:
    keys = ("seed", "image_size", "fold", "fold_stride", "eta", "lambda_aux", "ssm", "inner_steps",
            "learning_rate", "weight_decay", "momentum", "lr_decay", "n_train_episodes", "batch_size")
    blob = json.dumps({k: getattr(cfg, k) for k in keys}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def trained_params(cfg: RunConfig) -> ParameterStore:
    """Train (or load from cache) the model ``cfg`` describes."""
    path = cache_dir() / f"{_train_key(cfg)}.sst"
    spec = cfg.model_spec()
    if path.exists():
        return load_checkpoint(path, expected=spec.expected_shapes())
    params = spec.init(cfg.seed)
    t0 = time.perf_counter()
    train(make_fold(cfg.fold, cfg.fold_stride), params, cfg.n_train_episodes, cfg.batch_size,
          cfg.optimizer(), cfg.lambda_aux, cfg.eta, spec, seed=cfg.seed,
          size=(cfg.image_size, cfg.image_size), tune=cfg.ssm)
    log.info("trained %s in %.1fs", path.name, time.perf_counter() - t0)
    save_checkpoint(params, path)
    return params


def variant_config(base: RunConfig, variant: str, seed: int) -> RunConfig:
    v = VARIANT[variant]
    return replace(base, seed=seed, ssm=v.ssm, lambda_aux=v.lambda_aux)


def _eval_seed(cfg: RunConfig) -> int:
    # every variant of one training seed is scored on the same test episodes
    return cfg.eval_seed * 1000 + cfg.seed


def ablation(seeds: Sequence[int] = (0, 1, 2), base: Optional[RunConfig] = None) -> dict:
    """1-shot test mean-IoU of every variant for every seed."""
    base = base or desk_config()
    split = make_fold(base.fold, base.fold_stride)
    table: dict[str, list[float]] = {v.name: [] for v in VARIANTS}
    for seed in seeds:
        for v in VARIANTS:
            cfg = variant_config(base, v.name, seed)
            res = evaluate(split, trained_params(cfg), cfg.n_eval_episodes, 1, cfg.eta, spec=cfg.model_spec(),
                           seed=_eval_seed(cfg), size=(cfg.image_size,) * 2, tune=cfg.ssm)
            table[v.name].append(res.mean_iou)
            log.info("ablation seed %d %s mean-IoU %.4f", seed, v.name, res.mean_iou)
    return {"seeds": list(seeds), "per_seed": table,
            "mean": {k: float(np.mean(v)) for k, v in table.items()}, "config": base.to_dict()}


def predict_all_modes(ep, params: ParameterStore, cfg: RunConfig) -> tuple[dict[str, np.ndarray], list[float]]:
    """Query masks under every fusion mode from one pass over the supports, plus the support scores."""
    frozen = params.frozen()
    spec = cfg.model_spec()
    fw = run_episode(ep.query_image, ep.support_images, ep.support_masks, frozen, cfg.eta, spec=spec,
                     tune=cfg.ssm)
    maps = [m.data for m in fw.relation_maps]
    size = ep.query_mask.shape[-2:]
    masks = {mode: SegOutput.from_logits(decode(Tensor(fuse_relation_maps(maps, fw.scores, mode)), frozen,
                                                size)).mask
             for mode in FUSION_MODES}
    return masks, fw.scores


def fusion(seeds: Sequence[int] = (0, 1, 2), base: Optional[RunConfig] = None) -> dict:
    """5-shot test mean-IoU per fusion mode, using the full model of each seed."""
    base = base or desk_config()
    split = make_fold(base.fold, base.fold_stride)
    table: dict[str, list[float]] = {m: [] for m in FUSION_MODES}
    deviations = []
    for seed in seeds:
        cfg = variant_config(base, "full", seed)
        params = trained_params(cfg)
        records: dict[str, list] = {m: [] for m in FUSION_MODES}
        for j in range(cfg.n_eval_episodes):
            ep = sample_episode(split, "test", 5, [_eval_seed(cfg), 5, j], (cfg.image_size,) * 2, episode_id=j)
            masks, scores = predict_all_modes(ep, params, cfg)
            for mode, mask in masks.items():
                records[mode].append(record_for(ep, mask))
            w = np.asarray(scores) / max(sum(scores), 1e-6)
            deviations.append(float(np.abs(w - 1 / len(w)).mean()))
        for mode in FUSION_MODES:
            table[mode].append(summarize(records[mode])[0])
        log.info("fusion seed %d %s", seed, {m: round(v[-1], 4) for m, v in table.items()})
    return {"seeds": list(seeds), "per_seed": table,
            "mean": {k: float(np.mean(v)) for k, v in table.items()},
            "mean_abs_weight_deviation_from_uniform": float(np.mean(deviations)), "config": base.to_dict()}


def self_segmentation_iou(params: ParameterStore, cfg: RunConfig, n_episodes: int) -> float:
    """Class-averaged IoU of the support's own self-segmentation on training classes."""
    split = make_fold(cfg.fold, cfg.fold_stride)
    frozen = params.frozen()
    per_class: dict[int, list[float]] = {}
    for j in range(n_episodes):
        ep = sample_episode(split, "train", 1, [_eval_seed(cfg), 7, j], (cfg.image_size,) * 2)
        img, mask = ep.supports[0]
        seg, _ = self_segment(encode(img, frozen, cfg.model_spec()), mask, frozen, cfg.model_spec())
        per_class.setdefault(ep.class_id, []).append(iou(seg.mask, mask))
    return float(np.mean([np.mean(v) for v in per_class.values()]))


def competence(seed: int = 0, base: Optional[RunConfig] = None, n_self_seg: int = 500) -> dict:
    """Held-out 1-shot mean-IoU of the full model and its self-segmentation IoU on train classes."""
    base = base or desk_config()
    cfg = variant_config(base, "full", seed)
    params = trained_params(cfg)
    split = make_fold(cfg.fold, cfg.fold_stride)
    res = evaluate(split, params, cfg.n_eval_episodes, 1, cfg.eta, spec=cfg.model_spec(), seed=_eval_seed(cfg),
                   size=(cfg.image_size,) * 2)
    oracle = evaluate(split, params, cfg.n_eval_episodes, seed=_eval_seed(cfg), size=(cfg.image_size,) * 2,
                      predictor=lambda ep: ep.query_mask)
    empty = evaluate(split, params, cfg.n_eval_episodes, seed=_eval_seed(cfg), size=(cfg.image_size,) * 2,
                     predictor=lambda ep: np.zeros_like(ep.query_mask))
    support_mask = evaluate(split, params, cfg.n_eval_episodes, seed=_eval_seed(cfg), size=(cfg.image_size,) * 2,
                            predictor=lambda ep: ep.support_masks[0])
    return {"seed": seed, "test_mean_iou": res.mean_iou, "test_fb_iou": res.fb_iou,
            "self_seg_iou_train": self_segmentation_iou(params, cfg, n_self_seg),
            "reference": {"oracle": oracle.mean_iou, "all_background": empty.mean_iou,
                          "copy_support_mask": support_mask.mean_iou},
            "config": cfg.to_dict()}


def write_json(obj: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")
