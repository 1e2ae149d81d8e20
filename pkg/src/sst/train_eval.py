"""Episodic training (main + auxiliary self-segmentation loss) and evaluation."""

from __future__ import annotations

import json
import logging
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import tensor_core as tc
from .episodes import Episode, FoldSplit, sample_episode
from .metrics import confusion_counts, iou
from .model import ModelSpec, predict, run_episode, self_segment
from .nn import OptimizerConfig, ParameterStore, sgd_step

log = logging.getLogger(__name__)

__all__ = ["LossReport", "MetricsRecord", "EvalResult", "iou", "train_step", "train", "evaluate",
           "summarize", "write_metrics"]


@dataclass(frozen=True)
class LossReport:
    main_loss: float
    aux_loss: float
    total: float
    lam: float


@dataclass(frozen=True)
class MetricsRecord:
    episode_id: int
    class_id: int
    fg_intersection: int
    fg_union: int
    bg_intersection: int
    bg_union: int
    iou_fg: float


@dataclass
class EvalResult:
    mean_iou: float
    fb_iou: float
    per_class: dict[int, float]
    records: list[MetricsRecord] = field(repr=False)


def episode_losses(ep: Episode, params: ParameterStore, lam: float, eta: float, spec: ModelSpec,
                   tune: bool = True) -> tuple[tc.Tensor, Optional[tc.Tensor], float]:
    """Query loss, auxiliary self-segmentation loss (None when ``lam == 0``), and L_sup's value."""
    fw = run_episode(ep.query_image, ep.support_images, ep.support_masks, params, eta,
                     spec=spec, tune=tune)
    main = tc.softmax_cross_entropy(fw.logits, tc.Tensor(ep.query_mask))
    aux = None
    aux_value = fw.tunes[0].loss if fw.tunes else 0.0
    if lam > 0:
        _, aux = self_segment(fw.support_features[0], ep.support_masks[0], params, spec)
        aux_value = aux.item()
    return main, aux, aux_value


def train_step(batch: Sequence[Episode], params: ParameterStore, cfg: OptimizerConfig,
               lam: float = 1.0, eta: Optional[float] = None, spec: ModelSpec = ModelSpec(),
               tune: bool = True) -> LossReport:
    """One SGD update on ``mean(main) + lam * mean(aux)`` over a batch of 1-shot episodes.

    The tuned support features enter the main loss as ``R_s - eta * g`` with
    ``g`` held constant (first-order); the auxiliary loss reaches every
    parameter through its own graph.
    """
    if not batch:
        raise ValueError("empty batch")
    if any(ep.k != 1 for ep in batch):
        raise ValueError("training episodes must be 1-shot")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    eta = spec.eta if eta is None else eta
    mains, auxes, aux_values = [], [], []
    for ep in batch:
        main, aux, aux_value = episode_losses(ep, params, lam, eta, spec, tune)
        mains.append(main)
        aux_values.append(aux_value)
        if aux is not None:
            auxes.append(aux)
    n = len(batch)
    objective = tc.scale(tc.add_n(mains), 1.0 / n)
    if auxes:
        objective = objective + tc.scale(tc.add_n(auxes), lam / n)
    objective.backward()
    sgd_step(params, cfg)
    main_v = float(np.mean([m.item() for m in mains]))
    aux_v = float(np.mean(aux_values))
    return LossReport(main_loss=main_v, aux_loss=aux_v, total=main_v + lam * aux_v, lam=lam)


def train(split: FoldSplit, params: ParameterStore, n_episodes: int, batch_size: int,
          cfg: OptimizerConfig, lam: float = 1.0, eta: Optional[float] = None,
          spec: ModelSpec = ModelSpec(), seed: int = 0, size=(64, 64), tune: bool = True,
          source=None, on_step: Optional[Callable[[int, LossReport], None]] = None) -> list[LossReport]:
    """Sample ``n_episodes`` training episodes in batches and update ``params`` in place."""
    reports = []
    n_steps = max(1, -(-n_episodes // batch_size))
    for step in range(n_steps):
        batch = [sample_episode(split, "train", 1, [seed, 1, step, b], size, episode_id=step * batch_size + b,
                                source=source)
                 for b in range(batch_size)]
        rep = train_step(batch, params, cfg, lam, eta, spec, tune)
        if not np.isfinite(rep.total):
            raise FloatingPointError(f"non-finite loss at step {step}")
        reports.append(rep)
        if on_step is not None:
            on_step(step, rep)
    return reports


def record_for(ep: Episode, pred_mask: np.ndarray) -> MetricsRecord:
    counts = confusion_counts(pred_mask, ep.query_mask)
    return MetricsRecord(episode_id=ep.episode_id, class_id=ep.class_id,
                         iou_fg=iou(pred_mask, ep.query_mask), **counts)


def summarize(records: Iterable[MetricsRecord]) -> tuple[float, float, dict[int, float]]:
    """Class-averaged foreground IoU and FB-IoU from summed pixel counts."""
    by_class: dict[int, list[float]] = defaultdict(list)
    fi = fu = bi = bu = 0
    for r in records:
        by_class[r.class_id].append(r.iou_fg)
        fi, fu, bi, bu = fi + r.fg_intersection, fu + r.fg_union, bi + r.bg_intersection, bu + r.bg_union
    if not by_class:
        raise ValueError("no records to summarize")
    per_class = {c: float(np.mean(v)) for c, v in sorted(by_class.items())}
    mean_iou = float(np.mean(list(per_class.values())))
    fg = fi / fu if fu else 1.0
    bg = bi / bu if bu else 1.0
    return mean_iou, (fg + bg) / 2, per_class


def eval_threads() -> int:
    cap = os.environ.get("SST_THREADS")
    n = os.cpu_count() or 1
    return max(1, min(n, int(cap))) if cap else n


def evaluate(split: FoldSplit, params: ParameterStore, n_episodes: int, k: int = 1,
             eta: Optional[float] = None, fusion_mode: str = "weighted", spec: ModelSpec = ModelSpec(),
             seed: int = 0, size=(64, 64), tune: bool = True, source=None,
             predictor: Optional[Callable[[Episode], np.ndarray]] = None,
             threads: Optional[int] = None) -> EvalResult:
    """Score ``n_episodes`` test episodes; deterministic per seed whatever the thread count.

    ``predictor`` replaces the model (maps an episode to a binary mask), which
    is how oracle and trivial baselines are scored with the same protocol.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")

    def one(j: int) -> MetricsRecord:
        ep = sample_episode(split, "test", k, [seed, 2, j], size, episode_id=j, source=source)
        if predictor is not None:
            mask = predictor(ep)
        else:
            mask = predict(ep, params, eta, fusion_mode, spec, tune).mask
        return record_for(ep, mask)

    workers = threads or eval_threads()
    if workers == 1:
        records = [one(j) for j in range(n_episodes)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, range(n_episodes)))
    records.sort(key=lambda r: r.episode_id)
    mean_iou, fb_iou, per_class = summarize(records)
    return EvalResult(mean_iou=mean_iou, fb_iou=fb_iou, per_class=per_class, records=records)


def write_metrics(path, result: EvalResult, config: dict) -> None:
    """One JSON object per episode, then a summary line echoing the config."""
    with open(path, "w") as fh:
        for r in result.records:
            fh.write(json.dumps({"episode_id": r.episode_id, "class_id": r.class_id,
                                 "iou_fg": r.iou_fg}) + "\n")
        fh.write(json.dumps({
            "summary": True,
            "mean_iou": result.mean_iou,
            "fb_iou": result.fb_iou,
            "per_class": {str(c): v for c, v in result.per_class.items()},
            "n_episodes": len(result.records),
            "config": config,
        }) + "\n")
