"""Self-supervised tuning for few-shot segmentation.

Pipeline for one episode::

    R_q, R_s = encode(query), encode(support)          # shared weights
    S_sup, L_sup = self_segment(R_s, support_mask)     # support segments itself
    R_s' = R_s - eta * dL_sup/dR_s                     # parameters stay frozen
    M = relate(R_q, tile(pool(R_s' * mask)))           # late-fusion relation map
    S = decode(M)                                      # upsample + refine

With five supports each one is tuned separately and the relation maps are
fused (score-weighted, averaged or max-pooled) before a single decode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor_core as tc
from .metrics import iou
from .nn import ConvSpec, ParameterStore, init_parameters
from .tensor_core import Tensor

FUSION_MODES = ("weighted", "average", "maximum")


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    encoder_channels: tuple[int, ...] = (3, 16, 32, 64, 64)
    encoder_strides: tuple[int, ...] = (1, 2, 2, 1)
    relation_channels: tuple[int, ...] = (128, 64, 32, 2)
    eta: float = 1.0
    inner_steps: int = 1
    # which self-segmentation scores the weighted 5-shot fusion uses: "pre" or "post" tuning
    score_source: str = "pre"

    def __post_init__(self):
        if len(self.encoder_strides) != len(self.encoder_channels) - 1:
            raise ValueError("one stride per encoder block")
        if self.relation_channels[0] != 2 * self.encoder_channels[-1]:
            raise ValueError("relation input must be query and descriptor channels concatenated")
        if self.relation_channels[-1] != 2:
            raise ValueError("relation output must have 2 channels")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.score_source not in ("pre", "post"):
            raise ValueError(f"score_source must be 'pre' or 'post', got {self.score_source!r}")

    @property
    def feature_stride(self) -> int:
        return int(np.prod(self.encoder_strides))

    def conv_layers(self) -> list[ConvSpec]:
        enc, rel = self.encoder_channels, self.relation_channels
        layers = [ConvSpec(f"encoder.{i}", enc[i + 1], enc[i], 3) for i in range(len(enc) - 1)]
        layers += [ConvSpec(f"relation.{i}", rel[i + 1], rel[i], 3) for i in range(len(rel) - 1)]
        layers.append(ConvSpec("decoder.0", 2, 2, 3))
        return layers

    def init(self, seed: int) -> ParameterStore:
        return init_parameters(self.conv_layers(), seed)

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for name, c_out, c_in, k in self.conv_layers():
            out[f"{name}.weight"] = (c_out, c_in, k, k)
            out[f"{name}.bias"] = (c_out,)
        return out


@dataclass
class SegOutput:
    logits: Tensor
    prob_fg: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_logits(cls, logits: Tensor) -> "SegOutput":
        logp = tc.log_softmax_channels(logits.data.astype(np.float64))
        prob = np.exp(logp[1:2]).astype(np.float32)
        return cls(logits=logits, prob_fg=prob, mask=(prob >= 0.5).astype(np.float32))

    def probabilities(self) -> np.ndarray:
        """Both softmax channels, ``[2,H,W]``."""
        return np.exp(tc.log_softmax_channels(self.logits.data.astype(np.float64)))


@dataclass
class TuneResult:
    features: Tensor
    grad_map: np.ndarray
    loss: float
    seg: SegOutput


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _conv(x: Tensor, params: ParameterStore, name: str, stride: int = 1) -> Tensor:
    return tc.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, pad=1)


def encode(image, params: ParameterStore, spec: ModelSpec = ModelSpec()) -> Tensor:
    """Shared (Siamese) encoder: ``[3,H,W] -> [64,H/4,W/4]``."""
    x = _as_input(image)
    s = spec.feature_stride
    if x.data.ndim != 3 or x.shape[0] != spec.encoder_channels[0] or x.shape[1] % s or x.shape[2] % s:
        raise tc.ShapeMismatch(f"encoder needs [3,H,W] with H, W multiples of {s}, got {x.shape}")
    for i, stride in enumerate(spec.encoder_strides):
        x = tc.relu(_conv(x, params, f"encoder.{i}", stride))
    return x


def downsample_mask(mask, h: int, w: int) -> Tensor:
    """Nearest-neighbour resize of a binary ``[1,H,W]`` mask, sampling cell centres."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    H, W = m.shape[-2:]
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return Tensor(m[..., rows[:, None], cols[None, :]].reshape(1, h, w))


def build_descriptor(features: Tensor, support_mask) -> Tensor:
    _, h, w = features.shape
    small = downsample_mask(support_mask, h, w)
    return tc.tile_spatial(tc.masked_global_pool(features, small), h, w)


def relate(query_features: Tensor, descriptor: Tensor, params: ParameterStore,
           spec: ModelSpec = ModelSpec()) -> Tensor:
    """Relation map ``M`` (2 channels at feature resolution)."""
    if query_features.shape != descriptor.shape:
        raise tc.ShapeMismatch(f"query {query_features.shape} vs descriptor {descriptor.shape}")
    x = tc.concat([query_features, descriptor], axis=0)
    n = len(spec.relation_channels) - 1
    for i in range(n):
        x = _conv(x, params, f"relation.{i}")
        if i < n - 1:
            x = tc.relu(x)
    return x


def decode(relation_map: Tensor, params: ParameterStore, out_size: tuple[int, int]) -> Tensor:
    return _conv(tc.bilinear_resize(relation_map, *out_size), params, "decoder.0")


def relate_and_decode(query_features: Tensor, descriptor: Tensor, params: ParameterStore,
                      out_size: tuple[int, int], spec: ModelSpec = ModelSpec()) -> SegOutput:
    return SegOutput.from_logits(decode(relate(query_features, descriptor, params, spec), params, out_size))


def _out_size(mask) -> tuple[int, int]:
    shape = mask.shape
    return int(shape[-2]), int(shape[-1])


def self_segment(support_features: Tensor, support_mask, params: ParameterStore,
                 spec: ModelSpec = ModelSpec()) -> tuple[SegOutput, Tensor]:
    """Segment the support image with its own descriptor; returns ``(S_sup, L_sup)``."""
    desc = build_descriptor(support_features, support_mask)
    logits = decode(relate(support_features, desc, params, spec), params, _out_size(support_mask))
    loss = tc.softmax_cross_entropy(logits, _as_input(support_mask))
    return SegOutput.from_logits(logits), loss


def support_gradient(support_features: Tensor, support_mask, params: ParameterStore,
                     spec: ModelSpec = ModelSpec()) -> tuple[np.ndarray, float, SegOutput]:
    """``dL_sup/dR_s`` on a private graph; parameters receive no gradient."""
    leaf = Tensor(support_features.data, requires_grad=True)
    seg, loss = self_segment(leaf, support_mask, params.frozen(), spec)
    loss.backward()
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("self-segmentation gradient has NaN or Inf entries")
    return grad, loss.item(), seg


def tune_support_features(support_features: Tensor, support_mask, params: ParameterStore,
                          eta: Optional[float] = None, spec: ModelSpec = ModelSpec()) -> TuneResult:
    """One (or ``spec.inner_steps``) gradient step on the support features.

    The returned features stay attached to ``support_features``' graph, but the
    step direction is a constant: no gradient flows through the gradient map.
    ``grad_map``, ``loss`` and ``seg`` describe the first, pre-tuning step.
    """
    eta = spec.eta if eta is None else eta
    step = np.asarray(eta, dtype=support_features.data.dtype)
    feats = support_features
    first = None
    for _ in range(spec.inner_steps):
        grad, loss, seg = support_gradient(feats, support_mask, params, spec)
        if first is None:
            first = (grad, loss, seg)
        feats = feats - Tensor(step * grad)
    return TuneResult(features=feats, grad_map=first[0], loss=first[1], seg=first[2])


def _fusion_weights(scores: Sequence[float], mode: str) -> np.ndarray:
    k = len(scores)
    if mode == "average":
        return np.full(k, 1.0 / k)
    w = np.asarray(scores, dtype=np.float64)
    # equal scores take the uniform path so weighted and average agree bitwise
    if w.sum() < 1e-6 or np.all(w == w[0]):
        return np.full(k, 1.0 / k)
    return w / w.sum()


def fuse_relation_maps(maps: Sequence[np.ndarray], scores: Sequence[float], mode: str) -> np.ndarray:
    """Combine per-support relation maps; accumulates in float64."""
    if mode not in FUSION_MODES:
        raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {mode!r}")
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in maps])
    if mode == "maximum":
        fused = stack.max(axis=0)
    else:
        fused = np.tensordot(_fusion_weights(scores, mode), stack, axes=1)
    return fused.astype(maps[0].dtype)


@dataclass
class EpisodeForward:
    """Everything one forward pass produces, for training and inspection."""

    logits: Tensor
    relation_maps: list[Tensor]
    tunes: list[TuneResult]
    support_features: list[Tensor]
    query_features: Tensor
    scores: list[float]


def run_episode(query_image, support_images: Sequence, support_masks: Sequence,
                params: ParameterStore, eta: Optional[float] = None, fusion: str = "weighted",
                spec: ModelSpec = ModelSpec(), tune: bool = True) -> EpisodeForward:
    """Shared forward used by inference and training.

    ``tune=False`` deletes the tuning stage entirely (the no-SSM baseline).
    With one support the fusion mode is irrelevant and the relation map is
    decoded as is, keeping gradients to every parameter.
    """
    out_size = _out_size(np.asarray(query_image))
    r_q = encode(query_image, params, spec)
    maps, tunes, feats, scores = [], [], [], []
    for img, mask in zip(support_images, support_masks):
        r_s = encode(img, params, spec)
        feats.append(r_s)
        if tune:
            t = tune_support_features(r_s, mask, params, eta, spec)
            tunes.append(t)
            tuned = t.features
            seg = t.seg
            if spec.score_source == "post":
                seg, _ = self_segment(tuned.detach(), mask, params.frozen(), spec)
        else:
            tuned = r_s
            seg = None
            if len(support_masks) > 1:
                seg, _ = self_segment(r_s.detach(), mask, params.frozen(), spec)
        scores.append(iou(seg.mask, mask) if seg is not None else 1.0)
        maps.append(relate(r_q, build_descriptor(tuned, mask), params, spec))
    if len(maps) == 1:
        fused = maps[0]
    else:
        fused = Tensor(fuse_relation_maps([m.data for m in maps], scores, fusion))
    logits = decode(fused, params, out_size)
    return EpisodeForward(logits=logits, relation_maps=maps, tunes=tunes, support_features=feats,
                          query_features=r_q, scores=scores)


def forward_one_shot(episode, params: ParameterStore, eta: Optional[float] = None,
                     spec: ModelSpec = ModelSpec()) -> SegOutput:
    if episode.k != 1:
        raise ValueError(f"forward_one_shot needs K=1, episode has K={episode.k}")
    fw = run_episode(episode.query_image, episode.support_images, episode.support_masks,
                     params.frozen(), eta, spec=spec)
    return SegOutput.from_logits(fw.logits)


def forward_baseline(episode, params: ParameterStore, spec: ModelSpec = ModelSpec()) -> SegOutput:
    """The pipeline with the self-supervised tuning stage removed."""
    fw = run_episode(episode.query_image, episode.support_images, episode.support_masks,
                     params.frozen(), spec=spec, tune=False)
    return SegOutput.from_logits(fw.logits)


def fuse_five_shot(episode, params: ParameterStore, eta: Optional[float] = None,
                   mode: str = "weighted", spec: ModelSpec = ModelSpec()) -> SegOutput:
    if episode.k != 5:
        raise ValueError(f"fuse_five_shot needs K=5, episode has K={episode.k}")
    fw = run_episode(episode.query_image, episode.support_images, episode.support_masks,
                     params.frozen(), eta, fusion=mode, spec=spec)
    return SegOutput.from_logits(fw.logits)


def predict(episode, params: ParameterStore, eta: Optional[float] = None, fusion: str = "weighted",
            spec: ModelSpec = ModelSpec(), tune: bool = True) -> SegOutput:
    fw = run_episode(episode.query_image, episode.support_images, episode.support_masks,
                     params.frozen(), eta, fusion=fusion, spec=spec, tune=tune)
    return SegOutput.from_logits(fw.logits)
