"""Anchor-free per-frame detector with an advantage-gated language residual.

The per-frame gate is lambda = 2*sigmoid(relu(a)) - 1 where a is a linear
prediction of the language advantage from the advantage carrier stream.
Classification and localization features are formed as a residual
aggregation: vision plus lambda times the matching language stream, so
lambda = 0 reduces the model to vision-only bit for bit.

Two small convolutional trunks (classification and localization) read the
aggregated features; per-frame heads emit class probabilities, boundary
offsets, and template-token logits used by the auxiliary captioning loss.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import blobio
from .errors import ConfigError, FormatError
from .nn import (Conv1d, Linear, Rng, ShapeError, as_matrix, log_softmax, relu,
                 relu_grad, sigmoid)
from .synthgen import Corpus, LanguageBundle, Segment, VideoRecord

LAMBDA_MODES = ("learned", "fixed", "language_only")
_ONE_BELOW_1 = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class ModelConfig:
    dim: int
    num_classes: int
    head_layers: int = 2
    kernel: int = 3
    hidden: int | None = None
    nms_tiou: float = 0.5
    top_k_pre_nms: int = 200
    score_threshold: float = 0.01
    lambda_mode: str = "learned"
    fixed_lambda: float = 0.0

    @property
    def hidden_dim(self) -> int:
        return self.dim if self.hidden is None else self.hidden

    def validate(self) -> "ModelConfig":
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.head_layers < 1:
            raise ConfigError(f"head_layers must be >= 1, got {self.head_layers}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if self.hidden is not None and self.hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {self.hidden}")
        if not (0.0 < self.nms_tiou < 1.0):
            raise ConfigError(f"nms_tiou must lie in (0, 1), got {self.nms_tiou}")
        if self.top_k_pre_nms < 1:
            raise ConfigError(f"top_k_pre_nms must be >= 1, got {self.top_k_pre_nms}")
        if not (0.0 <= self.score_threshold < 1.0):
            raise ConfigError(f"score_threshold must lie in [0, 1), got {self.score_threshold}")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ConfigError(f"lambda_mode must be one of {LAMBDA_MODES}, got {self.lambda_mode!r}")
        if not (0.0 <= self.fixed_lambda <= 1.0):
            raise ConfigError(f"fixed_lambda must lie in [0, 1], got {self.fixed_lambda}")
        return self


class ModelState:
    """All trainable parameters, created in a fixed seeded order."""

    def __init__(self, cfg: ModelConfig, rng: Rng | None):
        cfg.validate()
        self.cfg = cfg
        d, h = cfg.dim, cfg.hidden_dim
        # start the gate half-open so the language pathway actually trains;
        # the advantage regression then closes it wherever language fails to help
        self.adv_fc = Linear(d, 1, rng, w_scale=0.1 / np.sqrt(d))
        self.adv_fc.b.value[...] = 1.0
        self.cls_trunk = []
        self.loc_trunk = []
        for i in range(cfg.head_layers):
            din = d if i == 0 else h
            self.cls_trunk.append(Conv1d(cfg.kernel, din, h, rng))
        self.cls_out = Linear(h, cfg.num_classes, rng, w_scale=1.0 / np.sqrt(h))
        self.tmpl_out = Linear(h, cfg.num_classes + 1, rng, w_scale=1.0 / np.sqrt(h))
        for i in range(cfg.head_layers):
            din = d if i == 0 else h
            self.loc_trunk.append(Conv1d(cfg.kernel, din, h, rng))
        self.loc_out = Linear(h, 2, rng, w_scale=1.0 / np.sqrt(h))
        self.loc_out.b.value[...] = 1.0  # start with open, non-degenerate intervals

    def named_params(self):
        items = []
        for prefix, layer in (("adv_fc", self.adv_fc),):
            for suffix, p in layer.params():
                items.append((f"{prefix}.{suffix}", p))
        for i, conv in enumerate(self.cls_trunk):
            for suffix, p in conv.params():
                items.append((f"cls_trunk.{i}.{suffix}", p))
        for prefix, layer in (("cls_out", self.cls_out), ("tmpl_out", self.tmpl_out)):
            for suffix, p in layer.params():
                items.append((f"{prefix}.{suffix}", p))
        for i, conv in enumerate(self.loc_trunk):
            for suffix, p in conv.params():
                items.append((f"loc_trunk.{i}.{suffix}", p))
        for suffix, p in self.loc_out.params():
            items.append((f"loc_out.{suffix}", p))
        return items

    def zero_grads(self) -> None:
        for _, p in self.named_params():
            p.zero_grad()


@dataclass(eq=False)
class FrameOutputs:
    cls_scores: np.ndarray   # L x C probabilities
    offsets: np.ndarray      # L x 2 non-negative boundary offsets
    lam: np.ndarray          # L x 1 effective gate
    adv_pred: np.ndarray     # L x 1 predicted language advantage
    tmpl_logits: np.ndarray  # L x (C + 1) template-token logits


@dataclass(eq=False)
class _HeadCache:
    cls_pre: list
    loc_pre: list
    cls_scores: np.ndarray
    loc_raw: np.ndarray


@dataclass(eq=False)
class _VideoCache:
    head: _HeadCache
    mode: str                       # "vision", "learned", "fixed", "language_only"
    bundle: LanguageBundle | None
    lam: np.ndarray | None = None
    dlam_dadv: np.ndarray | None = None
    adv_through_fc: bool = False


def predict_advantage(adv_stream, state: ModelState) -> np.ndarray:
    """Linear per-frame advantage estimate from the advantage carrier."""
    adv_stream = as_matrix(adv_stream, "adv_stream")
    if adv_stream.shape[1] != state.cfg.dim:
        raise ShapeError(f"adv_stream shape {adv_stream.shape} does not match dim {state.cfg.dim}")
    return state.adv_fc.forward(adv_stream)


def lambda_from_advantage(adv_pred) -> np.ndarray:
    """Gate values 2*sigmoid(relu(a)) - 1, computed as tanh(relu(a) / 2).

    Exactly 0 for a <= 0; capped one ulp below 1 so the open interval
    [0, 1) holds even for saturating advantages.
    """
    a = np.asarray(adv_pred, dtype=np.float64)
    return np.minimum(np.tanh(relu(a) / 2.0), _ONE_BELOW_1)


def _lambda_grad(adv_pred, lam) -> np.ndarray:
    # d lambda / d a = (1 - lambda^2) / 2 on the open side of the relu
    a = np.asarray(adv_pred, dtype=np.float64)
    return 0.5 * (1.0 - lam * lam) * (a > 0.0)


def aggregate(vis, bundle: LanguageBundle, lam) -> tuple[np.ndarray, np.ndarray]:
    """Residual feature aggregation: vision plus gated language streams."""
    vis = as_matrix(vis, "vis")
    lam = as_matrix(lam, "lambda")
    if lam.shape != (vis.shape[0], 1):
        raise ShapeError(f"lambda shape {lam.shape} does not match frame count {vis.shape[0]}")
    for name, stream in (("cls_stream", bundle.cls_stream), ("loc_stream", bundle.loc_stream)):
        if stream.shape != vis.shape:
            raise ShapeError(f"{name} shape {stream.shape} does not match vis shape {vis.shape}")
    return vis + lam * bundle.cls_stream, vis + lam * bundle.loc_stream


def head_forward(f_cls, f_loc, state: ModelState) -> tuple[FrameOutputs, _HeadCache]:
    """Run both trunks; lambda/advantage fields are zero placeholders."""
    a = as_matrix(f_cls, "f_cls")
    cls_pre = []
    for conv in state.cls_trunk:
        z = conv.forward(a)
        cls_pre.append(z)
        a = relu(z)
    cls_scores = sigmoid(state.cls_out.forward(a))
    tmpl_logits = state.tmpl_out.forward(a)
    b = as_matrix(f_loc, "f_loc")
    loc_pre = []
    for conv in state.loc_trunk:
        z = conv.forward(b)
        loc_pre.append(z)
        b = relu(z)
    loc_raw = state.loc_out.forward(b)
    offsets = relu(loc_raw)
    L = cls_scores.shape[0]
    outputs = FrameOutputs(cls_scores, offsets, np.zeros((L, 1)), np.zeros((L, 1)), tmpl_logits)
    return outputs, _HeadCache(cls_pre, loc_pre, cls_scores, loc_raw)


def _head_backward(state: ModelState, cache: _HeadCache, d_scores, d_offsets, d_tmpl):
    d_logits = d_scores * cache.cls_scores * (1.0 - cache.cls_scores)
    d_feat = state.cls_out.backward(d_logits) + state.tmpl_out.backward(d_tmpl)
    for conv, z in zip(reversed(state.cls_trunk), reversed(cache.cls_pre)):
        d_feat = conv.backward(d_feat * relu_grad(z))
    d_f_cls = d_feat
    d_feat = state.loc_out.backward(d_offsets * relu_grad(cache.loc_raw))
    for conv, z in zip(reversed(state.loc_trunk), reversed(cache.loc_pre)):
        d_feat = conv.backward(d_feat * relu_grad(z))
    return d_f_cls, d_feat


def forward_video(state: ModelState, vis, bundle: LanguageBundle | None,
                  lambda_override: float | None = None) -> tuple[FrameOutputs, _VideoCache]:
    """Full forward pass for one video.

    ``bundle=None`` runs the vision-only path (both trunks read raw vision
    features).  ``lambda_override`` pins the gate to a constant regardless
    of the model's lambda mode; eval uses it for vision-view baselines.
    """
    vis = as_matrix(vis, "vis")
    L = vis.shape[0]
    if bundle is None:
        outputs, head = head_forward(vis, vis, state)
        return outputs, _VideoCache(head, "vision", None)

    mode = state.cfg.lambda_mode
    adv_pred = np.zeros((L, 1))
    dlam_dadv = None
    adv_through_fc = False
    if mode == "language_only" and lambda_override is None:
        lam = np.ones((L, 1))
        f_cls, f_loc = bundle.cls_stream, bundle.loc_stream
    else:
        if mode == "language_only":
            mode = "fixed"  # overridden gate turns the ablation into a gated pass
        adv_pred = predict_advantage(bundle.adv_stream, state)
        adv_through_fc = True
        if lambda_override is not None:
            lam = np.full((L, 1), float(lambda_override))
            mode = "fixed"
        elif mode == "fixed":
            lam = np.full((L, 1), state.cfg.fixed_lambda)
        else:
            lam = lambda_from_advantage(adv_pred)
            dlam_dadv = _lambda_grad(adv_pred, lam)
        f_cls, f_loc = aggregate(vis, bundle, lam)
    outputs, head = head_forward(f_cls, f_loc, state)
    outputs.lam = lam
    outputs.adv_pred = adv_pred
    return outputs, _VideoCache(head, mode, bundle, lam=lam, dlam_dadv=dlam_dadv,
                                adv_through_fc=adv_through_fc)


def backward_video(state: ModelState, cache: _VideoCache, d_scores, d_offsets,
                   d_tmpl, d_adv=None) -> None:
    """Accumulate parameter gradients for one video.

    ``d_adv`` is the direct gradient on the advantage prediction (from the
    advantage regression loss); the gate path contribution is added here.
    """
    d_f_cls, d_f_loc = _head_backward(state, cache.head, d_scores, d_offsets, d_tmpl)
    if cache.mode in ("vision", "language_only"):
        return
    total_d_adv = None
    if cache.mode == "learned":
        bundle = cache.bundle
        d_lam = (d_f_cls * bundle.cls_stream).sum(axis=1, keepdims=True) \
            + (d_f_loc * bundle.loc_stream).sum(axis=1, keepdims=True)
        total_d_adv = d_lam * cache.dlam_dadv
    if d_adv is not None and cache.adv_through_fc:
        total_d_adv = d_adv if total_d_adv is None else total_d_adv + d_adv
    if total_d_adv is not None:
        state.adv_fc.backward(total_d_adv)


def frame_targets(gt: list[Segment], frames: int, num_classes: int):
    """Per-frame labels plus covering segment bounds.

    Returns (labels, gstart, gend): label ``num_classes`` marks background,
    and the bounds are zero there.  Overlapping segments are an error.
    """
    labels = np.full(frames, num_classes, dtype=np.int64)
    gstart = np.zeros(frames)
    gend = np.zeros(frames)
    for seg in gt:
        s, e = int(seg.start), int(seg.end)
        if not (0 <= s < e <= frames):
            raise ConfigError(f"segment ({seg.start}, {seg.end}) out of bounds for {frames} frames")
        if not (0 <= seg.label < num_classes):
            raise ConfigError(f"segment label {seg.label} out of range for {num_classes} classes")
        if np.any(labels[s:e] != num_classes):
            raise ConfigError(f"overlapping ground-truth segments at frames {s}..{e}")
        labels[s:e] = seg.label
        gstart[s:e] = float(seg.start)
        gend[s:e] = float(seg.end)
    return labels, gstart, gend


def template_loss(tmpl_logits, gt: list[Segment]) -> float:
    """Mean per-frame cross-entropy against the template token sequence.

    The token at frame l is the covering segment's class, or the background
    token C when no segment covers l.
    """
    z = as_matrix(tmpl_logits, "tmpl_logits")
    L, width = z.shape
    labels, _, _ = frame_targets(gt, L, width - 1)
    logp = log_softmax(z)
    return float(-logp[np.arange(L), labels].mean())


def template_loss_grad(tmpl_logits, gt: list[Segment]) -> np.ndarray:
    """d template_loss / d logits = (softmax - onehot) / L."""
    z = as_matrix(tmpl_logits, "tmpl_logits")
    L, width = z.shape
    labels, _, _ = frame_targets(gt, L, width - 1)
    g = np.exp(log_softmax(z))
    g[np.arange(L), labels] -= 1.0
    return g / L


@dataclass(frozen=True)
class Proposal:
    start: float
    end: float
    label: int
    score: float


def _proposal_order(p: Proposal):
    return (-p.score, p.start, p.end, p.label)


def tiou(a, b) -> float:
    """Temporal IoU of two intervals given as (start, end) or objects with
    .start/.end attributes.  Zero-length intervals are an error."""
    sa, ea = (a.start, a.end) if hasattr(a, "start") else (a[0], a[1])
    sb, eb = (b.start, b.end) if hasattr(b, "start") else (b[0], b[1])
    sa, ea, sb, eb = float(sa), float(ea), float(sb), float(eb)
    if not (sa < ea) or not (sb < eb):
        raise ValueError(f"tiou of degenerate interval: ({sa}, {ea}) vs ({sb}, {eb})")
    inter = max(0.0, min(ea, eb) - max(sa, sb))
    union = (ea - sa) + (eb - sb) - inter
    return inter / union


def decode_proposals(outputs: FrameOutputs, cfg: ModelConfig) -> list[Proposal]:
    """Frame-wise decoding: (l - off0, l + off1, c, score) above threshold.

    Boundaries are clamped to [0, L]; empty intervals are dropped.  The
    result is sorted by (score desc, start asc, end asc, label asc) and
    truncated to cfg.top_k_pre_nms entries.
    """
    scores = outputs.cls_scores
    off = outputs.offsets
    L = scores.shape[0]
    frames, classes = np.nonzero(scores >= cfg.score_threshold)
    props = []
    for l, c in zip(frames.tolist(), classes.tolist()):
        start = max(0.0, l - off[l, 0])
        end = min(float(L), l + off[l, 1])
        if start >= end:
            continue
        props.append(Proposal(start, end, c, float(scores[l, c])))
    props.sort(key=_proposal_order)
    return props[:cfg.top_k_pre_nms]


def nms(proposals: list[Proposal], tiou_threshold: float) -> list[Proposal]:
    """Greedy class-wise suppression of overlaps above the threshold."""
    ordered = sorted(proposals, key=_proposal_order)
    keep: list[Proposal] = []
    for p in ordered:
        if any(k.label == p.label and tiou(k, p) > tiou_threshold for k in keep):
            continue
        keep.append(p)
    return keep


def predict_video(state: ModelState, video: VideoRecord,
                  lambda_override: float | None = None) -> list[Proposal]:
    outputs, _ = forward_video(state, video.vis, video.lang, lambda_override)
    return nms(decode_proposals(outputs, state.cfg), state.cfg.nms_tiou)


def predict_corpus(state: ModelState, corpus: Corpus,
                   lambda_override: float | None = None) -> dict[str, list[Proposal]]:
    return {v.id: predict_video(state, v, lambda_override) for v in corpus.videos}


def save_checkpoint(state: ModelState, path) -> None:
    """Parameters in the named-matrix container plus a JSON config sidecar."""
    path = Path(path)
    blobio.write_named_matrices(path, [(name, p.value) for name, p in state.named_params()])
    sidecar = Path(str(path) + ".json")
    sidecar.write_text(json.dumps({"model_config": asdict(state.cfg)}, sort_keys=True, indent=2) + "\n")


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise FormatError(f"missing checkpoint sidecar {sidecar}")
    try:
        blob = json.loads(sidecar.read_text())
        cfg = ModelConfig(**blob["model_config"]).validate()
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint sidecar {sidecar}: {exc}") from exc
    state = ModelState(cfg, rng=None)
    stored = dict(blobio.read_named_matrices(path))
    for name, p in state.named_params():
        if name not in stored:
            raise FormatError(f"checkpoint {path} lacks parameter {name!r}")
        m = stored.pop(name)
        if m.shape != p.value.shape:
            raise FormatError(f"checkpoint parameter {name!r} has shape {m.shape}, model expects {p.value.shape}")
        p.value[...] = m
    if stored:
        raise FormatError(f"checkpoint {path} has unknown parameters {sorted(stored)}")
    return state
