"""Alternating-epoch training with class-wise advantage bookkeeping.

Even epochs (0, 2, ...) train on vision features alone and record each
video's detection loss into a per-class running-mean table.  Odd epochs
train the gated vision+language model; the frozen table from the paired
vision epoch supplies regression targets for the advantage head:

    target[l] = mean vision-only loss of the frame's class - per-frame
                vision+language loss at l,

evaluated on positive frames only and treated as a constant (no gradient
flows into the detection head through the targets).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import (FrameOutputs, ModelConfig, ModelState, backward_video,
                    forward_video, frame_targets, template_loss,
                    template_loss_grad)
from .nn import Param, Rng, focal_loss, focal_loss_grad, _diou_parts
from .synthgen import Corpus, Segment

INTERVAL_PAD = 1e-6  # keeps decoded training intervals non-degenerate


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 2e-3
    lambda_loc: float = 1.0
    lambda_tg: float = 0.1
    lambda_adv: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    normalize_frame_loss: bool = False  # target per-frame loss divided by the positive count

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.epochs % 2 != 0:
            raise ConfigError(f"epochs must be even and non-negative (strict epoch alternation), got {self.epochs}")
        if not (self.lr > 0):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("lambda_loc", "lambda_tg", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not (0 <= self.seed < 2**64):
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        return self


class Adam:
    """Standard Adam with bias correction; no weight decay."""

    def __init__(self, params: list[tuple[str, Param]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self._params = list(params)
        self._m = [np.zeros_like(p.value) for _, p in self._params]
        self._v = [np.zeros_like(p.value) for _, p in self._params]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for (_, p), m, v in zip(self._params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class ClasswiseLossTable:
    """Running mean of vision-only video losses, keyed by class."""

    def __init__(self):
        self._sums: dict[int, float] = {}
        self._counts: dict[int, int] = {}

    def add(self, label: int, loss: float) -> None:
        self._sums[label] = self._sums.get(label, 0.0) + float(loss)
        self._counts[label] = self._counts.get(label, 0) + 1

    def mean(self, label: int) -> float:
        if label not in self._sums:
            raise ConfigError(f"class {label} missing from the vision-only loss table")
        return self._sums[label] / self._counts[label]

    def means(self) -> dict[int, float]:
        return {c: self.mean(c) for c in sorted(self._sums)}

    def __contains__(self, label: int) -> bool:
        return label in self._sums


@dataclass(eq=False)
class DetectionLossResult:
    loss: float
    per_frame: np.ndarray        # L x 1 unnormalized per-frame summands
    positives: int               # true positive-frame count (normalizer floors it at 1)
    d_cls_scores: np.ndarray     # L x C
    d_offsets: np.ndarray        # L x 2

    @property
    def normalizer(self) -> int:
        return max(1, self.positives)


def detection_loss(outputs: FrameOutputs, gt: list[Segment], lambda_loc: float = 1.0) -> DetectionLossResult:
    """Focal classification over every frame plus DIoU regression on
    positive frames, summed per frame and normalized by the positive count
    (floored at 1).

    Predicted intervals are padded by a fixed 1e-6 on both sides so frames
    whose offsets collapse to zero still yield a valid interval.
    """
    scores = outputs.cls_scores
    off = outputs.offsets
    L, C = scores.shape
    labels, gstart, gend = frame_targets(gt, L, C)
    pos = labels < C
    y = np.zeros((L, C))
    if pos.any():
        y[np.nonzero(pos)[0], labels[pos]] = 1.0
    fl = focal_loss(scores, y)
    dfl = focal_loss_grad(scores, y)
    per_frame = fl.sum(axis=1)
    m = max(1, int(pos.sum()))
    d_scores = dfl / m
    d_off = np.zeros((L, 2))
    if pos.any():
        li = np.nonzero(pos)[0]
        ps = li - off[li, 0] - INTERVAL_PAD
        pe = li + off[li, 1] + INTERVAL_PAD
        dl, dps, dpe = _diou_parts(ps, pe, gstart[li], gend[li])
        per_frame[li] += lambda_loc * dl
        d_off[li, 0] = -lambda_loc * dps / m
        d_off[li, 1] = lambda_loc * dpe / m
    loss = float(per_frame.sum() / m)
    return DetectionLossResult(loss, per_frame.reshape(L, 1), int(pos.sum()), d_scores, d_off)


def target_advantage(table: ClasswiseLossTable, per_frame_vl: np.ndarray,
                     gt: list[Segment]) -> tuple[np.ndarray, np.ndarray]:
    """Frozen regression targets for the advantage head.

    Returns (targets, mask), both L x 1; background frames are masked out.
    """
    pf = np.asarray(per_frame_vl, dtype=np.float64).reshape(-1, 1)
    L = pf.shape[0]
    targets = np.zeros((L, 1))
    mask = np.zeros((L, 1), dtype=bool)
    for seg in gt:
        s, e = int(seg.start), int(seg.end)
        if not (0 <= s < e <= L):
            raise ConfigError(f"segment ({seg.start}, {seg.end}) out of bounds for {L} frames")
        mean_v = table.mean(seg.label)
        targets[s:e, 0] = mean_v - pf[s:e, 0]
        mask[s:e, 0] = True
    return targets, mask


def advantage_loss(adv_pred, targets, mask) -> float:
    """Mean squared error over masked (positive) frames; 0 when none."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return 0.0
    diff = (np.asarray(adv_pred, float) - np.asarray(targets, float))[mask]
    return float(np.mean(diff * diff))


def advantage_loss_grad(adv_pred, targets, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    g = np.zeros_like(np.asarray(adv_pred, dtype=np.float64))
    if n == 0:
        return g
    diff = np.asarray(adv_pred, float) - np.asarray(targets, float)
    g[mask] = 2.0 * diff[mask] / n
    return g


@dataclass(eq=False)
class StepLog:
    video_id: str
    classes: tuple[int, ...]
    dh: float
    tg: float
    adv: float
    total: float
    positives: int
    mean_lambda: float


@dataclass(eq=False)
class EpochLog:
    epoch: int
    phase: str  # "vision" or "vision_language"
    mean_dh: float
    mean_tg: float
    mean_adv: float
    mean_total: float
    mean_lambda: float
    wall_time: float
    steps: list[StepLog] = field(default_factory=list)
    table_means: dict[int, float] | None = None

    def record(self) -> dict:
        return {
            "epoch": self.epoch,
            "phase": self.phase,
            "loss_dh": self.mean_dh,
            "loss_tg": self.mean_tg,
            "loss_adv": self.mean_adv,
            "loss_total": self.mean_total,
            "mean_lambda": self.mean_lambda,
            "wall_time": self.wall_time,
        }


@dataclass(eq=False)
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)

    def write_jsonl(self, path) -> None:
        lines = [json.dumps(e.record(), sort_keys=True) for e in self.epochs]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_training_log(path) -> list[dict]:
    records = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad training log line {i + 1} in {path}: {exc}") from exc
    return records


def _summarize(epoch: int, phase: str, steps: list[StepLog], wall: float,
               table: ClasswiseLossTable | None = None) -> EpochLog:
    n = max(1, len(steps))
    log = EpochLog(
        epoch=epoch,
        phase=phase,
        mean_dh=sum(s.dh for s in steps) / n,
        mean_tg=sum(s.tg for s in steps) / n,
        mean_adv=sum(s.adv for s in steps) / n,
        mean_total=sum(s.total for s in steps) / n,
        mean_lambda=sum(s.mean_lambda for s in steps) / n,
        wall_time=wall,
        steps=steps,
    )
    if table is not None:
        log.table_means = table.means()
    return log


def vision_only_epoch(corpus: Corpus, state: ModelState, opt: Adam,
                      cfg: TrainConfig) -> tuple[ClasswiseLossTable, list[StepLog]]:
    """One pass over the corpus on vision features alone.

    Every video's detection loss enters the class table once per distinct
    class present in its ground truth.  Language parameters receive no
    gradient in this phase.
    """
    if not corpus.videos:
        raise ConfigError("cannot train on an empty corpus")
    table = ClasswiseLossTable()
    steps = []
    for video in corpus.videos:
        state.zero_grads()
        outputs, cache = forward_video(state, video.vis, None)
        det = detection_loss(outputs, video.gt, cfg.lambda_loc)
        d_tmpl = np.zeros_like(outputs.tmpl_logits)
        backward_video(state, cache, det.d_cls_scores, det.d_offsets, d_tmpl)
        opt.step()
        present = tuple(sorted({seg.label for seg in video.gt}))
        for c in present:
            table.add(c, det.loss)
        steps.append(StepLog(video.id, present, det.loss, 0.0, 0.0, det.loss,
                             det.positives, 0.0))
    return table, steps


def vision_language_epoch(corpus: Corpus, state: ModelState, opt: Adam,
                          cfg: TrainConfig, table: ClasswiseLossTable) -> list[StepLog]:
    """One gated vision+language pass using a frozen advantage table."""
    if table is None:
        raise ConfigError("vision-language epoch requires the loss table of the preceding vision-only epoch")
    if not corpus.videos:
        raise ConfigError("cannot train on an empty corpus")
    steps = []
    for video in corpus.videos:
        state.zero_grads()
        outputs, cache = forward_video(state, video.vis, video.lang)
        det = detection_loss(outputs, video.gt, cfg.lambda_loc)
        tg = template_loss(outputs.tmpl_logits, video.gt)
        d_tmpl = cfg.lambda_tg * template_loss_grad(outputs.tmpl_logits, video.gt)
        per_frame = det.per_frame / det.normalizer if cfg.normalize_frame_loss else det.per_frame
        targets, mask = target_advantage(table, per_frame, video.gt)
        adv = advantage_loss(outputs.adv_pred, targets, mask)
        d_adv = cfg.lambda_adv * advantage_loss_grad(outputs.adv_pred, targets, mask)
        total = det.loss + cfg.lambda_tg * tg + cfg.lambda_adv * adv
        backward_video(state, cache, det.d_cls_scores, det.d_offsets, d_tmpl, d_adv)
        opt.step()
        present = tuple(sorted({seg.label for seg in video.gt}))
        steps.append(StepLog(video.id, present, det.loss, tg, adv, total,
                             det.positives, float(outputs.lam.mean())))
    return steps


def fit(corpus: Corpus, model_cfg: ModelConfig, train_cfg: TrainConfig,
        init_state: ModelState | None = None) -> tuple[ModelState, TrainLog]:
    """Train for train_cfg.epochs epochs in strict vision/vision+language
    alternation, starting with a vision-only epoch."""
    train_cfg.validate()
    state = init_state if init_state is not None else ModelState(model_cfg.validate(), Rng(train_cfg.seed))
    opt = Adam(state.named_params(), train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    log = TrainLog()
    table: ClasswiseLossTable | None = None
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        if epoch % 2 == 0:
            table, steps = vision_only_epoch(corpus, state, opt, train_cfg)
            log.epochs.append(_summarize(epoch, "vision", steps, time.perf_counter() - t0, table))
        else:
            steps = vision_language_epoch(corpus, state, opt, train_cfg, table)
            log.epochs.append(_summarize(epoch, "vision_language", steps, time.perf_counter() - t0))
    return state, log
