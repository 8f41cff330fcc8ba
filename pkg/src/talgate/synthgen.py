"""Synthetic corpus generator with controllable modality reliability.

Each video is a frame-major float64 matrix of visual features plus three
language streams (classification, localization, advantage carrier).  Two
per-class knobs shape the bias structure:

* ambiguity[c] blends class c's visual prototype with a designated partner
  class, so high-ambiguity classes are hard to separate from vision alone;
* helpfulness[c] scales how much true signal the language streams carry.

All randomness flows through one seeded Rng in a fixed draw order, so a
config generates byte-identical corpora on every run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import blobio
from .errors import ConfigError, FormatError
from .nn import Rng

MIN_SEGMENT = 8      # frames; shortest generated action
MAX_SEGMENTS = 3     # per video
RAMP_SCALE = 32.0    # frames; normalizer for the boundary-distance ramps
_DISTRACTOR_SALT = 0xD15C1A1B0A7E11ED  # decorrelates distractor clips from the corpus stream


@dataclass(frozen=True)
class GenConfig:
    num_classes: int
    num_videos: int
    frames: int
    dim: int
    ambiguity: tuple[float, ...]
    helpfulness: tuple[float, ...]
    noise_sigma: float = 1.0
    background_fraction: float = 0.4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ambiguity", tuple(float(a) for a in self.ambiguity))
        object.__setattr__(self, "helpfulness", tuple(float(h) for h in self.helpfulness))

    def validate(self) -> "GenConfig":
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_videos < 1:
            raise ConfigError(f"num_videos must be >= 1, got {self.num_videos}")
        if self.frames < 16:
            raise ConfigError(f"frames must be >= 16, got {self.frames}")
        if self.dim < 4:
            raise ConfigError(f"dim must be >= 4, got {self.dim}")
        for name, values in (("ambiguity", self.ambiguity), ("helpfulness", self.helpfulness)):
            if len(values) != self.num_classes:
                raise ConfigError(f"{name} needs {self.num_classes} entries, got {len(values)}")
            if any(not (0.0 <= v <= 1.0) for v in values):
                raise ConfigError(f"{name} entries must lie in [0, 1], got {values}")
        if not (self.noise_sigma >= 0.0 and np.isfinite(self.noise_sigma)):
            raise ConfigError(f"noise_sigma must be a finite non-negative real, got {self.noise_sigma}")
        if not (0.0 < self.background_fraction < 1.0):
            raise ConfigError(f"background_fraction must lie in (0, 1), got {self.background_fraction}")
        if not (0 <= self.seed < 2**64):
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        return self


@dataclass(eq=False)
class Segment:
    start: int
    end: int
    label: int


@dataclass(eq=False)
class LanguageBundle:
    cls_stream: np.ndarray
    loc_stream: np.ndarray
    adv_stream: np.ndarray
    aligned: bool = True


@dataclass(eq=False)
class VideoRecord:
    id: str
    vis: np.ndarray
    lang: LanguageBundle
    gt: list[Segment] = field(default_factory=list)


@dataclass(eq=False)
class Corpus:
    config: GenConfig
    videos: list[VideoRecord]


def partner_class(c: int, num_classes: int) -> int:
    """The designated confusable partner: adjacent pairing (0,1), (2,3), ...

    With an odd class count the last class pairs with class 0.
    """
    if c % 2 == 0:
        p = c + 1
    else:
        p = c - 1
    return p if p < num_classes else 0


@dataclass(eq=False)
class _Latents:
    vis_protos: np.ndarray    # C x D
    vis_bg: np.ndarray        # 1 x D
    lang_protos: np.ndarray   # C x D
    lang_bg: np.ndarray       # 1 x D
    adv_dir: np.ndarray       # 1 x D


def _draw_latents(cfg: GenConfig, rng: Rng) -> _Latents:
    return _Latents(
        vis_protos=rng.normal_matrix(cfg.num_classes, cfg.dim),
        vis_bg=rng.normal_matrix(1, cfg.dim),
        lang_protos=rng.normal_matrix(cfg.num_classes, cfg.dim),
        lang_bg=rng.normal_matrix(1, cfg.dim),
        adv_dir=rng.normal_matrix(1, cfg.dim),
    )


def _split(total: int, parts: int, minimum: int, rng: Rng) -> list[int]:
    """Randomly split ``total`` into ``parts`` integers, each >= minimum."""
    extra = total - parts * minimum
    weights = [rng.uniform() + 0.25 for _ in range(parts)]
    wsum = sum(weights)
    sizes = [minimum + int(extra * w / wsum) for w in weights]
    sizes[-1] += total - sum(sizes)
    return sizes


def _sample_segments(cfg: GenConfig, rng: Rng) -> list[Segment]:
    L = cfg.frames
    budget = int(round((1.0 - cfg.background_fraction) * L))
    budget = max(MIN_SEGMENT, min(budget, L))
    max_segs = max(1, min(MAX_SEGMENTS, budget // MIN_SEGMENT))
    n = 1 + rng.randint(max_segs)
    lengths = _split(budget, n, MIN_SEGMENT, rng)
    gaps = _split(L - budget, n + 1, 0, rng)
    segments = []
    cursor = gaps[0]
    for j in range(n):
        start = cursor
        end = start + lengths[j]
        segments.append(Segment(start, end, rng.randint(cfg.num_classes)))
        cursor = end + gaps[j + 1]
    return segments


def _vision_frames(cfg: GenConfig, lat: _Latents, segments: list[Segment], rng: Rng,
                   force_beta: float | None = None) -> np.ndarray:
    """Per-frame vision features: background prototype outside segments,
    a class/partner mixture inside, plus white noise.

    The mixing weight is drawn per segment, beta ~ U[1-a, 1], so at
    ambiguity a the class and its partner produce overlapping appearance
    distributions: a=0 is always the pure prototype, a=1 makes the pair
    visually indistinguishable.  Appearance varies per segment while the
    language side still names the true class, which is exactly the gap a
    language prior can exploit.  ``force_beta`` pins the weight instead
    (distractor clips use the pair midpoint, the most ambiguous look).
    """
    noise = rng.normal_matrix(cfg.frames, cfg.dim, cfg.noise_sigma)
    base = np.repeat(lat.vis_bg, cfg.frames, axis=0)
    for seg in segments:
        if force_beta is None:
            beta = 1.0 - cfg.ambiguity[seg.label] * rng.uniform()
        else:
            beta = force_beta
        proto = beta * lat.vis_protos[seg.label] \
            + (1.0 - beta) * lat.vis_protos[partner_class(seg.label, cfg.num_classes)]
        base[seg.start:seg.end] = proto
    return base + noise


def _language_bundle(cfg: GenConfig, lat: _Latents, segments: list[Segment],
                     stream_labels: list[int], rng: Rng, aligned: bool) -> LanguageBundle:
    """Language streams for a fixed segment layout.

    ``stream_labels`` names the class each segment's streams describe; it
    equals the ground-truth labels for an aligned bundle and a deranged
    relabeling for a conflicted one.
    """
    L, D = cfg.frames, cfg.dim
    cls_noise = rng.normal_matrix(L, D, cfg.noise_sigma)
    loc_noise = rng.normal_matrix(L, D, cfg.noise_sigma)
    adv_noise = rng.normal_matrix(L, D, cfg.noise_sigma)

    mean_h = float(np.mean(cfg.helpfulness))
    cls = np.repeat(mean_h * lat.lang_bg, L, axis=0)
    loc = np.zeros((L, D))
    # Background frames still carry an advantage signal at the corpus-average
    # helpfulness: confirming the absence of an action is useful too, and it
    # keeps the gate from treating every quiet stretch as vision-only.
    adv = np.repeat(mean_h * lat.adv_dir, L, axis=0)
    for seg, lab in zip(segments, stream_labels):
        h = cfg.helpfulness[lab]
        cls[seg.start:seg.end] = h * lat.lang_protos[lab]
        idx = np.arange(seg.start, seg.end, dtype=np.float64)
        loc[seg.start:seg.end, 0] = h * (idx - seg.start) / RAMP_SCALE
        loc[seg.start:seg.end, 1] = h * (seg.end - idx) / RAMP_SCALE
        adv[seg.start:seg.end] = h * lat.adv_dir
    return LanguageBundle(cls + cls_noise, loc + loc_noise, adv + adv_noise, aligned=aligned)


def generate_corpus(cfg: GenConfig) -> Corpus:
    """Deterministically generate a corpus: same config, same bytes."""
    cfg.validate()
    rng = Rng(cfg.seed)
    lat = _draw_latents(cfg, rng)
    videos = []
    for i in range(cfg.num_videos):
        segments = _sample_segments(cfg, rng)
        vis = _vision_frames(cfg, lat, segments, rng)
        lang = _language_bundle(cfg, lat, segments, [s.label for s in segments], rng, aligned=True)
        videos.append(VideoRecord(f"v{i:04d}", vis, lang, segments))
    return Corpus(cfg, videos)


def inject_conflict(corpus: Corpus, rng: Rng) -> Corpus:
    """Regenerate language under a seeded derangement of class identities.

    Vision frames and ground truth are reused untouched (byte-identical);
    every segment's language streams describe a different class than the
    one actually present, so language evidence actively contradicts vision.
    Fresh noise comes from ``rng``, so applying twice with equal seeds is
    not an involution.
    """
    cfg = corpus.config
    if cfg.num_classes < 2:
        raise ConfigError("conflict injection needs at least 2 classes")
    for video in corpus.videos:
        if not video.lang.aligned:
            raise ConfigError(f"video {video.id} is already conflicted")
    pi = rng.derangement(cfg.num_classes)
    lat = _draw_latents(cfg, Rng(cfg.seed))
    videos = []
    for video in corpus.videos:
        labels = [pi[seg.label] for seg in video.gt]
        lang = _language_bundle(cfg, lat, video.gt, labels, rng, aligned=False)
        videos.append(VideoRecord(video.id, video.vis, lang, video.gt))
    return Corpus(cfg, videos)


def generate_distractors(cfg: GenConfig, num_clips: int | None = None) -> Corpus:
    """Maximum-ambiguity clips that contain no annotated action.

    Each clip shows pseudo-segments blended 50/50 between a class and its
    partner (the most confusable possible look), drawing only from the
    classes with the highest configured ambiguity.  The language streams
    carry background semantics at the class's helpfulness scale: language
    that faithfully reports "no completed action here".  Ground truth is
    empty.  The advantage carrier keeps its usual in-segment pattern so a
    trained gate responds as it would on real footage.
    """
    cfg.validate()
    n = cfg.num_videos if num_clips is None else int(num_clips)
    if n < 1:
        raise ConfigError(f"num_clips must be >= 1, got {n}")
    peak = max(cfg.ambiguity)
    eligible = [c for c in range(cfg.num_classes) if cfg.ambiguity[c] == peak]
    lat = _draw_latents(cfg, Rng(cfg.seed))
    rng = Rng(cfg.seed ^ _DISTRACTOR_SALT)
    videos = []
    for i in range(n):
        pseudo = [Segment(s.start, s.end, eligible[rng.randint(len(eligible))])
                  for s in _sample_segments(cfg, rng)]
        vis = _vision_frames(cfg, lat, pseudo, rng, force_beta=0.5)
        cls_noise = rng.normal_matrix(cfg.frames, cfg.dim, cfg.noise_sigma)
        loc_noise = rng.normal_matrix(cfg.frames, cfg.dim, cfg.noise_sigma)
        adv_noise = rng.normal_matrix(cfg.frames, cfg.dim, cfg.noise_sigma)
        mean_h = float(np.mean(cfg.helpfulness))
        cls = np.repeat(mean_h * lat.lang_bg, cfg.frames, axis=0)
        adv = np.zeros((cfg.frames, cfg.dim))
        for seg in pseudo:
            h = cfg.helpfulness[seg.label]
            cls[seg.start:seg.end] = h * lat.lang_bg
            adv[seg.start:seg.end] = h * lat.adv_dir
        lang = LanguageBundle(cls + cls_noise, loc_noise, adv + adv_noise, aligned=True)
        videos.append(VideoRecord(f"d{i:04d}", vis, lang, []))
    return Corpus(cfg, videos)


_STREAM_KEYS = ("vis", "cls", "loc", "adv")


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Write blobs plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for video in corpus.videos:
        streams = {
            "vis": video.vis,
            "cls": video.lang.cls_stream,
            "loc": video.lang.loc_stream,
            "adv": video.lang.adv_stream,
        }
        blob_names = {}
        for key in _STREAM_KEYS:
            name = f"{video.id}_{key}.bin"
            blobio.write_matrix(out_dir / name, streams[key])
            blob_names[key] = name
        entries.append({
            "id": video.id,
            "frames": int(video.vis.shape[0]),
            "dim": int(video.vis.shape[1]),
            "aligned": bool(video.lang.aligned),
            "gt": [{"start": int(s.start), "end": int(s.end), "label": int(s.label)} for s in video.gt],
            "blobs": blob_names,
        })
    manifest = {"version": blobio.VERSION, "config": asdict(corpus.config), "videos": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def read_corpus(in_dir) -> Corpus:
    """Byte-exact inverse of write_corpus."""
    in_dir = Path(in_dir)
    manifest_path = in_dir / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json in {in_dir}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable manifest {manifest_path}: {exc}") from exc
    for key in ("version", "config", "videos"):
        if key not in manifest:
            raise FormatError(f"manifest {manifest_path} lacks key {key!r}")
    if manifest["version"] != blobio.VERSION:
        raise FormatError(f"unsupported corpus version {manifest['version']}")
    raw_cfg = dict(manifest["config"])
    try:
        cfg = GenConfig(**raw_cfg).validate()
    except TypeError as exc:
        raise FormatError(f"bad config block in {manifest_path}: {exc}") from exc
    videos = []
    for entry in manifest["videos"]:
        vid = entry.get("id")
        streams = {}
        for key in _STREAM_KEYS:
            blob_name = entry["blobs"].get(key)
            blob_path = in_dir / (blob_name or "")
            if blob_name is None or not blob_path.exists():
                raise FormatError(f"video {vid}: missing {key} blob {blob_name!r}")
            m = blobio.read_matrix(blob_path)
            if m.shape != (entry["frames"], entry["dim"]):
                raise FormatError(f"video {vid}: blob {blob_name} has shape {m.shape}, manifest says {(entry['frames'], entry['dim'])}")
            streams[key] = m
        gt = []
        for seg in entry["gt"]:
            s, e, lab = int(seg["start"]), int(seg["end"]), int(seg["label"])
            if not (0 <= s < e <= entry["frames"]) or not (0 <= lab < cfg.num_classes):
                raise FormatError(f"video {vid}: invalid segment {seg}")
            gt.append(Segment(s, e, lab))
        lang = LanguageBundle(streams["cls"], streams["loc"], streams["adv"], aligned=bool(entry["aligned"]))
        videos.append(VideoRecord(vid, streams["vis"], lang, gt))
    return Corpus(cfg, videos)
