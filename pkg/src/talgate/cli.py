"""Command-line front end: gen / train / eval / ablate / report.

Every command is a pure function of its input bytes, config, and seed, so
re-running one reproduces the corpus, checkpoint, and report byte for
byte.  Run configs are flat JSON; unknown keys are rejected.  The
``ACTIONVLM_SEED`` environment variable overrides the config seed.

Exit codes: 0 success, 1 usage error, 2 data/invariant error, 3 internal.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, FormatError
from .metrics import (DEFAULT_TIOU_THRESHOLDS, HALLUCINATION_TOP_K,
                      MetricsReport, REPORT_SCHEMA, ambiguity_probe,
                      average_precision, canonical_json, difficulty_buckets,
                      hallucination_rates, lap, map_at, mla, validate_report)
from .model import (ModelConfig, ModelState, forward_video, load_checkpoint,
                    predict_corpus, save_checkpoint)
from .nn import Rng
from .synthgen import (Corpus, GenConfig, generate_corpus,
                       generate_distractors, inject_conflict, read_corpus,
                       write_corpus)
from .train import TrainConfig, fit, read_training_log

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

SEED_ENV = "ACTIONVLM_SEED"

# Deterministic twist on the corpus seed so the conflicted twin used for
# lap is reproducible without storing extra state.
_CONFLICT_SALT = 0xC04F11C7ED

SWEEP_LAMBDAS = (1.0, 0.8, 0.6, 0.4, 0.2, 0.0)
ABLATION_MODES = ("sweep", "vision-only", "language-only", "no-adv-loss", "no-tg-loss")


def default_run_config() -> dict:
    """Every config key with its default.  The stock corpus is the bias
    benchmark: classes 0-3 are visually easy with unhelpful language,
    classes 4-7 visually ambiguous with highly informative language."""
    return {
        # corpus
        "num_classes": 8,
        "num_videos": 64,
        "frames": 256,
        "dim": 32,
        "ambiguity": [0.1, 0.1, 0.1, 0.1, 0.8, 0.8, 0.8, 0.8],
        "helpfulness": [0.2, 0.2, 0.2, 0.2, 0.9, 0.9, 0.9, 0.9],
        "noise_sigma": 1.0,
        "background_fraction": 0.4,
        # model
        "head_layers": 2,
        "kernel": 3,
        "hidden": None,
        "nms_tiou": 0.5,
        "top_k_pre_nms": 200,
        "score_threshold": 0.01,
        "lambda_mode": "learned",
        "fixed_lambda": 0.0,
        # training
        "epochs": 60,
        "lr": 2e-3,
        "lambda_loc": 1.0,
        "lambda_tg": 0.1,
        "lambda_adv": 0.1,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "normalize_frame_loss": False,
        # evaluation
        "tiou_thresholds": list(DEFAULT_TIOU_THRESHOLDS),
        "hallucination_top_k": HALLUCINATION_TOP_K,
        # shared
        "seed": 0,
    }


def load_run_config(path: str | None) -> dict:
    cfg = default_run_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise FormatError(f"config file {p} must hold a single JSON object")
        unknown = sorted(set(data) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config key(s) {', '.join(unknown)}; "
                              f"valid keys: {', '.join(sorted(cfg))}")
        cfg.update(data)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            seed = int(env, 0)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
        if not 0 <= seed < 2 ** 64:
            raise ConfigError(f"{SEED_ENV} must be an unsigned 64-bit integer, got {env}")
        cfg["seed"] = seed
    return cfg


def gen_config_from(run: dict) -> GenConfig:
    return GenConfig(
        num_classes=run["num_classes"], num_videos=run["num_videos"],
        frames=run["frames"], dim=run["dim"], ambiguity=run["ambiguity"],
        helpfulness=run["helpfulness"], noise_sigma=run["noise_sigma"],
        background_fraction=run["background_fraction"], seed=run["seed"],
    ).validate()


def model_config_from(run: dict, dim: int, num_classes: int) -> ModelConfig:
    return ModelConfig(
        dim=dim, num_classes=num_classes, head_layers=run["head_layers"],
        kernel=run["kernel"], hidden=run["hidden"], nms_tiou=run["nms_tiou"],
        top_k_pre_nms=run["top_k_pre_nms"], score_threshold=run["score_threshold"],
        lambda_mode=run["lambda_mode"], fixed_lambda=run["fixed_lambda"],
    ).validate()


def train_config_from(run: dict) -> TrainConfig:
    return TrainConfig(
        epochs=run["epochs"], lr=run["lr"], lambda_loc=run["lambda_loc"],
        lambda_tg=run["lambda_tg"], lambda_adv=run["lambda_adv"],
        beta1=run["beta1"], beta2=run["beta2"], adam_eps=run["adam_eps"],
        seed=run["seed"], normalize_frame_loss=run["normalize_frame_loss"],
    ).validate()


def _stamp(out_dir: Path, run: dict, command: str) -> None:
    """Config echo plus tool/version stamp; both byte-stable."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(run, sort_keys=True, indent=2) + "\n")
    (out_dir / "run.json").write_text(json.dumps(
        {"command": command, "seed": run["seed"], "tool": "talgate", "version": __version__},
        sort_keys=True, indent=2) + "\n")


def _conflicted_twin(corpus: Corpus) -> Corpus:
    return inject_conflict(corpus, Rng((corpus.config.seed ^ _CONFLICT_SALT) % 2 ** 64))


def _check_compatible(state: ModelState, corpus: Corpus) -> None:
    if state.cfg.dim != corpus.config.dim or state.cfg.num_classes != corpus.config.num_classes:
        raise ConfigError(
            f"checkpoint expects dim={state.cfg.dim}, num_classes={state.cfg.num_classes}; "
            f"corpus has dim={corpus.config.dim}, num_classes={corpus.config.num_classes}")


def build_report(state: ModelState, corpus: Corpus, *, conflict: bool = False,
                 probe: bool = False, thresholds=DEFAULT_TIOU_THRESHOLDS,
                 top_k: int = HALLUCINATION_TOP_K) -> MetricsReport:
    """Score one checkpoint on one corpus.

    Difficulty buckets come from the same model's vision view (gate pinned
    to 0), the closest in-run stand-in for a vision-only baseline.
    """
    thresholds = tuple(float(t) for t in thresholds)
    gt = {v.id: v.gt for v in corpus.videos}
    proposals = predict_corpus(state, corpus)
    per_threshold, map_avg = map_at(proposals, gt, thresholds)
    fixed_rate, infinite_rate = hallucination_rates(proposals, top_k)

    vision_props = predict_corpus(state, corpus, lambda_override=0.0)
    vision_ap = {}
    for c in range(corpus.config.num_classes):
        aps = [average_precision(vision_props, gt, c, t) for t in thresholds]
        vals = [a for a in aps if a is not None]
        vision_ap[c] = float(np.mean(vals)) if vals else 0.0
    buckets = difficulty_buckets(vision_ap)

    lams = [forward_video(state, v.vis, v.lang)[0].lam for v in corpus.videos]
    gts = [v.gt for v in corpus.videos]
    mla_per_bucket = {}
    for name, bucket in (("hard", buckets.hard), ("medium", buckets.medium), ("easy", buckets.easy)):
        if bucket:
            mla_per_bucket[name] = mla(lams, bucket, gts)

    lap_value = None
    if conflict:
        lap_value = lap(state, corpus, _conflicted_twin(corpus), thresholds)

    mconf = mlen = acc_at = None
    if probe:
        stats = ambiguity_probe(state, generate_distractors(corpus.config))
        mconf, mlen, acc_at = stats.mconf, stats.mlen, stats.acc_at

    return MetricsReport(
        map_per_threshold=per_threshold, map_avg=map_avg,
        fixed_rate=fixed_rate, infinite_rate=infinite_rate, lap=lap_value,
        mla_per_bucket=mla_per_bucket or None, mconf=mconf, mlen=mlen, acc_at=acc_at)


def cmd_gen(args) -> int:
    run = load_run_config(args.config)
    corpus = generate_corpus(gen_config_from(run))
    out = Path(args.out)
    write_corpus(corpus, out)
    _stamp(out, run, "gen")
    print(f"wrote {len(corpus.videos)} videos to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    corpus = read_corpus(args.corpus)
    train_cfg = train_config_from(run)
    init_state = None
    if args.resume:
        init_state = load_checkpoint(args.resume)
        _check_compatible(init_state, corpus)
        model_cfg = init_state.cfg
    else:
        model_cfg = model_config_from(run, corpus.config.dim, corpus.config.num_classes)
    state, train_log = fit(corpus, model_cfg, train_cfg, init_state=init_state)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    save_checkpoint(state, ckpt)
    train_log.write_jsonl(out / "train_log.jsonl")
    _stamp(out, run, "train")
    if train_log.epochs:
        last = train_log.epochs[-1]
        print(f"trained {train_cfg.epochs} epochs (final total loss {last.mean_total:.4f}); "
              f"checkpoint at {ckpt}")
    else:
        print(f"trained 0 epochs; checkpoint at {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    corpus = read_corpus(args.corpus)
    _check_compatible(state, corpus)
    report = build_report(state, corpus, conflict=args.conflict, probe=args.probe)
    text = report.to_json()
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def ablation_rows(mode: str) -> list[tuple[str, dict]]:
    """Row label plus run-config overrides for each model the mode trains."""
    if mode == "sweep":
        rows = [(f"fixed-{v:.1f}", {"lambda_mode": "fixed", "fixed_lambda": v})
                for v in SWEEP_LAMBDAS]
        rows.append(("learned", {"lambda_mode": "learned"}))
        return rows
    if mode == "vision-only":
        return [("vision-only", {"lambda_mode": "fixed", "fixed_lambda": 0.0})]
    if mode == "language-only":
        return [("language-only", {"lambda_mode": "language_only"})]
    if mode == "no-adv-loss":
        return [("no-adv-loss", {"lambda_adv": 0.0})]
    if mode == "no-tg-loss":
        return [("no-tg-loss", {"lambda_tg": 0.0})]
    raise ConfigError(f"unknown ablation mode {mode!r}; valid modes: {', '.join(ABLATION_MODES)}")


def cmd_ablate(args) -> int:
    run = load_run_config(args.config)
    corpus = read_corpus(args.corpus)
    thresholds = tuple(float(t) for t in run["tiou_thresholds"])
    twin = _conflicted_twin(corpus)
    gt = {v.id: v.gt for v in corpus.videos}
    rows = []
    for label, overrides in ablation_rows(args.mode):
        row_run = dict(run)
        row_run.update(overrides)
        model_cfg = model_config_from(row_run, corpus.config.dim, corpus.config.num_classes)
        train_cfg = train_config_from(row_run)
        state, _ = fit(corpus, model_cfg, train_cfg)
        _, map_avg = map_at(predict_corpus(state, corpus), gt, thresholds)
        drop = lap(state, corpus, twin, thresholds)
        rows.append({"label": label, "map_avg": map_avg, "lap": drop})
        print(f"{label}: map_avg={map_avg:.4f} lap={drop:+.2f}pp")
    table = {"mode": args.mode, "rows": rows}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(canonical_json(table))
    (out / "ablation.txt").write_text(render_ablation(table))
    _stamp(out, run, "ablate")
    return EXIT_OK


def _align(rows: list[list[str]]) -> str:
    """First column left-aligned, the rest right-aligned, two-space gutter."""
    if not rows:
        return ""
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])]
        cells += [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def render_ablation(table: dict) -> str:
    rows = [["row", "map_avg", "lap_pp"]]
    for r in table["rows"]:
        rows.append([str(r["label"]), f"{r['map_avg']:.4f}", f"{r['lap']:+.2f}"])
    return f"mode: {table['mode']}\n" + _align(rows)


def _pct(v: float) -> str:
    return f"{100.0 * v:.2f}%"


def render_metrics(payload: dict) -> str:
    rows = []
    for k in sorted(payload["map_per_threshold"]):
        rows.append([f"mAP@{k}", _pct(payload["map_per_threshold"][k])])
    rows.append(["mAP avg", _pct(payload["map_avg"])])
    if payload["lap"] is not None:
        rows.append(["LAP", f"{payload['lap']:+.2f}pp"])
    rows.append(["fixed rate", _pct(payload["fixed_rate"])])
    rows.append(["infinite rate", _pct(payload["infinite_rate"])])
    if payload["mla_per_bucket"] is not None:
        for name in ("hard", "medium", "easy"):
            if name in payload["mla_per_bucket"]:
                rows.append([f"mLA {name}", f"{payload['mla_per_bucket'][name]:.4f}"])
    if payload["mconf"] is not None:
        rows.append(["probe mconf", f"{payload['mconf']:.4f}"])
    if payload["mlen"] is not None:
        rows.append(["probe mlen", f"{payload['mlen']:.4f}"])
    if payload["acc_at"] is not None:
        for k in sorted(payload["acc_at"]):
            rows.append([f"probe acc@{k}", _pct(payload["acc_at"][k])])
    return _align(rows)


def render_train_log(records: list[dict]) -> str:
    rows = [["epoch", "phase", "total", "dh", "tg", "adv", "mean_lambda"]]
    for r in records:
        rows.append([str(r["epoch"]), str(r["phase"]), f"{r['loss_total']:.4f}",
                     f"{r['loss_dh']:.4f}", f"{r['loss_tg']:.4f}",
                     f"{r['loss_adv']:.4f}", f"{r['mean_lambda']:.4f}"])
    return _align(rows)


def _render_kv(payload: dict) -> str:
    return _align([[str(k), json.dumps(payload[k])] for k in sorted(payload)])


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise ConfigError(f"{run_dir} is not a directory")
    sections: list[tuple[str, str]] = []

    for name in ("run.json", "config.json"):
        p = run_dir / name
        if p.exists():
            payload = json.loads(p.read_text())
            sections.append((name, _render_kv(payload)))

    p = run_dir / "train_log.jsonl"
    if p.exists():
        sections.append((p.name, render_train_log(read_training_log(p))))

    p = run_dir / "ablation.json"
    if p.exists():
        sections.append((p.name, render_ablation(json.loads(p.read_text()))))

    consumed = {"run.json", "config.json", "ablation.json"}
    for p in sorted(run_dir.glob("*.json")):
        if p.name in consumed or p.name.endswith(".ckpt.json"):
            continue
        try:
            payload = json.loads(p.read_text())
            validate_report(payload)
        except (json.JSONDecodeError, FormatError):
            log.info("skipping %s: not a metrics report", p.name)
            continue
        sections.append((p.name, render_metrics(payload)))

    if not sections:
        print(f"nothing to report in {run_dir}")
        return EXIT_OK
    out = []
    for name, body in sections:
        out.append(f"== {name} ==")
        out.append(body.rstrip("\n"))
        out.append("")
    print("\n".join(out).rstrip("\n"))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 here (argparse's default status is 2, which this
    tool reserves for data errors)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="talgate",
                description="Gated vision-language temporal action localization on synthetic corpora.")
    p.add_argument("--version", action="version", version=f"talgate {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--config", help="flat JSON run config (defaults when omitted)")
    g.add_argument("--out", required=True, help="corpus output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a corpus")
    t.add_argument("--corpus", required=True, help="corpus directory from gen")
    t.add_argument("--config", help="flat JSON run config")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--resume", help="checkpoint file to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint and write a metrics report")
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--corpus", required=True, help="corpus directory")
    e.add_argument("--conflict", action="store_true",
                   help="also score an auto-generated conflict-injected twin (lap)")
    e.add_argument("--probe", action="store_true",
                   help="also run the no-action ambiguity probe (mconf/mlen)")
    e.add_argument("--out", required=True, help="report file path")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score ablation rows")
    a.add_argument("--corpus", required=True, help="corpus directory")
    a.add_argument("--config", help="flat JSON run config")
    a.add_argument("--mode", required=True, choices=ABLATION_MODES)
    a.add_argument("--out", required=True, help="run output directory")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="render run artifacts as aligned text")
    r.add_argument("--run", required=True, help="run directory holding JSON artifacts")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        raise
    except Exception as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
