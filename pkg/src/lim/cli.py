"""Command-line entry point: ``lim synth|train|eval|extract``.

Training runs are described by an INI file with ``[run]``, ``[train]``,
``[encoder]`` and ``[eval]`` sections.  Any key can be overridden on the
command line as ``key=value`` or ``section.key=value``; unknown keys are
rejected before anything runs.  The resolved configuration is written to
the output directory as ``config.ini`` and can be fed straight back in.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

import numpy as np

from . import numcore as nc
from .checkpoint import load_checkpoint, save_checkpoint, save_vectors
from .dsp_io import Manifest, load_manifest, synth_corpus
from .encoder import EncoderConfig
from .errors import ConfigError, LimError
from .evaluation import (compute_cer, compute_eer, enroll_speakers, extract_dvector, score_trials,
                         write_metrics, write_scores)
from .sampler import make_trials, read_trials
from .trainer import TrainConfig, Trainer, models_from_checkpoint

log = logging.getLogger("lim")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

RUN_DEFAULTS = {"manifest": "", "out_dir": "run", "workers": 1, "precision": 32}
EVAL_DEFAULTS = {"layer": "auto", "split": "test"}
PRESETS = {"full": EncoderConfig, "desk": EncoderConfig.desk, "tiny": EncoderConfig.tiny}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------
def _coerce(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


_OPTIONAL = {"encoder_lr": float, "pretrained": str}


def _train_defaults():
    d = TrainConfig().to_dict()
    d.pop("encoder")
    return d


def _schema():
    enc = EncoderConfig().to_dict()
    enc = {k: tuple(v) if isinstance(v, list) else v for k, v in enc.items()}
    enc["preset"] = "full"
    return {"run": dict(RUN_DEFAULTS), "train": _train_defaults(), "encoder": enc, "eval": dict(EVAL_DEFAULTS)}


def _set(resolved, schema, section, key, text):
    if section not in schema:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in schema[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    default = schema[section][key]
    if default is None:
        if text.strip().lower() in ("", "none"):
            resolved[section][key] = None
            return
        try:
            resolved[section][key] = _OPTIONAL[key](text.strip())
        except ValueError:
            raise ConfigError(f"{section}.{key}: cannot parse {text!r}") from None
        return
    resolved[section][key] = _coerce(f"{section}.{key}", text, default)


def resolve_config(path=None, overrides=()):
    """Merge defaults, the INI file and ``key=value`` overrides; returns nested dicts."""
    schema = _schema()
    resolved = {s: {} for s in schema}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, text in parser.items(section):
                _set(resolved, schema, section, key, text)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
        else:
            owners = [s for s in schema if key in schema[s]]
            if len(owners) != 1:
                where = f"ambiguous between {owners}" if owners else "not a known key"
                raise ConfigError(f"override {key!r}: {where}")
            section = owners[0]
        _set(resolved, schema, section, key, text)
    enc_over = resolved["encoder"]
    preset = enc_over.pop("preset", "full")
    if preset not in PRESETS:
        raise ConfigError(f"encoder.preset must be one of {sorted(PRESETS)}, got {preset!r}")
    base = PRESETS[preset]().to_dict()
    try:
        encoder = EncoderConfig.from_dict({**base, **enc_over})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"encoder: {exc}") from None
    run = {**RUN_DEFAULTS, **resolved["run"]}
    ev = {**EVAL_DEFAULTS, **resolved["eval"]}
    train = {**_train_defaults(), **resolved["train"]}
    cfg = TrainConfig.from_dict({**train, "encoder": encoder}).validate()
    if run["workers"] != 1:
        raise ConfigError("run.workers: only single-worker runs are supported")
    if run["precision"] not in (32, 64):
        raise ConfigError(f"run.precision must be 32 or 64, got {run['precision']}")
    if ev["layer"] not in ("auto", "head_hidden", "embedding"):
        raise ConfigError(f"eval.layer must be auto, head_hidden or embedding, got {ev['layer']!r}")
    return {"run": run, "train": cfg, "eval": ev}


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def write_resolved(resolved, path):
    cfg = resolved["train"]
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {k: _fmt(v) for k, v in resolved["run"].items()}
    parser["train"] = {k: _fmt(v) for k, v in cfg.to_dict().items() if k != "encoder"}
    parser["encoder"] = {k: _fmt(v) for k, v in cfg.encoder.to_dict().items()}
    parser["eval"] = {k: _fmt(v) for k, v in resolved["eval"].items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_synth(args):
    if args.utts < 3:
        raise UsageError(f"--utts {args.utts}: cannot satisfy a 3-way train/enroll/test split (need >= 3)")
    if args.speakers < 1 or args.seconds <= 0:
        raise UsageError("--speakers must be >= 1 and --seconds positive")
    ratio = tuple(int(x) for x in args.ratio.split(","))
    if len(ratio) != 3 or min(ratio) < 0:
        raise UsageError(f"--ratio needs three non-negative integers, got {args.ratio!r}")
    m = synth_corpus(args.speakers, args.utts, args.seconds, args.seed, args.out, ratio, args.t60)
    counts = {s: len(m.split(s)) for s in ("train", "enroll", "test")}
    print(f"wrote {len(m)} utterances to {Path(args.out) / 'manifest.tsv'} "
          + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train(args):
    resolved = resolve_config(args.config, args.overrides)
    run, cfg = resolved["run"], resolved["train"]
    if args.out:
        run["out_dir"] = args.out
    if not run["manifest"]:
        raise ConfigError("run.manifest is required")
    manifest = load_manifest(run["manifest"])
    if cfg.mode != "unsupervised" and not manifest.split("train").is_labeled():
        raise ConfigError(f"train.mode={cfg.mode} needs speaker labels for every training utterance")
    if cfg.pretrained and not Path(cfg.pretrained).is_file():
        raise ConfigError(f"train.pretrained: no such checkpoint {cfg.pretrained}")
    out = Path(run["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(resolved, out / "config.ini")
    nc.set_precision(run["precision"])
    utts = manifest.split("train").load()
    resume = out / "last.ckpt"
    if args.resume and resume.is_file():
        trainer = Trainer.from_checkpoint(load_checkpoint(resume), utts, cfg)
        log.info("resuming from %s at epoch %d", resume, trainer.epoch)
    else:
        (out / "train_log.tsv").unlink(missing_ok=True)
        trainer = Trainer(cfg, utts)
    trainer.fit(out)
    save_checkpoint(trainer.to_checkpoint(), out / "final.ckpt")
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained {trainer.epoch} epoch(s), {trainer.step_index} steps; "
          + " ".join(f"{k}={v:.4f}" for k, v in last.items() if k.startswith("mean_")))
    return EXIT_OK


def _layer(choice, head):
    if choice == "auto":
        return "head_hidden" if head is not None else "embedding"
    return choice


def _models(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return models_from_checkpoint(load_checkpoint(path))


def cmd_eval(args):
    encoder, head, labels = _models(args.checkpoint)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.task == "id":
        if head is None:
            raise ConfigError("task id needs a checkpoint with a speaker-id head")
        splits = args.split.split("+")
        utts = [u for s in splits for u in manifest.split(s).load()]
        metrics = {"cer_pct": compute_cer(utts, encoder, head, labels), "n_sentences": len(utts)}
    else:
        layer = _layer(args.layer, head)
        if args.trials:
            trials = read_trials(args.trials)
        else:
            trials = make_trials(manifest, 0, None, None, np.random.default_rng(args.seed))
            trials.write(out / "trials.tsv")
        by_id = {e.utterance_id: e for e in manifest}
        enroll = {}
        for e in manifest.split("enroll"):
            enroll.setdefault(e.speaker_label, []).append(e)
        enroll_utts = {s: Manifest(es).load() for s, es in sorted(enroll.items())}
        models = enroll_speakers(enroll_utts, encoder, head, layer)
        needed = sorted({t.test_utterance_id for t in trials})
        missing = [u for u in needed if u not in by_id]
        if missing:
            raise ConfigError(f"trial list references utterances absent from the manifest: {missing[:5]}")
        vecs = {u.utterance_id: extract_dvector(u, encoder, head, layer)
                for u in Manifest([by_id[i] for i in needed]).load()}
        scores = score_trials(trials, models, vecs)
        write_scores(out / "scores.tsv", scores)
        eer, thr = compute_eer(scores)
        metrics = {"eer_pct": eer, "eer_threshold": thr, "n_trials": len(scores)}
    write_metrics(out / "metrics.txt", metrics)
    for k, v in metrics.items():
        print(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    return EXIT_OK


def cmd_extract(args):
    encoder, head, _ = _models(args.checkpoint)
    layer = _layer(args.layer, head)
    manifest = load_manifest(args.manifest)
    if args.split != "all":
        manifest = manifest.split(args.split)
    vectors = {u.utterance_id: extract_dvector(u, encoder, head, layer) for u in manifest.load()}
    save_vectors({k: v.astype(np.float32) for k, v in vectors.items()}, args.out,
                 encoder.config.digest(), {"layer": layer})
    print(f"wrote {len(vectors)} {layer} vectors to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="lim", description="Speaker embeddings from local mutual-information maximisation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-speaker corpus")
    s.add_argument("--speakers", type=int, default=20)
    s.add_argument("--utts", type=int, default=8, help="utterances per speaker")
    s.add_argument("--seconds", type=float, default=3.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ratio", default="6,1,1", help="train,enroll,test utterances per speaker")
    s.add_argument("--t60", type=float, default=None, help="add synthetic reverberation with this T60 (s)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train an encoder")
    t.add_argument("--config", default=None)
    t.add_argument("--out", default=None, help="output directory (overrides run.out_dir)")
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt if present")
    t.add_argument("overrides", nargs="*", help="key=value or section.key=value")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="speaker identification or verification metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--task", choices=("id", "verify"), required=True)
    e.add_argument("--trials", default=None)
    e.add_argument("--split", default="test", help="split(s) for --task id, e.g. test or enroll+test")
    e.add_argument("--layer", default="auto", choices=("auto", "head_hidden", "embedding"))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("extract", help="write one d-vector per utterance")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--manifest", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--split", default="all")
    x.add_argument("--layer", default="auto", choices=("auto", "head_hidden", "embedding"))
    x.set_defaults(func=cmd_extract)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"lim {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LimError, OSError, ValueError, KeyError) as exc:
        print(f"lim {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
