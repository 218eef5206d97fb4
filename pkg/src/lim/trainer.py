"""Training loops: unsupervised pair objectives, the supervised speaker-id
baseline and the two semi-supervised combinations.

All objectives are maximised; the optimiser takes ascent steps.  One
:class:`Trainer` owns every parameter, the optimiser state and the random
streams, so a run is determined by ``(config, corpus)`` and can be resumed
from a checkpoint without changing its loss trace.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dsp_io import UNLABELED
from .encoder import EncoderConfig, embed, encode, init_encoder
from .errors import (ConfigError, IncompatibleCheckpointError, InsufficientDataError,
                     LabelMapError, NonFiniteGradientError, TooShortError)
from .objectives import (LOSSES, discriminate, init_discriminator, init_speaker_head,
                         lim_objective, speaker_logits, speaker_objective)
from .sampler import sample_labeled_chunks, sample_pair_batch

log = logging.getLogger(__name__)

MODES = ("unsupervised", "supervised", "semi_pretrain", "semi_joint")


# ---------------------------------------------------------------------------
# RMSprop (ascent)
# ---------------------------------------------------------------------------
@dataclass
class OptimState:
    lr: float = 1e-3
    alpha: float = 0.95
    eps: float = 1e-7
    v: dict = field(default_factory=dict)


def rmsprop_step(params, grads, state, step=0):
    """One in-place ascent step over ``params`` (name -> Tensor or array).

    Every gradient is checked before anything is touched, so a non-finite
    gradient leaves parameters and accumulators exactly as they were.
    """
    for name, p in params.items():
        g = grads.get(name)
        data = p.data if isinstance(p, nc.Tensor) else p
        if g is None:
            continue
        if np.shape(g) != data.shape:
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, parameter {data.shape}")
        if not np.all(np.isfinite(g)):
            bad = {k: float(np.linalg.norm(np.nan_to_num(v, nan=0.0, posinf=0.0, neginf=0.0)))
                   for k, v in grads.items() if v is not None}
            log.error("non-finite gradient at step %d in %s; finite-part gradient norms: %s", step, name, bad)
            raise NonFiniteGradientError(step, name)
    a = state.alpha
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        data = p.data if isinstance(p, nc.Tensor) else p
        g = np.asarray(g, dtype=data.dtype)
        v = state.v.get(name)
        if v is None:
            v = np.zeros_like(data)
        v = (a * v + (1 - a) * g * g).astype(data.dtype)
        state.v[name] = v
        data += (state.lr * g / (np.sqrt(v) + state.eps)).astype(data.dtype)
    return params


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------
@dataclass
class TrainConfig:
    mode: str = "unsupervised"
    loss: str = "bce"
    n_samp: int = 128
    epochs: int = 1
    steps_per_epoch: int = 100
    seed: int = 0
    lam: float = 1.0
    lr: float = 1e-3
    alpha: float = 0.95
    eps: float = 1e-7
    # learning rate for the encoder; None means ``lr``.  0 freezes it.
    encoder_lr: float | None = None
    disc_hidden: int = 256
    head_hidden: int = 256
    margin: float = 0.5
    min_separation: int = 0
    strict_speaker: bool = False
    freeze_encoder: bool = False
    frozen_hop: int = 800
    # cap on training audio per speaker in seconds; 0 keeps everything
    max_seconds_per_speaker: float = 0.0
    pretrained: str | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss: expected one of {LOSSES}, got {self.loss!r}")
        if self.n_samp < 2:
            raise ConfigError(f"n_samp must be >= 2, got {self.n_samp}")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and steps_per_epoch >= 1")
        if self.lam < 0:
            raise ConfigError(f"lam must be non-negative, got {self.lam}")
        if self.lr < 0 or (self.encoder_lr is not None and self.encoder_lr < 0):
            raise ConfigError("learning rates must be non-negative")
        if not 0 <= self.alpha < 1 or self.eps <= 0:
            raise ConfigError("need 0 <= alpha < 1 and eps > 0")
        if self.mode == "semi_pretrain" and not self.pretrained:
            raise ConfigError("semi_pretrain needs 'pretrained' (an unsupervised checkpoint)")
        if self.frozen_hop < 1:
            raise ConfigError("frozen_hop must be positive")
        return self

    @property
    def frozen(self):
        return self.freeze_encoder or self.encoder_lr == 0

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "encoder"}
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        enc = d.pop("encoder", None)
        if isinstance(enc, dict):
            enc = EncoderConfig.from_dict(enc)
        return cls(**d, **({"encoder": enc} if enc is not None else {}))


def load_encoder_state(encoder, ckpt):
    """Copy encoder weights and batch-norm statistics from a checkpoint."""
    if ckpt.digest != encoder.config.digest():
        raise IncompatibleCheckpointError(
            "checkpoint encoder architecture digest does not match the configured encoder")
    for name, t in encoder.tensors.items():
        if name not in ckpt.tensors:
            raise IncompatibleCheckpointError(f"checkpoint lacks encoder tensor {name}")
        t.data = ckpt.tensors[name].astype(t.data.dtype)
    for name, st in encoder.bn.items():
        st.mean = ckpt.tensors[f"{name}.running_mean"].astype(st.mean.dtype)
        st.var = ckpt.tensors[f"{name}.running_var"].astype(st.var.dtype)


def cap_per_speaker(utterances, max_seconds, min_samples):
    """Keep at most ``max_seconds`` of audio per speaker, in utterance order.

    The last kept utterance is truncated; pieces shorter than one chunk are
    dropped.  ``max_seconds <= 0`` disables the cap.
    """
    if not max_seconds or max_seconds <= 0:
        return utterances
    used, out = {}, []
    for u in utterances:
        budget = int(round(max_seconds * u.sample_rate)) - used.get(u.speaker_label, 0)
        take = min(len(u.samples), budget)
        if take < min_samples:
            continue
        used[u.speaker_label] = used.get(u.speaker_label, 0) + take
        out.append(dataclasses.replace(u, samples=u.samples[:take]) if take < len(u.samples) else u)
    return out


def label_map(utterances):
    return {s: i for i, s in enumerate(sorted({u.speaker_label for u in utterances}))}


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------
class Trainer:
    """Owns parameters, optimiser state and rng streams for one run.

    ``utterances`` is the training material (a list of ``Utterance``).
    """

    def __init__(self, config, utterances, *, _restore=None):
        self.config = config.validate()
        self.utterances = cap_per_speaker(list(utterances), config.max_seconds_per_speaker,
                                          config.encoder.chunk_len)
        if not self.utterances:
            raise InsufficientDataError("no training utterances")
        cfg = self.config
        root = np.random.SeedSequence(cfg.seed)
        init_seq, sampler_seq = root.spawn(2)
        self.rng = {"init": np.random.default_rng(init_seq), "sampler": np.random.default_rng(sampler_seq)}
        if self.supervised and any(u.speaker_label == UNLABELED for u in self.utterances):
            raise LabelMapError(f"mode {cfg.mode} needs a speaker label on every training utterance")
        self.labels = label_map(self.utterances)
        self.encoder = init_encoder(self.rng["init"], cfg.encoder)
        self.head = self.disc = None
        if self.supervised:
            self.head = init_speaker_head(cfg.encoder.embedding_dim, len(self.labels), cfg.head_hidden, self.rng["init"])
        if self.unsupervised and cfg.loss != "triplet":
            self.disc = init_discriminator(cfg.encoder.embedding_dim, cfg.disc_hidden, self.rng["init"])
        self.optim = OptimState(cfg.lr, cfg.alpha, cfg.eps)
        self.step_index = 0
        self.epoch = 0
        self.trace = []  # (step, epoch, name, value)
        self.history = []  # per-epoch summaries
        self.best = None
        if _restore is not None:
            self._restore(_restore)
        elif cfg.pretrained and (cfg.mode == "semi_pretrain" or cfg.frozen):
            self.load_encoder(load_checkpoint(cfg.pretrained))
        self._pool = None

    # -- mode helpers -------------------------------------------------------
    @property
    def supervised(self):
        return self.config.mode != "unsupervised"

    @property
    def unsupervised(self):
        return self.config.mode == "unsupervised" or (self.config.mode == "semi_joint" and self.config.lam > 0)

    def parameters(self):
        out = {}
        if not self.config.frozen:
            out.update(self.encoder.tensors)
        for group in (self.disc, self.head):
            if group:
                out.update(group)
        return out

    def load_encoder(self, ckpt):
        load_encoder_state(self.encoder, ckpt)

    # -- one step -----------------------------------------------------------
    def _frozen_pool(self):
        """Eval-mode embeddings of densely framed training chunks, computed once."""
        if self._pool is None:
            n = self.config.encoder.chunk_len
            hop = self.config.frozen_hop
            chunks, labels = [], []
            for u in self.utterances:
                if len(u.samples) < n:
                    raise TooShortError(f"{u.utterance_id}: {len(u.samples)} samples < chunk length {n}")
                for o in range(0, len(u.samples) - n + 1, hop):
                    chunks.append(u.samples[o : o + n])
                    labels.append(self.labels[u.speaker_label])
            self._pool = (embed(np.stack(chunks), self.encoder), np.array(labels))
        return self._pool

    def supervised_batch(self):
        cfg = self.config
        rng = self.rng["sampler"]
        if cfg.frozen:
            z, y = self._frozen_pool()
            idx = rng.integers(len(y), size=cfg.n_samp)
            return nc.Tensor(z[idx]), y[idx]
        x, y = sample_labeled_chunks(self.utterances, cfg.n_samp, cfg.encoder.chunk_len, rng, self.labels)
        return encode(x, self.encoder, "train"), y

    def unsupervised_terms(self):
        cfg = self.config
        batch = sample_pair_batch(self.utterances, cfg.n_samp, cfg.encoder.chunk_len, self.rng["sampler"],
                                  cfg.min_separation, cfg.strict_speaker)
        n = len(batch)
        z = encode(np.concatenate([batch.c1, batch.c2, batch.c_rnd]), self.encoder,
                   "eval" if cfg.frozen else "train")
        obj, stats = lim_objective(cfg.loss, z[:n], z[n : 2 * n], z[2 * n :], self.disc, cfg.margin)
        stats["neg_same_speaker"] = batch.same_speaker_negative_fraction()
        return obj, stats

    def objective(self):
        """Total objective for the next batch and its named components."""
        cfg = self.config
        parts, stats = {}, {}
        total = None
        if self.supervised:
            z, y = self.supervised_batch()
            logits = speaker_logits(z, self.head)
            parts["speaker"] = speaker_objective(logits, y)
            stats["speaker_accuracy"] = float(np.mean(np.argmax(logits.data, axis=1) == y))
            total = parts["speaker"]
        if self.unsupervised:
            unsup, s = self.unsupervised_terms()
            parts[cfg.loss] = unsup
            stats.update(s)
            total = unsup if total is None else total + cfg.lam * unsup
        return total, parts, stats

    def step(self):
        params = self.parameters()
        for t in params.values():
            t.grad = None
        total, parts, stats = self.objective()
        nc.backward(total)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
        self._apply(params, grads)
        self.step_index += 1
        values = {k: float(v.item()) for k, v in parts.items()}
        for name, value in values.items():
            self.trace.append((self.step_index, self.epoch + 1, name, value))
        return values, stats

    def _apply(self, params, grads):
        cfg = self.config
        enc_lr = cfg.lr if cfg.encoder_lr is None else cfg.encoder_lr
        if enc_lr == cfg.lr:
            rmsprop_step(params, grads, self.optim, self.step_index)
            return
        # separate learning rate for the encoder, shared accumulators
        for name in grads:
            if not np.all(np.isfinite(grads[name])):
                raise NonFiniteGradientError(self.step_index, name)
        enc = {k: v for k, v in params.items() if k.startswith("enc.")}
        rest = {k: v for k, v in params.items() if not k.startswith("enc.")}
        rmsprop_step(rest, grads, self.optim, self.step_index)
        self.optim.lr, lr = enc_lr, self.optim.lr
        try:
            rmsprop_step(enc, grads, self.optim, self.step_index)
        finally:
            self.optim.lr = lr

    # -- epochs -------------------------------------------------------------
    def run_epoch(self, log_file=None):
        cfg = self.config
        t0 = time.perf_counter()
        sums, accs, collide = {}, [], []
        for _ in range(cfg.steps_per_epoch):
            values, stats = self.step()
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
                if log_file is not None:
                    log_file.write(f"{self.step_index}\t{self.epoch + 1}\t{k}\t{v!r}\n")
            accs.append(stats.get("accuracy", stats.get("speaker_accuracy", np.nan)))
            if "neg_same_speaker" in stats:
                collide.append(stats["neg_same_speaker"])
        self.epoch += 1
        summary = {"epoch": self.epoch, **{f"mean_{k}": v / cfg.steps_per_epoch for k, v in sums.items()},
                   "accuracy": float(np.mean(accs)), "seconds": time.perf_counter() - t0}
        if collide:
            summary["neg_same_speaker"] = float(np.mean(collide))
        self.history.append(summary)
        log.info("epoch %d: %s", self.epoch, {k: round(v, 4) for k, v in summary.items()})
        return summary

    def monitor(self, summary):
        """Training-progress value: the epoch's mean total objective."""
        w = self.config.lam if self.supervised else 1.0
        return summary.get("mean_speaker", 0.0) + w * summary.get(f"mean_{self.config.loss}", 0.0)

    def fit(self, out_dir=None, epochs=None):
        """Train up to ``epochs`` total epochs (default: the configured count).

        With ``out_dir`` the step log goes to ``train_log.tsv`` and
        checkpoints are written after every epoch (``last.ckpt``) and when
        the monitor improves (``best.ckpt``).
        """
        target = self.config.epochs if epochs is None else epochs
        out = Path(out_dir) if out_dir else None
        fh = None
        if out:
            out.mkdir(parents=True, exist_ok=True)
            fh = open(out / "train_log.tsv", "a", encoding="utf-8")
        try:
            while self.epoch < target:
                summary = self.run_epoch(fh)
                m = self.monitor(summary)
                improved = self.best is None or m > self.best
                if improved:
                    self.best = m
                if out:
                    fh.flush()
                    ck = self.to_checkpoint()
                    save_checkpoint(ck, out / "last.ckpt")
                    if improved:
                        save_checkpoint(ck, out / "best.ckpt")
        finally:
            if fh:
                fh.close()
        return self

    def loss_trace(self, name=None):
        return [v for (_, _, n, v) in self.trace if name is None or n == name]

    # -- persistence --------------------------------------------------------
    def to_checkpoint(self):
        tensors = {k: t.data for k, t in self.encoder.tensors.items()}
        for name, st in self.encoder.bn.items():
            tensors[f"{name}.running_mean"] = st.mean
            tensors[f"{name}.running_var"] = st.var
        for group in (self.disc, self.head):
            if group:
                tensors.update({k: t.data for k, t in group.items()})
        for k in sorted(self.optim.v):
            tensors[f"optim.v.{k}"] = self.optim.v[k]
        meta = {
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "step": self.step_index,
            "labels": sorted(self.labels, key=self.labels.get),
            "trace": [list(t) for t in self.trace],
            # wall-clock timings stay out so identical runs give identical bytes
            "history": [{k: v for k, v in h.items() if k != "seconds"} for h in self.history],
            "best": self.best,
        }
        rng = {k: g.bit_generator.state for k, g in self.rng.items()}
        return Checkpoint(self.config.encoder.digest(), {k: np.array(v, copy=True) for k, v in tensors.items()},
                          rng, meta)

    @classmethod
    def from_checkpoint(cls, ckpt, utterances, config=None):
        """Rebuild a trainer mid-run; ``config`` may raise the epoch budget."""
        if isinstance(ckpt, (str, Path)):
            ckpt = load_checkpoint(ckpt)
        saved = TrainConfig.from_dict(ckpt.meta["config"])
        if config is None:
            config = saved
        if config.encoder.digest() != ckpt.digest:
            raise IncompatibleCheckpointError("checkpoint encoder architecture differs from the configuration")
        return cls(config, utterances, _restore=ckpt)

    def _restore(self, ckpt):
        if ckpt.digest != self.config.encoder.digest():
            raise IncompatibleCheckpointError("checkpoint encoder architecture differs from the configuration")
        labels = ckpt.meta.get("labels")
        if labels is not None and labels != sorted(self.labels, key=self.labels.get):
            raise LabelMapError("training speakers differ from the checkpoint's label map")
        self.load_encoder(ckpt)
        for group in (self.disc, self.head):
            for name, t in (group or {}).items():
                if name not in ckpt.tensors:
                    raise IncompatibleCheckpointError(f"checkpoint lacks {name}")
                t.data = ckpt.tensors[name].copy()
        self.optim.v = {k[len("optim.v."):]: v.copy() for k, v in ckpt.tensors.items() if k.startswith("optim.v.")}
        for k, state in ckpt.rng.items():
            self.rng[k].bit_generator.state = state
        self.epoch = ckpt.meta["epoch"]
        self.step_index = ckpt.meta["step"]
        self.trace = [tuple(t) for t in ckpt.meta.get("trace", [])]
        self.history = list(ckpt.meta.get("history", []))
        self.best = ckpt.meta.get("best")


# ---------------------------------------------------------------------------
# Entry points per mode
# ---------------------------------------------------------------------------
def _train(config, manifest_or_utts, mode, out_dir=None):
    config = dataclasses.replace(config, mode=mode)
    utts = manifest_or_utts.split("train").load() if hasattr(manifest_or_utts, "split") else manifest_or_utts
    return Trainer(config, utts).fit(out_dir)


def train_unsupervised(config, manifest, out_dir=None):
    return _train(config, manifest, "unsupervised", out_dir)


def train_supervised(config, manifest, out_dir=None):
    return _train(config, manifest, "supervised", out_dir)


def train_semi_pretrain(config, manifest, out_dir=None):
    return _train(config, manifest, "semi_pretrain", out_dir)


def train_semi_joint(config, manifest, out_dir=None):
    return _train(config, manifest, "semi_joint", out_dir)


TRAINERS = {
    "unsupervised": train_unsupervised,
    "supervised": train_supervised,
    "semi_pretrain": train_semi_pretrain,
    "semi_joint": train_semi_joint,
}


def pair_accuracy(encoder, disc, utterances, n_pairs, rng, loss="bce"):
    """Held-out pair discrimination: sigmoid(score) > 0.5 counts as 'same utterance'."""
    n = encoder.config.chunk_len
    batch = sample_pair_batch(utterances, n_pairs, n, rng)
    z = embed(np.concatenate([batch.c1, batch.c2, batch.c_rnd]), encoder)
    z1, z2, zr = z[:n_pairs], z[n_pairs : 2 * n_pairs], z[2 * n_pairs :]
    with nc.no_grad():
        pos = discriminate(z1, z2, disc).data
        neg = discriminate(z1, zr, disc).data
    cut = 0.0 if loss == "bce" else float(np.mean(np.concatenate([pos, neg])))
    return float(np.mean(np.concatenate([pos > cut, neg <= cut])))


def models_from_checkpoint(ckpt):
    """Encoder, speaker-id head (or None) and label map stored in a checkpoint."""
    if isinstance(ckpt, (str, Path)):
        ckpt = load_checkpoint(ckpt)
    try:
        enc_cfg = EncoderConfig.from_dict(ckpt.meta["config"]["encoder"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IncompatibleCheckpointError(f"checkpoint metadata has no usable encoder config: {exc}") from None
    if enc_cfg.digest() != ckpt.digest:
        raise IncompatibleCheckpointError("architecture digest does not match the stored encoder config")
    encoder = init_encoder(0, enc_cfg)
    load_encoder_state(encoder, ckpt)
    head = None
    if "head.out.weight" in ckpt.tensors:
        head = {k: nc.Tensor(v.copy(), name=k) for k, v in ckpt.group("head.").items()}
    labels = {s: i for i, s in enumerate(ckpt.meta.get("labels", []))}
    return encoder, head, labels
