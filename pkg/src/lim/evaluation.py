"""Speaker identification (sentence CER) and verification (d-vectors, EER)."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import softmax

from . import numcore as nc
from .dsp_io import frame_chunks
from .encoder import embed
from .errors import DegenerateError, EmptyBatchError, InsufficientDataError, LabelMapError
from .objectives import head_hidden, speaker_logits

LAYERS = ("head_hidden", "embedding")


def frames(utterance, encoder):
    """Frame an utterance into the encoder's chunk length.

    The overlap keeps the 10-in-200 ratio of the default framing.
    """
    chunk_ms = encoder.config.chunk_len * 1000 / utterance.sample_rate
    return frame_chunks(utterance, chunk_ms, chunk_ms / 20)


# ---------------------------------------------------------------------------
# Identification
# ---------------------------------------------------------------------------
def average_posteriors(posteriors):
    """Mean of per-chunk posteriors and its argmax (ties go to the lowest index)."""
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise EmptyBatchError(f"need a non-empty [chunks, classes] array, got shape {p.shape}")
    mean = p.mean(axis=0)
    return int(np.argmax(mean)), mean


def chunk_posteriors(chunks, encoder, head):
    z = embed(chunks, encoder)
    with nc.no_grad():
        logits = speaker_logits(z, head).data
    return softmax(logits.astype(np.float64), axis=1)


def sentence_classify(utterance, encoder, head):
    """Predicted speaker index and averaged posterior for one utterance."""
    chunks = frames(utterance, encoder)
    return average_posteriors(chunk_posteriors(chunks, encoder, head))


def cer_from_predictions(predicted, truth):
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.size == 0:
        raise EmptyBatchError("no sentences to score")
    return 100.0 * float(np.mean(predicted != truth))


def compute_cer(utterances, encoder, head, labels):
    """Sentence-level classification error in percent.

    ``labels`` maps speaker label -> head output index.
    """
    utterances = list(utterances)
    if not utterances:
        raise EmptyBatchError("empty evaluation split")
    truth, pred = [], []
    for u in utterances:
        if u.speaker_label not in labels:
            raise LabelMapError(f"speaker {u.speaker_label!r} of {u.utterance_id} is unknown to the model")
        truth.append(labels[u.speaker_label])
        pred.append(sentence_classify(u, encoder, head)[0])
    return cer_from_predictions(pred, truth)


# ---------------------------------------------------------------------------
# d-vectors
# ---------------------------------------------------------------------------
def chunk_vectors(chunks, encoder, head=None, layer="head_hidden"):
    """Per-chunk activations used for d-vectors."""
    if layer not in LAYERS:
        raise ValueError(f"layer must be one of {LAYERS}, got {layer!r}")
    z = embed(chunks, encoder)
    if layer == "embedding":
        return z
    if head is None:
        raise ValueError("layer='head_hidden' needs a speaker-id head")
    with nc.no_grad():
        return head_hidden(z, head).data


def dvector_from_vectors(vectors, eps=1e-12):
    """Normalise each row, average, renormalise."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] == 0:
        raise EmptyBatchError("d-vector needs at least one chunk vector")
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms <= eps):
        raise DegenerateError(f"{int(np.sum(norms <= eps))} chunk(s) have an all-zero activation vector")
    mean = (v / norms[:, None]).mean(axis=0)
    n = np.linalg.norm(mean)
    if n <= eps:
        raise DegenerateError("normalised chunk vectors cancel out; d-vector undefined")
    return mean / n


def extract_dvector(utterance, encoder, head=None, layer="head_hidden"):
    return dvector_from_vectors(chunk_vectors(frames(utterance, encoder), encoder, head, layer))


@dataclass
class SpeakerModel:
    speaker_label: str
    dvector: np.ndarray


def enroll_speakers(enrollment, encoder, head=None, layer="head_hidden"):
    """``enrollment``: speaker -> list of utterances.  Chunks of all of a
    speaker's utterances are pooled before averaging."""
    models = {}
    for spk, utts in enrollment.items():
        chunks = [c for u in utts for c in frames(u, encoder)]
        models[spk] = SpeakerModel(spk, dvector_from_vectors(chunk_vectors(chunks, encoder, head, layer)))
    return models


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------
@dataclass
class TrialScore:
    trial: object
    score: float
    genuine: bool


def cosine(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateError("cosine of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def score_trials(trials, models, test_vectors):
    """Cosine similarity per trial; higher means more likely the same speaker."""
    out = []
    for t in trials:
        try:
            model = models[t.enroll_speaker]
        except KeyError:
            raise LabelMapError(f"no speaker model for {t.enroll_speaker!r}") from None
        try:
            vec = test_vectors[t.test_utterance_id]
        except KeyError:
            raise LabelMapError(f"no test vector for utterance {t.test_utterance_id!r}") from None
        dv = model.dvector if isinstance(model, SpeakerModel) else model
        out.append(TrialScore(t, cosine(dv, vec), bool(t.genuine)))
    return out


def _split_scores(scores, genuine=None):
    if genuine is None:
        s = np.array([x.score for x in scores], dtype=np.float64)
        g = np.array([x.genuine for x in scores], dtype=bool)
    else:
        s, g = np.asarray(scores, dtype=np.float64), np.asarray(genuine, dtype=bool)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if g.all() or not g.any():
        raise InsufficientDataError("EER needs at least one genuine and one impostor trial")
    return s, g


def far_frr(scores, genuine=None):
    """FAR/FRR at every distinct score, plus a final point above the maximum.

    Accept iff score >= t.  Returns ``(thresholds, far, frr)`` as fractions.
    """
    s, g = _split_scores(scores, genuine)
    gen, imp = np.sort(s[g]), np.sort(s[~g])
    t = np.unique(s)
    far = (imp.size - np.searchsorted(imp, t, side="left")) / imp.size
    frr = np.searchsorted(gen, t, side="left") / gen.size
    t = np.append(t, np.inf)
    return t, np.append(far, 0.0), np.append(frr, 1.0)


def compute_eer(scores, genuine=None):
    """Equal error rate (percent) and its threshold.

    ``scores`` is a list of :class:`TrialScore`, or an array of raw scores
    with a matching ``genuine`` mask.  FAR - FRR falls monotonically along
    the sweep; the EER is read off by linear interpolation between the two
    sweep points where it changes sign.
    """
    t, far, frr = far_frr(scores, genuine)
    d = far - frr
    k = int(np.argmax(d <= 0))  # d[-1] == -1, so a crossing exists
    if d[k] == 0 or k == 0:
        return 100.0 * float(far[k]), float(t[k]) if np.isfinite(t[k]) else float(t[k - 1])
    w = d[k - 1] / (d[k - 1] - d[k])
    eer = far[k - 1] + w * (far[k] - far[k - 1])
    hi = t[k] if np.isfinite(t[k]) else t[k - 1]
    return 100.0 * float(eer), float(t[k - 1] + w * (hi - t[k - 1]))


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------
def write_scores(path, scores):
    lines = [f"{s.trial.enroll_speaker}\t{s.trial.test_utterance_id}\t{s.score:.9g}\t"
             f"{'genuine' if s.genuine else 'impostor'}" for s in scores]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_metrics(path, metrics):
    lines = [f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics(path):
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out
