"""Positive/negative chunk sampling and verification trial lists."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CoverageError, FormatError, InsufficientDataError


@dataclass
class PairBatch:
    """Aligned positive (c1, c2) and negative (c1, c_rnd) chunk pairs.

    ``c1``, ``c2`` and ``c_rnd`` are [n, chunk_len] arrays; ``utt_pos`` and
    ``utt_neg`` index the source utterances (c1 and c2 both come from
    ``utt_pos[i]``).
    """

    c1: np.ndarray
    c2: np.ndarray
    c_rnd: np.ndarray
    utt_pos: np.ndarray
    utt_neg: np.ndarray
    off1: np.ndarray
    off2: np.ndarray
    off_rnd: np.ndarray
    utterance_ids: list = field(repr=False, default_factory=list)
    speakers: list = field(repr=False, default_factory=list)

    def __len__(self):
        return len(self.utt_pos)

    @property
    def positives(self):
        return list(zip(self.c1, self.c2))

    @property
    def negatives(self):
        return list(zip(self.c1, self.c_rnd))

    def same_speaker_negative_fraction(self):
        if not self.speakers:
            return float("nan")
        hits = sum(self.speakers[u] == self.speakers[v] for u, v in zip(self.utt_pos, self.utt_neg))
        return hits / len(self)


def collision_probability(speakers):
    """Chance that a uniformly drawn second utterance shares the first's speaker."""
    n = len(speakers)
    if n < 2:
        return float("nan")
    counts = Counter(speakers)
    return sum(c * (c - 1) for c in counts.values()) / (n * (n - 1))


def sample_pair_batch(utterances, n_samp, chunk_len, rng, min_separation=0, strict_speaker=False):
    """Draw ``n_samp`` positive and negative pairs.

    For each item: a uniformly chosen utterance u gives c1 and c2 at
    independent uniform offsets; a different utterance v (uniform among the
    rest) gives c_rnd.  With ``strict_speaker`` v must also belong to
    another speaker.  ``min_separation`` forces |off1 - off2| >= that many
    samples.
    """
    short = [u.utterance_id for u in utterances if len(u.samples) < chunk_len]
    if short:
        raise InsufficientDataError(f"utterances shorter than {chunk_len} samples: {short[:5]}")
    if len(utterances) < 2:
        raise InsufficientDataError(f"need at least 2 utterances, got {len(utterances)}")
    n_utt = len(utterances)
    lengths = np.array([len(u.samples) for u in utterances])
    speakers = [u.speaker_label for u in utterances]
    if strict_speaker:
        by_other = {}
        for s in set(speakers):
            by_other[s] = np.array([j for j, t in enumerate(speakers) if t != s])
            if by_other[s].size == 0:
                raise InsufficientDataError("strict speaker mode needs at least 2 speakers")
    span = lengths - chunk_len + 1
    if min_separation and np.any(span <= min_separation):
        raise InsufficientDataError(f"utterances too short for min_separation={min_separation}")
    u = rng.integers(n_utt, size=n_samp)
    off1 = rng.integers(span[u])
    off2 = rng.integers(span[u])
    if min_separation:
        bad = np.abs(off1 - off2) < min_separation
        while bad.any():
            off2[bad] = rng.integers(span[u[bad]])
            bad = np.abs(off1 - off2) < min_separation
    if strict_speaker:
        v = np.array([by_other[speakers[i]][rng.integers(by_other[speakers[i]].size)] for i in u])
    else:
        v = rng.integers(n_utt - 1, size=n_samp)
        v = v + (v >= u)
    off3 = rng.integers(span[v])

    def cut(idx, off):
        return np.stack([utterances[i].samples[o : o + chunk_len] for i, o in zip(idx, off)])

    return PairBatch(
        c1=cut(u, off1), c2=cut(u, off2), c_rnd=cut(v, off3),
        utt_pos=u, utt_neg=v, off1=off1, off2=off2, off_rnd=off3,
        utterance_ids=[x.utterance_id for x in utterances], speakers=speakers,
    )


def sample_labeled_chunks(utterances, n, chunk_len, rng, label_of):
    """Random chunks with speaker-index labels for supervised training."""
    idx = rng.integers(len(utterances), size=n)
    offs = [int(rng.integers(len(utterances[i].samples) - chunk_len + 1)) for i in idx]
    x = np.stack([utterances[i].samples[o : o + chunk_len] for i, o in zip(idx, offs)])
    y = np.array([label_of[utterances[i].speaker_label] for i in idx])
    return x, y


# ---------------------------------------------------------------------------
# Verification trials
# ---------------------------------------------------------------------------
@dataclass
class Trial:
    enroll_speaker: str
    test_utterance_id: str
    genuine: bool


@dataclass
class TrialList:
    trials: list
    enrollment: dict = field(default_factory=dict)  # speaker -> enrollment utterance ids

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def write(self, path):
        lines = [f"{t.enroll_speaker}\t{t.test_utterance_id}\t{'genuine' if t.genuine else 'impostor'}" for t in self.trials]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trials(path):
    trials = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("genuine", "impostor"):
            raise FormatError(f"{path}:{lineno}: expected 'speaker<TAB>utterance<TAB>genuine|impostor'")
        trials.append(Trial(parts[0], parts[1], parts[2] == "genuine"))
    return TrialList(trials)


def make_trials(manifest, n_enroll_utts_per_spk, n_genuine, n_impostor, rng):
    """Build genuine/impostor trials from the manifest's enroll and test splits.

    ``n_genuine`` or ``n_impostor`` of None takes every available trial.
    """
    enroll = defaultdict(list)
    for e in manifest.split("enroll"):
        enroll[e.speaker_label].append(e.utterance_id)
    tests = list(manifest.split("test"))
    if not enroll or not tests:
        raise CoverageError("trial construction needs non-empty enroll and test splits")
    for e in tests:
        if e.speaker_label not in enroll:
            raise CoverageError(f"speaker {e.speaker_label!r} has test material but no enrollment utterances")
    enrollment = {}
    for spk in sorted(enroll):
        utts = sorted(enroll[spk])
        if n_enroll_utts_per_spk and n_enroll_utts_per_spk < len(utts):
            pick = sorted(rng.choice(len(utts), n_enroll_utts_per_spk, replace=False))
            utts = [utts[i] for i in pick]
        enrollment[spk] = utts
    genuine = [Trial(e.speaker_label, e.utterance_id, True) for e in tests]
    impostor = [Trial(s, e.utterance_id, False) for e in tests for s in sorted(enrollment) if s != e.speaker_label]
    n_genuine = len(genuine) if n_genuine is None else n_genuine
    n_impostor = len(impostor) if n_impostor is None else n_impostor
    if n_genuine > len(genuine):
        raise CoverageError(f"requested {n_genuine} genuine trials, only {len(genuine)} available")
    if n_impostor > len(impostor):
        raise CoverageError(f"requested {n_impostor} impostor trials, only {len(impostor)} available")
    if n_genuine < 1 or n_impostor < 1:
        raise CoverageError("need at least one genuine and one impostor trial")
    chosen = [genuine[i] for i in sorted(rng.choice(len(genuine), n_genuine, replace=False))]
    chosen += [impostor[i] for i in sorted(rng.choice(len(impostor), n_impostor, replace=False))]
    return TrialList(chosen, enrollment)
