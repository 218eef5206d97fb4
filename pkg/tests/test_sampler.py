import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lim.dsp_io import Manifest, ManifestEntry, Utterance
from lim.errors import CoverageError, FormatError, InsufficientDataError
from lim.sampler import (
    TrialList,
    collision_probability,
    make_trials,
    read_trials,
    sample_labeled_chunks,
    sample_pair_batch,
)

N = 100


def corpus(n_spk=4, per=3, length=400, seed=0):
    rng = np.random.default_rng(seed)
    utts = []
    for s in range(n_spk):
        for u in range(per):
            # encode the utterance index into every sample so chunks reveal their source
            base = (s * per + u) * 1000.0
            utts.append(Utterance(f"s{s}_u{u}", f"s{s}", base + np.arange(length + int(rng.integers(0, 50)))))
    return utts


def source(chunk):
    return int(chunk[0] // 1000)


def test_two_utterances_force_the_negative():
    utts = corpus(2, 1)
    b = sample_pair_batch(utts, 64, N, np.random.default_rng(0))
    assert np.all(b.utt_neg == 1 - b.utt_pos)


def test_same_seed_same_batch():
    utts = corpus()
    a = sample_pair_batch(utts, 16, N, np.random.default_rng(5))
    b = sample_pair_batch(utts, 16, N, np.random.default_rng(5))
    for name in ("c1", "c2", "c_rnd", "utt_pos", "utt_neg"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
def test_pair_batch_invariants(seed, n):
    utts = corpus()
    b = sample_pair_batch(utts, n, N, np.random.default_rng(seed))
    assert b.c1.shape == b.c2.shape == b.c_rnd.shape == (n, N)
    assert [source(c) for c in b.c1] == [source(c) for c in b.c2] == list(b.utt_pos)
    assert [source(c) for c in b.c_rnd] == list(b.utt_neg)
    assert np.all(b.utt_pos != b.utt_neg)
    # negatives reuse c1
    for (p1, _), (n1, _) in zip(b.positives, b.negatives):
        assert p1 is n1 or np.array_equal(p1, n1)
    for i in range(n):
        src = utts[b.utt_pos[i]].samples
        np.testing.assert_array_equal(b.c1[i], src[b.off1[i] : b.off1[i] + N])


def test_utterance_selection_is_uniform():
    utts = corpus(20, 8, length=N)
    rng = np.random.default_rng(11)
    counts = np.zeros(len(utts))
    neg_counts = np.zeros(len(utts))
    for _ in range(10):
        b = sample_pair_batch(utts, 1000, N, rng)
        assert np.all(b.utt_pos != b.utt_neg)
        counts += np.bincount(b.utt_pos, minlength=len(utts))
        neg_counts += np.bincount(b.utt_neg, minlength=len(utts))
    p = 1 / len(utts)
    sigma = np.sqrt(10000 * p * (1 - p))
    assert np.all(np.abs(counts - 10000 * p) < 3.5 * sigma)
    assert np.all(np.abs(neg_counts - 10000 * p) < 3.5 * sigma)


def test_same_speaker_negative_fraction_matches_collision_probability():
    utts = corpus(5, 4, length=N)
    spk = [u.speaker_label for u in utts]
    assert collision_probability(spk) == pytest.approx(3 / 19)
    rng = np.random.default_rng(2)
    frac = np.mean([sample_pair_batch(utts, 500, N, rng).same_speaker_negative_fraction() for _ in range(20)])
    assert frac == pytest.approx(3 / 19, abs=0.01)


def test_strict_speaker_mode():
    utts = corpus(3, 3)
    b = sample_pair_batch(utts, 200, N, np.random.default_rng(0), strict_speaker=True)
    assert b.same_speaker_negative_fraction() == 0.0


def test_min_separation():
    b = sample_pair_batch(corpus(), 200, N, np.random.default_rng(0), min_separation=50)
    assert np.all(np.abs(b.off1 - b.off2) >= 50)


def test_insufficient_data():
    with pytest.raises(InsufficientDataError):
        sample_pair_batch(corpus(1, 1), 4, N, np.random.default_rng(0))
    with pytest.raises(InsufficientDataError):
        sample_pair_batch(corpus(), 4, 10_000, np.random.default_rng(0))


def test_labeled_chunks():
    utts = corpus()
    labels = {f"s{i}": i for i in range(4)}
    x, y = sample_labeled_chunks(utts, 50, N, np.random.default_rng(0), labels)
    assert x.shape == (50, N)
    np.testing.assert_array_equal([source(c) // 3 for c in x], y)


# -- trials ------------------------------------------------------------------------------
def _manifest(n_spk, enroll_per, test_per):
    entries = []
    for s in range(n_spk):
        for i in range(enroll_per):
            entries.append(ManifestEntry(f"s{s}_e{i}", f"s{s}", "x.wav", "enroll"))
        for i in range(test_per):
            entries.append(ManifestEntry(f"s{s}_t{i}", f"s{s}", "x.wav", "test"))
    return Manifest(entries)


def test_two_speaker_trial_counts():
    m = _manifest(2, 1, 1)
    tl = make_trials(m, 1, 2, 2, np.random.default_rng(0))
    assert sum(t.genuine for t in tl) == 2 and sum(not t.genuine for t in tl) == 2
    with pytest.raises(CoverageError):
        make_trials(m, 1, 3, 1, np.random.default_rng(0))


def test_trials_never_reuse_enrollment_audio():
    m = _manifest(5, 2, 3)
    tl = make_trials(m, 0, None, None, np.random.default_rng(0))
    enrolled = {u for utts in tl.enrollment.values() for u in utts}
    assert not enrolled & {t.test_utterance_id for t in tl}
    for t in tl:
        assert t.genuine == t.test_utterance_id.startswith(t.enroll_speaker + "_")


def test_missing_enrollment_names_speaker():
    m = Manifest(_manifest(2, 1, 1).entries + [ManifestEntry("s9_t0", "s9", "x.wav", "test")])
    with pytest.raises(CoverageError, match="s9"):
        make_trials(m, 1, 1, 1, np.random.default_rng(0))


def test_trial_file_round_trip(tmp_path):
    tl = make_trials(_manifest(3, 1, 2), 1, 4, 5, np.random.default_rng(1))
    tl.write(tmp_path / "t.tsv")
    back = read_trials(tmp_path / "t.tsv")
    assert back.trials == tl.trials
    (tmp_path / "bad.tsv").write_text("a\tb\tmaybe\n")
    with pytest.raises(FormatError):
        read_trials(tmp_path / "bad.tsv")
    assert len(TrialList([])) == 0
