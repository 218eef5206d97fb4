import dataclasses

import numpy as np
import pytest

from lim import numcore as nc
from lim.checkpoint import Checkpoint, dumps, load_checkpoint, loads, save_checkpoint
from lim.dsp_io import Utterance, draw_speaker, synth_utterance
from lim.encoder import EncoderConfig
from lim.errors import (ConfigError, FormatError, IncompatibleCheckpointError, LabelMapError,
                        NonFiniteGradientError)
from lim.evaluation import compute_cer
from lim.trainer import (OptimState, TrainConfig, Trainer, cap_per_speaker, models_from_checkpoint,
                         rmsprop_step, train_supervised)


# -- RMSprop --------------------------------------------------------------------------
def test_zero_gradient_is_a_no_op():
    p = {"w": np.array([1.0, -2.0])}
    state = OptimState()
    rmsprop_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    np.testing.assert_array_equal(state.v["w"], 0.0)


def test_first_step_hand_arithmetic():
    p = {"w": np.array([0.0])}
    state = OptimState()
    rmsprop_step(p, {"w": np.array([1.0])}, state)
    assert state.v["w"][0] == pytest.approx(0.05)
    assert p["w"][0] == pytest.approx(0.001 / (np.sqrt(0.05) + 1e-7))
    assert p["w"][0] == pytest.approx(0.004472, abs=1e-6)


def test_opposite_gradients_move_symmetrically():
    p = {"a": np.array([0.3]), "b": np.array([0.3])}
    state = OptimState()
    for g in (0.7, 0.2, 1.5):
        rmsprop_step(p, {"a": np.array([g]), "b": np.array([-g])}, state)
    assert p["a"][0] - 0.3 == pytest.approx(0.3 - p["b"][0])


def test_non_finite_gradient_aborts_before_any_update():
    p = {"a": np.array([1.0]), "b": np.array([2.0])}
    state = OptimState()
    with pytest.raises(NonFiniteGradientError) as info:
        rmsprop_step(p, {"a": np.array([0.5]), "b": np.array([np.nan])}, state, step=17)
    assert info.value.step == 17 and info.value.name == "b"
    assert p["a"][0] == 1.0 and p["b"][0] == 2.0
    assert state.v == {}


def test_accumulator_stays_non_negative():
    rng = np.random.default_rng(0)
    p = {"w": rng.standard_normal(10)}
    state = OptimState()
    for _ in range(20):
        rmsprop_step(p, {"w": rng.standard_normal(10) * 5}, state)
    assert np.all(state.v["w"] >= 0) and state.v["w"].shape == p["w"].shape


# -- tiny training runs ------------------------------------------------------------------------
TINY = EncoderConfig.tiny()


@pytest.fixture(scope="module")
def utts():
    rng = np.random.default_rng(0)
    out = []
    for s in range(4):
        prof = draw_speaker(rng)
        for u in range(3):
            out.append(Utterance(f"s{s}_u{u}", f"s{s}", synth_utterance(prof, 2400, rng).astype(np.float32)))
    return out


def cfg(**kw):
    base = dict(n_samp=8, epochs=2, steps_per_epoch=4, encoder=TINY, disc_hidden=8, head_hidden=8, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("mode, loss", [("unsupervised", "bce"), ("unsupervised", "nce"),
                                        ("unsupervised", "triplet"), ("supervised", "bce"),
                                        ("semi_joint", "mine")])
def test_runs_are_bit_reproducible(utts, mode, loss):
    a = Trainer(cfg(mode=mode, loss=loss), utts).fit()
    b = Trainer(cfg(mode=mode, loss=loss), utts).fit()
    assert a.trace == b.trace and len(a.trace) >= 8
    assert dumps(a.to_checkpoint()) == dumps(b.to_checkpoint())


@pytest.mark.parametrize("mode", ["unsupervised", "semi_joint"])
def test_resume_reproduces_uninterrupted_trace(utts, tmp_path, mode):
    full = Trainer(cfg(mode=mode, epochs=3), utts).fit()
    Trainer(cfg(mode=mode, epochs=3), utts).fit(tmp_path, epochs=1)
    resumed = Trainer.from_checkpoint(load_checkpoint(tmp_path / "last.ckpt"), utts).fit()
    assert resumed.epoch == 3
    assert resumed.trace == full.trace
    assert dumps(resumed.to_checkpoint()) == dumps(full.to_checkpoint())


def test_training_log_format(utts, tmp_path):
    t = Trainer(cfg(mode="semi_joint", epochs=1), utts).fit(tmp_path)
    rows = [line.split("\t") for line in (tmp_path / "train_log.tsv").read_text().splitlines()]
    assert len(rows) == len(t.trace) == 8
    assert {r[2] for r in rows} == {"speaker", "bce"}
    assert [float(r[3]) for r in rows] == [v for (_, _, _, v) in t.trace]
    assert (tmp_path / "best.ckpt").is_file() and (tmp_path / "last.ckpt").is_file()


def test_semi_joint_with_zero_weight_is_supervised(utts):
    sup = Trainer(cfg(mode="supervised"), utts).fit()
    joint = Trainer(cfg(mode="semi_joint", lam=0.0), utts).fit()
    assert joint.trace == sup.trace
    for k, t in sup.encoder.tensors.items():
        np.testing.assert_array_equal(t.data, joint.encoder.tensors[k].data)


def test_joint_gradient_is_sum_of_parts(utts):
    with nc.precision(64):
        t = Trainer(cfg(mode="semi_joint", lam=1.0), utts)
        state = [g.bit_generator.state for g in t.rng.values()]

        def grads(part):
            for g, s in zip(t.rng.values(), state):
                g.bit_generator.state = s
            for p in t.encoder.tensors.values():
                p.grad = None
            total, parts, _ = t.objective()
            nc.backward(total if part is None else parts[part])
            return {k: p.grad.copy() for k, p in t.encoder.tensors.items()}

        total, sup, uns = grads(None), grads("speaker"), grads("bce")
    for k in total:
        assert nc.relative_error(total[k], sup[k] + uns[k]) < 1e-5


def test_supervised_start_is_near_uniform(utts):
    t = Trainer(cfg(mode="supervised", n_samp=64, epochs=1, steps_per_epoch=1), utts).fit()
    assert t.trace[0][3] == pytest.approx(-np.log(4), abs=0.5)


def test_single_speaker_objective_is_zero(utts):
    one = [u for u in utts if u.speaker_label == "s0"]
    t = Trainer(cfg(mode="supervised", epochs=1), one).fit()
    assert all(abs(v) < 1e-6 for v in t.loss_trace("speaker"))


def test_unsupervised_objective_rises(utts):
    t = Trainer(cfg(epochs=4, steps_per_epoch=15, n_samp=16, lr=3e-3), utts).fit()
    means = [h["mean_bce"] for h in t.history]
    assert means[-1] > means[0]
    assert "neg_same_speaker" in t.history[0]


def test_semi_pretrain_rejects_other_architecture(utts, tmp_path):
    Trainer(cfg(epochs=1), utts).fit(tmp_path)
    other = dataclasses.replace(TINY, fc=(16, 4))
    with pytest.raises(IncompatibleCheckpointError):
        Trainer(cfg(mode="semi_pretrain", pretrained=str(tmp_path / "last.ckpt"), encoder=other), utts)


def test_frozen_fine_tuning_matches_frozen_head(utts, tmp_path):
    Trainer(cfg(epochs=1), utts).fit(tmp_path)
    ck = str(tmp_path / "last.ckpt")
    pre = Trainer(cfg(mode="semi_pretrain", pretrained=ck, encoder_lr=0.0), utts).fit()
    frozen = Trainer(cfg(mode="supervised", pretrained=ck, freeze_encoder=True), utts).fit()
    saved = load_checkpoint(ck)
    for k, t in pre.encoder.tensors.items():
        np.testing.assert_array_equal(t.data, saved.tensors[k])
    assert compute_cer(utts, pre.encoder, pre.head, pre.labels) == compute_cer(utts, frozen.encoder, frozen.head, frozen.labels)


def test_unlabelled_material_rejected_for_supervised(utts):
    bad = [dataclasses.replace(u, speaker_label="-") for u in utts]
    with pytest.raises(LabelMapError):
        Trainer(cfg(mode="supervised"), bad)
    Trainer(cfg(mode="unsupervised"), bad)


@pytest.mark.parametrize("kw", [dict(mode="adversarial"), dict(loss="hinge"), dict(n_samp=1),
                                dict(mode="semi_pretrain"), dict(alpha=1.0), dict(lam=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        cfg(**kw).validate()


def test_config_dict_round_trip():
    c = cfg(mode="semi_joint", lam=0.5)
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lose": "bce"})


def test_cap_per_speaker(utts):
    capped = cap_per_speaker(utts, 0.2, 160)
    per = {}
    for u in capped:
        per[u.speaker_label] = per.get(u.speaker_label, 0) + len(u.samples)
    assert all(v == 3200 for v in per.values())
    assert cap_per_speaker(utts, 0, 160) is utts


def test_models_from_checkpoint(utts, tmp_path):
    t = train_supervised(cfg(epochs=1), utts)
    save_checkpoint(t.to_checkpoint(), tmp_path / "m.ckpt")
    enc, head, labels = models_from_checkpoint(tmp_path / "m.ckpt")
    assert labels == t.labels
    assert compute_cer(utts, enc, head, labels) == compute_cer(utts, t.encoder, t.head, t.labels)


# -- checkpoint format --------------------------------------------------------------------------
def sample_checkpoint():
    rng = np.random.default_rng(0)
    return Checkpoint(
        digest=bytes(range(32)),
        tensors={"a": rng.standard_normal((2, 3)).astype(np.float32), "b": rng.standard_normal(4),
                 "steps": np.arange(3, dtype=np.int64), "scalar": np.float32(2.5).reshape(())},
        rng={"sampler": np.random.default_rng(1).bit_generator.state},
        meta={"epoch": 2, "config": {"x": 1}},
    )


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    ck = sample_checkpoint()
    save_checkpoint(ck, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.digest == ck.digest and back.rng == ck.rng and back.meta == ck.meta and back.epoch == 2
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].tobytes() == v.tobytes()
    save_checkpoint(back, tmp_path / "d.ckpt")
    assert (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "d.ckpt").read_bytes()


def test_checkpoint_header_layout():
    raw = dumps(sample_checkpoint())
    assert raw[:7] == b"LIMCKPT" and raw[7:9] == b"\x01\x00" and raw[9:41] == bytes(range(32))


@pytest.mark.parametrize("cut", [3, 8, 40, 60, -1, -7])
def test_truncated_checkpoint_is_a_format_error(cut):
    raw = dumps(sample_checkpoint())
    with pytest.raises(FormatError):
        loads(raw[:cut])


def test_bad_magic_and_version():
    raw = bytearray(dumps(sample_checkpoint()))
    with pytest.raises(FormatError, match="magic"):
        loads(b"XX" + bytes(raw[2:]))
    raw[7] = 9
    with pytest.raises(FormatError, match="version"):
        loads(bytes(raw))
    with pytest.raises(FormatError, match="trailing"):
        loads(dumps(sample_checkpoint()) + b"\0")
