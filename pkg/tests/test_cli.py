import hashlib

import numpy as np
import pytest

from lim.checkpoint import load_vectors
from lim.cli import main, resolve_config
from lim.errors import ConfigError


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--speakers", "3", "--utts", "3", "--seconds", "0.5", "--seed", "4", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def config(tmp_path_factory, corpus):
    path = tmp_path_factory.mktemp("cfg") / "run.ini"
    path.write_text(
        "[run]\n"
        f"manifest = {corpus / 'manifest.tsv'}\n"
        "[train]\nmode = supervised\nn_samp = 8\nepochs = 1\nsteps_per_epoch = 3\nhead_hidden = 32\nseed = 2\n"
        "[encoder]\npreset = tiny\n"
    )
    return path


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_synth_counts(tmp_path):
    assert main(["synth", "--speakers", "20", "--utts", "8", "--seconds", "0.25", "--out", str(tmp_path)]) == 0
    lines = [line for line in (tmp_path / "manifest.tsv").read_text().splitlines() if not line.startswith("#")]
    splits = [line.split("\t")[3] for line in lines]
    assert len(lines) == 160
    assert [splits.count(s) for s in ("train", "enroll", "test")] == [120, 20, 20]


def test_synth_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--speakers", "2", "--utts", "3", "--seconds", "0.3", "--seed", "9", "--out", str(tmp_path / name)]) == 0
    assert digest(tmp_path / "a" / "manifest.tsv") == digest(tmp_path / "b" / "manifest.tsv")
    assert digest(tmp_path / "a" / "wav" / "spk001_u02.wav") == digest(tmp_path / "b" / "wav" / "spk001_u02.wav")


def test_synth_rejects_single_utterance(tmp_path, capsys):
    assert main(["synth", "--utts", "1", "--out", str(tmp_path)]) == 2
    assert "3-way" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--manifest", "m.tsv", "--task", "id"]) == 2


def test_unknown_key_rejected_before_training(tmp_path, config, capsys):
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "r"), "lose=bce"]) == 2
    assert "lose" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()
    with pytest.raises(ConfigError, match="train.bogus"):
        resolve_config(None, ["train.bogus=1"])
    with pytest.raises(ConfigError):
        resolve_config(None, ["n_samp=many"])


def test_semi_joint_needs_labels(tmp_path, corpus, config):
    m = tmp_path / "unlabelled.tsv"
    rows = []
    for line in (corpus / "manifest.tsv").read_text().splitlines():
        if line.startswith("#"):
            continue
        uid, _, path, split = line.split("\t")
        rows.append(f"{uid}\t-\t{corpus / path}\t{split}")
    m.write_text("\n".join(rows) + "\n")
    code = main(["train", "--config", str(config), "--out", str(tmp_path / "r"), f"manifest={m}", "mode=semi_joint"])
    assert code == 2


def test_train_eval_extract_round_trip(tmp_path, corpus, config, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(run), "loss=triplet"]) == 0
    for name in ("config.ini", "train_log.tsv", "last.ckpt", "best.ckpt", "final.ckpt"):
        assert (run / name).is_file()
    assert len((run / "train_log.tsv").read_text().splitlines()) == 3

    # the resolved config reproduces the run bit for bit
    again = tmp_path / "again"
    assert main(["train", "--config", str(run / "config.ini"), "--out", str(again)]) == 0
    assert digest(run / "final.ckpt") == digest(again / "final.ckpt")
    assert (run / "train_log.tsv").read_text() == (again / "train_log.tsv").read_text()

    ck, man = str(run / "final.ckpt"), str(corpus / "manifest.tsv")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", ck, "--manifest", man, "--task", "id", "--split", "train", "--out", str(tmp_path / "ev")]) == 0
    assert capsys.readouterr().out.startswith("cer_pct=")
    assert main(["eval", "--checkpoint", ck, "--manifest", man, "--task", "verify", "--out", str(tmp_path / "ev")]) == 0
    metrics = dict(line.split("=") for line in (tmp_path / "ev" / "metrics.txt").read_text().split())
    assert 0 <= float(metrics["eer_pct"]) <= 100 and int(metrics["n_trials"]) == 9
    assert len((tmp_path / "ev" / "scores.tsv").read_text().splitlines()) == 9

    out1, out2 = tmp_path / "v1.lim", tmp_path / "v2.lim"
    assert main(["extract", "--checkpoint", ck, "--manifest", man, "--out", str(out1)]) == 0
    assert main(["extract", "--checkpoint", ck, "--manifest", man, "--out", str(out2)]) == 0
    vecs = load_vectors(out1)
    assert len(vecs) == 9
    assert all(abs(np.linalg.norm(v) - 1) < 1e-6 for v in vecs.values())
    assert out1.read_bytes() == out2.read_bytes()


def test_resume_continues_a_run(tmp_path, config):
    full = tmp_path / "full"
    assert main(["train", "--config", str(config), "--out", str(full), "epochs=2", "mode=unsupervised"]) == 0
    part = tmp_path / "part"
    assert main(["train", "--config", str(config), "--out", str(part), "epochs=1", "mode=unsupervised"]) == 0
    assert main(["train", "--config", str(config), "--out", str(part), "epochs=2", "mode=unsupervised", "--resume"]) == 0
    assert (full / "train_log.tsv").read_text() == (part / "train_log.tsv").read_text()
    assert digest(full / "final.ckpt") == digest(part / "final.ckpt")


def test_incompatible_checkpoint_is_runtime_error(tmp_path, config, corpus):
    run = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(run)]) == 0
    raw = bytearray((run / "final.ckpt").read_bytes())
    raw[9] ^= 0xFF  # corrupt the architecture digest
    (run / "bad.ckpt").write_bytes(bytes(raw))
    code = main(["eval", "--checkpoint", str(run / "bad.ckpt"), "--manifest", str(corpus / "manifest.tsv"), "--task", "id"])
    assert code == 1
