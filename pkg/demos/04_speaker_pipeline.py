"""
From synthetic voices to speaker embeddings
===========================================

The whole pipeline on a toy corpus:

1. synthesize a few speakers (each has its own pitch and formants);
2. train the encoder without labels: two chunks from the same utterance
   should look related, chunks from different utterances should not;
3. freeze it, fit a linear speaker classifier on top, report the error;
4. enroll speakers from d-vectors and score verification trials.

A few minutes on one core.  Bigger settings live in the acceptance tests.
"""

import dataclasses
import tempfile
from pathlib import Path

import numpy as np
from lim.checkpoint import save_checkpoint
from lim.dsp_io import load_manifest, synth_corpus
from lim.encoder import EncoderConfig
from lim.evaluation import compute_cer, compute_eer, enroll_speakers, extract_dvector, score_trials
from lim.sampler import make_trials
from lim.trainer import TrainConfig, Trainer, pair_accuracy

work = Path(tempfile.mkdtemp(prefix="lim_demo_"))
synth_corpus(8, 6, 2.0, seed=3, out_dir=work / "corpus")
manifest = load_manifest(work / "corpus" / "manifest.tsv")
train = manifest.split("train").load()
held_out = manifest.split("enroll").load() + manifest.split("test").load()
print(len(train), "training utterances,", len(held_out), "held out")

# --- unsupervised training ------------------------------------------------
config = TrainConfig(mode="unsupervised", loss="bce", n_samp=32, epochs=3, steps_per_epoch=30,
                     encoder=EncoderConfig.desk(), disc_hidden=128)
trainer = Trainer(config, train)
for _ in range(config.epochs):
    summary = trainer.run_epoch()
    print(f"epoch {summary['epoch']}: mean objective {summary['mean_bce']:+.3f} "
          f"(chance {-2 * np.log(2):.3f}), pair accuracy {summary['accuracy']:.2f}")

acc = pair_accuracy(trainer.encoder, trainer.disc, held_out, 500, np.random.default_rng(0))
print("held-out pair accuracy:", round(acc, 3))
ckpt = work / "unsup.ckpt"
save_checkpoint(trainer.to_checkpoint(), ckpt)

# --- frozen encoder + linear speaker classifier -----------------------------
frozen = Trainer(dataclasses.replace(config, mode="supervised", freeze_encoder=True, pretrained=str(ckpt),
                                     n_samp=128, epochs=1, steps_per_epoch=1000, head_hidden=0), train).fit()
cer = compute_cer(held_out, frozen.encoder, frozen.head, frozen.labels)
print(f"sentence error rate: {cer:.1f}%  (chance {100 * (1 - 1 / 8):.1f}%)")

# --- verification ---------------------------------------------------------------
enc = trainer.encoder
enrollment = {}
for u in manifest.split("enroll").load():
    enrollment.setdefault(u.speaker_label, []).append(u)
models = enroll_speakers(enrollment, enc, layer="embedding")
trials = make_trials(manifest, 0, None, None, np.random.default_rng(0))
vectors = {u.utterance_id: extract_dvector(u, enc, layer="embedding") for u in manifest.split("test").load()}
scores = score_trials(trials, models, vectors)
eer, threshold = compute_eer(scores)
print(f"{len(scores)} trials, EER {eer:.1f}% at cosine {threshold:.3f}")
