"""Desk-scale reproduction of the disentanglement effect.

Two generators are trained on a :class:`~sslvc.fixtures.FeatureWorld` whose
only speaker cue is a constant feature-channel offset: one with the
similarity-adversarial loss switched on after warmup, one without.  Their
content embeddings are then probed for speaker identity.
"""

from __future__ import annotations

import dataclasses
import logging
import time

import numpy as np
import torch

from .discriminators import EmbeddingDiscriminatorConfig, MelDiscriminatorConfig
from .evaluation.metrics import SpeakerEmbedder, cosine
from .evaluation.probe import LabeledEmbeddings, collect_embeddings, speaker_probe, tsne_probe
from .fixtures import FeatureWorld
from .model import GeneratorConfig
from .tensorio import CorpusDataset, UtteranceRecord
from .training import BatchSampler, Trainer, TrainingConfig

log = logging.getLogger(__name__)


@dataclasses.dataclass
class DisentanglementSetup:
    feature_dim: int = 32
    hidden_dim: int = 32
    ffn_dim: int = 64
    blocks: int = 1
    n_train_target: int = 48
    n_train_external: int = 48
    n_probe_per_speaker: int = 50
    frames: tuple = (48, 80)
    crop_frames: int = 32
    batch_size: int = 8
    lr_g: float = 2e-4
    lr_d: float = 1e-3
    warmup_steps: int = 500
    post_warmup_steps: int = 5000
    offset_scale: float = 3.0
    offset_channels: int = 8
    seed: int = 0
    perplexity: float = 30.0
    # the literal form saturates its discriminators at this scale
    loss_form: str = "bce"

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(input_dim=self.feature_dim, hidden_dim=self.hidden_dim,
                               encoder_blocks=self.blocks, decoder_blocks=self.blocks, attention_heads=2,
                               conv_kernel=5, ffn_dim=self.ffn_dim, dropout=0.0)

    def training_config(self, with_sim: bool) -> TrainingConfig:
        return TrainingConfig(steps=self.warmup_steps + self.post_warmup_steps, batch_size=self.batch_size,
                              lr_g=self.lr_g, lr_d=self.lr_d, warmup_steps=self.warmup_steps,
                              lambda_sim_after_warmup=1.0 if with_sim else 0.0,
                              seed=self.seed, crop_frames=self.crop_frames, loss_form=self.loss_form,
                              checkpoint_every=10**9, validate_every=10**9)


@dataclasses.dataclass
class RunResult:
    with_sim: bool
    probe_accuracy: float
    silhouette: float
    cos_sim: float
    final_l_rec: float
    seconds: float
    tsne_points: np.ndarray
    tsne_labels: np.ndarray


def _make_corpora(setup: DisentanglementSetup):
    world = FeatureWorld(dim=setup.feature_dim, offset_scale=setup.offset_scale,
                         offset_channels=setup.offset_channels, seed=setup.seed)
    rng = np.random.default_rng([setup.seed, 100])

    def utts(speaker, n, tag):
        recs, feats, mels = [], [], []
        for i in range(n):
            f, m = world.utterance(speaker, int(rng.integers(*setup.frames)), rng)
            recs.append(UtteranceRecord(id=f"{speaker}-{tag}-{i:03d}", speaker=speaker, audio_path="",
                                        corpus_tag="target" if speaker == "target" else "external"))
            feats.append(f)
            mels.append(m)
        return recs, feats, mels

    target = CorpusDataset.from_arrays(*utts("target", setup.n_train_target, "train"))
    r, f, _ = utts("external", setup.n_train_external, "train")
    external = CorpusDataset.from_arrays(r, f)
    probe_t = utts("target", setup.n_probe_per_speaker, "probe")
    probe_e = utts("external", setup.n_probe_per_speaker, "probe")
    return target, external, probe_t, probe_e


def run_once(setup: DisentanglementSetup, with_sim: bool, corpora=None) -> RunResult:
    target, external, probe_t, probe_e = corpora or _make_corpora(setup)
    gen_cfg = setup.generator_config()
    tcfg = setup.training_config(with_sim)
    trainer = Trainer(gen_cfg, tcfg,
                      MelDiscriminatorConfig(channels=(64, 64, 64, 64)),
                      EmbeddingDiscriminatorConfig(input_dim=gen_cfg.hidden_dim, channels=(64, 64, 64)))
    sampler = BatchSampler(target, external, tcfg.batch_size, tcfg.crop_frames, gen_cfg.upsample_factor, tcfg.seed)
    t0 = time.time()
    recent = []
    while trainer.step < tcfg.steps:
        report = trainer.train_step(sampler(trainer.step))
        recent = (recent + [report.l_rec])[-100:]
    seconds = time.time() - t0

    items = [(f, "target") for f in probe_t[1]] + [(f, "external") for f in probe_e[1]]
    data = collect_embeddings(trainer.generator, items)
    acc = speaker_probe(data, seed=setup.seed)
    ts = tsne_probe(data, perplexity=setup.perplexity, seed=setup.seed)

    embedder = SpeakerEmbedder()
    ref = embedder.embed_mel(np.concatenate(probe_t[2]))
    sims = []
    for f in probe_e[1]:
        mel, _ = trainer.generator.convert(f)
        sims.append(cosine(embedder.embed_mel(mel), ref))
    return RunResult(with_sim=with_sim, probe_accuracy=acc, silhouette=ts.silhouette,
                     cos_sim=float(np.mean(sims)), final_l_rec=float(np.mean(recent)), seconds=seconds,
                     tsne_points=ts.points, tsne_labels=ts.labels)


def run_disentanglement(setup: DisentanglementSetup | None = None) -> tuple[RunResult, RunResult]:
    """Returns (without_sim, with_sim) results on identical data and initialisation."""
    setup = setup or DisentanglementSetup()
    corpora = _make_corpora(setup)
    without = run_once(setup, False, corpora)
    log.info("without L_sim: %s", without)
    with_ = run_once(setup, True, corpora)
    log.info("with L_sim: %s", with_)
    return without, with_


# -- reconstruction-only overfit ----------------------------------------------------

@dataclasses.dataclass
class OverfitSetup:
    n_utterances: int = 16
    seconds: tuple = (1.0, 1.6)
    feature_dim: int = 256
    hidden_dim: int = 128
    ffn_dim: int = 256
    blocks: int = 1
    steps: int = 2000
    batch_size: int = 8
    crop_frames: int = 64
    lr: float = 1e-3
    eval_every: int = 250
    seed: int = 0


@dataclasses.dataclass
class OverfitResult:
    curve: list  # (step, full-utterance l_rec)
    first_below: dict  # threshold -> first evaluated step at or below it
    seconds: float
    generator: object
    features: list
    mels: list


def overfit_corpus(setup: OverfitSetup):
    """Mock-extractor features and mels for ``n_utterances`` synthetic target-voice clips."""
    from . import dsp
    from .fixtures import default_voices, synth_utterance
    from .ssl_frontend import ExtractorSpec, mock_features

    spec = ExtractorSpec(kind="mock", dim=setup.feature_dim)
    voice, _ = default_voices(0)
    rng = np.random.default_rng(setup.seed)
    feats, mels = [], []
    for _ in range(setup.n_utterances):
        wav = synth_utterance(voice, rng.uniform(*setup.seconds), rng)
        f = mock_features(spec, wav)
        m = dsp.extract_mel(wav).frames
        t = min(f.shape[0], m.shape[0] // 2)
        feats.append(f[:t])
        mels.append(m[: 2 * t])
    return feats, mels


def full_l_rec(generator, feats, mels) -> float:
    vals = []
    generator.eval()
    with torch.no_grad():
        for f, m in zip(feats, mels):
            y, _ = generator(torch.from_numpy(f)[None])
            vals.append(float((y[0] - torch.from_numpy(m)).abs().mean()))
    generator.train()
    return float(np.mean(vals))


def run_overfit(setup: OverfitSetup | None = None, thresholds=(0.15, 0.2)) -> OverfitResult:
    """Train the generator on L_rec alone and track full-utterance reconstruction error."""
    from .model import Generator

    setup = setup or OverfitSetup()
    feats, mels = overfit_corpus(setup)
    torch.manual_seed(setup.seed)
    cfg = GeneratorConfig(input_dim=setup.feature_dim, hidden_dim=setup.hidden_dim, encoder_blocks=setup.blocks,
                          decoder_blocks=setup.blocks, attention_heads=2, conv_kernel=5, ffn_dim=setup.ffn_dim,
                          dropout=0.0)
    gen = Generator(cfg)
    opt = torch.optim.Adam(gen.parameters(), lr=setup.lr, betas=(0.8, 0.99))
    rng = np.random.default_rng([setup.seed, 7])
    curve, first = [], {}
    t0 = time.time()
    for step in range(1, setup.steps + 1):
        idx = rng.choice(len(feats), size=setup.batch_size, replace=False)
        win = min(setup.crop_frames, min(feats[i].shape[0] for i in idx))
        xb, yb = [], []
        for i in idx:
            s = int(rng.integers(0, feats[i].shape[0] - win + 1))
            xb.append(feats[i][s:s + win])
            yb.append(mels[i][2 * s:2 * (s + win)])
        y, _ = gen(torch.from_numpy(np.stack(xb)))
        loss = (y - torch.from_numpy(np.stack(yb))).abs().mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % setup.eval_every == 0 or step == setup.steps:
            val = full_l_rec(gen, feats, mels)
            curve.append((step, val))
            log.info("overfit step %d l_rec %.4f", step, val)
            for th in thresholds:
                if val <= th and th not in first:
                    first[th] = step
    return OverfitResult(curve=curve, first_below=first, seconds=time.time() - t0, generator=gen,
                         features=feats, mels=mels)
