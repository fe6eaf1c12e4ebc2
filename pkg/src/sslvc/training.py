"""Two-corpus adversarial training loop.

Batch composition, crop offsets and dropout noise are all derived from
``(seed, step)``, so a run resumed from a checkpoint replays exactly the
batches the unbroken run would have seen.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import losses
from .discriminators import (DiscriminatorGroup, EmbeddingDiscriminatorConfig,
                             MelDiscriminatorConfig)
from .errors import ConfigError, DomainError, PreflightError, TrainingError
from .model import Generator, GeneratorConfig
from .tensorio import CorpusDataset, UtteranceRecord, atomic_write_bytes

log = logging.getLogger(__name__)


@dataclasses.dataclass
class TrainingConfig:
    steps: int = 100000
    batch_size: int = 16
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    betas: tuple = (0.8, 0.99)
    warmup_steps: int = 5000
    lambda_sim_after_warmup: float = 1.0
    seed: int = 0
    checkpoint_every: int = 5000
    validate_every: int = 1000
    crop_frames: int = 128
    loss_form: str = "literal"
    workers: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.steps < 0 or self.batch_size < 1 or self.crop_frames < 1:
            raise ConfigError("steps >= 0, batch_size >= 1 and crop_frames >= 1 required")
        if self.loss_form not in losses.FORMS:
            raise ConfigError(f"loss_form must be one of {losses.FORMS}")
        if self.checkpoint_every < 1 or self.validate_every < 1:
            raise ConfigError("checkpoint_every and validate_every must be >= 1")


def lambda_sim(step: int, warmup_steps: int, after: float = 1.0) -> float:
    """Weight of the similarity loss: 0 before ``warmup_steps``, ``after`` from then on."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return 0.0 if step < warmup_steps else float(after)


@dataclasses.dataclass
class TrainingBatch:
    target_features: torch.Tensor  # [B, T_s, D]
    target_mels: torch.Tensor  # [B, r*T_s, n_mels]
    external_features: torch.Tensor  # [B, T_e, D]
    target_ids: list
    external_ids: list


def _epoch_index(seed: int, stream: int, n: int, position: int) -> int:
    epoch, offset = divmod(position, n)
    perm = np.random.default_rng([seed, stream, epoch]).permutation(n)
    return int(perm[offset])


def align_pair(features: np.ndarray, mel: np.ndarray, factor: int):
    """Trim so that len(mel) == factor * len(features)."""
    t = min(features.shape[0], mel.shape[0] // factor)
    if t < 1:
        raise ConfigError("utterance too short to align features with mel frames")
    return features[:t], mel[: t * factor]


class BatchSampler:
    """Deterministic (seed, step) -> TrainingBatch.

    Target and external corpora cycle through their own epochs.
    """

    def __init__(self, target: CorpusDataset, external: CorpusDataset, batch_size: int,
                 crop_frames: int, factor: int, seed: int):
        if len(target) == 0:
            raise ConfigError("no target training utterances")
        if len(external) == 0:
            raise ConfigError("no external training utterances")
        for rec in target.records:
            if rec.corpus_tag != "target":
                raise ConfigError(f"{rec.id} is not a target-corpus record")
        for rec in external.records:
            if rec.corpus_tag != "external":
                raise ConfigError(f"{rec.id} is not an external-corpus record")
        self.target, self.external = target, external
        self.batch_size, self.crop, self.factor, self.seed = batch_size, crop_frames, factor, seed
        self._aligned = [align_pair(f, m, factor) for _, f, m in (target[i] for i in range(len(target)))]

    def __call__(self, step: int) -> TrainingBatch:
        b = self.batch_size
        t_idx = [_epoch_index(self.seed, 0, len(self.target), step * b + i) for i in range(b)]
        e_idx = [_epoch_index(self.seed, 1, len(self.external), step * b + i) for i in range(b)]
        rng = np.random.default_rng([self.seed, 2, step])

        t_pairs = [self._aligned[i] for i in t_idx]
        win = min(self.crop, min(f.shape[0] for f, _ in t_pairs))
        feats, mels = [], []
        for f, m in t_pairs:
            s = int(rng.integers(0, f.shape[0] - win + 1))
            feats.append(f[s:s + win])
            mels.append(m[s * self.factor:(s + win) * self.factor])

        e_feats = [self.external.features[i] for i in e_idx]
        e_win = min(self.crop, min(f.shape[0] for f in e_feats))
        ext = []
        for f in e_feats:
            s = int(rng.integers(0, f.shape[0] - e_win + 1))
            ext.append(f[s:s + e_win])

        return TrainingBatch(
            target_features=torch.from_numpy(np.stack(feats)),
            target_mels=torch.from_numpy(np.stack(mels)),
            external_features=torch.from_numpy(np.stack(ext)),
            target_ids=[self.target.records[i].id for i in t_idx],
            external_ids=[self.external.records[i].id for i in e_idx],
        )


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.default_rng([seed, 3, step]).integers(0, 2**62))


class Trainer:
    """Owns the generator, the discriminator group and both optimizers."""

    def __init__(self, gen_cfg: GeneratorConfig, train_cfg: TrainingConfig,
                 mel_disc_cfg: MelDiscriminatorConfig | None = None,
                 emb_disc_cfg: EmbeddingDiscriminatorConfig | None = None):
        self.gen_cfg, self.cfg = gen_cfg, train_cfg
        mel_disc_cfg = mel_disc_cfg or MelDiscriminatorConfig(n_mels=gen_cfg.n_mels)
        emb_disc_cfg = emb_disc_cfg or EmbeddingDiscriminatorConfig(input_dim=gen_cfg.hidden_dim)
        if emb_disc_cfg.input_dim != gen_cfg.hidden_dim or mel_disc_cfg.n_mels != gen_cfg.n_mels:
            raise ConfigError("discriminator input sizes must match the generator")
        self.mel_disc_cfg, self.emb_disc_cfg = mel_disc_cfg, emb_disc_cfg
        torch.manual_seed(train_cfg.seed)
        self.generator = Generator(gen_cfg)
        self.discriminators = DiscriminatorGroup(mel_disc_cfg, emb_disc_cfg)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=train_cfg.lr_g, betas=train_cfg.betas)
        self.opt_d = torch.optim.Adam(self.discriminators.parameters(), lr=train_cfg.lr_d, betas=train_cfg.betas)
        self.step = 0

    def lambda_sim(self, step: int) -> float:
        return lambda_sim(step, self.cfg.warmup_steps, self.cfg.lambda_sim_after_warmup)

    def discriminator_objective(self, y_g, y_f, y_c, e_i, e_o, lam: float):
        """(total_d, l_rf_d, l_cvt_d, l_e_d); generator outputs are detached here."""
        D, form = self.discriminators, self.cfg.loss_form
        y_f, y_c, e_i, e_o = y_f.detach(), y_c.detach(), e_i.detach(), e_o.detach()
        _, l_rf_d = losses.loss_rf(D.real_fake(y_f), D.real_fake(y_g), form)
        _, l_cvt_d = losses.loss_cvt(D.conversion(y_c), D.conversion(y_f), D.conversion(y_g), form)
        _, l_e_d = losses.loss_e(D.embedding(e_o), D.embedding(e_i), form)
        return losses.discriminator_total(l_e_d, l_cvt_d, l_rf_d, lam), l_rf_d, l_cvt_d, l_e_d

    def generator_objective(self, y_g, y_f, y_c, e_i, e_o, lam: float):
        """(total_g, l_rec, l_rf_g, l_cvt_g, l_e_g)."""
        D, form = self.discriminators, self.cfg.loss_form
        l_rf_g, _ = losses.loss_rf(D.real_fake(y_f), D.real_fake(y_g), form)
        l_cvt_g, _ = losses.loss_cvt(D.conversion(y_c), D.conversion(y_f), D.conversion(y_g), form)
        l_e_g, _ = losses.loss_e(D.embedding(e_o), D.embedding(e_i), form)
        l_rec = losses.loss_rec(y_f, y_g)
        return losses.generator_total(l_e_g, l_cvt_g, l_rf_g, l_rec, lam), l_rec, l_rf_g, l_cvt_g, l_e_g

    def forward_batch(self, batch: TrainingBatch):
        """(y_g, y_f, y_c, e_i, e_o) for one batch."""
        y_f, e_i = self.generator(batch.target_features)
        y_c, e_o = self.generator(batch.external_features)
        return batch.target_mels, y_f, y_c, e_i, e_o

    def train_step(self, batch: TrainingBatch) -> losses.LossReport:
        """One discriminator update followed by one generator update."""
        step = self.step
        lam = self.lambda_sim(step)
        torch.manual_seed(_step_seed(self.cfg.seed, step))
        self.generator.train()
        self.discriminators.train()
        outputs = self.forward_batch(batch)

        self.opt_d.zero_grad(set_to_none=True)
        try:
            total_d, l_rf_d, l_cvt_d, l_e_d = self.discriminator_objective(*outputs, lam)
        except DomainError as exc:  # NaN scores fail the domain check first
            self._fail(f"{exc} (non-finite activations?)", batch)
        self._check_finite(total_d, batch, "total_d")
        total_d.backward()
        self.opt_d.step()

        # generator update against the refreshed discriminators
        self.opt_g.zero_grad(set_to_none=True)
        self.discriminators.requires_grad_(False)
        try:
            total_g, l_rec, l_rf_g, l_cvt_g, l_e_g = self.generator_objective(*outputs, lam)
            self._check_finite(total_g, batch, "total_g")
            total_g.backward()
        finally:
            self.discriminators.requires_grad_(True)
        self.opt_g.step()

        self.step += 1
        return losses.assemble(l_rec.item(), l_rf_g.item(), l_rf_d.item(), l_cvt_g.item(), l_cvt_d.item(),
                               l_e_g.item(), l_e_d.item(), lam)

    def _fail(self, message, batch):
        raise TrainingError(json.dumps({
            "message": f"{message} at step {self.step}",
            "step": self.step,
            "target_ids": batch.target_ids,
            "external_ids": batch.external_ids,
        }))

    def _check_finite(self, value, batch, name):
        if not math.isfinite(value.item()):
            self._fail(f"non-finite {name}", batch)

    @torch.no_grad()
    def validation_loss(self, dataset: CorpusDataset) -> float:
        """Mean full-length reconstruction L1 over a target-corpus dataset."""
        if len(dataset) == 0:
            return float("nan")
        self.generator.eval()
        vals = []
        for _, feats, mel in (dataset[i] for i in range(len(dataset))):
            f, m = align_pair(feats, mel, self.gen_cfg.upsample_factor)
            y_f, _ = self.generator(torch.from_numpy(f)[None])
            vals.append(losses.loss_rec(y_f[0], torch.from_numpy(m)).item())
        self.generator.train()
        return float(np.mean(vals))

    # -- checkpoints -------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "generator": self.generator.state_dict(),
            "discriminators": self.discriminators.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "step": self.step,
        }

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"ckpt_{self.step:07d}.pt"
        tmp = path.with_suffix(".pt.tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        meta = {
            "step": self.step,
            "generator_config": self.gen_cfg.to_dict(),
            "config_hash": self.gen_cfg.config_hash(),
            "training_config": dataclasses.asdict(self.cfg),
            "mel_discriminator_config": dataclasses.asdict(self.mel_disc_cfg),
            "embedding_discriminator_config": dataclasses.asdict(self.emb_disc_cfg),
        }
        atomic_write_bytes(sidecar_path(path), json.dumps(meta, indent=2).encode())
        return path

    def load(self, path) -> None:
        meta = read_sidecar(path)
        if meta["config_hash"] != self.gen_cfg.config_hash():
            raise ConfigError(f"checkpoint {path} was trained with a different generator config")
        state = torch.load(path, map_location="cpu", weights_only=True)
        self.generator.load_state_dict(state["generator"])
        self.discriminators.load_state_dict(state["discriminators"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.step = int(state["step"])


def sidecar_path(ckpt) -> Path:
    return Path(ckpt).with_suffix(".json")


def read_sidecar(ckpt) -> dict:
    p = sidecar_path(ckpt)
    if not p.exists():
        raise ConfigError(f"checkpoint metadata missing: {p}")
    return json.loads(p.read_text())


def load_generator(ckpt, expected_input_dim: int | None = None) -> Generator:
    """Rebuild a generator from a checkpoint, verifying its config hash."""
    meta = read_sidecar(ckpt)
    cfg = GeneratorConfig(**meta["generator_config"])
    if cfg.config_hash() != meta["config_hash"]:
        raise ConfigError(f"config hash mismatch in {ckpt}")
    if expected_input_dim is not None and cfg.input_dim != expected_input_dim:
        raise ConfigError(f"checkpoint expects {cfg.input_dim}-dim features, extractor provides "
                          f"{expected_input_dim}")
    gen = Generator(cfg)
    state = torch.load(ckpt, map_location="cpu", weights_only=True)
    gen.load_state_dict(state["generator"])
    gen.eval()
    return gen


def preflight(records: Sequence[UtteranceRecord]) -> None:
    gaps = []
    for rec in records:
        if rec.feature_path is None or not Path(rec.feature_path).exists():
            gaps.append(f"{rec.id}: features {rec.feature_path}")
        if rec.corpus_tag == "target" and (rec.mel_path is None or not Path(rec.mel_path).exists()):
            gaps.append(f"{rec.id}: mel {rec.mel_path}")
    if gaps:
        raise PreflightError("missing prepared files:\n  " + "\n  ".join(gaps))


def latest_checkpoint(directory) -> Path | None:
    ckpts = sorted(Path(directory).glob("ckpt_*.pt"))
    return ckpts[-1] if ckpts else None


def train(gen_cfg: GeneratorConfig, train_cfg: TrainingConfig, train_records: Sequence[UtteranceRecord],
          val_records: Sequence[UtteranceRecord], workdir, resume=None,
          mel_disc_cfg: MelDiscriminatorConfig | None = None,
          emb_disc_cfg: EmbeddingDiscriminatorConfig | None = None) -> list[Path]:
    """Run (or resume) training; returns the checkpoint paths written by this call.

    Logs one JSON line per step to ``workdir/train_log.jsonl`` and validation
    losses to ``workdir/val_log.jsonl``.
    """
    preflight(list(train_records) + list(val_records))
    workdir = Path(workdir)
    ckpt_dir = workdir / "checkpoints"
    workdir.mkdir(parents=True, exist_ok=True)

    target = CorpusDataset([r for r in train_records if r.corpus_tag == "target"], workers=train_cfg.workers)
    external = CorpusDataset([r for r in train_records if r.corpus_tag == "external"], load_mels=False,
                             workers=train_cfg.workers)
    val = CorpusDataset(val_records, workers=train_cfg.workers)
    sampler = BatchSampler(target, external, train_cfg.batch_size, train_cfg.crop_frames,
                           gen_cfg.upsample_factor, train_cfg.seed)

    trainer = Trainer(gen_cfg, train_cfg, mel_disc_cfg, emb_disc_cfg)
    written = []
    if resume is not None:
        trainer.load(resume)
        log.info("resumed from %s at step %d", resume, trainer.step)
    else:
        written.append(trainer.save(ckpt_dir))

    train_log = workdir / "train_log.jsonl"
    val_log = workdir / "val_log.jsonl"
    t0 = time.time()
    with open(train_log, "a") as tlog, open(val_log, "a") as vlog:
        if resume is None and len(val):
            vlog.write(json.dumps({"step": 0, "val_l_rec": trainer.validation_loss(val)}) + "\n")
        while trainer.step < train_cfg.steps:
            step = trainer.step
            report = trainer.train_step(sampler(step))
            tlog.write(report.to_json(step=step, wall_time=time.time() - t0) + "\n")
            done = trainer.step
            if done % train_cfg.validate_every == 0 and len(val):
                vlog.write(json.dumps({"step": done, "val_l_rec": trainer.validation_loss(val)}) + "\n")
                vlog.flush()
            if done % train_cfg.checkpoint_every == 0 or done == train_cfg.steps:
                tlog.flush()
                written.append(trainer.save(ckpt_dir))
    return written
