"""Adversarial, similarity and reconstruction objectives.

Every adversarial loss returns ``(g_term, d_term)``.  The default ``literal``
form uses the expectations of raw sigmoid scores; ``lsgan`` squares each term
and ``bce`` takes ``-log(1 - p)``, which keeps gradients alive when D saturates.
Inputs may be torch tensors (differentiable) or anything array-like.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np
import torch

from .errors import DomainError, ShapeError

FORMS = ("literal", "lsgan", "bce")


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_scores(*batches):
    for b in batches:
        vals = b.detach()
        if vals.numel() == 0:
            raise DomainError("empty score batch")
        if not bool(torch.all((vals > 0) & (vals < 1))):
            raise DomainError("discriminator scores must lie strictly inside (0, 1)")


def _term(p, form):
    """Expected value of a score term ``p`` (already oriented so that 0 is ideal)."""
    if form == "literal":
        return p.mean()
    if form == "lsgan":
        return (p ** 2).mean()
    if form == "bce":
        return -torch.log1p(-p).mean()
    raise ValueError(f"unknown loss form {form!r}; expected one of {FORMS}")


def loss_rf(d_fake, d_real, form: str = "literal"):
    """Real/fake pair: D pushes reconstructed mels to 0 and ground truth to 1."""
    d_fake, d_real = _as_tensor(d_fake), _as_tensor(d_real)
    _check_scores(d_fake, d_real)
    d_term = _term(d_fake, form) + _term(1 - d_real, form)
    g_term = _term(1 - d_fake, form)
    return g_term, d_term


def loss_cvt(d_converted, d_fake, d_real, form: str = "literal"):
    """Conversion pair: both ground-truth and reconstructed mels are positives."""
    d_converted, d_fake, d_real = _as_tensor(d_converted), _as_tensor(d_fake), _as_tensor(d_real)
    _check_scores(d_converted, d_fake, d_real)
    d_term = _term(d_converted, form) + _term(1 - d_fake, form) + _term(1 - d_real, form)
    g_term = _term(1 - d_converted, form)
    return g_term, d_term


def loss_e(d_external, d_internal, form: str = "literal"):
    d_external, d_internal = _as_tensor(d_external), _as_tensor(d_internal)
    _check_scores(d_external, d_internal)
    d_term = _term(d_external, form) + _term(1 - d_internal, form)
    g_term = _term(1 - d_external, form)
    return g_term, d_term


def loss_rec(y_f, y_g):
    """Mean absolute error between reconstructed and ground-truth mels."""
    y_f, y_g = _as_tensor(y_f), _as_tensor(y_g)
    if y_f.shape != y_g.shape:
        raise ShapeError(f"mel shapes differ: {tuple(y_f.shape)} vs {tuple(y_g.shape)}")
    return (y_f - y_g).abs().mean()


def generator_total(l_e_g, l_cvt_g, l_rf_g, l_rec, lambda_sim: float):
    return lambda_sim * (l_e_g + l_cvt_g) + l_rf_g + l_rec


def discriminator_total(l_e_d, l_cvt_d, l_rf_d, lambda_sim: float):
    return lambda_sim * (l_e_d + l_cvt_d) + l_rf_d


@dataclasses.dataclass
class LossReport:
    l_rec: float
    l_rf_g: float
    l_rf_d: float
    l_cvt_g: float
    l_cvt_d: float
    l_e_g: float
    l_e_d: float
    l_sim_g: float
    l_sim_d: float
    total_g: float
    total_d: float
    lambda_sim: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **self.to_dict()})


def assemble(l_rec, l_rf_g, l_rf_d, l_cvt_g, l_cvt_d, l_e_g, l_e_d, lambda_sim: float) -> LossReport:
    vals = {k: float(v) for k, v in dict(l_rec=l_rec, l_rf_g=l_rf_g, l_rf_d=l_rf_d, l_cvt_g=l_cvt_g,
                                           l_cvt_d=l_cvt_d, l_e_g=l_e_g, l_e_d=l_e_d).items()}
    lam = float(lambda_sim)
    l_sim_g = vals["l_e_g"] + vals["l_cvt_g"]
    l_sim_d = vals["l_e_d"] + vals["l_cvt_d"]
    return LossReport(
        **vals,
        l_sim_g=l_sim_g,
        l_sim_d=l_sim_d,
        total_g=lam * l_sim_g + vals["l_rf_g"] + vals["l_rec"],
        total_d=lam * l_sim_d + vals["l_rf_d"],
        lambda_sim=lam,
    )
