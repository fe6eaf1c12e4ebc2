"""Speaker-leakage probes on content embeddings: t-SNE layout and a linear classifier.

Instance normalisation drives every channel's temporal mean to zero (and its
variance to one), so a plain utterance-mean summary carries no information.
The default summary is therefore the temporal mean of the frame outer
products, i.e. the upper triangle of the channel second-moment matrix
(``summary="moments"``).  ``"frames"`` samples individual frames instead, and
``"mean"`` is kept for embeddings that are not instance-normalised.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.manifold import TSNE
from sklearn.metrics import balanced_accuracy_score, silhouette_score

from ..errors import ParameterError


@dataclasses.dataclass
class LabeledEmbeddings:
    """Variable-length content embeddings with one speaker label each."""

    embeddings: list  # of [T, H] arrays
    speakers: list

    def __post_init__(self):
        if len(self.embeddings) != len(self.speakers):
            raise ParameterError("embeddings and speakers differ in length")


SUMMARIES = ("moments", "frames", "mean")


def summarize(data: LabeledEmbeddings, summary: str = "moments", frames_per_utt: int = 8, seed: int = 0):
    """Return (points [N, F], labels [N], utterance index [N])."""
    rng = np.random.default_rng(seed)
    pts, labels, groups = [], [], []
    for u, (emb, spk) in enumerate(zip(data.embeddings, data.speakers)):
        emb = np.asarray(emb, dtype=np.float64)
        if summary == "moments":
            iu = np.triu_indices(emb.shape[1])
            rows = (emb.T @ emb / emb.shape[0])[iu][None]
        elif summary == "mean":
            rows = emb.mean(axis=0, keepdims=True)
        elif summary == "frames":
            k = min(frames_per_utt, emb.shape[0])
            rows = emb[np.sort(rng.choice(emb.shape[0], size=k, replace=False))]
        else:
            raise ParameterError(f"unknown summary {summary!r}")
        pts.append(rows)
        labels += [spk] * rows.shape[0]
        groups += [u] * rows.shape[0]
    return np.concatenate(pts), np.array(labels), np.array(groups)


@dataclasses.dataclass
class TSNEResult:
    points: np.ndarray  # [N, 2]
    labels: np.ndarray
    silhouette: float


def tsne(points: np.ndarray, perplexity: float = 30.0, seed: int = 0) -> np.ndarray:
    """Exact t-SNE: 1000 iterations, exaggeration 12 for the first 250, learning rate 200."""
    n = points.shape[0]
    if n < 3 * perplexity:
        raise ParameterError(f"{n} points is fewer than 3 * perplexity ({3 * perplexity:g})")
    if n > 5000:
        raise ParameterError("exact t-SNE is limited to 5000 points")
    model = TSNE(n_components=2, perplexity=perplexity, early_exaggeration=12.0, learning_rate=200.0,
                 max_iter=1000, method="exact", init="random", random_state=seed)
    return model.fit_transform(np.asarray(points, dtype=np.float64))


def tsne_probe(data: LabeledEmbeddings, perplexity: float = 30.0, seed: int = 0, summary: str = "moments",
               frames_per_utt: int = 8) -> TSNEResult:
    points, labels, _ = summarize(data, summary, frames_per_utt, seed)
    if len(set(labels.tolist())) < 2:
        raise ParameterError("t-SNE probe needs at least two speakers")
    if points.shape[0] < 50:
        raise ParameterError(f"t-SNE probe needs at least 50 points, got {points.shape[0]}")
    xy = tsne(points, perplexity, seed)
    return TSNEResult(points=xy, labels=labels, silhouette=float(silhouette_score(xy, labels)))


def _utterance_split(labels_per_utt: np.ndarray, test_fraction: float, seed: int):
    """Per-speaker 80/20 split of utterance indices."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for spk in sorted(set(labels_per_utt.tolist())):
        idx = np.nonzero(labels_per_utt == spk)[0]
        idx = idx[rng.permutation(idx.size)]
        n_test = max(1, int(round(test_fraction * idx.size))) if idx.size > 1 else 0
        test += idx[:n_test].tolist()
        train += idx[n_test:].tolist()
    return np.array(train), np.array(test)


def speaker_probe(data: LabeledEmbeddings, seed: int = 0, test_fraction: float = 0.2, summary: str = "moments",
                  frames_per_utt: int = 8) -> float:
    """Held-out balanced accuracy of multinomial logistic regression predicting the speaker.

    The split is made over utterances, so no utterance contributes to both
    sides.  Chance level is 1 / n_speakers.
    """
    speakers = np.array(data.speakers)
    if len(set(speakers.tolist())) < 2:
        raise ParameterError("speaker probe needs at least two speakers")
    train_u, test_u = _utterance_split(speakers, test_fraction, seed)
    if test_u.size == 0 or train_u.size == 0:
        raise ParameterError("not enough utterances for an 80/20 split")
    points, labels, groups = summarize(data, summary, frames_per_utt, seed)
    tr = np.isin(groups, train_u)
    te = np.isin(groups, test_u)
    mu, sd = points[tr].mean(axis=0), points[tr].std(axis=0) + 1e-8
    clf = LogisticRegression(max_iter=2000, class_weight="balanced")
    clf.fit((points[tr] - mu) / sd, labels[tr])
    return float(balanced_accuracy_score(labels[te], clf.predict((points[te] - mu) / sd)))


def collect_embeddings(generator, items: Sequence[tuple]) -> LabeledEmbeddings:
    """Run ``generator.encode`` over (features [T, D], speaker) pairs in eval mode."""
    import torch

    embs, spks = [], []
    generator.eval()
    with torch.no_grad():
        for feats, spk in items:
            x = torch.as_tensor(np.asarray(feats), dtype=next(generator.parameters()).dtype)[None]
            embs.append(generator.encode(x)[0].cpu().numpy())
            spks.append(spk)
    return LabeledEmbeddings(embs, spks)
