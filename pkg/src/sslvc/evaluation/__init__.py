from .metrics import (EvalReport, PairResult, SpeakerEmbedder, aggregate, cosine, cosine_similarity,
                      evaluate_pair, mcd, mcd_cepstra, mel_cepstrum, prosody_rmse)
from .probe import LabeledEmbeddings, TSNEResult, collect_embeddings, speaker_probe, tsne, tsne_probe

__all__ = [
    "EvalReport", "PairResult", "SpeakerEmbedder", "aggregate", "cosine", "cosine_similarity",
    "evaluate_pair", "mcd", "mcd_cepstra", "mel_cepstrum", "prosody_rmse",
    "LabeledEmbeddings", "TSNEResult", "collect_embeddings", "speaker_probe", "tsne", "tsne_probe",
]
