"""Command-line entry point: ``sslvc <command> --config project.toml [--set section.key=value ...]``.

Commands exit 0 on success.  Any failure prints one JSON line
``{"error": {"kind": ..., "message": ...}}`` on stderr and exits nonzero
(2 for input or configuration problems, 1 for anything unexpected).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import shlex
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import dsp, plotting, ssl_frontend
from .config import ProjectConfig, load_config
from .errors import ConfigError, InputError, ParameterError, VCError
from .evaluation import metrics
from .evaluation.probe import collect_embeddings, speaker_probe, tsne_probe
from .tensorio import (UtteranceRecord, augment_records, build_manifest, parallel_map, read_manifest,
                       read_tensor, write_manifest, write_tensor)
from .training import latest_checkpoint, load_generator, train

log = logging.getLogger("sslvc")

MANIFESTS = ("train.jsonl", "val.jsonl")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def _manifest_dir(cfg: ProjectConfig) -> Path:
    return cfg.workdir / "manifests"


# -- prepare ------------------------------------------------------------------------

def _record_key(cfg: ProjectConfig, audio_bytes: bytes, rate: float) -> str:
    h = hashlib.sha256(audio_bytes)
    h.update(f"{rate:.4f}|{cfg.extractor.key()}".encode())
    return h.hexdigest()[:20]


def _prepare_one(cfg: ProjectConfig, cache: Path, rec):
    """Returns (record with paths, extracted: bool) or (record, exception)."""
    try:
        raw = Path(rec.audio_path).read_bytes()
    except OSError as exc:
        return rec, exc
    key = _record_key(cfg, raw, rec.rate)
    feat_p, mel_p, pros_p = (cache / sub / f"{key}.vctf" for sub in ("features", "mels", "prosody"))
    paths = dict(feature_path=str(feat_p), mel_path=str(mel_p), prosody_path=str(pros_p))
    if cfg.extractor.kind == "precomputed":
        pre = Path(rec.audio_path).with_suffix(".vctf")
        paths["feature_path"] = str(pre)
        feat_p = pre
    if feat_p.exists() and mel_p.exists() and pros_p.exists():
        return dataclasses.replace(rec, **paths), False
    try:
        wav = dsp.load_wav(rec.audio_path)
        if rec.rate != 1.0:
            wav = dsp.time_stretch(wav, rec.rate)
        out = dataclasses.replace(rec, **paths)
        if cfg.extractor.kind != "precomputed":
            write_tensor(feat_p, ssl_frontend.extract(cfg.extractor, out, wav))
        else:
            ssl_frontend.extract(cfg.extractor, out)
        write_tensor(mel_p, dsp.extract_mel(wav).frames)
        write_tensor(pros_p, dsp.extract_prosody(wav).as_matrix())
    except VCError as exc:
        if isinstance(exc, ConfigError):
            raise
        return rec, exc
    except (OSError, ValueError) as exc:
        return rec, exc
    return out, True


def cmd_prepare(cfg: ProjectConfig, args) -> dict:
    """Scan corpora, split, augment and cache features, mels and prosody."""
    target_dir, external_dir = cfg.path("target_dir"), cfg.path("external_dir")
    for p in (target_dir, external_dir):
        if not p.is_dir():
            raise ConfigError(f"corpus directory does not exist: {p}")
    if cfg.extractor.kind == "precomputed" and set(cfg.data.rates) != {1.0}:
        raise ConfigError("precomputed features cannot be rate-augmented; set data.rates = [1.0]")
    train_recs, val_recs = build_manifest(target_dir, external_dir, cfg.data.split_ratio, cfg.seed,
                                          cfg.data.target_speaker)
    train_recs = augment_records(train_recs, cfg.data.rates)
    val_recs = augment_records(val_recs, cfg.data.rates)

    cache = cfg.workdir / "cache"
    for sub in ("features", "mels", "prosody"):
        (cache / sub).mkdir(parents=True, exist_ok=True)
    everything = train_recs + val_recs
    results = list(parallel_map(lambda r: _prepare_one(cfg, cache, r), everything, cfg.data.workers))
    failures = [(rec, res) for rec, res in results if isinstance(res, Exception)]
    if failures:
        lines = [f"{rec.audio_path}: {exc}" for rec, exc in failures]
        raise InputError(f"{len(failures)} utterance(s) could not be prepared:\n  " + "\n  ".join(lines))

    prepared = [rec for rec, _ in results]
    n_train = len(train_recs)
    mdir = _manifest_dir(cfg)
    write_manifest(mdir / MANIFESTS[0], prepared[:n_train])
    write_manifest(mdir / MANIFESTS[1], prepared[n_train:])
    extracted = sum(1 for _, res in results if res is True)
    return {
        "command": "prepare",
        "train_records": n_train,
        "val_records": len(prepared) - n_train,
        "target_feature_files": sum(1 for r in prepared if r.corpus_tag == "target"),
        "extractions": extracted,
        "cache_hits": len(results) - extracted,
        "manifests": [str(mdir / m) for m in MANIFESTS],
    }


# -- train --------------------------------------------------------------------------

def _read_manifests(cfg: ProjectConfig):
    mdir = _manifest_dir(cfg)
    paths = [mdir / m for m in MANIFESTS]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ConfigError(f"manifests not found (run prepare first): {missing}")
    return read_manifest(paths[0]), read_manifest(paths[1])


def cmd_train(cfg: ProjectConfig, args) -> dict:
    train_recs, val_recs = _read_manifests(cfg)
    run_dir = Path(args.run_dir) if args.run_dir else cfg.workdir / "run"
    resume = args.resume
    if resume == "latest":
        resume = latest_checkpoint(run_dir / "checkpoints")
        if resume is None:
            raise ConfigError(f"no checkpoint to resume in {run_dir / 'checkpoints'}")
    elif resume is not None and not Path(resume).exists():
        raise ConfigError(f"resume checkpoint not found: {resume}")
    t0 = time.time()
    written = train(cfg.generator, cfg.training, train_recs, val_recs, run_dir, resume=resume,
                    mel_disc_cfg=cfg.mel_discriminator, emb_disc_cfg=cfg.embedding_discriminator)
    log_path = run_dir / "train_log.jsonl"
    figure = None
    if log_path.exists() and log_path.stat().st_size:
        figure = plotting.plot_training_log(log_path, run_dir / "training_curves.png", run_dir / "val_log.jsonl")
    return {"command": "train", "run_dir": str(run_dir), "checkpoints": [str(p) for p in written],
            "seconds": round(time.time() - t0, 2), "figure": str(figure) if figure else None}


# -- convert ------------------------------------------------------------------------

def _external_vocoder(template: str, mel: np.ndarray) -> np.ndarray:
    with tempfile.TemporaryDirectory() as tmp:
        mel_p, wav_p = Path(tmp) / "mel.vctf", Path(tmp) / "out.wav"
        write_tensor(mel_p, mel)
        cmd = template.format(input_mel=shlex.quote(str(mel_p)), output_wav=shlex.quote(str(wav_p)))
        proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
        if proc.returncode != 0 or not wav_p.exists():
            raise InputError(f"vocoder command failed ({proc.returncode}): {cmd}\n{proc.stderr[-2000:]}")
        return dsp.load_wav(wav_p)


def _gather_wavs(items) -> list[Path]:
    out = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            out += sorted(q for q in p.rglob("*.wav") if q.is_file())
        elif p.exists():
            out.append(p)
        else:
            raise InputError(f"input not found: {p}")
    return out


def cmd_convert(cfg: ProjectConfig, args) -> dict:
    vocoder = args.vocoder or cfg.eval.vocoder
    if vocoder == "external_command" and not cfg.eval.vocoder_command:
        raise ConfigError("external_command vocoder needs eval.vocoder_command")
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    gen = load_generator(args.checkpoint, expected_input_dim=cfg.extractor.dim)
    inputs = _gather_wavs(args.inputs)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for wav_path in inputs:
        rec = UtteranceRecord(id=wav_path.stem, speaker="source", audio_path=str(wav_path), corpus_tag="external",
                              feature_path=str(wav_path.with_suffix(".vctf")))
        wav = dsp.load_wav(wav_path)
        feats = ssl_frontend.extract(cfg.extractor, rec, None if cfg.extractor.kind == "precomputed" else wav)
        mel, _ = gen.convert(feats)
        if vocoder == "griffin_lim":
            audio = dsp.griffin_lim(mel, iterations=cfg.eval.griffin_lim_iterations, seed=cfg.seed)
        else:
            audio = _external_vocoder(cfg.eval.vocoder_command, mel)
        dst = out_dir / f"{wav_path.stem}.wav"
        dsp.save_wav(dst, audio)
        write_tensor(out_dir / f"{wav_path.stem}.mel.vctf", mel)
        written.append(str(dst))
    return {"command": "convert", "vocoder": vocoder, "outputs": written}


# -- evaluate -----------------------------------------------------------------------

def _resolve(spec: str | None, stem: str, what: str) -> Path | None:
    """A directory is matched by file stem; a single file is used for every pair."""
    if spec is None:
        return None
    p = Path(spec)
    if p.is_file():
        return p
    if p.is_dir():
        hit = p / f"{stem}.wav"
        if not hit.exists():
            raise InputError(f"no {what} file for {stem!r} in {p}")
        return hit
    raise InputError(f"{what} path not found: {p}")


def _write_pairs(rows: list[dict], path: Path, delimiter: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), delimiter=delimiter)
        writer.writeheader()
        writer.writerows(rows)


def cmd_evaluate(cfg: ProjectConfig, args) -> dict:
    conv_dir = Path(args.converted)
    converted = sorted(conv_dir.glob("*.wav")) if conv_dir.is_dir() else ([conv_dir] if conv_dir.is_file() else [])
    if not converted:
        raise ParameterError(f"no converted .wav files in {conv_dir}")
    embedder = metrics.SpeakerEmbedder(cfg.eval.embedder, cfg.eval.embedder_dim, cfg.eval.embedder_command)

    def one(path: Path):
        stem = path.stem
        src = _resolve(args.source, stem, "source")
        ref = _resolve(args.reference, stem, "reference")
        tref = _resolve(args.target_ref, stem, "target reference")
        return metrics.evaluate_pair(stem, dsp.load_wav(path), dsp.load_wav(src), dsp.load_wav(ref), embedder,
                                     dsp.load_wav(tref) if tref else None)

    results = list(parallel_map(one, converted, cfg.data.workers))
    report = metrics.aggregate(results)
    out = Path(args.output_dir) if args.output_dir else conv_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    rows = [dataclasses.asdict(r) for r in results]
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.table() + "\n")
    _write_pairs(rows, out / "pairs.csv", ",")
    _write_pairs(rows, out / "pairs.tsv", "\t")
    plotting.plot_eval_pairs(rows, out / "pairs.png")
    print(report.table(), file=sys.stderr)
    return {"command": "evaluate", "report": report.to_dict(), "output_dir": str(out)}


# -- visualize ----------------------------------------------------------------------

def _probe_items(cfg: ProjectConfig, manifest: str | None):
    if manifest:
        records = read_manifest(manifest)
    else:
        train_recs, val_recs = _read_manifests(cfg)
        records = train_recs + val_recs
    return [(read_tensor(r.feature_path), r.speaker) for r in records if r.rate == 1.0 and r.feature_path]


def cmd_visualize(cfg: ProjectConfig, args) -> dict:
    panels = [("without_lsim", "Without $\\mathcal{L}_{sim}$", args.without_lsim),
              ("with_lsim", "With $\\mathcal{L}_{sim}$", args.with_lsim)]
    panels = [p for p in panels if p[2]]
    if not panels:
        raise ParameterError("give --with-lsim and/or --without-lsim checkpoints")
    items = _probe_items(cfg, args.manifest)
    perplexity = args.perplexity if args.perplexity is not None else cfg.eval.perplexity
    out = Path(args.output_dir) if args.output_dir else cfg.workdir / "visualize"
    out.mkdir(parents=True, exist_ok=True)
    summary, figure_panels = {}, []
    for tag, title, ckpt in panels:
        gen = load_generator(ckpt, expected_input_dim=cfg.extractor.dim)
        data = collect_embeddings(gen, items)
        ts = tsne_probe(data, perplexity=perplexity, seed=cfg.seed, summary=cfg.eval.probe_summary)
        acc = speaker_probe(data, seed=cfg.seed, summary=cfg.eval.probe_summary)
        write_tensor(out / f"scatter_{tag}.vctf", ts.points.astype(np.float32))
        (out / f"scatter_{tag}_labels.txt").write_text("\n".join(ts.labels.tolist()) + "\n")
        figure_panels.append((title, ts.points, ts.labels))
        summary[tag] = {"checkpoint": str(ckpt), "probe_accuracy": acc, "silhouette": ts.silhouette,
                        "points": int(ts.points.shape[0])}
    fig = plotting.plot_tsne_panels(figure_panels, out / "tsne.png")
    (out / "probe.json").write_text(json.dumps(summary, indent=2) + "\n")
    return {"command": "visualize", "figure": str(fig), "panels": summary}


# -- helpers ------------------------------------------------------------------------

def cmd_make_fixture(cfg, args) -> dict:
    from .fixtures import write_fixture_corpus

    tdir, edir = write_fixture_corpus(args.root, n_target=args.n_target, n_external_speakers=args.n_external,
                                      n_per_external=args.n_per_external, seed=args.seed)
    return {"command": "make-fixture", "target_dir": str(tdir), "external_dir": str(edir)}


def cmd_experiment(cfg, args) -> dict:
    from .experiments import DisentanglementSetup, run_disentanglement

    setup = DisentanglementSetup(seed=args.seed)
    if args.post_warmup_steps is not None:
        setup.post_warmup_steps = args.post_warmup_steps
    without, with_ = run_disentanglement(setup)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    plotting.plot_tsne_panels([("Without $\\mathcal{L}_{sim}$", without.tsne_points, without.tsne_labels),
                               ("With $\\mathcal{L}_{sim}$", with_.tsne_points, with_.tsne_labels)],
                              out / "disentanglement_tsne.png")
    keep = ("probe_accuracy", "silhouette", "cos_sim", "final_l_rec", "seconds")
    result = {"without_lsim": {k: getattr(without, k) for k in keep},
              "with_lsim": {k: getattr(with_, k) for k in keep}}
    (out / "disentanglement.json").write_text(json.dumps(result, indent=2) + "\n")
    return {"command": "experiment", **result, "figure": str(out / "disentanglement_tsne.png")}


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslvc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="project TOML file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        return p

    with_config(sub.add_parser("prepare", help="build manifests and cache features, mels and prosody"))

    p = with_config(sub.add_parser("train", help="train the generator and discriminators"))
    p.add_argument("--resume", help="checkpoint path, or 'latest'")
    p.add_argument("--run-dir", help="output directory (default: <workdir>/run)")

    p = with_config(sub.add_parser("convert", help="convert WAV files to the target voice"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--vocoder", choices=("griffin_lim", "external_command"))
    p.add_argument("inputs", nargs="*", help="WAV files or directories")

    p = with_config(sub.add_parser("evaluate", help="objective metrics for converted audio"))
    p.add_argument("--converted", required=True, help="directory of converted WAVs")
    p.add_argument("--source", required=True, help="source WAV directory (matched by stem) or one file")
    p.add_argument("--reference", required=True, help="parallel target WAV directory or one file")
    p.add_argument("--target-ref", help="speaker reference for COS-SIM (default: --reference)")
    p.add_argument("--output-dir")

    p = with_config(sub.add_parser("visualize", help="t-SNE of content embeddings plus speaker probe"))
    p.add_argument("--with-lsim", help="checkpoint trained with the similarity loss")
    p.add_argument("--without-lsim", help="checkpoint trained without it")
    p.add_argument("--manifest", help="records to embed (default: prepared train + val, rate 1.0 only)")
    p.add_argument("--perplexity", type=float)
    p.add_argument("--output-dir")

    p = sub.add_parser("make-fixture", help="write a small synthetic two-corpus fixture")
    p.add_argument("root")
    p.add_argument("--n-target", type=int, default=12)
    p.add_argument("--n-external", type=int, default=2)
    p.add_argument("--n-per-external", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("experiment", help="with/without similarity-loss disentanglement run")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--post-warmup-steps", type=int)
    return parser


COMMANDS = {
    "prepare": cmd_prepare, "train": cmd_train, "convert": cmd_convert, "evaluate": cmd_evaluate,
    "visualize": cmd_visualize, "make-fixture": cmd_make_fixture, "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides) if hasattr(args, "config") else None
        _emit(COMMANDS[args.command](cfg, args))
        return 0
    except VCError as exc:
        print(json.dumps({"error": {"kind": exc.kind, "message": str(exc)}}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(json.dumps({"error": {"kind": "internal", "message": f"{type(exc).__name__}: {exc}"}}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
