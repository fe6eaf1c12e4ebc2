"""Acceptance criteria 1-9.  Each test prints one ``CRITERION n: PASS|FAIL`` line.

Criteria 5, 6 and 8 train models and take minutes each on a single CPU core.
"""

import json
import time

import numpy as np
import pytest
import torch

from sslvc import cli, dsp, losses
from sslvc.errors import ShapeError
from sslvc.evaluation import SpeakerEmbedder, cosine, cosine_similarity, mcd, mcd_cepstra, prosody_rmse
from sslvc.experiments import DisentanglementSetup, OverfitSetup, run_disentanglement, run_overfit
from sslvc.fixtures import default_voices, synth_utterance, write_fixture_corpus
from sslvc.model import Generator, GeneratorConfig, instance_norm
from sslvc.tensorio import read_tensor
from sslvc.training import lambda_sim

from oracles import finite_difference_grads, relative_error
from toy import corpora, make_trainer, sampler_for, train_cfg
from verdicts import criterion

TOL = 1e-9


def close(value, expected, tol=TOL):
    return abs(float(value) - expected) < tol


# -- 1 ------------------------------------------------------------------------------

def test_criterion_1_loss_oracles():
    with criterion(1, "loss-formula oracles") as notes:
        g, d = losses.loss_rf([0.3], [0.8])
        assert close(d, 0.5) and close(g, 0.7)
        g, d = losses.loss_rf([0.5], [0.5])
        assert close(d, 1.0) and close(g, 0.5)
        assert losses.loss_rf([1e-12], [1 - 1e-12])[1] < TOL
        g, d = losses.loss_cvt([0.6], [0.7], [0.9])
        assert close(d, 1.0) and close(g, 0.4)
        assert losses.loss_cvt([1e-12], [1 - 1e-12], [1 - 1e-12])[1] < TOL
        g, d = losses.loss_e([0.2], [0.9])
        assert close(d, 0.3) and close(g, 0.8)
        g, d = losses.loss_e([0.5] * 4, [0.5] * 4)
        assert close(d, 1.0) and close(g, 0.5)
        assert losses.loss_e([1e-12], [1 - 1e-12])[1] < TOL

        y = np.random.default_rng(0).standard_normal((30, 80))
        assert losses.loss_rec(y, y) == 0 and close(losses.loss_rec(y + 0.5, y), 0.5)
        with pytest.raises(ShapeError):
            losses.loss_rec(y[:3], y[:4])

        r = losses.assemble(l_rec=0.5, l_rf_g=0.7, l_rf_d=0.3, l_cvt_g=0.4, l_cvt_d=1.0, l_e_g=0.8, l_e_d=0.3,
                            lambda_sim=1.0)
        assert close(r.l_sim_g, 1.2) and close(r.total_g, 2.4)
        r0 = losses.assemble(0.5, 0.7, 0.3, 0.4, 1.0, 0.8, 0.3, lambda_sim=0.0)
        assert close(r0.total_g, 0.7 + 0.5) and close(r0.total_d, 0.3)

        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 33))
            fake, real, conv = (rng.uniform(1e-6, 1 - 1e-6, n) for _ in range(3))
            for g, side in ((losses.loss_rf(fake, real)[0], fake), (losses.loss_cvt(conv, fake, real)[0], conv),
                            (losses.loss_e(conv, real)[0], conv)):
                worst = max(worst, abs(float(g) + side.mean() - 1.0))
        assert worst < TOL
        notes.append(f"identity max error {worst:.1e} over 1000 batches")


# -- 2 ------------------------------------------------------------------------------

def test_criterion_2_gradients():
    with criterion(2, "finite-difference gradients and routing") as notes:
        target, external = corpora()
        tr = make_trainer(train_cfg(crop_frames=8, batch_size=2))
        assert tr.gen_cfg.hidden_dim == 16
        tr.generator.double().eval()
        tr.discriminators.double().eval()
        batch = sampler_for(tr, target, external)(0)
        for name in ("target_features", "target_mels", "external_features"):
            setattr(batch, name, getattr(batch, name).double())
        with torch.no_grad():
            frozen = tr.forward_batch(batch)

        def total_g():
            return tr.generator_objective(*tr.forward_batch(batch), 1.0)[0]

        def total_d():
            return tr.discriminator_objective(*frozen, 1.0)[0]

        worst = 0.0
        for fn, module in ((total_g, tr.generator), (total_d, tr.discriminators)):
            params = list(module.parameters())
            analytic = torch.autograd.grad(fn(), params, allow_unused=True)
            numeric = finite_difference_grads(fn, params)
            for p, a, n in zip(params, analytic, numeric):
                worst = max(worst, relative_error(torch.zeros_like(p) if a is None else a, n))
        notes.append(f"max relative error {worst:.1e}")
        assert worst < 1e-4

        tr.generator.zero_grad(set_to_none=True)
        l_e_g = tr.generator_objective(*tr.forward_batch(batch), 1.0)[4]
        tr.discriminators.requires_grad_(False)
        l_e_g.backward()
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in tr.generator.encoder.parameters())
        assert all(p.grad is None or p.grad.abs().sum() == 0 for p in tr.generator.decoder.parameters())


# -- 3 ------------------------------------------------------------------------------

def test_criterion_3_instance_norm():
    with criterion(3, "instance-norm contract") as notes:
        torch.manual_seed(0)
        g = Generator(GeneratorConfig(input_dim=64, hidden_dim=16, encoder_blocks=1, decoder_blocks=1,
                                      attention_heads=2, ffn_dim=32)).eval()
        with torch.no_grad():
            e = g.encode(torch.randn(4, 128, 64) * 2 + 0.5)
        mean_err = e.mean(dim=1).abs().max().item()
        var_err = (e.var(dim=1, unbiased=False) - 1).abs().max().item()
        x = torch.randn(3, 128, 16, dtype=torch.float64)
        bias = 4 * torch.randn(1, 1, 16, dtype=torch.float64)
        bias_err = (instance_norm(x + bias) - instance_norm(x)).abs().max().item()
        notes.append(f"|mean| {mean_err:.1e}, |var-1| {var_err:.1e}, bias {bias_err:.1e}")
        assert mean_err < 1e-3 and var_err < 1e-2 and bias_err < 1e-5


# -- 4 ------------------------------------------------------------------------------

def test_criterion_4_warmup():
    with criterion(4, "warmup contract"):
        assert lambda_sim(4999, 5000) == 0.0 and lambda_sim(5000, 5000) == 1.0
        target, external = corpora()
        tr = make_trainer()
        out = tr.forward_batch(sampler_for(tr, target, external)(0))
        total, l_rec, l_rf_g, _, _ = tr.generator_objective(*out, lambda_sim(4999, 5000))
        params = list(tr.generator.parameters())
        full = torch.autograd.grad(total, params, retain_graph=True, allow_unused=True)
        base = torch.autograd.grad(l_rf_g + l_rec, params, allow_unused=True)
        for a, b in zip(full, base):
            assert (a is None and b is None) or torch.equal(a, b)


# -- 5 ------------------------------------------------------------------------------

def test_criterion_5_tiny_overfit():
    with criterion(5, "tiny overfit") as notes:
        setup = OverfitSetup()
        assert setup.n_utterances == 16 and setup.steps == 2000
        result = run_overfit(setup)
        best = min(v for _, v in result.curve)
        notes.append(f"l_rec {result.curve[-1][1]:.3f} at step {result.curve[-1][0]}, min {best:.3f}, "
                     f"first < 0.15 at {result.first_below.get(0.15)}, {result.seconds:.0f} s")
        assert 0.15 in result.first_below and result.seconds < 600

        # the reconstruction bound on a converted training utterance
        gen = result.generator.eval()
        with torch.no_grad():
            y, _ = gen(torch.from_numpy(result.features[0])[None])
        err = float((y[0] - torch.from_numpy(result.mels[0])).abs().mean())
        notes.append(f"converted training utterance l_rec {err:.3f}")
        assert err < 0.2


# -- 6 ------------------------------------------------------------------------------

def test_criterion_6_disentanglement():
    with criterion(6, "desk-scale disentanglement") as notes:
        setup = DisentanglementSetup()
        assert setup.post_warmup_steps == 5000
        t0 = time.time()
        without, with_ = run_disentanglement(setup)
        elapsed = time.time() - t0
        notes.append(f"probe {without.probe_accuracy:.3f} -> {with_.probe_accuracy:.3f}, "
                     f"silhouette {without.silhouette:.3f} -> {with_.silhouette:.3f}, "
                     f"cos {without.cos_sim:.4f} -> {with_.cos_sim:.4f}, "
                     f"l_rec {without.final_l_rec:.3f} / {with_.final_l_rec:.3f}, {elapsed:.0f} s")
        assert without.probe_accuracy - with_.probe_accuracy >= 0.15
        assert with_.silhouette < without.silhouette
        assert with_.cos_sim > without.cos_sim
        assert elapsed < 1800


# -- 7 ------------------------------------------------------------------------------

def _track(f0, energy):
    f0 = np.asarray(f0, dtype=float)
    return dsp.ProsodyTrack(f0_hz=f0, energy=np.asarray(energy, dtype=float), voiced_mask=f0 > 0)


def test_criterion_7_metric_oracles():
    with criterion(7, "metric oracles"):
        rng = np.random.default_rng(0)
        voice, _ = default_voices(0)
        wav = synth_utterance(voice, 1.0, rng)
        assert mcd(wav, wav) == 0.0
        a = np.zeros((25, 13))
        b = a.copy()
        b[:, 7] = 1.0
        assert abs(mcd_cepstra(a, b, align=False) - 6.142) <= 1e-3
        f0, _ = prosody_rmse(_track([100, 200], [1, 2]), _track([150, 250], [1, 2]))
        _, e = prosody_rmse(_track([100, 200, 150], [0.2, 0.5, 0.3]), _track([100, 200, 150], [0.4, 1.0, 0.6]))
        assert abs(f0) <= 1e-9 and abs(e) <= 1e-9
        assert abs(cosine_similarity(SpeakerEmbedder(), wav, wav) - 1.0) < 1e-12
        assert cosine([1, 0], [0, 3]) == 0.0


# -- 8 ------------------------------------------------------------------------------

SMOKE_CONFIG = """
seed = 0

[paths]
target_dir = "corpus/target"
external_dir = "corpus/external"
workdir = "work"

[extractor]
kind = "mock"
dim = 64

[generator]
hidden_dim = 32
encoder_blocks = 1
decoder_blocks = 1
ffn_dim = 64

[mel_discriminator]
channels = [16, 32, 32, 32]

[embedding_discriminator]
channels = [32, 32, 32]

[training]
steps = 500
lr_g = 1e-3
batch_size = 4
crop_frames = 48
warmup_steps = 250
checkpoint_every = 250
validate_every = 250

[eval]
griffin_lim_iterations = 32
perplexity = 15
"""


def _cli(argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"{argv[0]} exited {code}"


def test_criterion_8_end_to_end(tmp_path, capsys):
    with criterion(8, "end-to-end smoke") as notes:
        t0 = time.time()
        # 20 + 3 * 12 = 56 unaugmented utterances, enough for perplexity 15
        write_fixture_corpus(tmp_path / "corpus", n_target=20, n_external_speakers=3, n_per_external=12,
                             seconds=(0.8, 1.4), seed=3)
        cfg = tmp_path / "project.toml"
        cfg.write_text(SMOKE_CONFIG)
        work = tmp_path / "work"
        _cli(["prepare", "--config", cfg])
        _cli(["train", "--config", cfg, "--run-dir", work / "with"])
        _cli(["train", "--config", cfg, "--run-dir", work / "without", "--set", "training.lambda_sim_after_warmup=0.0"])
        ckpt = "checkpoints/ckpt_0000500.pt"
        src = tmp_path / "corpus/external/ext01"
        _cli(["convert", "--config", cfg, "--checkpoint", work / "with" / ckpt, "--vocoder", "griffin_lim",
              "--output-dir", work / "converted", src])
        capsys.readouterr()
        _cli(["evaluate", "--config", cfg, "--converted", work / "converted", "--source", src,
              "--reference", tmp_path / "corpus/target", "--target-ref", tmp_path / "corpus/target/utt000.wav",
              "--output-dir", work / "eval"])
        report = json.loads(capsys.readouterr().out)["report"]
        _cli(["visualize", "--config", cfg, "--with-lsim", work / "with" / ckpt,
              "--without-lsim", work / "without" / ckpt, "--output-dir", work / "viz"])
        elapsed = time.time() - t0
        notes.append(f"{elapsed:.0f} s, MCD {report['mcd_db']:.2f} dB, cos {report['cos_sim']:.3f}")

        assert set(report) == {"mcd_db", "cos_sim", "f0_rmse", "energy_rmse", "n_pairs"}
        assert report["n_pairs"] == 12 and all(np.isfinite(v) for v in report.values())
        assert -1 <= report["cos_sim"] <= 1 and 0 <= report["f0_rmse"] <= 1 and 0 <= report["energy_rmse"] <= 1
        for tag in ("with_lsim", "without_lsim"):
            pts = read_tensor(work / "viz" / f"scatter_{tag}.vctf")
            assert pts.shape == (56, 2)
        assert (work / "viz/tsne.png").stat().st_size > 0
        assert elapsed < 900


# -- 9 ------------------------------------------------------------------------------

def test_criterion_9_determinism_and_resume(tmp_path):
    with criterion(9, "determinism and resumability") as notes:
        target, external = corpora()

        def stream(tr, n):
            s = sampler_for(tr, target, external)
            return [tr.train_step(s(tr.step)).to_dict() for _ in range(n)]

        a = stream(make_trainer(dropout=0.1), 6)
        b = stream(make_trainer(dropout=0.1), 6)
        assert a == b

        full = make_trainer(dropout=0.1)
        unbroken = stream(full, 6)
        first = make_trainer(dropout=0.1)
        stream(first, 3)
        ckpt = first.save(tmp_path)
        resumed = make_trainer(dropout=0.1)
        resumed.load(ckpt)
        tail = stream(resumed, 3)
        worst = max(abs(x[k] - y[k]) / max(abs(y[k]), 1e-12)
                    for x, y in zip(tail, unbroken[3:]) for k in x if y[k] != 0)
        notes.append(f"resume max relative deviation {worst:.1e}")
        assert worst < 1e-5
