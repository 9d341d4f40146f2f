"""Acceptance suite.

Each test carries a ``criterion`` marker; ``conftest.py`` prints one PASS/FAIL
line per criterion at the end of the run.  Thresholds here are the accepted
tolerances and are not to be relaxed to make a run go green.
"""
import itertools
import os
import time
from pathlib import Path

import numpy as np
import pytest

from dysvc import dsp
from dysvc import evaluation as ev
from dysvc import nncore as nn
from dysvc import seq2seq as s2s
from dysvc import vae
from dysvc.evaluation import ScoreRow, SpeakerScoreTable
from dysvc.pipeline import Pipeline, emit_report, load_config, load_manifest, stage2_diagnostics, toycorpus
from dysvc.pipeline.artifacts import CACHE_ENV

ROOT = Path(__file__).resolve().parent.parent
GRAD_TOL = 1e-4


# -- gradients -------------------------------------------------------------------------


def _gradient_cases():
    rng = np.random.default_rng(17)
    cases = {}
    with nn.default_dtype(np.float64):
        x = nn.Tensor(rng.normal(size=(2, 5, 8)))
        mem = nn.Tensor(rng.normal(size=(2, 4, 8)))
        w6, w8 = nn.Tensor(rng.normal(size=(2, 5, 6))), nn.Tensor(rng.normal(size=(2, 5, 8)))
        lin, ln = nn.Linear(8, 6, rng), nn.LayerNorm(8)
        ln.gain.data += 0.1 * rng.normal(size=8)
        mha, ffn, emb = nn.MultiHeadAttention(8, 2, rng), nn.FeedForward(8, 16, rng), nn.Embedding(5, 8, rng)
        ids = np.array([[0, 3, 4], [1, 1, 2]])
        we = nn.Tensor(rng.normal(size=(2, 3, 8)))
        causal = nn.causal_mask(5)
        cases["linear"] = (lambda: (lin(x) * w6).sum(), lin.param_dict())
        cases["layer_norm"] = (lambda: (ln(x) * w8).sum(), ln.param_dict())
        cases["masked_self_attention"] = (lambda: (mha(x, x, mask=causal) * w8).sum(), mha.param_dict())
        cases["cross_attention"] = (lambda: (mha(x, mem) * w8).sum(), mha.param_dict())
        cases["feed_forward"] = (lambda: (ffn(x) * w8).sum(), ffn.param_dict())
        cases["embedding"] = (lambda: (emb(ids) * we).sum(), emb.param_dict())

        s2s_model = s2s.Seq2SeqModel(s2s.Seq2SeqConfig(n_mels=8, d_model=16, ffn_dim=32), ["A", "B"],
                                     s2s.Vocabulary(["ba1", "di2"]), seed=3)
        pairs = [s2s.ParallelPair("u", rng.normal(size=(4, 8)), "A", rng.normal(size=(3, 8)), "B")]
        vc_params = s2s_model.enter_phase(s2s.TrainingPhase.VC_TRAIN)
        # zero-initialised prenet biases put the all-zero go frame exactly on the ReLU kink
        for name, p in vc_params.items():
            if name.endswith("bias"):
                p.data += 0.1 * rng.normal(size=p.shape)
        cases["stage1_vc_loss"] = (lambda: s2s.vc_loss(s2s_model, pairs)[0], vc_params)

        small = vae.VAEConfig(n_mels=12, latent_dim=4, hidden_dim=16, speaker_dim=4, classifier_dim=8)
        vmodel = vae.VAEModel(small, ["A", "B", "C"], seed=5)
        vx = rng.normal(size=(6, 12))
        spk = np.array([0, 1, 2, 0, 1, 2])
        other = np.array([1, 2, 0, 2, 0, 1])
        eps = [rng.normal(size=(6, d)) for d in vae._latent_dims(vmodel)]
        cases["stage2_composite_loss(autoencoder player)"] = (
            lambda: vae.autoencoder_loss(vmodel, vx, spk, other, eps)[0], vmodel.autoencoder_params())
        cases["stage2_classifier_player"] = (lambda: vae.classifier_loss(vmodel, vx, spk), vmodel.classifier_params())
    return cases


@pytest.mark.criterion("gradient suite: rel err < 1e-4 in float64, < 2 min")
def test_gradient_suite(record_property):
    start = time.perf_counter()
    errors = {name: nn.gradient_check(loss, params, probe_count=40, perturbation=1e-6)
              for name, (loss, params) in _gradient_cases().items()}
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    record_property("detail", f"worst {worst}={errors[worst]:.2e}, {len(errors)} cases, {elapsed:.1f}s")
    assert all(e < GRAD_TOL for e in errors.values()), errors
    assert elapsed < 120


# -- DTW ----------------------------------------------------------------------------------


def _exhaustive_dtw(cost):
    """Minimum over every monotone path, by recursion over all branches."""
    n, m = cost.shape

    def walk(i, j):
        if (i, j) == (n - 1, m - 1):
            return cost[i, j]
        options = []
        if i + 1 < n and j + 1 < m:
            options.append(walk(i + 1, j + 1))
        if i + 1 < n:
            options.append(walk(i + 1, j))
        if j + 1 < m:
            options.append(walk(i, j + 1))
        return cost[i, j] + min(options)

    return walk(0, 0)


@pytest.mark.criterion("DTW equals brute force, all length pairs <= 6, 100 matrices each, < 10 s")
def test_dtw_matches_brute_force(record_property):
    rng = np.random.default_rng(0)
    cases = [rng.uniform(0, 1, size=(n, m)) for n, m in itertools.product(range(1, 7), repeat=2) for _ in range(100)]
    start = time.perf_counter()
    fast = [ev.dtw_from_cost(cost).cost for cost in cases]
    elapsed = time.perf_counter() - start
    worst = max(abs(f - _exhaustive_dtw(cost)) for f, cost in zip(fast, cases))
    record_property("detail", f"{len(cases)} matrices, max |diff|={worst:.1e}, dtw time {elapsed:.2f}s")
    assert worst < 1e-9
    assert elapsed < 10


# -- MCD, edit distance, KL -------------------------------------------------------------------


@pytest.mark.criterion("MCD: identical -> 0, unit difference at C=1 -> 6.1419 +/- 1e-3")
def test_mcd_values(record_property):
    c = np.random.default_rng(1).normal(size=(12, 24))
    same = ev.mcd(c, c)
    unit = ev.mcd(np.zeros((7, 1)), np.ones((7, 1)))
    record_property("detail", f"identical={same}, unit={unit:.5f}")
    assert same == 0.0
    assert abs(unit - 6.1419) < 1e-3


def _exhaustive_edits(ref, hyp):
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    return min((ref[0] != hyp[0]) + _exhaustive_edits(ref[1:], hyp[1:]),
               1 + _exhaustive_edits(ref[1:], hyp), 1 + _exhaustive_edits(ref, hyp[1:]))


@pytest.mark.criterion("edit distance equals exhaustive search (200 pairs); SER fixture D=1, 33.33%")
def test_edit_distance_and_ser_fixture(record_property):
    rng = np.random.default_rng(5)
    symbols = ["ba", "di", "gu", "ma"]
    mismatches = 0
    for _ in range(200):
        ref = list(rng.choice(symbols, size=rng.integers(1, 7)))
        hyp = list(rng.choice(symbols, size=rng.integers(0, 7)))
        mismatches += ev.error_rate(ref, hyp).errors != _exhaustive_edits(ref, hyp)
    res = ev.error_rate(ev.strip_tone("ni3 hao3 ma5".split()), ev.strip_tone("ni hao".split()))
    record_property("detail", f"mismatches={mismatches}, D={res.deletions}, rate={res.rate:.2f}%")
    assert mismatches == 0
    assert (res.substitutions, res.deletions, res.insertions) == (0, 1, 0)
    assert abs(res.rate - 33.33) < 0.01


@pytest.mark.criterion("KL: (0,1) -> 0, (1,1,L=1) -> 0.5, nonnegative on 1000 posteriors")
def test_kl_values(record_property):
    zero = vae.kl_to_standard_normal(vae.LatentPosterior(np.zeros((4, 3)), np.zeros((4, 3))))
    half = vae.kl_to_standard_normal(vae.LatentPosterior(np.ones((1, 1)), np.zeros((1, 1))))
    rng = np.random.default_rng(2)
    lowest = min(
        vae.kl_to_standard_normal(vae.LatentPosterior(rng.normal(0, 3, (n, d)), rng.uniform(-10, 10, (n, d))))
        for n, d in rng.integers(1, 9, size=(1000, 2))
    )
    record_property("detail", f"zero={zero}, one={half}, min over random={lowest:.3g}")
    assert zero == 0.0
    assert abs(half - 0.5) < 1e-12
    assert lowest >= 0.0


@pytest.mark.criterion("VAE encode/convert equivariant to frame permutation (100 inputs)")
def test_permutation_equivariance(record_property):
    model = vae.VAEModel(vae.VAEConfig(), ["SP01", "SP02", "SP03"], seed=11)
    rng = np.random.default_rng(3)
    failures = 0
    for _ in range(100):
        mel = rng.normal(size=(int(rng.integers(1, 60)), 80)).astype(np.float32)
        perm = rng.permutation(len(mel))
        post, post_p = vae.encode(model, mel), vae.encode(model, mel[perm])
        out, out_p = vae.convert_speaker(model, mel, "SP02"), vae.convert_speaker(model, mel[perm], "SP02")
        failures += not (np.array_equal(post.mean[perm], post_p.mean)
                         and np.array_equal(post.log_variance[perm], post_p.log_variance)
                         and np.array_equal(out[perm], out_p))
    record_property("detail", f"{failures} of 100 inputs not exactly equivariant")
    assert failures == 0


# -- ranking ---------------------------------------------------------------------------------


@pytest.mark.criterion("ranking fixture: SP09 first by SER with delta 18.2; MCD lower is better")
def test_ranking_fixture(record_property, tmp_path):
    table = SpeakerScoreTable([
        ScoreRow("SP09", "M", "dysarthric", 9.1, 94.0),
        ScoreRow("SP09", "M", "vtn+vae", 8.0, 75.8),
        ScoreRow("SP03", "F", "vtn+vae", 6.9, 81.0),
        ScoreRow("SP11", "M", "vtn+vae", 8.6, 77.7),
    ])
    by_ser = ev.rank_reference_speakers(table, "SER", stage="vtn+vae")
    by_mcd = ev.rank_reference_speakers(table, "MCD", stage="vtn+vae")
    delta = ev.stage_delta(table, "SP09", "SER", "dysarthric", "vtn+vae")
    record_property("detail", f"SER order={by_ser}, MCD order={by_mcd}, delta={delta:.1f}")
    assert by_ser[0] == "SP09"
    assert abs(delta - 18.2) < 1e-9
    assert by_mcd == ["SP03", "SP09", "SP11"]


# -- Griffin-Lim ------------------------------------------------------------------------------


@pytest.mark.criterion("Griffin-Lim: 440 Hz sine < 0.1 after 60 iterations; final <= first on 10 inputs")
def test_griffin_lim(record_property):
    cfg = dsp.FeatureConfig()
    t = np.arange(cfg.sample_rate) / cfg.sample_rate
    mag = dsp.magnitude(dsp.Waveform(0.5 * np.sin(2 * np.pi * 440 * t), cfg.sample_rate))
    wav = dsp.griffin_lim(mag, iterations=60, seed=0)
    sine_err = dsp.spectral_convergence(wav.samples, mag.frames, cfg)
    rng = np.random.default_rng(9)
    worse = 0
    for seed in range(10):
        noise = dsp.Waveform(rng.normal(size=cfg.sample_rate // 2) * rng.uniform(0.05, 0.5), cfg.sample_rate)
        history = []
        dsp.griffin_lim(dsp.magnitude(noise), iterations=60, seed=seed, history=history)
        worse += history[-1] > history[0]
    record_property("detail", f"sine error={sine_err:.4f}, random inputs getting worse={worse}")
    assert sine_err < 0.1
    assert worse == 0


# -- end-to-end toy pipeline ----------------------------------------------------------------------

REPORT_FILES = ("scores.csv", "scatter.csv", "losses.tsv", "summary.txt", "batches.tsv")


def _run(manifest, out):
    start = time.perf_counter()
    pipe = Pipeline(load_config(ROOT / "configs" / "toy.ini"), load_manifest(manifest), out)
    report = pipe.run_all()
    emit_report(report, out)
    return pipe, report, time.perf_counter() - start


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    saved = os.environ.pop(CACHE_ENV, None)
    try:
        base = tmp_path_factory.mktemp("e2e")
        manifest = toycorpus.write_corpus(base / "corpus")
        first = _run(manifest, base / "run_a")
        second = _run(manifest, base / "run_b")
        diagnostics = stage2_diagnostics(first[0])
    finally:
        if saved is not None:
            os.environ[CACHE_ENV] = saved
    return first, second, diagnostics


def _manifest_sizes(pipe):
    return {spk: sum(r.speaker_id == spk for r in pipe.manifest.records) for spk in pipe.config.speakers}


@pytest.mark.criterion("E2E (a): stage-1 DTW-MCD >= 30% below source-vs-target baseline")
def test_e2e_stage1_mcd(e2e, record_property):
    (pipe, report, seconds), _, _ = e2e
    ratios = {r.speaker: r.mcd_db / report.table.get(r.speaker, "dysarthric").mcd_db
              for r in report.table if r.stage == "vtn"}
    record_property("detail", ", ".join(f"{k} {v:.3f}" for k, v in sorted(ratios.items()))
                    + f", {seconds:.0f}s per run")
    assert _manifest_sizes(pipe) == {spk: 60 for spk in pipe.config.speakers}
    assert seconds < 600
    assert ratios and all(v <= 0.7 for v in ratios.values())


def _graph_reconstruction(model, frames, speaker):
    """Reconstruction through the autograd graph, independent of the exact inference path."""
    with nn.no_grad():
        mean = model.posterior(nn.Tensor(frames))[0][0]
        return model.generate(mean, np.full(len(frames), model.speaker_index(speaker))).data


@pytest.mark.criterion("E2E (b): stage-2 self-target conversion within reconstruction tolerance")
def test_e2e_stage2_self_reconstruction(e2e, record_property):
    (pipe, _, _), _, diag = e2e
    model, _ = pipe._load_vae()
    excess = {}
    for ref in pipe.config.run.references:
        frames = np.concatenate([pipe.normalized(ref, u) for u in pipe.manifest.utt_ids(ref, "train")])
        converted = np.abs(vae.convert_speaker(model, frames, ref) - frames).mean()
        recon = np.abs(_graph_reconstruction(model, frames, ref) - frames).mean()
        excess[ref] = float(converted - recon)
    ratios = {spk: diag["self_l1"][spk] / diag["train_l1"][spk] for spk in diag["self_l1"]}
    record_property("detail", ", ".join(f"{k} excess over recon {excess[k]:.1e}, held-out/train {ratios[k]:.2f}"
                                        for k in sorted(ratios)))
    assert all(v <= 1e-6 for v in excess.values())
    assert all(v <= 1.25 for v in ratios.values())
    assert all(diag["self_l1"][s] < 0.25 * diag["initial_l1"][s] for s in diag["self_l1"])


@pytest.mark.criterion("E2E (c): latent speaker probe < 0.75, raw-frame probe > 0.9")
def test_e2e_latent_probe(e2e, record_property):
    _, _, diag = e2e
    record_property("detail", f"latent={diag['latent_probe']:.3f}, raw={diag['raw_probe']:.3f}")
    assert diag["latent_probe"] < 0.75
    assert diag["raw_probe"] > 0.9


def _artifact_bytes(out: Path) -> dict[str, bytes]:
    files = {name: (out / name).read_bytes() for name in REPORT_FILES}
    for sub in ("converted", "hyp", "cache/checkpoints"):
        for path in sorted((out / sub).rglob("*")):
            if path.is_file():
                files[str(path.relative_to(out))] = path.read_bytes()
    return files


@pytest.mark.criterion("E2E (d): rerun is byte-identical")
def test_e2e_rerun_identical(e2e, record_property):
    (pipe_a, _, _), (pipe_b, _, _), _ = e2e
    a, b = _artifact_bytes(pipe_a.out), _artifact_bytes(pipe_b.out)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    record_property("detail", f"{len(a)} files compared, {len(differing)} differ")
    assert not differing, differing[:10]
