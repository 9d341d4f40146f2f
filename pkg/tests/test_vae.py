import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from dysvc import nncore as nn
from dysvc import vae

SMALL = vae.VAEConfig(n_mels=12, latent_dim=4, hidden_dim=16, speaker_dim=4, classifier_dim=8)


def two_speaker_corpus(n_mels=80, utts=6, frames=50, seed=0):
    rng = np.random.default_rng(seed)
    basis = rng.normal(size=(3, n_mels))
    offsets = {"A": 0.8 * rng.normal(size=n_mels), "B": 0.8 * rng.normal(size=n_mels)}
    corpus = []
    for k, spk in enumerate("AB"):
        for i in range(utts):
            r = np.random.default_rng(1000 * k + i)
            content = np.tanh(r.normal(size=(frames, 3))) @ basis
            corpus.append(((content + offsets[spk] + 0.05 * r.normal(size=(frames, n_mels))).astype(np.float32), spk))
    return corpus


@pytest.fixture(scope="module")
def trained():
    corpus = two_speaker_corpus()
    model, curve = vae.train_vae(corpus, vae.VAETrainConfig(epochs=300, batch_frames=256))
    return corpus, model, curve


# -- KL ------------------------------------------------------------------------------


def test_kl_values():
    zero = vae.LatentPosterior(np.zeros((3, 4)), np.zeros((3, 4)))
    assert vae.kl_to_standard_normal(zero) == 0.0
    one = vae.LatentPosterior(np.ones((1, 1)), np.zeros((1, 1)))
    assert vae.kl_to_standard_normal(one) == pytest.approx(0.5, abs=1e-12)


def test_kl_nonnegative_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n, d = rng.integers(1, 5, size=2)
        post = vae.LatentPosterior(rng.normal(0, 3, (n, d)), rng.uniform(-10, 10, (n, d)))
        assert vae.kl_to_standard_normal(post) >= 0.0


def test_kl_rejects_nonfinite():
    with pytest.raises(nn.NonFiniteError):
        vae.kl_to_standard_normal(vae.LatentPosterior(np.array([[np.nan]]), np.zeros((1, 1))))


# -- frame-wise structure ------------------------------------------------------------------


@pytest.mark.parametrize("hierarchical", [False, True])
def test_permutation_equivariance(hierarchical):
    model = vae.VAEModel(vae.VAEConfig(hierarchical=hierarchical), ["A", "B"], seed=1)
    rng = np.random.default_rng(0)
    for _ in range(100):
        mel = rng.normal(size=(int(rng.integers(1, 30)), 80)).astype(np.float32)
        perm = rng.permutation(len(mel))
        post, post_p = vae.encode(model, mel), vae.encode(model, mel[perm])
        assert np.array_equal(post.mean[perm], post_p.mean)
        assert np.array_equal(post.log_variance[perm], post_p.log_variance)
        out, out_p = vae.convert_speaker(model, mel, "B"), vae.convert_speaker(model, mel[perm], "B")
        assert np.array_equal(out[perm], out_p)


def test_reverse_and_duplicate_frames():
    model = vae.VAEModel(SMALL, ["A", "B"], seed=2)
    mel = np.random.default_rng(3).normal(size=(9, 12)).astype(np.float32)
    assert np.array_equal(vae.encode(model, mel[::-1]).mean, vae.encode(model, mel).mean[::-1])
    dup = np.concatenate([mel, mel[4:5]])
    post = vae.encode(model, dup)
    assert np.array_equal(post.mean[4], post.mean[-1])
    assert len(vae.convert_speaker(model, mel, "A")) == 9


def test_single_frame_and_dimension_errors():
    model = vae.VAEModel(SMALL, ["A", "B"])
    assert vae.convert_speaker(model, np.zeros((1, 12)), "B").shape == (1, 12)
    with pytest.raises(nn.DimensionError):
        vae.encode(model, np.zeros((4, 11)))
    with pytest.raises(KeyError, match="C"):
        vae.convert_speaker(model, np.zeros((2, 12)), "C")


def test_inference_path_matches_graph():
    model = vae.VAEModel(SMALL, ["A", "B"], seed=4)
    mel = np.random.default_rng(5).normal(size=(7, 12)).astype(np.float32)
    with nn.no_grad():
        mean = model.posterior(nn.Tensor(mel))[0][0]
        graph = model.generate(mean, np.ones(7, dtype=int)).data
    np.testing.assert_allclose(vae.encode(model, mel).mean, mean.data, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(vae.convert_speaker(model, mel, "B"), graph, rtol=1e-5, atol=1e-5)


def test_logvar_clamped():
    model = vae.VAEModel(SMALL, ["A", "B"])
    model.enc_logvar.bias.data[:] = 1e3
    assert np.all(vae.encode(model, np.zeros((3, 12))).log_variance == vae.LOGVAR_LIMIT)


def test_sampling_is_seeded():
    model = vae.VAEModel(SMALL, ["A", "B"])
    mel = np.random.default_rng(6).normal(size=(5, 12)).astype(np.float32)
    a = vae.convert_speaker(model, mel, "B", mode="sample", seed=3)
    b = vae.convert_speaker(model, mel, "B", mode="sample", seed=3)
    c = vae.convert_speaker(model, mel, "B", mode="sample", seed=4)
    assert a.tobytes() == b.tobytes() and not np.array_equal(a, c)
    with pytest.raises(ValueError):
        vae.convert_speaker(model, mel, "B", mode="median")


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_other_speakers_differ(n, seed):
    rng = np.random.default_rng(seed)
    spk = rng.integers(0, n, size=40)
    other = vae.other_speakers(spk, n, rng)
    assert np.all(other != spk) and np.all((other >= 0) & (other < n))


# -- gradients ----------------------------------------------------------------------------


def _f64_batch(model, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, model.config.n_mels))
    spk = np.array([0, 1, 0, 1, 1])
    other = 1 - spk
    eps = [rng.normal(size=(5, d)) for d in vae._latent_dims(model)]
    return x, spk, other, eps


@pytest.mark.parametrize("hierarchical", [False, True])
def test_autoencoder_player_gradient(hierarchical):
    with nn.default_dtype(np.float64):
        model = vae.VAEModel(vae.VAEConfig(n_mels=12, latent_dim=4, hidden_dim=16, speaker_dim=4,
                                           classifier_dim=8, hierarchical=hierarchical), ["A", "B"], seed=7)
    x, spk, other, eps = _f64_batch(model)
    err = nn.gradient_check(lambda: vae.autoencoder_loss(model, x, spk, other, eps)[0],
                            model.autoencoder_params(), probe_count=40)
    assert err < 1e-4


@pytest.mark.parametrize("term", ["recon", "kl", "cyc", "adv_enc"])
def test_each_autoencoder_term_gradient(term):
    with nn.default_dtype(np.float64):
        model = vae.VAEModel(SMALL, ["A", "B"], seed=8)
    x, spk, other, eps = _f64_batch(model, 1)
    err = nn.gradient_check(lambda: vae.autoencoder_loss(model, x, spk, other, eps)[1][term],
                            model.autoencoder_params(), probe_count=30)
    assert err < 1e-4


def test_classifier_player_gradient():
    with nn.default_dtype(np.float64):
        model = vae.VAEModel(SMALL, ["A", "B"], seed=9)
    x, spk, _, _ = _f64_batch(model, 2)
    err = nn.gradient_check(lambda: vae.classifier_loss(model, x, spk), model.classifier_params(), probe_count=30)
    assert err < 1e-4


def test_classifier_loss_does_not_reach_encoder():
    model = vae.VAEModel(SMALL, ["A", "B"])
    x = np.random.default_rng(0).normal(size=(4, 12))
    vae.classifier_loss(model, x, np.array([0, 1, 0, 1])).backward()
    assert all(p.grad is None for p in model.autoencoder_params().values())
    assert all(p.grad is not None for p in model.classifier_params().values())


# -- training -----------------------------------------------------------------------------


def test_single_speaker_rejected():
    with pytest.raises(vae.ConfigurationError, match="two speakers"):
        vae.train_vae([(np.zeros((3, 80), np.float32), "A")], vae.VAETrainConfig(epochs=1))


def test_classifier_near_chance_at_init():
    corpus = two_speaker_corpus()
    model = vae.VAEModel(vae.VAEConfig(), ["A", "B"], seed=0)
    frames, spk = vae.stack_corpus(model, corpus)
    assert abs(vae.classifier_accuracy(model, frames, spk) - 0.5) <= 0.15


def test_training_loss_decreases(trained):
    _, _, curve = trained
    assert len(curve) == 300
    assert curve[-1].total <= 0.3 * curve[0].total
    assert curve[0].tsv().count("\t") == 5


def test_self_reconstruction_close(trained):
    corpus, model, _ = trained
    mel, spk = corpus[0]
    err = np.abs(vae.reconstruct(model, mel, spk) - mel).sum(1).mean()
    gap = np.abs(corpus[0][0] - corpus[6][0]).sum(1).mean()
    assert err < 0.1 * gap


def test_latent_probe_fails_raw_probe_succeeds(trained):
    corpus, model, _ = trained
    frames, spk = vae.stack_corpus(model, corpus)
    latents = vae.encode(model, frames).mean
    order = np.random.default_rng(0).permutation(len(frames))
    train, test = order[: len(order) * 2 // 3], order[len(order) * 2 // 3 :]
    scores = {}
    for name, feats in [("raw", frames), ("latent", latents)]:
        probe = LogisticRegression(max_iter=2000).fit(feats[train], spk[train])
        scores[name] = probe.score(feats[test], spk[test])
    assert scores["raw"] > 0.9 and scores["latent"] < 0.75


def test_training_deterministic():
    corpus = two_speaker_corpus(n_mels=12, utts=2, frames=10)
    runs = [vae.train_vae(corpus, vae.VAETrainConfig(epochs=3, batch_frames=16), SMALL) for _ in range(2)]
    assert [e.tsv() for e in runs[0][1]] == [e.tsv() for e in runs[1][1]]
    for (_, a), (_, b) in zip(runs[0][0].named_parameters(), runs[1][0].named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    assert math.isfinite(runs[0][1][-1].adv_cls)
