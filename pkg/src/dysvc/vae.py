"""Stage 2: frame-wise VAE speaker converter.

Every network in this module maps one frame to one frame, so conversion
cannot alter timing or any property spread across frames.  Training is
nonparallel and optimizes

    recon + λ_kl·KL + λ_cyc·cyclic + λ_adv·adv_enc

for encoder/decoder, alternating 1:1 with a cross-entropy update of a
speaker classifier that reads the latent means.  ``adv_enc`` is the negative
entropy of that classifier's prediction, so the encoder is pushed towards
latents that carry no speaker information.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nncore as nn
from .nncore import ops

log = logging.getLogger(__name__)

LOGVAR_LIMIT = 10.0


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class VAEConfig:
    n_mels: int = 80
    latent_dim: int = 16
    hidden_dim: int = 128
    speaker_dim: int = 16
    classifier_dim: int = 64
    lambda_kl: float = 0.1
    lambda_cyc: float = 1.0
    lambda_adv: float = 0.1
    hierarchical: bool = False
    latent2_dim: int = 8


@dataclass(frozen=True)
class VAETrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-3
    batch_frames: int = 256
    seed: int = 0


@dataclass
class LatentPosterior:
    mean: np.ndarray
    log_variance: np.ndarray

    def __len__(self) -> int:
        return len(self.mean)


@dataclass
class VAELog:
    epoch: int
    recon: float
    kl: float
    cyc: float
    adv_enc: float
    adv_cls: float

    @property
    def total(self) -> float:
        return self.recon + self.kl + self.cyc + self.adv_enc

    def tsv(self) -> str:
        return "\t".join([str(self.epoch)] + [f"{v:.6f}" for v in
                         (self.recon, self.kl, self.cyc, self.adv_enc, self.adv_cls)])


class VAEModel(nn.Module):
    def __init__(self, config: VAEConfig, speakers: Sequence[str], seed: int = 0):
        rng = np.random.default_rng(seed)
        c = config
        self.config = c
        self.speakers = tuple(speakers)
        self.enc_hidden = [nn.Linear(c.n_mels, c.hidden_dim, rng), nn.Linear(c.hidden_dim, c.hidden_dim, rng)]
        self.enc_mean = nn.Linear(c.hidden_dim, c.latent_dim, rng)
        self.enc_logvar = nn.Linear(c.hidden_dim, c.latent_dim, rng)
        if c.hierarchical:
            self.enc2_mean = nn.Linear(c.latent_dim, c.latent2_dim, rng)
            self.enc2_logvar = nn.Linear(c.latent_dim, c.latent2_dim, rng)
        z_dim = c.latent_dim + (c.latent2_dim if c.hierarchical else 0)
        self.speaker_table = nn.Embedding(len(self.speakers), c.speaker_dim, rng, scale=1.0)
        self.dec_hidden = [nn.Linear(z_dim + c.speaker_dim, c.hidden_dim, rng),
                           nn.Linear(c.hidden_dim, c.hidden_dim, rng)]
        self.dec_out = nn.Linear(c.hidden_dim, c.n_mels, rng)
        self.classifier = [nn.Linear(c.latent_dim, c.classifier_dim, rng),
                           nn.Linear(c.classifier_dim, len(self.speakers), rng)]

    @property
    def dtype(self):
        return self.dec_out.weight.dtype

    def speaker_index(self, speaker: str) -> int:
        try:
            return self.speakers.index(speaker)
        except ValueError:
            raise KeyError(f"unknown speaker {speaker!r}; model knows {list(self.speakers)}") from None

    def autoencoder_params(self) -> dict[str, nn.Parameter]:
        return {k: v for k, v in self.param_dict().items() if not k.startswith("classifier.")}

    def classifier_params(self) -> dict[str, nn.Parameter]:
        return {k: v for k, v in self.param_dict().items() if k.startswith("classifier.")}

    # -- differentiable graph ------------------------------------------------
    def posterior(self, x: nn.Tensor):
        h = x
        for lin in self.enc_hidden:
            h = ops.relu(lin(h))
        mean = self.enc_mean(h)
        logvar = ops.clip(self.enc_logvar(h), -LOGVAR_LIMIT, LOGVAR_LIMIT)
        if not self.config.hierarchical:
            return [(mean, logvar)]
        mean2 = self.enc2_mean(mean)
        logvar2 = ops.clip(self.enc2_logvar(mean), -LOGVAR_LIMIT, LOGVAR_LIMIT)
        return [(mean, logvar), (mean2, logvar2)]

    def generate(self, z: nn.Tensor, speaker_ids: np.ndarray) -> nn.Tensor:
        h = ops.concat([z, self.speaker_table(speaker_ids)], axis=-1)
        for lin in self.dec_hidden:
            h = ops.relu(lin(h))
        return self.dec_out(h)

    def classify(self, mean: nn.Tensor) -> nn.Tensor:
        return self.classifier[1](ops.relu(self.classifier[0](mean)))

    # -- exact frame-wise inference -------------------------------------------
    def posterior_frames(self, x: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        h = x.astype(self.dtype)
        for lin in self.enc_hidden:
            h = np.maximum(_dense(h, lin), 0)
        mean = _dense(h, self.enc_mean)
        logvar = np.clip(_dense(h, self.enc_logvar), -LOGVAR_LIMIT, LOGVAR_LIMIT)
        if not self.config.hierarchical:
            return [(mean, logvar)]
        return [(mean, logvar), (_dense(mean, self.enc2_mean),
                                 np.clip(_dense(mean, self.enc2_logvar), -LOGVAR_LIMIT, LOGVAR_LIMIT))]

    def generate_frames(self, z: np.ndarray, speaker: int) -> np.ndarray:
        emb = np.broadcast_to(self.speaker_table.weight.data[speaker], (len(z), self.config.speaker_dim))
        h = np.concatenate([z.astype(self.dtype), emb], axis=-1)
        for lin in self.dec_hidden:
            h = np.maximum(_dense(h, lin), 0)
        return _dense(h, self.dec_out)


def _dense(x: np.ndarray, layer: nn.Linear) -> np.ndarray:
    # Per-row products reduced over the input axis: each output row depends on
    # its own input row only, with an arithmetic order independent of the row's
    # position.  A BLAS GEMM does not promise that.
    y = (x[:, :, None] * layer.weight.data[None]).sum(axis=1)
    return y + layer.bias.data if layer.bias is not None else y


def _check_mel(model: VAEModel, mel) -> np.ndarray:
    frames = getattr(mel, "frames", mel)
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != model.config.n_mels:
        raise nn.DimensionError(f"expected T x {model.config.n_mels} frames, got shape {frames.shape}")
    return frames


# ---------------------------------------------------------------------------
# public operations


def encode(model: VAEModel, mel) -> LatentPosterior:
    """Per-frame Gaussian posterior; rows of the output follow rows of the input."""
    levels = model.posterior_frames(_check_mel(model, mel))
    return LatentPosterior(np.concatenate([m for m, _ in levels], axis=-1),
                           np.concatenate([lv for _, lv in levels], axis=-1))


def kl_to_standard_normal(post: LatentPosterior) -> float:
    """Mean over frames of ½·Σ_l (μ² + σ² − log σ² − 1)."""
    mu = np.asarray(post.mean, dtype=np.float64)
    lv = np.asarray(post.log_variance, dtype=np.float64)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(lv))):
        raise nn.NonFiniteError("posterior is not finite")
    per_frame = 0.5 * np.sum(mu * mu + np.exp(lv) - lv - 1.0, axis=-1)
    return float(np.mean(np.maximum(per_frame, 0.0)))


def _latent(model: VAEModel, frames: np.ndarray, mode: str, seed: int | None) -> np.ndarray:
    post = encode(model, frames)
    if mode == "mean":
        return post.mean
    if mode != "sample":
        raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(post.mean.shape).astype(post.mean.dtype)
    return post.mean + np.exp(0.5 * post.log_variance) * eps


def convert_speaker(model: VAEModel, mel, target: str, mode: str = "mean", seed: int | None = 0) -> np.ndarray:
    """Decode every frame's latent with ``target``'s embedding (frame count unchanged)."""
    idx = model.speaker_index(target)
    frames = _check_mel(model, mel)
    return model.generate_frames(_latent(model, frames, mode, seed), idx)


def reconstruct(model: VAEModel, mel, speaker: str, mode: str = "mean", seed: int | None = 0) -> np.ndarray:
    return convert_speaker(model, mel, speaker, mode, seed)


# ---------------------------------------------------------------------------
# losses


def _kl_tensor(levels) -> nn.Tensor:
    total = None
    for mean, logvar in levels:
        kl = ((mean * mean + ops.exp(logvar) - logvar - 1.0).sum(axis=-1) * 0.5).mean()
        total = kl if total is None else total + kl
    return total


def _l1_per_frame(a: nn.Tensor, b) -> nn.Tensor:
    return ops.tabs(a - b).sum(axis=-1).mean()


def _sample(levels, eps: Sequence[np.ndarray] | None) -> nn.Tensor:
    zs = []
    for i, (mean, logvar) in enumerate(levels):
        zs.append(mean if eps is None else mean + ops.exp(logvar * 0.5) * eps[i])
    return zs[0] if len(zs) == 1 else ops.concat(zs, axis=-1)


def _means(levels) -> nn.Tensor:
    return _sample(levels, None)


def autoencoder_loss(model: VAEModel, x: np.ndarray, speakers: np.ndarray, other: np.ndarray,
                     eps: Sequence[np.ndarray] | None):
    """Encoder/decoder objective.  Returns ``(total, parts)`` with tensor parts."""
    c = model.config
    xt = nn.Tensor(x.astype(model.dtype))
    levels = model.posterior(xt)
    recon = _l1_per_frame(model.generate(_sample(levels, eps), speakers), xt)
    kl = _kl_tensor(levels)
    total = recon + kl * c.lambda_kl
    parts = {"recon": recon, "kl": kl}
    if c.lambda_cyc:
        converted = model.generate(_means(levels), other)
        back = model.generate(_means(model.posterior(converted)), speakers)
        cyc = _l1_per_frame(back, xt)
        total = total + cyc * c.lambda_cyc
        parts["cyc"] = cyc
    if c.lambda_adv:
        logp = ops.log_softmax(model.classify(levels[0][0]), axis=-1)
        adv = (ops.exp(logp) * logp).sum(axis=-1).mean()  # negative entropy
        total = total + adv * c.lambda_adv
        parts["adv_enc"] = adv
    return total, parts


def classifier_loss(model: VAEModel, x: np.ndarray, speakers: np.ndarray) -> nn.Tensor:
    """Cross-entropy of the speaker classifier on (detached) latent means."""
    with nn.no_grad():
        mean = model.posterior(nn.Tensor(x.astype(model.dtype)))[0][0]
    logp = ops.log_softmax(model.classify(nn.Tensor(mean.data)), axis=-1)
    return -logp[np.arange(len(speakers)), speakers].mean()


def classifier_accuracy(model: VAEModel, frames: np.ndarray, speakers: np.ndarray) -> float:
    mean = encode(model, frames).mean[:, : model.config.latent_dim]
    with nn.no_grad():
        logits = model.classify(nn.Tensor(mean)).data
    return float(np.mean(logits.argmax(-1) == np.asarray(speakers)))


def other_speakers(speakers: np.ndarray, n_speakers: int, rng: np.random.Generator) -> np.ndarray:
    """A uniformly drawn speaker index different from each entry of ``speakers``."""
    shift = rng.integers(1, n_speakers, size=len(speakers))
    return (speakers + shift) % n_speakers


# ---------------------------------------------------------------------------
# training


def stack_corpus(model: VAEModel, corpus: Sequence[tuple[np.ndarray, str]]):
    frames = np.concatenate([_check_mel(model, mel) for mel, _ in corpus], axis=0)
    speakers = np.concatenate([np.full(len(_check_mel(model, mel)), model.speaker_index(s))
                               for mel, s in corpus])
    return frames, speakers


def train_vae(corpus: Sequence[tuple[np.ndarray, str]], config: VAETrainConfig = VAETrainConfig(),
              model_config: VAEConfig = VAEConfig(), model: VAEModel | None = None,
              speakers: Sequence[str] | None = None,
              on_epoch: Callable[[VAELog], None] | None = None):
    """Nonparallel training on ``(mel, speaker)`` items; returns ``(model, curve)``."""
    names = sorted({s for _, s in corpus})
    if len(names) < 2:
        raise ConfigurationError("VAE training needs at least two speakers (cyclic and adversarial terms)")
    if model is None:
        model = VAEModel(model_config, speakers or names, seed=config.seed)
    frames, spk = stack_corpus(model, corpus)
    n_spk = len(model.speakers)
    rng = np.random.default_rng(config.seed)
    ae_params, cls_params = model.autoencoder_params(), model.classifier_params()
    ae_state = nn.OptimizerState(learning_rate=config.learning_rate)
    cls_state = nn.OptimizerState(learning_rate=config.learning_rate)
    curve: list[VAELog] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(frames))
        sums = dict.fromkeys(("recon", "kl", "cyc", "adv_enc", "adv_cls"), 0.0)
        batches = 0
        for start in range(0, len(order), config.batch_frames):
            idx = order[start : start + config.batch_frames]
            x, s = frames[idx], spk[idx]
            other = other_speakers(s, n_spk, rng)
            eps = [rng.standard_normal((len(idx), d)).astype(model.dtype) for d in _latent_dims(model)]
            nn.zero_grads(ae_params)
            nn.zero_grads(cls_params)
            total, parts = autoencoder_loss(model, x, s, other, eps)
            nn.ops.assert_finite(total, "VAE loss")
            total.backward()
            nn.adam_step(ae_params, ae_state)
            nn.zero_grads(cls_params)
            ce = classifier_loss(model, x, s)
            ce.backward()
            nn.adam_step(cls_params, cls_state)
            c = model.config
            sums["recon"] += parts["recon"].item()
            sums["kl"] += c.lambda_kl * parts["kl"].item()
            sums["cyc"] += c.lambda_cyc * parts["cyc"].item() if "cyc" in parts else 0.0
            sums["adv_enc"] += c.lambda_adv * parts["adv_enc"].item() if "adv_enc" in parts else 0.0
            sums["adv_cls"] += ce.item()
            batches += 1
        entry = VAELog(epoch, **{k: v / batches for k, v in sums.items()})
        curve.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        log.debug("vae epoch %d %s", epoch, entry.tsv())
    nn.zero_grads(ae_params)
    nn.zero_grads(cls_params)
    return model, curve


def _latent_dims(model: VAEModel) -> list[int]:
    c = model.config
    return [c.latent_dim, c.latent2_dim] if c.hierarchical else [c.latent_dim]
