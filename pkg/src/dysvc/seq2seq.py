"""Stage 1: Transformer encoder-decoder spectrogram converter.

Training follows three phases:

1. ``pretrain_decoder`` trains a text encoder together with the decoder as a
   multi-speaker TTS model.
2. ``pretrain_encoder`` trains the speech encoder to reconstruct mel
   spectrograms through the frozen decoder, so its hidden states mimic the
   text encoder's.
3. ``train_vc`` fine-tunes speech encoder and decoder on parallel pairs.

The decoder predicts ``reduction`` frames per step and a stop logit per
frame.  Speaker identity enters twice: a source-speaker embedding is added
to the encoder output and a target-speaker embedding to the decoder prenet
output.
"""
from __future__ import annotations

import copy
import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from . import nncore as nn
from .nncore import ops

log = logging.getLogger(__name__)


class VocabularyError(KeyError):
    pass


class PairingError(ValueError):
    pass


class PhaseError(RuntimeError):
    """Training was requested in a state that violates the phase contract."""


@dataclass(frozen=True)
class Seq2SeqConfig:
    n_mels: int = 80
    d_model: int = 64
    n_heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    reduction: int = 2
    encoder_reduction: int = 2
    prenet_dropout: float = 0.0
    stop_pos_weight: float = 5.0
    stop_threshold: float = 0.5
    ratio_cap: float = 2.0
    guided_attn_weight: float = 1.0
    guided_attn_sigma: float = 0.4


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0


class Vocabulary:
    """Token inventory with ``<pad>`` = 0 and ``<eos>`` = 1."""

    PAD, EOS = 0, 1

    def __init__(self, symbols: Iterable[str]):
        self.symbols = ["<pad>", "<eos>"] + sorted(set(symbols))
        self.index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        ids = []
        for tok in tokens:
            if tok not in self.index or self.index[tok] < 2:
                raise VocabularyError(f"symbol {tok!r} is not in the vocabulary")
            ids.append(self.index[tok])
        return np.array(ids + [self.EOS], dtype=np.int64)


class TrainingPhase(enum.Enum):
    DECODER_PRETRAIN = "decoder_pretrain"
    ENCODER_PRETRAIN = "encoder_pretrain"
    VC_TRAIN = "vc_train"


_PHASE_GROUPS = {
    TrainingPhase.DECODER_PRETRAIN: ("text_embed", "text_encoder", "text_norm", "decoder"),
    TrainingPhase.ENCODER_PRETRAIN: ("speech_prenet", "speech_encoder", "speech_norm", "source_speaker"),
    TrainingPhase.VC_TRAIN: ("speech_prenet", "speech_encoder", "speech_norm", "source_speaker", "decoder"),
}


@dataclass
class TTSExample:
    utt_id: str
    mel: np.ndarray
    speaker: str
    tokens: Sequence[str] = ()


@dataclass
class ParallelPair:
    utt_id: str
    source: np.ndarray
    source_speaker: str
    target: np.ndarray
    target_speaker: str


@dataclass
class EpochLog:
    epoch: int
    phase: str
    train_loss: float
    val_loss: float | None = None

    def tsv(self) -> str:
        val = "" if self.val_loss is None else f"{self.val_loss:.6f}"
        return f"{self.epoch}\t{self.phase}\t{self.train_loss:.6f}\t{val}"


@dataclass
class StepInfo:
    phase: TrainingPhase
    epoch: int
    utt_ids: list[str]
    params: dict[str, nn.Parameter]


class DecodeResult(NamedTuple):
    mel: np.ndarray
    truncated: bool


# ---------------------------------------------------------------------------
# model


class EncoderLayer(nn.Module):
    def __init__(self, cfg: Seq2SeqConfig, rng):
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = nn.MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.FeedForward(cfg.d_model, cfg.ffn_dim, rng)

    def __call__(self, x, mask):
        h = self.norm1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: Seq2SeqConfig, rng):
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = nn.MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = nn.MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.FeedForward(cfg.d_model, cfg.ffn_dim, rng)

    def __call__(self, x, self_mask, memory, memory_mask):
        """Returns the layer output and its cross-attention weights."""
        h = self.norm1(x)
        x = x + self.self_attn(h, h, self_mask)
        ctx, weights = self.cross_attn(self.norm2(x), memory, memory_mask, return_weights=True)
        x = x + ctx
        return x + self.ffn(self.norm3(x)), weights


class Decoder(nn.Module):
    def __init__(self, cfg: Seq2SeqConfig, n_speakers: int, rng):
        d = cfg.d_model
        self.prenet = [nn.Linear(cfg.n_mels, d, rng), nn.Linear(d, d, rng)]
        self.target_speaker = nn.Embedding(n_speakers, d, rng)
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.dec_layers)]
        self.norm = nn.LayerNorm(d)
        self.frames_out = nn.Linear(d, cfg.n_mels * cfg.reduction, rng)
        self.stop_out = nn.Linear(d, cfg.reduction, rng)


class Seq2SeqModel(nn.Module):
    def __init__(self, config: Seq2SeqConfig, speakers: Sequence[str], vocab: Vocabulary, seed: int = 0):
        rng = np.random.default_rng(seed)
        cfg = config
        d = cfg.d_model
        self.config = cfg
        self.speakers = tuple(speakers)
        self.vocab = vocab
        self.text_embed = nn.Embedding(len(vocab), d, rng, scale=1.0)
        self.text_encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.enc_layers)]
        self.text_norm = nn.LayerNorm(d)
        self.speech_prenet = [nn.Linear(cfg.n_mels * cfg.encoder_reduction, d, rng), nn.Linear(d, d, rng)]
        self.speech_encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.enc_layers)]
        self.speech_norm = nn.LayerNorm(d)
        self.source_speaker = nn.Embedding(len(self.speakers), d, rng)
        self.decoder = Decoder(cfg, len(self.speakers), rng)

    # -- bookkeeping ------------------------------------------------------
    @property
    def dtype(self):
        return self.decoder.frames_out.weight.dtype

    def speaker_index(self, speaker: str) -> int:
        try:
            return self.speakers.index(speaker)
        except ValueError:
            raise KeyError(f"unknown speaker {speaker!r}; model knows {list(self.speakers)}") from None

    def group(self, phase: TrainingPhase) -> dict[str, nn.Parameter]:
        prefixes = tuple(p + "." for p in _PHASE_GROUPS[phase])
        return {k: v for k, v in self.param_dict().items() if k.startswith(prefixes)}

    def enter_phase(self, phase: TrainingPhase) -> dict[str, nn.Parameter]:
        """Set trainable flags for ``phase`` and return the parameters it touches."""
        for p in self.parameters():
            p.trainable = True
        if phase is TrainingPhase.ENCODER_PRETRAIN:
            self.decoder.freeze()
        params = self.group(phase)
        if phase is TrainingPhase.ENCODER_PRETRAIN:
            params.update({k: v for k, v in self.param_dict().items() if k.startswith("decoder.")})
        return params

    # -- encoders -----------------------------------------------------------
    def _encode(self, x, lengths, layers, norm):
        s = x.shape[1]
        x = x + nn.Tensor(nn.sinusoid_positions(s, self.config.d_model, self.dtype))
        key_mask = np.arange(s)[None, :] < np.asarray(lengths)[:, None]
        mask = key_mask[:, None, :]
        for layer in layers:
            x = layer(x, mask)
        return norm(x), key_mask

    def encode_text(self, token_ids: Sequence[np.ndarray]):
        lengths = [len(t) for t in token_ids]
        batch = np.zeros((len(token_ids), max(lengths)), dtype=np.int64)
        for i, t in enumerate(token_ids):
            batch[i, : len(t)] = t
        return self._encode(self.text_embed(batch), lengths, self.text_encoder, self.text_norm)

    def encode_speech(self, mels: Sequence[np.ndarray], speakers: Sequence[str]):
        er, n_mels = self.config.encoder_reduction, self.config.n_mels
        lengths = [math.ceil(len(m) / er) for m in mels]
        batch = np.zeros((len(mels), max(lengths) * er, n_mels), dtype=self.dtype)
        for i, m in enumerate(mels):
            if m.ndim != 2 or m.shape[1] != n_mels:
                raise nn.DimensionError(f"expected T x {n_mels} mel, got {m.shape}")
            batch[i, : len(m)] = m
            batch[i, len(m) : lengths[i] * er] = m[-1]
        x = nn.Tensor(batch.reshape(len(mels), max(lengths), er * n_mels))
        for lin in self.speech_prenet:
            x = ops.relu(lin(x))
        memory, mask = self._encode(x, lengths, self.speech_encoder, self.speech_norm)
        spk = self.source_speaker([self.speaker_index(s) for s in speakers])
        return memory + spk.reshape(len(mels), 1, -1), mask

    # -- decoder --------------------------------------------------------------
    def decode(self, inputs: nn.Tensor, steps: Sequence[int], speakers: Sequence[str], memory, memory_mask,
               rng: np.random.Generator | None = None, return_attention: bool = False):
        """Run the decoder on step inputs ``(B, K, n_mels)``.

        Returns frames ``(B, K * r, n_mels)`` and stop logits ``(B, K * r)``,
        plus the list of per-layer cross-attention weights ``(B, H, K, S)``
        when ``return_attention`` is set.
        """
        dec, cfg = self.decoder, self.config
        b, k, _ = inputs.shape
        x = inputs
        for lin in dec.prenet:
            x = nn.dropout(ops.relu(lin(x)), cfg.prenet_dropout, rng)
        spk = dec.target_speaker([self.speaker_index(s) for s in speakers])
        x = x + spk.reshape(b, 1, -1) + nn.Tensor(nn.sinusoid_positions(k, cfg.d_model, self.dtype))
        valid = np.arange(k)[None, :] < np.asarray(steps)[:, None]
        self_mask = nn.causal_mask(k)[None] & valid[:, None, :]
        cross_mask = np.asarray(memory_mask)[:, None, :]
        attention = []
        for layer in dec.layers:
            x, weights = layer(x, self_mask, memory, cross_mask)
            attention.append(weights)
        x = dec.norm(x)
        frames = dec.frames_out(x).reshape(b, k * cfg.reduction, cfg.n_mels)
        stops = dec.stop_out(x).reshape(b, k * cfg.reduction)
        return (frames, stops, attention) if return_attention else (frames, stops)

    def teacher_inputs(self, targets: Sequence[np.ndarray]):
        """Shifted decoder inputs, padded targets and masks for teacher forcing."""
        r, n_mels = self.config.reduction, self.config.n_mels
        steps = [math.ceil(len(t) / r) for t in targets]
        k = max(steps)
        padded = np.zeros((len(targets), k * r, n_mels), dtype=self.dtype)
        frame_mask = np.zeros((len(targets), k * r), dtype=bool)
        stop_target = np.zeros((len(targets), k * r), dtype=self.dtype)
        stop_mask = np.zeros((len(targets), k * r), dtype=bool)
        for i, t in enumerate(targets):
            padded[i, : len(t)] = t
            frame_mask[i, : len(t)] = True
            stop_target[i, len(t) - 1 :] = 1.0
            stop_mask[i, : steps[i] * r] = True
        inputs = np.zeros((len(targets), k, n_mels), dtype=self.dtype)
        inputs[:, 1:] = padded[:, r - 1 : (k - 1) * r : r]
        return nn.Tensor(inputs), steps, padded, frame_mask, stop_target, stop_mask


# ---------------------------------------------------------------------------
# losses


def guided_attention_penalty(steps: Sequence[int], lengths: Sequence[int], shape, sigma: float) -> np.ndarray:
    """``1 - exp(-(s/S - k/K)² / 2σ²)`` per utterance, zero outside the valid region.

    Attention far from the diagonal of the (decoder step, memory position)
    plane is penalized, which speeds up learning a monotonic alignment.
    """
    b, kmax, smax = shape
    out = np.zeros((b, kmax, smax))
    for i, (k, s) in enumerate(zip(steps, lengths)):
        kk = np.arange(k)[:, None] / k
        ss = np.arange(s)[None, :] / s
        out[i, :k, :s] = 1.0 - np.exp(-((ss - kk) ** 2) / (2.0 * sigma**2))
    return out


def spectrogram_loss(model: Seq2SeqModel, memory, memory_mask, targets: Sequence[np.ndarray],
                     speakers: Sequence[str], rng=None):
    """Teacher-forced L1 + weighted stop BCE + guided attention.

    Returns ``(total, l1)`` tensors.
    """
    inputs, steps, padded, frame_mask, stop_target, stop_mask = model.teacher_inputs(targets)
    frames, stops, attention = model.decode(inputs, steps, speakers, memory, memory_mask, rng,
                                            return_attention=True)
    fm = frame_mask[..., None].astype(model.dtype)
    l1 = (ops.tabs(frames - padded) * fm).sum() * (1.0 / (fm.sum() * model.config.n_mels))
    w = model.config.stop_pos_weight
    per = ops.softplus(-stops) * (w * stop_target) + ops.softplus(stops) * (1.0 - stop_target)
    bce = (per * stop_mask.astype(model.dtype)).sum() * (1.0 / stop_mask.sum())
    total = l1 + bce
    if model.config.guided_attn_weight:
        lengths = np.asarray(memory_mask).sum(axis=1)
        penalty = guided_attention_penalty(steps, lengths, (len(targets), inputs.shape[1], memory.shape[1]),
                                           model.config.guided_attn_sigma).astype(model.dtype)
        count = float(np.sum(steps)) * model.config.n_heads * len(attention)
        ga = None
        for weights in attention:
            term = (weights * penalty[:, None]).sum()
            ga = term if ga is None else ga + term
        total = total + ga * (model.config.guided_attn_weight / count)
    return total, l1


def tts_loss(model: Seq2SeqModel, batch: Sequence[TTSExample], rng=None):
    ids = [model.vocab.encode(ex.tokens) for ex in batch]
    memory, mask = model.encode_text(ids)
    return spectrogram_loss(model, memory, mask, [ex.mel for ex in batch], [ex.speaker for ex in batch], rng)


def reconstruction_loss(model: Seq2SeqModel, batch: Sequence[TTSExample], rng=None):
    memory, mask = model.encode_speech([ex.mel for ex in batch], [ex.speaker for ex in batch])
    return spectrogram_loss(model, memory, mask, [ex.mel for ex in batch], [ex.speaker for ex in batch], rng)


def vc_loss(model: Seq2SeqModel, batch: Sequence[ParallelPair], rng=None):
    memory, mask = model.encode_speech([p.source for p in batch], [p.source_speaker for p in batch])
    return spectrogram_loss(model, memory, mask, [p.target for p in batch], [p.target_speaker for p in batch], rng)


# ---------------------------------------------------------------------------
# training


def _fit(model, phase, params, examples, loss_fn, config: TrainConfig, validation=None,
         on_step: Callable[[StepInfo], None] | None = None, select_best: bool = False,
         select_by: Callable[[Seq2SeqModel], float] | None = None, select_every: int = 1):
    rng = np.random.default_rng(config.seed)
    state = nn.OptimizerState(learning_rate=config.learning_rate)
    curve: list[EpochLog] = []
    best = (math.inf, None)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(examples))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start : start + config.batch_size]]
            nn.zero_grads(params)
            loss, _ = loss_fn(model, batch, rng if model.config.prenet_dropout > 0 else None)
            nn.ops.assert_finite(loss, f"{phase.value} loss")
            loss.backward()
            if on_step is not None:
                on_step(StepInfo(phase, epoch, [ex.utt_id for ex in batch], params))
            nn.adam_step(params, state)
            total += loss.item() * len(batch)
            count += len(batch)
        val = None
        if validation:
            val = evaluate_loss(model, validation, loss_fn)
        if select_best:
            if select_by is not None:
                due = epoch % select_every == 0 or epoch == config.epochs
                score = select_by(model) if due else math.inf
            else:
                score = val
            if score < best[0]:
                best = (score, model.state_dict())
        curve.append(EpochLog(epoch, phase.value, total / count, val))
        log.debug("%s epoch %d train %.4f val %s", phase.value, epoch, total / count, val)
    nn.zero_grads(params)
    if select_best and best[1] is not None:
        model.load_state_dict(best[1])
    return curve


def evaluate_loss(model, examples, loss_fn, batch_size: int = 16, l1_only: bool = True) -> float:
    """Mean teacher-forced loss over ``examples`` (no gradient)."""
    total = 0.0
    with nn.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = examples[start : start + batch_size]
            full, l1 = loss_fn(model, batch)
            total += (l1 if l1_only else full).item() * len(batch)
    return total / len(examples)


def _require_nonempty(examples, what):
    if not examples:
        raise ValueError(f"{what} corpus is empty")


def pretrain_decoder(corpus: Sequence[TTSExample], config: TrainConfig = TrainConfig(),
                     model: Seq2SeqModel | None = None, model_config: Seq2SeqConfig = Seq2SeqConfig(),
                     speakers: Sequence[str] | None = None, vocab: Vocabulary | None = None,
                     on_step=None):
    """Phase 1: train text encoder + decoder as a TTS model.

    Returns ``(model, curve)``.  A model is built from ``model_config`` when
    none is passed; its speaker table covers ``speakers`` (default: the
    corpus speakers) and its vocabulary ``vocab`` (default: corpus tokens).
    """
    _require_nonempty(corpus, "TTS")
    if model is None:
        vocab = vocab or Vocabulary(tok for ex in corpus for tok in ex.tokens)
        speakers = speakers or sorted({ex.speaker for ex in corpus})
        model = Seq2SeqModel(model_config, speakers, vocab, seed=config.seed)
    for ex in corpus:
        model.vocab.encode(ex.tokens)
        model.speaker_index(ex.speaker)
    params = model.enter_phase(TrainingPhase.DECODER_PRETRAIN)
    curve = _fit(model, TrainingPhase.DECODER_PRETRAIN, params, list(corpus), tts_loss, config, on_step=on_step)
    return model, curve


def pretrain_encoder(corpus: Sequence[TTSExample], model: Seq2SeqModel, config: TrainConfig = TrainConfig(),
                     on_step=None):
    """Phase 2: fit the speech encoder through the frozen decoder (input = target)."""
    _require_nonempty(corpus, "TTS")
    unfrozen = [k for k, p in model.decoder.named_parameters("decoder.") if p.trainable]
    if unfrozen:
        raise PhaseError(f"encoder pretraining needs a frozen decoder; trainable: {unfrozen[:3]}...")
    for ex in corpus:
        model.speaker_index(ex.speaker)
    params = model.group(TrainingPhase.ENCODER_PRETRAIN)
    params.update(dict(model.decoder.named_parameters("decoder.")))
    curve = _fit(model, TrainingPhase.ENCODER_PRETRAIN, params, list(corpus), reconstruction_loss, config,
                 on_step=on_step)
    return model, curve


def check_pairs(pairs: Sequence[ParallelPair], model: Seq2SeqModel) -> None:
    for p in pairs:
        model.speaker_index(p.source_speaker)
        model.speaker_index(p.target_speaker)


def train_vc(pairs: Sequence[ParallelPair], model: Seq2SeqModel, config: TrainConfig = TrainConfig(),
             validation: Sequence[ParallelPair] = (), on_step=None,
             select_by: Callable[[Seq2SeqModel], float] | None = None, select_every: int = 1):
    """Phase 3: parallel VC fine-tuning with best-validation checkpoint selection.

    By default the kept state is the epoch with the lowest teacher-forced
    validation L1.  ``select_by(model) -> score`` (lower is better), checked
    every ``select_every`` epochs and after the last one, replaces that
    criterion, e.g. with validation DTW-MCD of free-running conversions.
    """
    _require_nonempty(pairs, "parallel")
    check_pairs(pairs, model)
    check_pairs(validation, model)
    params = model.enter_phase(TrainingPhase.VC_TRAIN)
    curve = _fit(model, TrainingPhase.VC_TRAIN, params, list(pairs), vc_loss, config,
                 validation=list(validation), on_step=on_step,
                 select_best=bool(validation) or select_by is not None,
                 select_by=select_by, select_every=select_every)
    return model, curve


def make_pairs(utterances: dict[tuple[str, str], np.ndarray], sources: Sequence[str],
               targets: Sequence[str], utt_ids: Sequence[str]) -> list[ParallelPair]:
    """Pair every source speaker's utterance with each target's same-id utterance.

    ``utterances`` maps ``(speaker, utt_id)`` to a mel matrix.  A missing
    counterpart raises :class:`PairingError` listing the offending ids.
    """
    missing = sorted({f"{spk}/{u}" for spk in list(sources) + list(targets) for u in utt_ids
                      if (spk, u) not in utterances})
    if missing:
        raise PairingError(f"unpaired utterance ids: {missing}")
    return [
        ParallelPair(u, utterances[(s, u)], s, utterances[(t, u)], t)
        for u in utt_ids for s in sources for t in targets
    ]


# ---------------------------------------------------------------------------
# inference


def convert(model: Seq2SeqModel, source_mel: np.ndarray, target: str, source_speaker: str,
            seed: int = 0, max_frames: int | None = None) -> DecodeResult:
    """Autoregressive conversion of one utterance to ``target``'s voice."""
    cfg = model.config
    source_mel = np.asarray(source_mel)
    if source_mel.ndim != 2 or len(source_mel) < 1:
        raise ValueError("source mel must be a nonempty T x D matrix")
    model.speaker_index(target)
    cap = math.ceil(cfg.ratio_cap * len(source_mel))
    max_frames = cap if max_frames is None else min(max_frames, cap)
    rng = np.random.default_rng(seed) if cfg.prenet_dropout > 0 else None
    r = cfg.reduction
    out: list[np.ndarray] = []
    with nn.no_grad():
        memory, mask = model.encode_speech([source_mel], [source_speaker])
        inputs = np.zeros((1, 1, cfg.n_mels), dtype=model.dtype)
        while len(out) < max_frames:
            k = inputs.shape[1]
            frames, stops = model.decode(nn.Tensor(inputs), [k], [target], memory, mask, rng)
            group = frames.data[0, (k - 1) * r :]
            probs = 1.0 / (1.0 + np.exp(-stops.data[0, (k - 1) * r :].astype(np.float64)))
            for frame, prob in zip(group, probs):
                out.append(frame)
                if prob > cfg.stop_threshold:
                    return DecodeResult(np.array(out[:max_frames]), False)
            inputs = np.concatenate([inputs, group[-1][None, None]], axis=1)
    return DecodeResult(np.array(out[:max_frames]), True)


def clone(model: Seq2SeqModel) -> Seq2SeqModel:
    return copy.deepcopy(model)
