"""Stage orchestration: features, stage 1, stage 2, synthesis, evaluation.

Every trained phase is cached under a key that hashes the inputs it depends
on (data, feature settings, its own hyperparameters and the upstream key), so
reruns with an unchanged configuration load checkpoints instead of training
and stage-2 changes never touch stage-1 artifacts.

Output layout below ``out``::

    converted/vtn/<reference>/<utt>.dysf       stage-1 log-mel output
    converted/vtn+vae/<reference>/<utt>.dysf   stage-2 output (patient voice)
    wav/<stage>/<speaker>/<utt>.wav            Griffin-Lim renderings
    hyp/<stage>/<speaker>.txt                  hypothesis transcripts

For the ``dysarthric`` stage ``<speaker>`` is the patient; otherwise it is
the reference speaker.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import dsp
from .. import evaluation as ev
from .. import nncore as nn
from .. import seq2seq as s2s
from .. import vae
from .artifacts import ArtifactStore, StoredCheckpoint, cache_root, phase_key
from .config import PipelineConfig, config_hash
from .errors import DependencyError, MissingArtifactError, ValidationError
from .manifest import CorpusManifest, ManifestRecord

log = logging.getLogger(__name__)

PHASES = ("decoder", "encoder", "vc", "vae")
HYPOTHESIS_PATTERN = "{hyp_dir}/{stage}/{speaker}.txt"


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, frames: np.ndarray) -> np.ndarray:
        return ((frames - self.mean) / self.std).astype(np.float32)

    def denormalize(self, frames: np.ndarray) -> np.ndarray:
        return (frames * self.std + self.mean).astype(np.float32)


@dataclass
class BatchRecord:
    phase: str
    epoch: int
    utt_ids: tuple[str, ...]


@dataclass
class RunReport:
    table: ev.SpeakerScoreTable
    curves: dict[str, list[dict]] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Pipeline:
    def __init__(self, config: PipelineConfig, manifest: CorpusManifest, out_dir):
        self.config = config
        self.manifest = manifest
        self.out = Path(out_dir)
        self.store = ArtifactStore(cache_root(self.out))
        self.batches: list[BatchRecord] = []
        self._features: dict[tuple[str, str], np.ndarray] | None = None
        self._audio_sha: dict[tuple[str, str], str] | None = None
        self._stats: FeatureStats | None = None
        manifest.require_speakers(config.speakers)

    # -- keys ----------------------------------------------------------------
    @property
    def seed(self) -> int:
        return self.config.run.seed

    def audio_hashes(self) -> dict[tuple[str, str], str]:
        if self._audio_sha is None:
            self._audio_sha = {r.key: _sha256_file(r.audio_path) for r in self.manifest}
        return self._audio_sha

    def data_key(self) -> str:
        sha = self.audio_hashes()
        rows = sorted([r.speaker_id, r.utt_id, r.split, list(r.transcript), sha[r.key]] for r in self.manifest)
        return config_hash(rows)[:20]

    def keys(self) -> dict[str, str]:
        c = self.config
        base = dict(data=self.data_key(), features=dataclasses.asdict(c.features), speakers=list(c.speakers),
                    seed=self.seed)
        dec = phase_key("decoder", **base, model=dataclasses.asdict(c.seq2seq),
                        epochs=c.stage1.decoder_epochs, lr=c.stage1.learning_rate, batch=c.stage1.batch_size)
        enc = phase_key("encoder", upstream=dec, epochs=c.stage1.encoder_epochs, lr=c.stage1.learning_rate,
                        batch=c.stage1.batch_size, seed=self.seed)
        vc = phase_key("vc", upstream=enc, epochs=c.stage1.vc_epochs, lr=c.stage1.learning_rate,
                       batch=c.stage1.batch_size, selection=c.stage1.selection, every=c.stage1.select_every,
                       mcd_order=c.evaluation.mcd_order, seed=self.seed)
        vae_key = phase_key("vae", **base, model=dataclasses.asdict(c.vae), train=dataclasses.asdict(c.vae_train))
        return {"decoder": dec, "encoder": enc, "vc": vc, "vae": vae_key}

    # -- features --------------------------------------------------------------
    def features(self) -> dict[tuple[str, str], np.ndarray]:
        """Log-mel frames for every manifest record, cached by audio content."""
        if self._features is not None:
            return self._features
        fdir = self.store.feature_dir(config_hash(dataclasses.asdict(self.config.features))[:20])
        fdir.mkdir(parents=True, exist_ok=True)
        feats = {}
        for rec in self.manifest:
            path = fdir / f"{self.audio_hashes()[rec.key][:32]}.dysf"
            if path.is_file():
                feats[rec.key] = dsp.read_features(path)
            else:
                frames = dsp.logmel(dsp.load_wav(rec.audio_path), self.config.features).frames.astype(np.float32)
                dsp.write_features(path, frames)
                feats[rec.key] = frames
        self._features = feats
        return feats

    def stats(self) -> FeatureStats:
        if self._stats is None:
            feats = self.features()
            train = [feats[r.key] for r in self.manifest.select(self.config.speakers, "train")]
            if not train:
                raise ValidationError("no training-split utterances for the configured speakers")
            frames = np.concatenate(train).astype(np.float64)
            self._stats = FeatureStats(frames.mean(0), frames.std(0) + 1e-3)
        return self._stats

    def normalized(self, speaker: str, utt_id: str) -> np.ndarray:
        return self.stats().normalize(self.features()[(speaker, utt_id)])

    # -- bookkeeping -------------------------------------------------------------
    def _log_batch(self, phase: str, epoch: int, utt_ids: Sequence[str]) -> None:
        leaked = sorted(set(utt_ids) & self.manifest.test_ids())
        if leaked:
            raise ValidationError(f"test-split utterance(s) {leaked} reached a {phase} training batch")
        self.batches.append(BatchRecord(phase, epoch, tuple(utt_ids)))

    def _on_step(self, info: s2s.StepInfo) -> None:
        self._log_batch(info.phase.value, info.epoch, info.utt_ids)

    def write_batch_log(self) -> Path:
        path = self.out / "batches.tsv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("phase\tepoch\tutt_ids\n" + "".join(
            f"{b.phase}\t{b.epoch}\t{','.join(b.utt_ids)}\n" for b in self.batches))
        return path

    def _train_config(self, epochs: int) -> s2s.TrainConfig:
        st = self.config.stage1
        return s2s.TrainConfig(epochs=epochs, learning_rate=st.learning_rate, batch_size=st.batch_size,
                               seed=self.seed)

    def vocabulary(self) -> s2s.Vocabulary:
        return s2s.Vocabulary(tok for r in self.manifest for tok in r.transcript)

    def _tts_corpus(self) -> list[s2s.TTSExample]:
        speakers = (*self.config.run.references, *self.config.run.auxiliary)
        return [s2s.TTSExample(r.utt_id, self.normalized(*r.key), r.speaker_id, r.transcript)
                for r in self.manifest.select(speakers, "train")]

    def pairs(self, split: str) -> list[s2s.ParallelPair]:
        run = self.config.run
        ids = self.manifest.utt_ids(run.patient, split)
        feats = {(spk, u): self.normalized(spk, u) for spk in (run.patient, *run.references) for u in ids
                 if self.manifest.has(spk, u)}
        try:
            return s2s.make_pairs(feats, [run.patient], list(run.references), ids)
        except s2s.PairingError as exc:
            raise ValidationError(f"{split} split: {exc}") from None

    # -- checkpoints -------------------------------------------------------------
    def _s2s_meta(self, model: s2s.Seq2SeqModel, curve) -> dict:
        return {"kind": "seq2seq", "config_hash": self.config.hash(), "model": dataclasses.asdict(model.config),
                "speakers": list(model.speakers), "vocab": model.vocab.symbols,
                "curve": [dataclasses.asdict(e) for e in curve]}

    def _load_s2s(self, phase: str) -> tuple[s2s.Seq2SeqModel, StoredCheckpoint]:
        state, stored = self.store.load_checkpoint(phase, self.keys()[phase])
        meta = stored.meta
        model = s2s.Seq2SeqModel(s2s.Seq2SeqConfig(**meta["model"]), meta["speakers"],
                                 s2s.Vocabulary(meta["vocab"][2:]), seed=self.seed)
        model.load_state_dict(state)
        return model, stored

    def _require(self, phase: str, needed_by: str) -> None:
        if not self.store.has_checkpoint(phase, self.keys()[phase]):
            raise DependencyError(f"{needed_by} needs the {phase} checkpoint "
                                  f"({self.store.checkpoint_path(phase, self.keys()[phase])}); run that phase first")

    def checkpoint_hashes(self) -> dict[str, str]:
        out = {}
        for phase, key in self.keys().items():
            if self.store.has_checkpoint(phase, key):
                out[phase] = self.store.load_checkpoint(phase, key)[1].sha256
        return out

    # -- stage 1 -----------------------------------------------------------------
    def pretrain_decoder(self, force: bool = False) -> StoredCheckpoint:
        key = self.keys()["decoder"]
        if self.store.has_checkpoint("decoder", key) and not force:
            return self._load_s2s("decoder")[1]
        corpus = self._tts_corpus()
        with nn.default_dtype(np.float32):
            model = s2s.Seq2SeqModel(self.config.seq2seq, self.config.speakers, self.vocabulary(), seed=self.seed)
        model, curve = s2s.pretrain_decoder(corpus, self._train_config(self.config.stage1.decoder_epochs),
                                            model=model, on_step=self._on_step)
        return self.store.save_checkpoint("decoder", key, model, self._s2s_meta(model, curve))

    def pretrain_encoder(self, force: bool = False) -> StoredCheckpoint:
        key = self.keys()["encoder"]
        if self.store.has_checkpoint("encoder", key) and not force:
            return self._load_s2s("encoder")[1]
        self._require("decoder", "encoder pretraining")
        model, _ = self._load_s2s("decoder")
        model.enter_phase(s2s.TrainingPhase.ENCODER_PRETRAIN)
        model, curve = s2s.pretrain_encoder(self._tts_corpus(), model,
                                            self._train_config(self.config.stage1.encoder_epochs),
                                            on_step=self._on_step)
        return self.store.save_checkpoint("encoder", key, model, self._s2s_meta(model, curve))

    def validation_mcd(self, model: s2s.Seq2SeqModel, pairs: Sequence[s2s.ParallelPair]) -> float:
        order = self.config.evaluation.mcd_order
        scores = []
        for p in pairs:
            out = s2s.convert(model, p.source, p.target_speaker, p.source_speaker, seed=self.seed).mel
            scores.append(ev.mcd(dsp.mel_cepstrum(self.stats().denormalize(p.target), order),
                                 dsp.mel_cepstrum(self.stats().denormalize(out), order)))
        return float(np.mean(scores))

    def train_vc(self, force: bool = False) -> StoredCheckpoint:
        key = self.keys()["vc"]
        if self.store.has_checkpoint("vc", key) and not force:
            return self._load_s2s("vc")[1]
        self._require("encoder", "VC training")
        model, _ = self._load_s2s("encoder")
        train, val = self.pairs("train"), self.pairs("validation")
        selector = None
        if self.config.stage1.selection == "mcd" and val:
            selector = lambda m: self.validation_mcd(m, val)
        model, curve = s2s.train_vc(train, model, self._train_config(self.config.stage1.vc_epochs), validation=val,
                                    on_step=self._on_step, select_by=selector,
                                    select_every=self.config.stage1.select_every)
        return self.store.save_checkpoint("vc", key, model, self._s2s_meta(model, curve))

    def converted_path(self, stage: str, reference: str, utt_id: str) -> Path:
        return self.out / "converted" / stage / reference / f"{utt_id}.dysf"

    def test_ids(self) -> list[str]:
        return self.manifest.utt_ids(self.config.run.patient, "test")

    def convert_stage1(self) -> list[Path]:
        self._require("vc", "stage-1 conversion")
        model, _ = self._load_s2s("vc")
        run, stats = self.config.run, self.stats()
        written = []
        for ref in run.references:
            for utt in self.test_ids():
                res = s2s.convert(model, self.normalized(run.patient, utt), ref, run.patient, seed=self.seed)
                path = self.converted_path("vtn", ref, utt)
                path.parent.mkdir(parents=True, exist_ok=True)
                dsp.write_features(path, stats.denormalize(res.mel))
                written.append(path)
        return written

    def run_stage1(self) -> list[Path]:
        """All three phases in order (cached), then conversion of the test split."""
        self.pretrain_decoder()
        self.pretrain_encoder()
        self.train_vc()
        return self.convert_stage1()

    # -- stage 2 -----------------------------------------------------------------
    def _load_vae(self) -> tuple[vae.VAEModel, StoredCheckpoint]:
        state, stored = self.store.load_checkpoint("vae", self.keys()["vae"])
        model = vae.VAEModel(vae.VAEConfig(**stored.meta["model"]), stored.meta["speakers"], seed=self.seed)
        model.load_state_dict(state)
        return model, stored

    def vae_corpus(self) -> list[tuple[np.ndarray, str]]:
        recs = self.manifest.select(self.config.speakers, "train")
        self._log_batch("vae", 0, [r.utt_id for r in recs])
        return [(self.normalized(*r.key), r.speaker_id) for r in recs]

    def train_vae(self, force: bool = False) -> StoredCheckpoint:
        key = self.keys()["vae"]
        if self.store.has_checkpoint("vae", key) and not force:
            return self._load_vae()[1]
        c = self.config
        train_cfg = vae.VAETrainConfig(epochs=c.vae_train.epochs, learning_rate=c.vae_train.learning_rate,
                                       batch_frames=c.vae_train.batch_frames, seed=self.seed)
        model, curve = vae.train_vae(self.vae_corpus(), train_cfg, c.vae, speakers=list(c.speakers))
        meta = {"kind": "vae", "config_hash": c.hash(), "model": dataclasses.asdict(model.config),
                "speakers": list(model.speakers), "curve": [dataclasses.asdict(e) for e in curve]}
        return self.store.save_checkpoint("vae", key, model, meta)

    def convert_stage2(self) -> list[Path]:
        """Stage-1 log-mel outputs to the patient's voice (mel to mel, no waveform)."""
        self._require("vae", "stage-2 conversion")
        model, _ = self._load_vae()
        run, stats = self.config.run, self.stats()
        written = []
        for ref in run.references:
            for utt in self.test_ids():
                src = self.converted_path("vtn", ref, utt)
                if not src.is_file():
                    raise DependencyError(f"stage-1 output {src} is missing; run stage-1 conversion first")
                frames = stats.normalize(dsp.read_features(src))
                out = vae.convert_speaker(model, frames, run.patient, mode="mean")
                path = self.converted_path("vtn+vae", ref, utt)
                path.parent.mkdir(parents=True, exist_ok=True)
                dsp.write_features(path, stats.denormalize(out))
                written.append(path)
        return written

    def run_stage2(self) -> list[Path]:
        self.train_vae()
        return self.convert_stage2()

    # -- synthesis ----------------------------------------------------------------
    def wav_path(self, stage: str, speaker: str, utt_id: str) -> Path:
        return self.out / "wav" / stage / speaker / f"{utt_id}.wav"

    def synthesize_outputs(self) -> list[Path]:
        """Render converted features; the dysarthric stage copies the source recordings."""
        run = self.config.run
        written = []
        for utt in self.test_ids():
            path = self.wav_path("dysarthric", run.patient, utt)
            path.parent.mkdir(parents=True, exist_ok=True)
            dsp.save_wav(dsp.load_wav(self.manifest.get(run.patient, utt).audio_path), path)
            written.append(path)
        for stage in ("vtn", "vtn+vae"):
            for ref in run.references:
                for utt in self.test_ids():
                    src = self.converted_path(stage, ref, utt)
                    if not src.is_file():
                        raise DependencyError(f"{src} is missing; run conversion first")
                    path = self.wav_path(stage, ref, utt)
                    synthesize(dsp.read_features(src), path, self.config, seed=self.seed)
                    written.append(path)
        return written

    # -- evaluation ------------------------------------------------------------
    def hypothesis_dir(self) -> Path:
        hyp = self.config.evaluation.hypotheses
        return Path(hyp) if hyp else self.out / "hyp"

    def ser_requested(self) -> bool:
        return bool(self.config.evaluation.hypotheses) or self.config.evaluation.asr == "toy"

    def hypothesis_file(self, stage: str, speaker: str) -> Path:
        return Path(HYPOTHESIS_PATTERN.format(hyp_dir=self.hypothesis_dir(), stage=stage, speaker=speaker))

    def run_toy_asr(self) -> list[Path]:
        from . import toyasr, toycorpus

        normal = (*self.config.run.references, *self.config.run.auxiliary)
        data = []
        for rec in self.manifest.select(normal, "train"):
            if not rec.audio_path.with_suffix(".lab").is_file():
                raise MissingArtifactError(f"toy recognizer needs frame labels; {rec.audio_path.with_suffix('.lab')} "
                                           "is missing (only synthetic corpora carry them)")
            frames = self.features()[rec.key]
            data.append((frames, toycorpus.frame_labels(toycorpus.read_labels(rec.audio_path), len(frames))))
        asr = toyasr.ToyRecognizer(self.config.features, seed=self.seed).fit(data)
        written = []
        for stage, speakers in self._stage_speakers():
            for spk in speakers:
                hyps = {utt: asr.transcribe(dsp.load_wav(self.wav_path(stage, spk, utt))) for utt in self.test_ids()}
                path = self.hypothesis_file(stage, spk)
                path.parent.mkdir(parents=True, exist_ok=True)
                ev.write_transcripts(path, hyps)
                written.append(path)
        return written

    def _stage_speakers(self):
        run = self.config.run
        return [("dysarthric", [run.patient]), ("vtn", list(run.references)), ("vtn+vae", list(run.references))]

    def _ser(self, stage: str, speaker: str) -> float:
        path = self.hypothesis_file(stage, speaker)
        if not path.is_file():
            raise MissingArtifactError(
                f"hypothesis transcripts missing: {path}; expected one file per stage and speaker at "
                f"{HYPOTHESIS_PATTERN} with lines 'utt_id<TAB>tok tok ...'")
        hyps = ev.read_transcripts(path)
        refs = {u: self.manifest.get(self.config.run.patient, u).transcript for u in self.test_ids()}
        return ev.corpus_error_rate(refs, hyps, syllables=True).rate

    def evaluate(self) -> ev.SpeakerScoreTable:
        run = self.config.run
        order = self.config.evaluation.mcd_order
        feats = self.features()
        if self.config.evaluation.asr == "toy":
            self.run_toy_asr()
        want_ser = self.ser_requested()
        rows = []
        for ref in run.references:
            base, conv = [], []
            for utt in self.test_ids():
                target = dsp.mel_cepstrum(feats[(ref, utt)], order)
                base.append(ev.mcd(target, dsp.mel_cepstrum(feats[(run.patient, utt)], order)))
                src = self.converted_path("vtn", ref, utt)
                if not src.is_file():
                    raise DependencyError(f"{src} is missing; run stage-1 conversion first")
                conv.append(ev.mcd(target, dsp.mel_cepstrum(dsp.read_features(src), order)))
            g = run.gender(ref)
            rows.append(ev.ScoreRow(ref, g, "dysarthric", float(np.mean(base)),
                                    self._ser("dysarthric", run.patient) if want_ser else None))
            rows.append(ev.ScoreRow(ref, g, "vtn", float(np.mean(conv)),
                                    self._ser("vtn", ref) if want_ser else None))
            rows.append(ev.ScoreRow(ref, g, "vtn+vae", None, self._ser("vtn+vae", ref) if want_ser else None))
        return ev.SpeakerScoreTable(rows)

    def report(self, table: ev.SpeakerScoreTable | None = None) -> RunReport:
        table = table if table is not None else self.evaluate()
        curves = {}
        hashes = {}
        for phase, key in self.keys().items():
            if self.store.has_checkpoint(phase, key):
                stored = self.store.load_checkpoint(phase, key)[1]
                curves[phase] = stored.meta["curve"]
                hashes[phase] = stored.sha256
        row_ckpt = {}
        for row in table:
            needs = {"dysarthric": (), "vtn": ("vc",), "vtn+vae": ("vc", "vae")}[row.stage]
            row_ckpt[f"{row.speaker}/{row.stage}"] = {p: hashes.get(p) for p in needs}
        prov = {"config_hash": self.config.hash(), "data_key": self.data_key(), "phase_keys": self.keys(),
                "checkpoints": hashes, "rows": row_ckpt}
        return RunReport(table, curves, prov)

    def run_all(self) -> RunReport:
        self.run_stage1()
        self.run_stage2()
        self.synthesize_outputs()
        rep = self.report()
        if self.config.run.log_batches:
            self.write_batch_log()
        return rep


def synthesize(frames: np.ndarray, out_wav, config: PipelineConfig, seed: int = 0) -> dsp.Waveform:
    """Log-mel frames to a WAV file via mel inversion and Griffin-Lim."""
    mag = dsp.mel_to_magnitude(frames, config.features)
    wav = dsp.griffin_lim(mag, iterations=config.synthesis.griffin_lim_iterations, seed=seed,
                          config=config.features)
    out_wav = Path(out_wav)
    out_wav.parent.mkdir(parents=True, exist_ok=True)
    dsp.save_wav(wav, out_wav)
    return wav


# -- diagnostics used by the toy acceptance run ---------------------------------


def stage2_diagnostics(pipe: Pipeline) -> dict:
    """Self-target reconstruction and speaker probes on held-out frames.

    ``self_l1`` is the mean-mode self-conversion error (L1 summed over bins,
    averaged over frames) on held-out frames, ``train_l1`` the same quantity
    on training frames and ``initial_l1`` that of an untrained model.
    """
    from sklearn.linear_model import LogisticRegression

    model, _ = pipe._load_vae()
    untrained = vae.VAEModel(model.config, model.speakers, seed=pipe.seed)
    l1 = lambda m, frames, spk: float(np.abs(vae.reconstruct(m, frames, spk) - frames).sum(1).mean())
    out = {"self_l1": {}, "train_l1": {}, "initial_l1": {}}
    for ref in pipe.config.run.references:
        held_out = np.concatenate([pipe.normalized(ref, u) for u in pipe.test_ids()])
        train = np.concatenate([pipe.normalized(ref, u) for u in pipe.manifest.utt_ids(ref, "train")])
        out["self_l1"][ref] = l1(model, held_out, ref)
        out["train_l1"][ref] = l1(model, train, ref)
        out["initial_l1"][ref] = l1(untrained, held_out, ref)
    feats, labels = [], []
    for spk in pipe.config.speakers:
        for utt in pipe.manifest.utt_ids(spk, "test"):
            f = pipe.normalized(spk, utt)
            feats.append(f)
            labels.append(np.full(len(f), model.speaker_index(spk)))
    x, y = np.concatenate(feats), np.concatenate(labels)
    z = vae.encode(model, x).mean
    perm = np.random.default_rng(pipe.seed).permutation(len(x))
    cut = len(x) * 2 // 3
    for name, data in (("raw_probe", x), ("latent_probe", z)):
        probe = LogisticRegression(max_iter=2000).fit(data[perm[:cut]], y[perm[:cut]])
        out[name] = float(probe.score(data[perm[cut:]], y[perm[cut:]]))
    out["adversary_accuracy"] = vae.classifier_accuracy(model, x, y)
    return out
