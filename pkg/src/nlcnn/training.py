"""Epoch sampling, Adam, checkpointing and the training loop."""

from __future__ import annotations

import logging
import math
import queue
import shutil
import threading
import warnings
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt
from .evaluation import TrialList, evaluate
from .frontend import AudioBuffer, WavError, crop_segment, extract_lfbe, load_wav
from .network import SpeakerEmbedder, build_model, preset_spec
from .nonlocal_block import Variant
from .objectives import AmSoftmaxHead, AngularProtoHead, ams_loss, ap_loss
from .tensor import NonFiniteError, Tensor, backward

log = logging.getLogger(__name__)

LOSSES = ("ams", "ap")


class ManifestError(ValueError):
    pass


class TrainingAbort(RuntimeError):
    """Non-finite loss or activation; carries the offending batch id."""

    def __init__(self, message: str, epoch: int, batch_id: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch_id = batch_id


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named consumer of the run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8")), *map(int, extra)])


# ---------------------------------------------------------------------------
# data


@dataclass
class DatasetManifest:
    """speaker id -> utterance paths; audio is decoded lazily and memoised."""

    speakers: Dict[str, List[str]]
    _audio: Dict[str, AudioBuffer] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if not self.speakers or not any(self.speakers.values()):
            raise ManifestError("manifest is empty")
        self.speakers = {k: list(v) for k, v in sorted(self.speakers.items())}

    @classmethod
    def load(cls, path, strict: bool = False) -> "DatasetManifest":
        """Parse ``<speaker-id> <path>`` lines (paths relative to the manifest's directory)."""
        path = Path(path)
        speakers: Dict[str, List[str]] = {}
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split(" ")
            if len(parts) != 2 or not all(parts):
                raise ManifestError(f"{path}:{lineno}: expected '<speaker-id> <path>'")
            spk, utt = parts
            if not Path(utt).is_absolute():
                utt = str(path.parent / utt)
            speakers.setdefault(spk, []).append(utt)
        manifest = cls(speakers)
        if strict:
            manifest.validate()
        return manifest

    def validate(self) -> None:
        for utt in self.all_paths():
            self.audio(utt)

    def all_paths(self) -> List[str]:
        return [u for utts in self.speakers.values() for u in utts]

    @property
    def speaker_ids(self) -> List[str]:
        return list(self.speakers)

    def audio(self, path: str) -> AudioBuffer:
        hit = self._audio.get(path)
        if hit is not None:
            return hit
        try:
            audio = load_wav(path)
        except (OSError, WavError) as exc:
            raise ManifestError(f"cannot decode {path}: {exc}") from exc
        with self._lock:
            return self._audio.setdefault(path, audio)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr0: float = 1e-3
    lr_decay: float = 0.95
    lr_decay_every: int = 10
    segment_s: float = 2.0
    max_utt_per_speaker: int = 100
    speakers_per_batch: int = 8
    utterances_per_speaker: int = 2
    loss: str = "ams"
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 1
    ams_scale: float = 30.0
    ams_margin: float = 0.2
    ap_init_w: float = 10.0
    ap_init_b: float = -5.0
    prefetch: int = 2

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        positive = ("epochs", "lr0", "lr_decay", "lr_decay_every", "segment_s", "max_utt_per_speaker",
                    "speakers_per_batch", "utterances_per_speaker", "checkpoint_every", "prefetch")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.loss == "ap" and self.utterances_per_speaker < 2:
            raise ValueError("the ap loss needs utterances_per_speaker >= 2")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale defaults: 30 epochs, 8 speakers x 2 utterances per batch."""
        base = dict(epochs=30, speakers_per_batch=8, utterances_per_speaker=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def lr(self, epoch: int) -> float:
        return learning_rate(epoch, self.lr0, self.lr_decay, self.lr_decay_every)


def learning_rate(epoch: int, lr0: float = 1e-3, decay: float = 0.95, every: int = 10) -> float:
    return lr0 * decay ** (epoch // every)


@dataclass(frozen=True)
class BatchPlan:
    """One mini-batch before decoding: rows are speaker-major groups."""

    epoch: int
    batch_id: int
    labels: Tuple[int, ...]  # speaker index per row
    paths: Tuple[str, ...]
    starts: Tuple[int, ...]  # crop start sample per row
    group_size: int


@dataclass
class Batch:
    plan: BatchPlan
    features: np.ndarray  # rows x 1 x 40 x T

    @property
    def labels(self) -> np.ndarray:
        return np.asarray(self.plan.labels, dtype=np.intp)


def _crop_start(rng: np.random.Generator, num_samples: int, crop: int) -> int:
    if num_samples <= crop:
        return 0
    return int(rng.integers(0, num_samples - crop + 1))


def sample_epoch(manifest: DatasetManifest, config: TrainConfig, epoch: int,
                 rng: Optional[np.random.Generator] = None) -> List[BatchPlan]:
    """Plan one epoch of batches.

    Each speaker contributes ``min(max_utt_per_speaker, available)`` distinct
    utterances, each with one uniformly placed crop. Utterances are grouped
    per speaker in runs of ``utterances_per_speaker`` and the groups are
    packed into batches of ``speakers_per_batch`` distinct speakers.
    """
    rng = substream(config.seed, "sampling", epoch) if rng is None else rng
    M = config.utterances_per_speaker
    crop = int(round(config.segment_s * 16000))
    groups: List[List[Tuple[int, str]]] = []
    for label, spk in enumerate(manifest.speaker_ids):
        utts = manifest.speakers[spk]
        take = min(config.max_utt_per_speaker, len(utts))
        chosen = [utts[i] for i in rng.choice(len(utts), size=take, replace=False)]
        if config.loss == "ap" and len(chosen) < M:
            warnings.warn(f"speaker {spk!r} has {len(chosen)} utterance(s); reusing for {M} crops",
                          RuntimeWarning, stacklevel=2)
            chosen = [chosen[i % len(chosen)] for i in range(M)]
        for g in range(0, len(chosen), M):
            part = chosen[g:g + M]
            if len(part) == M or config.loss == "ams":
                groups.append([(label, p) for p in part])
    order = rng.permutation(len(groups))

    # first-fit packing keeps each batch's speakers distinct
    open_batches: List[List[List[Tuple[int, str]]]] = []
    for gi in order:
        group = groups[gi]
        for b in open_batches:
            if len(b) < config.speakers_per_batch and all(g[0][0] != group[0][0] for g in b):
                b.append(group)
                break
        else:
            open_batches.append([group])
    if config.loss == "ap":
        open_batches = [b for b in open_batches if len(b) >= 2]

    plans = []
    for batch_id, b in enumerate(open_batches):
        b = sorted(b, key=lambda g: g[0][0])
        rows = [item for g in b for item in g]
        starts = tuple(_crop_start(rng, len(manifest.audio(p)), crop) for _, p in rows)
        plans.append(BatchPlan(epoch, batch_id, tuple(l for l, _ in rows), tuple(p for _, p in rows),
                               starts, M))
    return plans


def materialize(manifest: DatasetManifest, plan: BatchPlan, segment_s: float, dtype=np.float32) -> Batch:
    feats = []
    for path, start in zip(plan.paths, plan.starts):
        audio = manifest.audio(path)
        seg = crop_segment(audio, start / audio.sample_rate, segment_s)
        feats.append(extract_lfbe(seg).as_network_input(dtype)[0])
    return Batch(plan, np.stack(feats))


def prefetch_batches(manifest: DatasetManifest, plans: Sequence[BatchPlan], segment_s: float,
                     depth: int = 2, dtype=np.float32) -> Iterator[Batch]:
    """Decode batches on a producer thread; yields them in plan order."""
    q: "queue.Queue" = queue.Queue(maxsize=depth)
    stop = threading.Event()
    done = object()

    def produce():
        try:
            for plan in plans:
                item = materialize(manifest, plan, segment_s, dtype)
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(done)
        except BaseException as exc:  # handed to the consumer
            q.put(exc)

    worker = threading.Thread(target=produce, name="batch-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        worker.join()


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of ``params`` in place; ``state`` advances one step."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# checkpoints


def _head_parameters(head) -> Dict[str, Tensor]:
    return head.named_parameters()


def make_head(config: TrainConfig, num_speakers: int, embedding_dim: int, dtype=np.float32):
    if config.loss == "ams":
        return AmSoftmaxHead.initialize(embedding_dim, num_speakers,
                                        substream(config.seed, "head.ams.class_weights"),
                                        config.ams_scale, config.ams_margin, dtype)
    return AngularProtoHead.initialize(config.ap_init_w, config.ap_init_b, dtype)


def state_records(model: SpeakerEmbedder, head=None, adam: Optional[AdamState] = None, epoch: int = -1,
                  history: Optional[Dict[str, List[float]]] = None) -> Dict[str, np.ndarray]:
    rec: Dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        rec[f"param/{name}"] = p.data
    for name, b in model.named_buffers():
        rec[f"buffer/{name}"] = b
    if head is not None:
        for name, p in _head_parameters(head).items():
            rec[f"param/{name}"] = p.data
    if adam is not None:
        rec["adam/step"] = np.array([adam.step], dtype=np.float64)
        for name in adam.m:
            rec[f"adam/m/{name}"] = adam.m[name]
            rec[f"adam/v/{name}"] = adam.v[name]
    rec["epoch"] = np.array([epoch], dtype=np.float64)
    for key, values in (history or {}).items():
        rec[f"history/{key}"] = np.asarray(values, dtype=np.float64)
    return rec


def save_checkpoint(path, model: SpeakerEmbedder, head=None, adam: Optional[AdamState] = None,
                    epoch: int = -1, history: Optional[Dict[str, List[float]]] = None) -> None:
    ckpt.save(path, state_records(model, head, adam, epoch, history))


def restore(records: Dict[str, np.ndarray], model: SpeakerEmbedder, head=None,
            adam: Optional[AdamState] = None, strict: bool = True) -> int:
    """Copy checkpoint records into ``model`` (and optionally head/optimiser); returns the epoch."""
    params = dict(model.named_parameters())
    if head is not None:
        params.update(_head_parameters(head))
    for name, p in params.items():
        key = f"param/{name}"
        if key not in records:
            if strict:
                raise ckpt.ContainerError(f"checkpoint lacks {key}")
            continue
        if records[key].shape != p.shape:
            raise ckpt.ContainerError(f"{key}: shape {records[key].shape}, model expects {p.shape}")
        p.data = records[key].astype(p.dtype).copy()
    for name, buf in model.named_buffers():
        key = f"buffer/{name}"
        if key in records:
            buf[...] = records[key]
        elif strict:
            raise ckpt.ContainerError(f"checkpoint lacks {key}")
    if adam is not None and "adam/step" in records:
        adam.step = int(records["adam/step"][0])
        adam.m = {k[len("adam/m/"):]: v.copy() for k, v in records.items() if k.startswith("adam/m/")}
        adam.v = {k[len("adam/v/"):]: v.copy() for k, v in records.items() if k.startswith("adam/v/")}
    return int(records["epoch"][0]) if "epoch" in records else -1


def load_checkpoint(path, model: SpeakerEmbedder, head=None, adam: Optional[AdamState] = None) -> int:
    return restore(ckpt.load(path), model, head, adam)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: SpeakerEmbedder
    head: object
    adam: AdamState
    history: Dict[str, List[float]]
    checkpoints: List[Path]
    best_epoch: Optional[int]
    best_path: Optional[Path]


def batch_loss(model: SpeakerEmbedder, head, config: TrainConfig, batch: Batch) -> Tensor:
    emb = model.embed(Tensor(batch.features))
    if config.loss == "ams":
        return ams_loss(head, emb, batch.labels)
    return ap_loss(head, emb, batch.plan.group_size)


def _dump_abort(out_dir: Optional[Path], plan: BatchPlan, exc: BaseException) -> None:
    if out_dir is None:
        return
    lines = [f"epoch={plan.epoch} batch={plan.batch_id}", f"error={exc}"]
    lines += [f"{lab} {start} {path}" for lab, start, path in zip(plan.labels, plan.starts, plan.paths)]
    (out_dir / "abort_batch.txt").write_text("\n".join(lines) + "\n")


def train(manifest: DatasetManifest, spec, config: TrainConfig, out_dir=None, variant=Variant.TIME_FREQUENCY,
          validation: Optional[TrialList] = None, resume=None, freeze: Sequence[str] = (),
          dtype=np.float32, log_path=None, epoch_callback: Optional[Callable[[int, Dict], None]] = None,
          model: Optional[SpeakerEmbedder] = None) -> TrainResult:
    """Run ``config.epochs`` epochs (continuing after ``resume`` if given).

    ``freeze`` lists parameter-name suffixes excluded from optimisation (for
    example ``("z_w",)`` pins every non-local output transform). Each epoch
    appends ``epoch=<n> loss=<f> lr=<f> [eer=<f>]`` to ``log_path``.
    """
    if isinstance(spec, str):
        spec = preset_spec(spec, variant)
    if config.loss == "ap":
        for spk, utts in manifest.speakers.items():
            if len(utts) < 2:
                warnings.warn(f"speaker {spk!r} has a single utterance", RuntimeWarning, stacklevel=2)
    model = model if model is not None else build_model(spec, seed=substream_seed(config.seed, "init"),
                                                        dtype=dtype)
    head = make_head(config, len(manifest.speakers), spec.embedding_dim, dtype)
    adam = AdamState()
    history: Dict[str, List[float]] = {"loss": [], "eer": []}
    start_epoch = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        records = ckpt.load(resume)
        done = restore(records, model, head, adam)
        history = {"loss": list(records.get("history/loss", [])), "eer": list(records.get("history/eer", []))}
        start_epoch = done + 1
    log_file = Path(log_path) if log_path is not None else (out / "metrics.log" if out is not None else None)

    trainable = {n: p for n, p in model.named_parameters() if not any(n.endswith(s) for s in freeze)}
    trainable.update(_head_parameters(head))
    saved: List[Path] = []
    best_epoch, best_score = None, math.inf
    best_path = out / "best.nlck" if out is not None else None
    past = history["eer"] if validation is not None and history["eer"] else history["loss"]
    if past:
        best_epoch = int(np.argmin(past))
        best_score = float(past[best_epoch])

    for epoch in range(start_epoch, config.epochs):
        lr = config.lr(epoch)
        plans = sample_epoch(manifest, config, epoch)
        model.train()
        losses = []
        for batch in prefetch_batches(manifest, plans, config.segment_s, config.prefetch, dtype):
            for p in trainable.values():
                p.zero_grad()
            try:
                loss = batch_loss(model, head, config, batch)
                if not np.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                backward(loss)
                grads = {n: p.grad for n, p in trainable.items() if p.grad is not None}
                for n, g in grads.items():
                    if not np.all(np.isfinite(g)):
                        raise NonFiniteError(f"gradient of {n} is not finite")
            except NonFiniteError as exc:
                _dump_abort(out, batch.plan, exc)
                raise TrainingAbort(f"numeric abort in epoch {epoch} batch {batch.plan.batch_id}: {exc}",
                                    epoch, batch.plan.batch_id) from exc
            adam_step(trainable, grads, adam, lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
            losses.append(loss.item())
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        history["loss"].append(mean_loss)
        line = f"epoch={epoch} loss={mean_loss:.6f} lr={lr:.6g}"
        score = mean_loss
        if validation is not None:
            eer = evaluate(model, validation).eer
            history["eer"].append(eer)
            line += f" eer={eer:.6f}"
            score = eer
        log.info(line)
        if log_file is not None:
            with open(log_file, "a") as f:
                f.write(line + "\n")
        last = epoch == config.epochs - 1
        if out is not None and ((epoch + 1) % config.checkpoint_every == 0 or last):
            path = out / f"epoch_{epoch:04d}.nlck"
            save_checkpoint(path, model, head, adam, epoch, history)
            saved.append(path)
            if score < best_score:
                best_epoch, best_score = epoch, score
                shutil.copyfile(path, best_path)
        elif out is None and score < best_score:
            best_epoch, best_score = epoch, score
        if epoch_callback is not None:
            epoch_callback(epoch, {"loss": mean_loss, "lr": lr})
    return TrainResult(model, head, adam, history, saved, best_epoch,
                       best_path if best_epoch is not None and out is not None else None)


def substream_seed(seed: int, name: str) -> int:
    """Integer seed for components that take one (model init)."""
    return int(substream(seed, name).integers(0, 2 ** 31 - 1))


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
