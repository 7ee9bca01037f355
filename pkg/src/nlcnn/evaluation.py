"""Verification protocol: ten 4-second crops per utterance, mean pairwise
cosine score per trial, and the equal error rate over a trial list."""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .frontend import AudioBuffer, crop_segment, extract_lfbe, load_wav
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

NUM_CROPS = 10
CROP_SECONDS = 4.0


@dataclass(frozen=True)
class Trial:
    label: int
    path_a: str
    path_b: str


@dataclass
class TrialList:
    trials: List[Trial]

    def __post_init__(self):
        for t in self.trials:
            if t.label not in (0, 1):
                raise ValueError(f"trial label must be 0 or 1, got {t.label}")
            if not t.path_a or not t.path_b:
                raise ValueError("trial paths must be nonempty")

    def __len__(self) -> int:
        return len(self.trials)

    @classmethod
    def load(cls, path, root=None) -> "TrialList":
        """Read ``<label> <path_a> <path_b>`` lines; relative paths resolve against
        ``root`` (default: the trial file's directory)."""
        path = Path(path)
        base = Path(root) if root is not None else path.parent
        trials = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected '<label> <path_a> <path_b>'")
            a, b = (p if Path(p).is_absolute() else str(base / p) for p in parts[1:])
            trials.append(Trial(int(parts[0]), a, b))
        return cls(trials)

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{t.label} {t.path_a} {t.path_b}\n" for t in self.trials))


@dataclass
class EvalReport:
    eer: float
    threshold: float
    num_target: int
    num_nontarget: int
    scores: Optional[List[Tuple[int, float, str, str]]] = None
    skipped: int = 0
    missing: List[str] = field(default_factory=list)

    def summary(self) -> str:
        return (f"eer={self.eer:.6f} threshold={self.threshold:.6f} "
                f"n_target={self.num_target} n_nontarget={self.num_nontarget}")

    def score_dump(self) -> str:
        return "".join(f"{lab} {s:.8f} {a} {b}\n" for lab, s, a, b in (self.scores or []))


# ---------------------------------------------------------------------------
# crops and scoring


def ten_crop_starts(num_samples: int, sample_rate: int = 16000,
                    crop_s: float = CROP_SECONDS, count: int = NUM_CROPS) -> List[int]:
    """Start samples of ``count`` equally spaced crops: first at 0, last ending at the end."""
    if num_samples <= 0:
        raise ValueError("cannot crop empty audio")
    crop = int(round(crop_s * sample_rate))
    if num_samples <= crop:
        return [0] * count
    span = num_samples - crop
    return [int(round(i * span / (count - 1))) for i in range(count)]


def ten_crops(audio: AudioBuffer) -> List[AudioBuffer]:
    starts = ten_crop_starts(len(audio), audio.sample_rate)
    return [crop_segment(audio, s / audio.sample_rate, CROP_SECONDS) for s in starts]


def crop_embeddings(model, audio: AudioBuffer) -> np.ndarray:
    """Raw embeddings of the ten crops (10 x D), in eval mode without a graph.

    Crops with identical start offsets are embedded once and repeated.
    """
    starts = ten_crop_starts(len(audio), audio.sample_rate)
    unique = sorted(set(starts))
    feats = np.stack([
        extract_lfbe(crop_segment(audio, s / audio.sample_rate, CROP_SECONDS)).as_network_input(model.dtype)[0]
        for s in unique])
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            emb = model.embed(Tensor(feats)).data.astype(np.float64)
    finally:
        model.train(was_training)
    row = {s: i for i, s in enumerate(unique)}
    return emb[[row[s] for s in starts]]


def _normalize_rows(e: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero embedding cannot be scored")
    return e / norms


def mean_pairwise_score(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    """Mean cosine similarity over all crop pairs."""
    return float(np.mean(_normalize_rows(emb_a) @ _normalize_rows(emb_b).T))


def score_trial(model, audio_a: AudioBuffer, audio_b: AudioBuffer) -> float:
    return mean_pairwise_score(crop_embeddings(model, audio_a), crop_embeddings(model, audio_b))


# ---------------------------------------------------------------------------
# equal error rate


def compute_eer(scores: Sequence[float], labels: Sequence[int]) -> EvalReport:
    """EER over a threshold sweep at every unique score.

    At threshold ``t`` a trial is accepted when its score is ``>= t``:
    FAR = accepted non-targets / non-targets, FRR = rejected targets / targets.
    The chosen threshold minimises ``|FAR - FRR|`` (ties: smaller FAR + FRR,
    then the lower threshold) and the EER is ``(FAR + FRR) / 2`` there.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d sequences of equal length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    tar = np.sort(s[y == 1])
    non = np.sort(s[y == 0])
    n_tar, n_non = tar.size, non.size
    if n_tar == 0 or n_non == 0:
        raise ValueError("EER needs at least one target and one non-target trial")
    thresholds = np.unique(s)
    false_acc = n_non - np.searchsorted(non, thresholds, side="left")
    false_rej = np.searchsorted(tar, thresholds, side="left")
    # integer cross-multiplied rates keep the comparisons exact
    gap = np.abs(false_acc * n_tar - false_rej * n_non)
    total = false_acc * n_tar + false_rej * n_non
    best = np.lexsort((thresholds, total, gap))[0]
    eer = 0.5 * (false_acc[best] / n_non + false_rej[best] / n_tar)
    return EvalReport(float(eer), float(thresholds[best]), int(n_tar), int(n_non))


# ---------------------------------------------------------------------------
# full protocol


class EmbeddingCache:
    """Per-utterance ten-crop embeddings; concurrent readers, exclusive insert."""

    def __init__(self):
        self._data: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def get(self, key: str, compute: Callable[[], np.ndarray]) -> np.ndarray:
        hit = self._data.get(key)
        if hit is not None:
            return hit
        value = compute()
        with self._lock:
            return self._data.setdefault(key, value)

    def __len__(self) -> int:
        return len(self._data)


def evaluate(model, trial_list: TrialList, use_cache: bool = True, threads: int = 1,
             loader: Callable[[str], AudioBuffer] = load_wav, keep_scores: bool = False) -> EvalReport:
    """Score every trial and compute the EER.

    Trials referencing missing files are skipped (with a warning); the
    missing paths are reported collectively.
    """
    missing = sorted({p for t in trial_list.trials for p in (t.path_a, t.path_b) if not Path(p).exists()}) \
        if loader is load_wav else []
    gone = set(missing)
    usable = [t for t in trial_list.trials if t.path_a not in gone and t.path_b not in gone]
    skipped = len(trial_list) - len(usable)
    if skipped:
        log.warning("skipping %d trial(s) with missing audio: %s", skipped, ", ".join(missing))

    cache = EmbeddingCache()

    def embeddings(path: str) -> np.ndarray:
        if not use_cache:
            return crop_embeddings(model, loader(path))
        return cache.get(path, lambda: crop_embeddings(model, loader(path)))

    model.eval()
    if use_cache:
        paths = list(dict.fromkeys(p for t in usable for p in (t.path_a, t.path_b)))
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                list(pool.map(embeddings, paths))
        else:
            for p in paths:
                embeddings(p)
    scores = [mean_pairwise_score(embeddings(t.path_a), embeddings(t.path_b)) for t in usable]
    report = compute_eer(scores, [t.label for t in usable])
    report.skipped = skipped
    report.missing = missing
    if keep_scores:
        report.scores = [(t.label, s, t.path_a, t.path_b) for t, s in zip(usable, scores)]
    return report
