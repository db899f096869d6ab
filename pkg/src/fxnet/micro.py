"""Micro-expression sequences: frame selection, CNN features, LSTM classifier, LOSO evaluation."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .layers import LSTM, Dense, softmax
from .model import Model, read_fxm, write_fxm, _assign, ModelFileError
from .optim import Adam, softmax_cross_entropy
from .pnm import read_pgm, to_unit
from .tensor import RngStream

log = logging.getLogger(__name__)

FRAMES_PER_SAMPLE = 5
FEATURE_TAP = "dense1_relu"


class SequenceError(ValueError):
    pass


@dataclass
class ExpressionSequence:
    subject: str
    sequence_id: str
    frames: list  # (1, H, W) arrays or paths to PGM files
    onset: int
    apex: int
    offset: int
    label: str

    def __post_init__(self):
        n = len(self.frames)
        if n == 0:
            raise SequenceError(f"{self.sequence_id}: no frames")
        if not 0 <= self.onset <= self.apex <= self.offset < n:
            raise SequenceError(
                f"{self.sequence_id}: need 0 <= onset <= apex <= offset < {n}, "
                f"got onset={self.onset} apex={self.apex} offset={self.offset}")

    def frame(self, i: int) -> np.ndarray:
        f = self.frames[i]
        if isinstance(f, (str, Path)):
            try:
                return to_unit(read_pgm(f))[None]
            except (OSError, ValueError) as exc:
                raise SequenceError(f"{self.sequence_id}: cannot load frame {f}: {exc}") from exc
        return np.asarray(f)


@dataclass
class SequenceSample:
    features: np.ndarray  # (5, F): first, onset, apex, offset, last
    label: str
    subject: str
    sequence_id: str


def select_frames(seq: ExpressionSequence) -> list[int]:
    """First, onset, apex, offset and last frame indices; coinciding markers repeat."""
    if not 0 <= seq.onset <= seq.apex <= seq.offset < len(seq.frames):
        raise SequenceError(f"{seq.sequence_id}: markers out of order")
    return [0, seq.onset, seq.apex, seq.offset, len(seq.frames) - 1]


def featurize(cnn: Model, seq: ExpressionSequence, layer: str = FEATURE_TAP) -> SequenceSample:
    frames = np.stack([seq.frame(i) for i in select_frames(seq)])
    feats = cnn.forward(frames, upto=layer)
    return SequenceSample(np.asarray(feats, dtype=np.float32), seq.label, seq.subject, seq.sequence_id)


def featurize_all(cnn: Model, sequences: Sequence[ExpressionSequence], layer: str = FEATURE_TAP) -> list[SequenceSample]:
    return [featurize(cnn, s, layer) for s in sequences]


@dataclass(frozen=True)
class MicroConfig:
    hidden: int = 128
    recurrent_dropout: float = 0.5
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    decay: float = 1e-5
    seed: int = 0
    classes: tuple[str, ...] | None = None
    fine_tune_cnn: bool = False


class SequenceClassifier:
    """LSTM over the five feature rows, then a softmax layer on the last hidden state."""

    def __init__(self, n_features: int, classes: Sequence[str], hidden: int = 128,
                 recurrent_dropout: float = 0.5, rng: RngStream | None = None):
        self.classes = list(classes)
        self.n_features = n_features
        self.lstm = LSTM("lstm", hidden, recurrent_dropout)
        self.out = Dense("out", len(self.classes))
        if rng is not None:
            self.lstm.init_params((FRAMES_PER_SAMPLE, n_features), rng)
            self.out.init_params((hidden,), rng)

    @property
    def layers(self):
        return [self.lstm, self.out]

    def named_parameters(self):
        return [(f"{l.name}.{p}", l.params[p]) for l in self.layers for p in l.param_names]

    def logits(self, x: np.ndarray, *, train: bool = False, rng: RngStream | None = None) -> np.ndarray:
        hs = self.lstm.forward(np.asarray(x, dtype=self.lstm.params["bias"].dtype), train=train, rng=rng)
        self._last_shape = hs.shape
        return self.out.forward(hs[:, -1], train=train)

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        g_last = self.out.backward(grad_logits)
        g = np.zeros(self._last_shape, dtype=g_last.dtype)
        g[:, -1] = g_last
        return self.lstm.backward(g)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x))

    def predict(self, samples: Sequence[SequenceSample]) -> list[str]:
        if not samples:
            return []
        probs = self.predict_proba(np.stack([s.features for s in samples]))
        return [self.classes[i] for i in probs.argmax(axis=1)]

    def config(self) -> dict:
        return {"n_features": self.n_features, "classes": self.classes, "hidden": self.lstm.hidden,
                "recurrent_dropout": self.lstm.recurrent_dropout}

    def save(self, path, meta: dict | None = None) -> None:
        write_fxm(path, "sequence", self.config(), meta or {}, self.named_parameters())

    @classmethod
    def load(cls, path) -> "SequenceClassifier":
        header, arrays = read_fxm(path)
        if header.get("kind") != "sequence":
            raise ModelFileError(f"{path}: holds a {header.get('kind')!r} model, not a sequence classifier")
        spec = header["spec"]
        clf = cls(spec["n_features"], spec["classes"], spec["hidden"], spec["recurrent_dropout"])
        _assign(clf.layers, arrays, path)
        return clf


def class_set(samples, classes: Sequence[str] | None = None) -> list[str]:
    return list(classes) if classes is not None else sorted({s.label for s in samples})


def train_classifier(samples: Sequence[SequenceSample], config: MicroConfig,
                     classes: Sequence[str] | None = None) -> SequenceClassifier:
    """Fit a sequence classifier on precomputed features (the CNN is not touched)."""
    if not samples:
        raise SequenceError("no training sequences")
    classes = class_set(samples, classes or config.classes)
    index = {c: i for i, c in enumerate(classes)}
    unknown = sorted({s.label for s in samples} - set(index))
    if unknown:
        raise SequenceError(f"labels {unknown} are not in the class set {classes}")
    x = np.stack([s.features for s in samples])
    y = np.array([index[s.label] for s in samples])
    master = RngStream(config.seed)
    clf = SequenceClassifier(x.shape[-1], classes, config.hidden, config.recurrent_dropout, master.spawn(0))
    opt = Adam(config.lr, config.decay)
    shuffle_rng, drop_rng = master.spawn(1), master.spawn(2)
    step = 0
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(len(x))
        for s in range(0, len(x), config.batch_size):
            idx = order[s:s + config.batch_size]
            logits = clf.logits(x[idx], train=True, rng=drop_rng.spawn(step))
            _, grad = softmax_cross_entropy(logits, y[idx])
            clf.backward(grad.astype(logits.dtype))
            params = {f"{l.name}.{p}": l.params[p] for l in clf.layers for p in l.param_names}
            grads = {f"{l.name}.{p}": l.grads[p] for l in clf.layers for p in l.param_names}
            opt.step(params, grads)
            step += 1
    return clf


def _fine_tune(cnn: Model, sequences, config: MicroConfig, classes) -> tuple[SequenceClassifier, Model]:
    """Joint training of the LSTM and the CNN trunk below the feature tap."""
    from .model import clone

    cnn = clone(cnn)
    index = {c: i for i, c in enumerate(classes)}
    frames = np.stack([np.stack([s.frame(i) for i in select_frames(s)]) for s in sequences])
    y = np.array([index[s.label] for s in sequences])
    n, t = frames.shape[:2]
    master = RngStream(config.seed)
    feat_dim = cnn.forward(frames[:1, 0], upto=FEATURE_TAP).shape[-1]
    clf = SequenceClassifier(feat_dim, classes, config.hidden, config.recurrent_dropout, master.spawn(0))
    trunk = [l for l in cnn.layers[:cnn.layer_index(FEATURE_TAP) + 1] if l.param_names]
    opt = Adam(config.lr, config.decay)
    shuffle_rng, drop_rng = master.spawn(1), master.spawn(2)
    step = 0
    for _ in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            flat = frames[idx].reshape((-1,) + frames.shape[2:])
            rng = drop_rng.spawn(step)
            feats = cnn.forward(flat, train=True, rng=rng.spawn(0), upto=FEATURE_TAP)
            logits = clf.logits(feats.reshape(len(idx), t, -1), train=True, rng=rng.spawn(1))
            _, grad = softmax_cross_entropy(logits, y[idx])
            gx = clf.backward(grad.astype(logits.dtype))
            cnn.backward(gx.reshape(feats.shape), start=FEATURE_TAP, input_grad=False)
            params = {f"{l.name}.{p}": l.params[p] for l in clf.layers + trunk for p in l.param_names}
            grads = {f"{l.name}.{p}": l.grads[p] for l in clf.layers + trunk for p in l.param_names}
            opt.step(params, grads)
            step += 1
    return clf, cnn


@dataclass
class MicroModel:
    cnn: Model
    classifier: SequenceClassifier

    def predict(self, sequences: Sequence[ExpressionSequence]) -> list[str]:
        return self.classifier.predict(featurize_all(self.cnn, sequences))


def train_micro(cnn: Model, sequences: Sequence[ExpressionSequence], config: MicroConfig,
                samples: Sequence[SequenceSample] | None = None) -> MicroModel:
    """Train the LSTM head on CNN features; the CNN stays frozen unless ``fine_tune_cnn``."""
    if not sequences:
        raise SequenceError("no sequences")
    classes = class_set(sequences, config.classes)
    if config.fine_tune_cnn:
        clf, tuned = _fine_tune(cnn, sequences, config, classes)
        return MicroModel(tuned, clf)
    if samples is None:
        samples = featurize_all(cnn, sequences)
    return MicroModel(cnn, train_classifier(samples, config, classes))


@dataclass
class LosoResult:
    per_subject: dict[str, float]
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_subject.values())))


def loso_folds(subjects: Sequence[str]) -> list[tuple[str, list[int], list[int]]]:
    """(held-out subject, train indices, test indices), ordered by subject id."""
    unique = sorted(set(subjects))
    if len(unique) < 2:
        raise SequenceError(f"leave-one-subject-out needs at least 2 subjects, got {len(unique)}")
    return [(s, [i for i, x in enumerate(subjects) if x != s], [i for i, x in enumerate(subjects) if x == s])
            for s in unique]


def evaluate_loso(builder: Callable[[list, int], object], samples: Sequence) -> LosoResult:
    """One fold per subject: fit ``builder(train_samples, fold)`` and score its ``predict`` on the held-out subject."""
    per_subject, counts = {}, {}
    for fold, (subject, tr, te) in enumerate(loso_folds([s.subject for s in samples])):
        clf = builder([samples[i] for i in tr], fold)
        test = [samples[i] for i in te]
        pred = clf.predict(test)
        per_subject[subject] = float(np.mean([p == s.label for p, s in zip(pred, test)]))
        counts[subject] = len(test)
        log.info("LOSO fold %s: %.4f", subject, per_subject[subject])
    return LosoResult(per_subject, counts)


def loso_micro(cnn: Model, sequences: Sequence[ExpressionSequence], config: MicroConfig) -> LosoResult:
    """LOSO over sequences with a frozen CNN; features are computed once and shared by all folds."""
    samples = featurize_all(cnn, sequences)
    classes = class_set(sequences, config.classes)
    return evaluate_loso(lambda tr, fold: train_classifier(tr, config, classes), samples)


def detection_labels(sequences: Sequence[ExpressionSequence], neutral: str = "neutral") -> list[ExpressionSequence]:
    """Relabel for the expression-vs-neutral task."""
    return [ExpressionSequence(s.subject, s.sequence_id, s.frames, s.onset, s.apex, s.offset,
                               neutral if s.label == neutral else "expression") for s in sequences]


def load_manifest(path) -> list[ExpressionSequence]:
    """Read ``subject,sequence_id,frame_path,frame_index,onset,apex,offset,label`` rows.

    Markers name ``frame_index`` values; frame paths resolve relative to the manifest.
    """
    path = Path(path)
    groups: dict[tuple[str, str], list[dict]] = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            groups[(row["subject"], row["sequence_id"])].append(row)
    sequences = []
    for (subject, seq_id), rows in sorted(groups.items()):
        rows.sort(key=lambda r: int(r["frame_index"]))
        position = {int(r["frame_index"]): i for i, r in enumerate(rows)}
        first = rows[0]
        try:
            onset, apex, offset = (position[int(first[k])] for k in ("onset", "apex", "offset"))
        except KeyError as exc:
            raise SequenceError(f"{seq_id}: marker frame {exc} not in the manifest") from None
        frames = [path.parent / r["frame_path"] for r in rows]
        sequences.append(ExpressionSequence(subject, seq_id, frames, onset, apex, offset, first["label"]))
    if not sequences:
        raise SequenceError(f"{path}: no sequences")
    return sequences


def write_loso_csv(result: LosoResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "accuracy"])
        for subject in sorted(result.per_subject):
            w.writerow([subject, repr(result.per_subject[subject])])
        w.writerow(["mean", repr(result.mean)])
