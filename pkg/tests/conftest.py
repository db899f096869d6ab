import numpy as np
import pytest

from fxnet.tensor import precision


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """Largest elementwise |a - n| / max(|a|, |n|), with a 1e-8 floor on the denominator."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)))


def naive_conv(x, w, b, pad):
    """Nested-loop cross-correlation for a single image (C, H, W)."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                s = b[oc]
                for ic in range(c):
                    for a in range(k):
                        for q in range(k):
                            s += w[oc, ic, a, q] * xp[ic, i + a, j + q]
                out[oc, i, j] = s
    return out


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def class_patterns(n_classes=8, size=48, seed=0):
    """One distinctive 12x12 block layout per class, placed on a 4x4 grid of cells."""
    rng = np.random.default_rng(seed)
    patterns = np.zeros((n_classes, size, size), dtype=np.float32)
    cell = size // 4
    for c in range(n_classes):
        cells = rng.choice(16, size=4, replace=False)
        for k in cells:
            r, q = divmod(int(k), 4)
            patterns[c, r * cell:(r + 1) * cell, q * cell:(q + 1) * cell] = 1.0
    return patterns


def synthetic_corpus(n=64, n_classes=8, size=48, seed=0, noise=0.1):
    """``n`` images, class = index mod ``n_classes``; class pattern plus uniform noise, in [0, 1]."""
    rng = np.random.default_rng(seed + 1)
    patterns = class_patterns(n_classes, size, seed)
    labels = np.arange(n) % n_classes
    images = 0.8 * patterns[labels] + noise * rng.random((n, size, size))
    return np.clip(images, 0, 1).astype(np.float32)[:, None], labels


def synthetic_sequences(n_subjects=10, per_subject=20, n_classes=4, size=48, n_frames=12, seed=0):
    """Sequences whose class is set by the pattern shown around the apex frame.

    Each subject has its own neutral face; the expression ramps in from onset
    to apex and fades out by offset.
    """
    from fxnet.micro import ExpressionSequence

    rng = np.random.default_rng(seed)
    patterns = class_patterns(n_classes, size, seed)
    sequences = []
    for s in range(n_subjects):
        face = 0.3 * rng.random((size, size))
        for q in range(per_subject):
            label = q % n_classes
            onset = int(rng.integers(1, n_frames // 2 - 1))
            apex = int(rng.integers(onset + 1, n_frames - 2))
            offset = int(rng.integers(apex + 1, n_frames - 1))
            frames = []
            for t in range(n_frames):
                if onset <= t <= apex:
                    w = (t - onset + 1) / (apex - onset + 1)
                elif apex < t <= offset:
                    w = 1 - (t - apex) / (offset - apex + 1)
                else:
                    w = 0.0
                img = face + 0.6 * w * patterns[label] + 0.05 * rng.random((size, size))
                frames.append(np.clip(img, 0, 1).astype(np.float32)[None])
            sequences.append(ExpressionSequence(f"sub{s:02d}", f"sub{s:02d}_{q:02d}", frames,
                                                onset, apex, offset, f"c{label}"))
    return sequences


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
