"""Spike-window datasets: synthesis, extraction, normalization, splits and I/O."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .tensor import RngStream

log = logging.getLogger(__name__)

WINDOW_LEN = 66
PRE_SAMPLES = 20


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``line`` is 1-based when known."""

    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass
class SpikeDataset:
    windows: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    sigma_n: float = 0.0
    n_classes: int = 0
    window_len: int = WINDOW_LEN
    degenerate: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.windows.ndim != 2 or self.windows.shape[1] != self.window_len:
            raise ValueError(
                f"windows must be M x {self.window_len}, got {self.windows.shape}"
            )
        if len(self.labels) != len(self.windows):
            raise ValueError("labels and windows differ in length")
        if not self.n_classes:
            self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)

    def class_indices(self):
        return [np.flatnonzero(self.labels == c) for c in range(self.n_classes)]

    def subset(self, idx, name=None):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            windows=self.windows[idx],
            labels=self.labels[idx],
            name=name or self.name,
            degenerate=None if self.degenerate is None else self.degenerate[idx],
        )

    def meta(self):
        return {
            "name": self.name,
            "sigma_n": float(self.sigma_n),
            "n_classes": int(self.n_classes),
            "window_len": int(self.window_len),
            "rows": len(self),
        }


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------

# Each template is a sum of Gaussian bumps (amplitude, centre sample, width),
# rescaled to unit peak magnitude.
_EASY = (
    ((-1.0, 20, 1.4), (0.35, 27, 4.0)),
    ((1.0, 20, 3.0), (-0.25, 33, 6.0)),
    ((-0.5, 16, 2.0), (1.0, 21, 1.2), (-0.6, 26, 2.5)),
)
_DIFFICULT = (
    ((-1.0, 20, 1.4), (0.35, 27, 4.0)),
    ((-1.0, 20, 1.7), (0.30, 28, 4.5)),
    ((1.0, 20, 3.0), (-0.25, 33, 6.0)),
)
BANKS = {"easy": _EASY, "difficult": _DIFFICULT}


def _render(bumps, n=WINDOW_LEN):
    t = np.arange(n, dtype=np.float64)
    w = sum(a * np.exp(-0.5 * ((t - c) / s) ** 2) for a, c, s in bumps)
    return w / np.abs(w).max()


def builtin_templates(bank="easy"):
    """Three unit-peak 66-sample waveforms.

    ``"easy"`` holds mutually distinct shapes; ``"difficult"`` contains a pair
    of near-duplicates.
    """
    try:
        spec = BANKS[bank]
    except KeyError:
        raise ValueError(f"unknown template bank {bank!r}; use 'easy' or 'difficult'") from None
    return np.stack([_render(b) for b in spec])


def peak_cross_correlation(a, b):
    """Largest normalized cross-correlation of ``a`` and ``b`` over all lags."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.correlate(a, b, "full").max() / (np.linalg.norm(a) * np.linalg.norm(b)))


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


def generate_synthetic(
    templates,
    per_class,
    sigma_n,
    seed,
    n_background=3,
    attenuation=(0.05, 0.15),
    white_fraction=0.5,
    name="synthetic",
):
    """Labelled windows built as template + background noise.

    The background for each window is ``n_background`` randomly chosen
    templates, each attenuated and circularly shifted, mixed with white
    Gaussian noise (``white_fraction`` of the noise variance).  The mixture is
    made zero-mean and rescaled so its standard deviation is exactly
    ``sigma_n`` (templates have unit peak amplitude).
    """
    templates = np.asarray(templates, dtype=np.float64)
    if templates.ndim != 2 or len(templates) < 2:
        raise ValueError("need at least 2 templates")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if sigma_n < 0:
        raise ValueError("sigma_n must be >= 0")
    if not 0.0 <= white_fraction <= 1.0:
        raise ValueError("white_fraction must lie in [0, 1]")
    n_cls, n = templates.shape
    rng = RngStream(seed)
    labels = np.repeat(np.arange(n_cls), per_class)[rng.permutation(n_cls * per_class)]
    windows = templates[labels].copy()
    if sigma_n > 0:
        for i in range(len(labels)):
            windows[i] += _background(templates, rng, n_background, attenuation, white_fraction) * sigma_n
    return SpikeDataset(windows, labels, name=name, sigma_n=float(sigma_n), n_classes=n_cls, window_len=n)


def _background(templates, rng, n_background, attenuation, white_fraction):
    n_cls, n = templates.shape
    bg = np.zeros(n)
    for j in rng.integers(0, n_cls, size=n_background):
        gain = rng.uniform(*attenuation)
        bg += gain * np.roll(templates[j], int(rng.integers(0, n)))
    white = rng.normal(size=n)
    bg -= bg.mean()
    white -= white.mean()
    parts = []
    if white_fraction < 1.0 and bg.std() > 0:
        parts.append(np.sqrt(1.0 - white_fraction) * bg / bg.std())
    if white_fraction > 0.0:
        parts.append(np.sqrt(white_fraction) * white / white.std())
    noise = sum(parts)
    noise -= noise.mean()
    return noise / noise.std()


def insert_spikes(length, waveforms, spike_times, pre_samples=PRE_SAMPLES):
    """Zero signal of ``length`` samples with ``waveforms`` added at ``spike_times``."""
    signal = np.zeros(length)
    for w, t in zip(np.asarray(waveforms, dtype=np.float64), spike_times):
        start = int(t) - pre_samples
        signal[start : start + len(w)] += w
    return signal


class Extraction(NamedTuple):
    windows: np.ndarray
    kept: np.ndarray
    rejected: int


def extract_windows(signal, spike_times, window_len=WINDOW_LEN, pre_samples=PRE_SAMPLES):
    """Cut ``signal[t - pre_samples : t - pre_samples + window_len]`` per spike.

    Spikes whose window falls outside the signal are skipped and counted.
    """
    signal = np.asarray(signal, dtype=np.float64)
    out, kept = [], []
    for i, t in enumerate(np.asarray(spike_times, dtype=np.int64)):
        start = t - pre_samples
        if start < 0 or start + window_len > len(signal):
            continue
        out.append(signal[start : start + window_len])
        kept.append(i)
    rejected = len(spike_times) - len(kept)
    if rejected:
        log.warning("extract_windows: rejected %d out-of-bounds spike(s)", rejected)
    windows = np.array(out).reshape(len(out), window_len)
    return Extraction(windows, np.array(kept, dtype=np.int64), rejected)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def min_max_normalize(window):
    """Rescale to [0, 1]; returns ``(normalized, degenerate)``.

    A constant window cannot be rescaled and maps to 0.5 everywhere with
    ``degenerate=True``.
    """
    w = np.asarray(window, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot normalize an empty window")
    lo, hi = w.min(), w.max()
    if hi == lo:
        return np.full_like(w, 0.5), True
    return (w - lo) / (hi - lo), False


def normalize_dataset(ds):
    windows = np.empty_like(ds.windows)
    flags = np.zeros(len(ds), dtype=bool)
    for i, w in enumerate(ds.windows):
        windows[i], flags[i] = min_max_normalize(w)
    if flags.any():
        log.warning("%s: %d degenerate (constant) window(s)", ds.name, int(flags.sum()))
    return replace(ds, windows=windows, degenerate=flags)


# ---------------------------------------------------------------------------
# splitting and subsampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if min(fr) <= 0:
            raise ValueError("split fractions must be positive")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {sum(fr)}, not 1")

    @property
    def fractions(self):
        return (self.train_frac, self.val_frac, self.test_frac)


def _apportion(counts, fractions):
    """Integer table ``alloc[class, part]`` with row sums ``counts``.

    Column sums are the largest-remainder rounding of ``frac * total`` and
    every cell stays within one of its exact quota.
    """
    counts = np.asarray(counts, dtype=np.int64)
    fractions = np.asarray(fractions, dtype=np.float64)
    total = counts.sum()
    exact = fractions * total
    targets = np.floor(exact).astype(np.int64)
    targets[np.argsort(targets - exact, kind="stable")[: total - targets.sum()]] += 1
    quota = counts[:, None] * fractions[None, :]
    alloc = np.floor(quota).astype(np.int64)
    row_left = counts - alloc.sum(axis=1)
    col_left = targets - alloc.sum(axis=0)
    # round up one cell per unit of leftover: a max flow from classes to parts
    # through the cells with a fractional quota
    n_c, n_s = quota.shape
    open_cells = (quota - alloc) > 0
    size = n_c + n_s + 2
    cap = np.zeros((size, size), dtype=np.int32)
    cap[0, 1:1 + n_c] = row_left
    cap[1:1 + n_c, 1 + n_c:1 + n_c + n_s] = open_cells
    cap[1 + n_c:1 + n_c + n_s, -1] = col_left
    flow = maximum_flow(csr_matrix(cap), 0, size - 1)
    if flow.flow_value != row_left.sum():
        raise RuntimeError(f"no stratified rounding for counts {counts.tolist()}")
    alloc += flow.flow.toarray()[1:1 + n_c, 1 + n_c:1 + n_c + n_s].astype(np.int64)
    return alloc


def split(ds, spec=SplitSpec()):
    """Stratified train/val/test partition, deterministic per ``spec.seed``."""
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    counts = ds.class_counts()
    if counts.min() < 3:
        raise ValueError(f"every class needs >= 3 windows to split, got {counts.tolist()}")
    alloc = _apportion(counts, spec.fractions)
    rng = RngStream(spec.seed)
    parts = [[], [], []]
    for c, idx in enumerate(ds.class_indices()):
        idx = idx[rng.permutation(len(idx))]
        bounds = np.cumsum([0, *alloc[c]])
        for s in range(3):
            parts[s].append(idx[bounds[s] : bounds[s + 1]])
    names = ("train", "val", "test")
    return tuple(
        ds.subset(np.sort(np.concatenate(p)), name=f"{ds.name}:{n}") for p, n in zip(parts, names)
    )


def subsample(ds, proportion, seed, min_per_class=3):
    """Stratified random subset of ``round(proportion * len(ds))`` windows."""
    if not 0.0 < proportion <= 1.0:
        raise ValueError(f"proportion must lie in (0, 1], got {proportion}")
    if proportion == 1.0:
        return ds
    alloc = _apportion(ds.class_counts(), (proportion, 1.0 - proportion))[:, 0]
    if alloc.min() < min_per_class:
        raise ValueError(
            f"subsample({proportion}) leaves {alloc.min()} windows in some class; "
            f"need >= {min_per_class}"
        )
    rng = RngStream(seed)
    keep = [idx[rng.permutation(len(idx))[:n]] for idx, n in zip(ds.class_indices(), alloc)]
    return ds.subset(np.sort(np.concatenate(keep)))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

FORMATS = ("csv", "json-manifest+csv")


def manifest_path(path):
    return Path(path).with_suffix(".json")


def save_dataset(ds, path, format="json-manifest+csv"):
    if format not in FORMATS:
        raise ValueError(f"unknown dataset format {format!r}")
    path = Path(path)
    header = ["label"] + [f"s{i}" for i in range(ds.window_len)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for lab, row in zip(ds.labels, ds.windows.astype(np.float32)):
            w.writerow([int(lab)] + [np.format_float_positional(v, unique=True, trim="-") for v in row])
    if format == "json-manifest+csv":
        with open(manifest_path(path), "w", encoding="utf-8") as fh:
            json.dump(ds.meta(), fh, indent=2)
            fh.write("\n")
    return path


def load_dataset(path, format=None):
    """Read a dataset CSV, plus its JSON manifest when present or requested."""
    path = Path(path)
    mpath = manifest_path(path)
    if format is None:
        format = "json-manifest+csv" if mpath.exists() else "csv"
    if format not in FORMATS:
        raise ValueError(f"unknown dataset format {format!r}")
    meta = {}
    if format == "json-manifest+csv":
        try:
            meta = json.loads(mpath.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"manifest {mpath}: {e.msg}", e.lineno) from None
        missing = {"name", "sigma_n", "n_classes", "window_len", "rows"} - set(meta)
        if missing:
            raise DatasetFormatError(f"manifest {mpath} lacks {sorted(missing)}")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError("empty file", 1) from None
        n = len(header) - 1
        expected = ["label"] + [f"s{i}" for i in range(n)]
        if n < 1 or header != expected:
            raise DatasetFormatError("header must be 'label,s0,...,sN'", 1)
        labels, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != n + 1:
                raise DatasetFormatError(f"expected {n + 1} fields, got {len(rec)}", lineno)
            try:
                labels.append(int(rec[0]))
                rows.append([float(v) for v in rec[1:]])
            except ValueError as e:
                raise DatasetFormatError(str(e), lineno) from None

    if meta:
        if meta["rows"] != len(rows):
            raise DatasetFormatError(f"manifest says {meta['rows']} rows, CSV has {len(rows)}")
        if meta["window_len"] != n:
            raise DatasetFormatError(f"manifest window_len {meta['window_len']} != CSV width {n}")
    windows = np.array(rows, dtype=np.float32).astype(np.float64).reshape(len(rows), n)
    return SpikeDataset(
        windows,
        np.array(labels, dtype=np.int64),
        name=meta.get("name", path.stem),
        sigma_n=float(meta.get("sigma_n", 0.0)),
        n_classes=int(meta.get("n_classes", 0)),
        window_len=n,
    )
