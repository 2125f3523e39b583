"""N-way k-shot episodes and their network encoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat

QUERY_LABEL = -1.0


@dataclass
class Episode:
    """One task.  Windows are ordered support first (class-grouped), queries last."""

    support: np.ndarray  # (N*k, W)
    support_labels: np.ndarray  # episode-local, (N*k,)
    query: np.ndarray  # (q, W)
    query_truth: np.ndarray  # episode-local, (q,)
    class_map: np.ndarray  # episode label -> original class id
    support_index: np.ndarray  # rows in the source dataset
    query_index: np.ndarray

    @property
    def ways(self):
        return len(self.class_map)

    @property
    def length(self):
        return len(self.support) + len(self.query)

    def windows(self):
        return np.concatenate([self.support, self.query])

    def label_column(self):
        return np.concatenate(
            [self.support_labels.astype(np.float64), np.full(len(self.query), QUERY_LABEL)]
        )


def sample_episode(dataset, ways, shots, queries, rng):
    """Draw an episode from ``dataset`` using ``rng`` (an RngStream).

    Classes are picked uniformly without replacement and given shuffled
    episode-local labels; each query picks its class uniformly among them.
    """
    if ways < 1 or shots < 1 or queries < 1:
        raise ValueError("ways, shots and queries must all be >= 1")
    per_class = dataset.class_indices()
    eligible = [c for c, idx in enumerate(per_class) if len(idx) >= shots + queries]
    if len(eligible) < ways:
        raise ValueError(
            f"need {ways} classes with >= {shots + queries} windows, dataset has {len(eligible)}"
        )
    class_map = np.asarray(rng.choice(eligible, size=ways, replace=False), dtype=np.int64)
    query_truth = np.asarray(rng.integers(0, ways, size=queries), dtype=np.int64)
    s_idx, q_idx = [], []
    q_slots = {}
    for local, c in enumerate(class_map):
        n_q = int((query_truth == local).sum())
        picked = rng.choice(per_class[c], size=shots + n_q, replace=False)
        s_idx.append(picked[:shots])
        q_slots[local] = list(picked[shots:])
    q_idx = np.array([q_slots[int(t)].pop() for t in query_truth], dtype=np.int64)
    s_idx = np.concatenate(s_idx)
    return Episode(
        support=dataset.windows[s_idx],
        support_labels=np.repeat(np.arange(ways), shots),
        query=dataset.windows[q_idx],
        query_truth=query_truth,
        class_map=class_map,
        support_index=s_idx,
        query_index=q_idx,
    )


@dataclass
class EpisodeBatch:
    """Episodes stacked along a leading task axis."""

    windows: np.ndarray  # (B, L, W)
    label_column: np.ndarray  # (B, L)
    query_truth: np.ndarray  # (B, q)
    class_maps: np.ndarray  # (B, N)

    def __len__(self):
        return len(self.windows)

    @property
    def queries(self):
        return self.query_truth.shape[1]


def stack_episodes(episodes):
    return EpisodeBatch(
        windows=np.stack([e.windows() for e in episodes]),
        label_column=np.stack([e.label_column() for e in episodes]),
        query_truth=np.stack([e.query_truth for e in episodes]),
        class_maps=np.stack([e.class_map for e in episodes]),
    )


def sample_batch(dataset, n, ways, shots, queries, rng):
    return stack_episodes([sample_episode(dataset, ways, shots, queries, rng) for _ in range(n)])


def encode_episode(labels, features):
    """Append the label column to per-spike features.

    ``labels`` is an Episode, or an array of label values aligned with the
    rows of ``features`` (support labels, then -1 for each query).  Works on
    ``L x D`` or ``B x L x D`` features and returns width ``D + 1``.
    """
    column = labels.label_column() if isinstance(labels, Episode) else np.asarray(labels)
    if column.shape != features.shape[:-1]:
        raise ValueError(
            f"label column {column.shape} does not align with features {features.shape}"
        )
    col = Tensor(column[..., None].astype(features.dtype))
    return concat([features, col], axis=-1)
