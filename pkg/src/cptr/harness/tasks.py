"""Synthetic key-value recall task.

Vocabulary layout for ``vocab_size = V``:

* token ``0`` is filler,
* keys are drawn from ``[1, V // 2)``,
* values are drawn from ``[V // 2, V)``.

Each sequence holds ``seq_len + 1`` tokens (so inputs and shifted targets
are both ``seq_len`` long)::

    k1 v1 k2 v2 ... kn vn | filler | k_i v_i | filler padding

The queried pair ``i`` is chosen at random and the filler run is sized so
that the query key sits exactly ``distance`` positions after the
definition of ``k_i``. Recall is scored at the target position whose
correct next token is the answer ``v_i``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from cptr.errors import SpecError
from cptr.model import Batch

FILLER = 0


@dataclass(frozen=True)
class RecallTaskSpec:
    vocab_size: int = 64
    n_pairs: int = 4
    distance: int = 64
    seq_len: int = 128
    n_sequences: int = 256
    seed: int = 0

    @property
    def key_range(self) -> tuple[int, int]:
        return 1, self.vocab_size // 2

    @property
    def value_range(self) -> tuple[int, int]:
        return self.vocab_size // 2, self.vocab_size

    def validate(self) -> None:
        lo, hi = self.key_range
        if self.vocab_size < 4:
            raise SpecError("vocab_size must be at least 4")
        if not 1 <= self.n_pairs <= hi - lo:
            raise SpecError(f"n_pairs must be in [1, {hi - lo}] for vocab_size {self.vocab_size}")
        if self.distance < 2 * self.n_pairs:
            raise SpecError(f"distance {self.distance} shorter than the pair section ({2 * self.n_pairs})")
        if self.distance + 2 * self.n_pairs - 1 > self.seq_len:
            raise SpecError(
                f"distance {self.distance} with {self.n_pairs} pairs does not fit seq_len {self.seq_len}"
            )
        if self.n_sequences < 0:
            raise SpecError("n_sequences must be nonnegative")


@dataclass
class RecallDataset:
    sequences: np.ndarray  # N x (seq_len + 1)
    answer_pos: np.ndarray  # index of the answer token within each sequence
    distances: np.ndarray
    vocab_size: int

    def __len__(self) -> int:
        return int(self.sequences.shape[0])

    @property
    def value_range(self) -> tuple[int, int]:
        return self.vocab_size // 2, self.vocab_size

    @property
    def answers(self) -> np.ndarray:
        return self.sequences[np.arange(len(self)), self.answer_pos]

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            yield Batch.from_sequences(self.sequences[start:start + batch_size])

    def __iter__(self):
        return self.batches(64)

    def subset(self, idx) -> "RecallDataset":
        return RecallDataset(self.sequences[idx], self.answer_pos[idx], self.distances[idx], self.vocab_size)

    def to_bytes(self) -> bytes:
        return b"".join(a.astype("<i8").tobytes() for a in (self.sequences, self.answer_pos, self.distances))

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"distance": int(d), "answer_pos": int(a), "tokens": s.tolist()}) + "\n"
            for s, a, d in zip(self.sequences, self.answer_pos, self.distances)
        )

    @classmethod
    def concat(cls, parts) -> "RecallDataset":
        parts = list(parts)
        if not parts:
            raise SpecError("nothing to concatenate")
        return cls(
            np.concatenate([p.sequences for p in parts]),
            np.concatenate([p.answer_pos for p in parts]),
            np.concatenate([p.distances for p in parts]),
            parts[0].vocab_size,
        )


def gen_recall_dataset(spec: RecallTaskSpec) -> RecallDataset:
    """Deterministic dataset for one definition-to-query distance."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, spec.distance])
    n, d = spec.n_pairs, spec.distance
    klo, khi = spec.key_range
    vlo, vhi = spec.value_range
    seqs = np.full((spec.n_sequences, spec.seq_len + 1), FILLER, dtype=np.int64)
    answer_pos = np.empty(spec.n_sequences, dtype=np.int64)
    for row in range(spec.n_sequences):
        keys = rng.choice(np.arange(klo, khi), size=n, replace=False)
        values = rng.integers(vlo, vhi, size=n)
        i = int(rng.integers(n))
        seqs[row, 0:2 * n:2] = keys
        seqs[row, 1:2 * n:2] = values
        query = 2 * i + d
        seqs[row, query] = keys[i]
        seqs[row, query + 1] = values[i]
        answer_pos[row] = query + 1
    return RecallDataset(seqs, answer_pos, np.full(spec.n_sequences, d, dtype=np.int64), spec.vocab_size)


def gen_recall_suite(spec: RecallTaskSpec, distances, shuffle: bool = False) -> RecallDataset:
    """One dataset per distance, concatenated (optionally shuffled by ``spec.seed``)."""
    parts = [gen_recall_dataset(RecallTaskSpec(**{**spec.__dict__, "distance": int(d)})) for d in distances]
    data = RecallDataset.concat(parts)
    if shuffle:
        data = data.subset(np.random.default_rng([spec.seed, 0]).permutation(len(data)))
    return data
