"""Commit datasets: JSONL loading, synthetic generation, tokenization and the
frozen stratified train/test split."""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_ID = 0
OOV_ID = 1

DEFAULT_MESSAGE_LEN = 32
DEFAULT_CODE_LEN = 64
DEFAULT_VOCAB_CAP = 5000
TEST_FRACTION = 0.2

PRESET_FAULTY_FRACTION = {
    "openstack-like": 0.13,
    "qt-like": 0.08,
}

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_REQUIRED_FIELDS = ("id", "message", "added", "removed", "label")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class CommitRecord:
    id: str
    message: str
    added_lines: str
    removed_lines: str
    label: int

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "message": self.message,
            "added": self.added_lines,
            "removed": self.removed_lines,
            "label": self.label,
        }


@dataclass(frozen=True)
class TokenizedCommit:
    id: str
    message_ids: tuple[int, ...]
    code_ids: tuple[int, ...]
    label: int


@dataclass
class SplitDataset:
    train: list[TokenizedCommit]
    test: list[TokenizedCommit]
    vocab: dict[str, int]
    faulty_fraction_train: float
    class_weight: float
    _arrays: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def arrays(self, side: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(message_ids, code_ids, labels) for ``side`` as int64 matrices."""
        if side not in self._arrays:
            self._arrays[side] = stack(getattr(self, side))
        return self._arrays[side]


def stack(commits: Sequence[TokenizedCommit]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    msg = np.array([c.message_ids for c in commits], dtype=np.int64)
    code = np.array([c.code_ids for c in commits], dtype=np.int64)
    labels = np.array([c.label for c in commits], dtype=np.int64)
    return msg, code, labels


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


# -- JSONL -------------------------------------------------------------------


def load_jsonl(path: str | Path) -> list[CommitRecord]:
    records: list[CommitRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetError(f"line {lineno}: expected a JSON object")
            for name in _REQUIRED_FIELDS:
                if name not in obj:
                    raise DatasetError(f"line {lineno}: missing field {name}")
            label = obj["label"]
            if isinstance(label, bool) or label not in (0, 1):
                raise DatasetError(f"line {lineno}: label must be 0 or 1, got {label!r}")
            rid = str(obj["id"])
            if rid in seen:
                raise DatasetError(f"line {lineno}: duplicate id {rid}")
            seen.add(rid)
            records.append(
                CommitRecord(
                    id=rid,
                    message=str(obj["message"]),
                    added_lines=str(obj["added"]),
                    removed_lines=str(obj["removed"]),
                    label=int(label),
                )
            )
    return records


def write_jsonl(records: Iterable[CommitRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


# -- synthetic generation ----------------------------------------------------

_MESSAGE_WORDS = (
    "fix add update remove refactor change move rename cleanup improve support "
    "allow use handle make test tests docs config option default error warning "
    "log logging api client server driver volume network port instance image "
    "scheduler compute quota policy user project role token auth keystone neutron "
    "nova glance widget layout render view model signal slot event thread timer "
    "painter window dialog menu button style theme font text string list map "
    "when with from into for the a an of to in on by after before during not"
).split()

_CODE_WORDS = (
    "def class return self if else elif for while try except raise import from "
    "none true false int str dict list len range print assert pass yield lambda "
    "const void auto static inline virtual override public private protected "
    "include namespace template typename struct enum nullptr delete new this "
    "qstring qlist qobject qwidget emit connect disconnect value key item index "
    "count size data result args kwargs context request response config params "
    "name path file open close read write get set update append extend pop"
).split()

# "risky" tokens: faulty commits carry them often, clean commits rarely
_RISKY_WORDS = (
    "lock unlock mutex race realloc malloc free memcpy overflow refcount "
    "deadlock async await volatile cast reinterpret goto retry timeout unsafe"
).split()

P_SIGNAL_FAULTY = 0.8
P_SIGNAL_CLEAN = 0.1


def generate_synthetic(
    preset: str = "openstack-like",
    n_commits: int = 2000,
    faulty_fraction: float | None = None,
    gen_seed: int = 1,
) -> list[CommitRecord]:
    """Generate a learnable, class-imbalanced commit corpus.

    ``preset`` fixes the default faulty fraction (openstack-like 13%, qt-like
    8%); ``custom`` requires an explicit ``faulty_fraction``. Exactly
    ``round(n_commits * faulty_fraction)`` records are faulty. Output is a
    deterministic function of the arguments.
    """
    if preset == "custom":
        if faulty_fraction is None:
            raise DatasetError("preset 'custom' needs an explicit faulty_fraction")
    elif preset in PRESET_FAULTY_FRACTION:
        if faulty_fraction is None:
            faulty_fraction = PRESET_FAULTY_FRACTION[preset]
    else:
        raise DatasetError(f"unknown preset {preset!r}")
    if n_commits < 10:
        raise DatasetError("n_commits must be at least 10")
    if not 0.0 < faulty_fraction < 1.0:
        raise DatasetError("faulty_fraction must lie strictly between 0 and 1")
    n_faulty = math.floor(n_commits * faulty_fraction + 0.5)
    if n_faulty == 0 or n_faulty == n_commits:
        raise DatasetError(
            f"faulty_fraction {faulty_fraction} leaves one class empty for n={n_commits}"
        )

    rng = np.random.Generator(np.random.PCG64(gen_seed))
    labels = np.zeros(n_commits, dtype=np.int64)
    labels[rng.permutation(n_commits)[:n_faulty]] = 1
    code_scale = 2 if preset == "qt-like" else 1

    records = []
    for i in range(n_commits):
        label = int(labels[i])
        message = list(rng.choice(_MESSAGE_WORDS, size=rng.integers(4, 16)))
        added = list(rng.choice(_CODE_WORDS, size=rng.integers(5, 30 * code_scale)))
        removed = list(rng.choice(_CODE_WORDS, size=rng.integers(0, 15 * code_scale)))
        p_signal = P_SIGNAL_FAULTY if label else P_SIGNAL_CLEAN
        if rng.random() < p_signal:
            for word in rng.choice(_RISKY_WORDS, size=rng.integers(2, 6)):
                target = (message, added, removed)[rng.integers(0, 3)]
                target.insert(int(rng.integers(0, len(target) + 1)), str(word))
        records.append(
            CommitRecord(
                id=f"{preset}-{gen_seed}-{i:06d}",
                message=" ".join(message),
                added_lines="\n".join(_as_lines(added)),
                removed_lines="\n".join(_as_lines(removed)),
                label=label,
            )
        )
    return records


def _as_lines(words: list[str], width: int = 6) -> list[str]:
    return [" ".join(words[i : i + width]) + ";" for i in range(0, len(words), width)]


# -- split & tokenization ----------------------------------------------------


def stable_hash(commit_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(commit_id.encode("utf-8"), digest_size=8).digest(), "little")


def stratified_split(
    records: Sequence[CommitRecord], test_fraction: float = TEST_FRACTION
) -> tuple[list[CommitRecord], list[CommitRecord]]:
    """Per class, the ``round(test_fraction * n_class)`` records with the
    smallest id hash go to test. Independent of record order."""
    test_ids: set[str] = set()
    for label in (0, 1):
        members = sorted((r for r in records if r.label == label), key=lambda r: (stable_hash(r.id), r.id))
        n_test = math.floor(len(members) * test_fraction + 0.5)
        test_ids.update(r.id for r in members[:n_test])
    train = [r for r in records if r.id not in test_ids]
    test = [r for r in records if r.id in test_ids]
    return train, test


def _code_tokens(rec: CommitRecord) -> list[str]:
    return tokenize(rec.added_lines) + tokenize(rec.removed_lines)


def _encode(tokens: list[str], vocab: dict[str, int], length: int) -> tuple[int, ...]:
    ids = [vocab.get(t, OOV_ID) for t in tokens[:length]]
    return tuple(ids + [PAD_ID] * (length - len(ids)))


def build_vocab(train: Sequence[CommitRecord], vocab_cap: int) -> dict[str, int]:
    counts: Counter[str] = Counter()
    for rec in train:
        counts.update(tokenize(rec.message))
        counts.update(_code_tokens(rec))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: max(vocab_cap - 2, 0)]
    vocab = {"<pad>": PAD_ID, "<oov>": OOV_ID}
    for token, _ in ranked:
        vocab[token] = len(vocab)
    return vocab


def tokenize_record(rec: CommitRecord, vocab: dict[str, int], message_len: int, code_len: int) -> TokenizedCommit:
    return TokenizedCommit(
        id=rec.id,
        message_ids=_encode(tokenize(rec.message), vocab, message_len),
        code_ids=_encode(_code_tokens(rec), vocab, code_len),
        label=rec.label,
    )


def build_vocab_and_tokenize(
    records: Sequence[CommitRecord],
    message_len: int = DEFAULT_MESSAGE_LEN,
    code_len: int = DEFAULT_CODE_LEN,
    vocab_cap: int = DEFAULT_VOCAB_CAP,
    test_fraction: float = TEST_FRACTION,
) -> SplitDataset:
    if not records:
        raise DatasetError("no records to tokenize")
    if vocab_cap < 2 or message_len < 1 or code_len < 1:
        raise DatasetError("vocab_cap must be >= 2 and sequence lengths >= 1")
    train, test = stratified_split(records, test_fraction)
    for side, part in (("train", train), ("test", test)):
        n_faulty = sum(r.label for r in part)
        if n_faulty == 0 or n_faulty == len(part):
            raise DatasetError(f"{side} split lacks one class ({n_faulty} faulty of {len(part)}); AUC undefined")
    vocab = build_vocab(train, vocab_cap)
    n_faulty = sum(r.label for r in train)
    return SplitDataset(
        train=[tokenize_record(r, vocab, message_len, code_len) for r in train],
        test=[tokenize_record(r, vocab, message_len, code_len) for r in test],
        vocab=vocab,
        faulty_fraction_train=n_faulty / len(train),
        class_weight=(len(train) - n_faulty) / n_faulty,
    )
