"""Subtoken vocabulary: byte-level BPE plus the special-token inventory.

Special tokens occupy reserved low ids so that retraining the text part of the
vocabulary never invalidates masks, stop conditions, or checkpoints that refer
to them. The 256 raw byte tokens follow the specials, and learned merges come
last. Byte fallback means any string is encodable.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

VOCAB_FILE_VERSION = 1

DEFAULT_ROLE_INVENTORY = [
    "agent",
    "tool",
    "item",
    "destination",
    "target",
]


class CodecError(ValueError):
    """Raised for vocabulary construction or lookup failures."""


def _pair(name: str) -> tuple[str, str]:
    return (f"<|b_{name}|>", f"<|e_{name}|>")


@dataclass(frozen=True)
class SpecialTokenInventory:
    """Begin/end delimiters per input element plus unk/pad and inference starts.

    Role delimiters are generated from a role inventory supplied at build
    time; looking up a role outside the inventory is an error.
    """

    question: tuple[str, str] = _pair("qn")
    answer: tuple[str, str] = _pair("ans")
    rationale: tuple[str, str] = _pair("rtnl")
    object_block: tuple[str, str] = _pair("objs")
    situation_block: tuple[str, str] = _pair("situ")
    verb: tuple[str, str] = _pair("verb")
    place: tuple[str, str] = _pair("place")
    inference_starts: tuple[str, str, str] = ("<|before|>", "<|after|>", "<|intent|>")
    unk: str = "<|unk|>"
    pad: str = "<|pad|>"
    role_inventory: tuple[str, ...] = ()
    role_pairs: dict[str, tuple[str, str]] = field(default_factory=dict)

    @classmethod
    def with_roles(cls, roles: Sequence[str]) -> "SpecialTokenInventory":
        roles = tuple(roles)
        if len(set(roles)) != len(roles):
            raise CodecError(f"duplicate role names in inventory: {list(roles)}")
        pairs = {r: _pair(r) for r in roles}
        return cls(role_inventory=roles, role_pairs=pairs)

    def role_pair(self, role: str) -> tuple[str, str]:
        try:
            return self.role_pairs[role]
        except KeyError:
            raise CodecError(
                f"role {role!r} is not in the role inventory {list(self.role_inventory)}"
            ) from None

    def all_tokens(self) -> list[str]:
        """Deterministic listing; defines the reserved id order."""
        tokens = [self.pad, self.unk]
        for pair in (
            self.question,
            self.answer,
            self.rationale,
            self.object_block,
            self.situation_block,
            self.verb,
            self.place,
        ):
            tokens.extend(pair)
        tokens.extend(self.inference_starts)
        for role in self.role_inventory:
            tokens.extend(self.role_pairs[role])
        dupes = [t for t, n in Counter(tokens).items() if n > 1]
        if dupes:
            raise CodecError(f"duplicate special tokens: {dupes}")
        return tokens


def _bytes_to_str(b: bytes) -> str:
    # latin-1 maps bytes 0..255 onto code points 0..255, losslessly
    return b.decode("latin-1")


def _str_to_bytes(s: str) -> bytes:
    return s.encode("latin-1")


class Vocabulary:
    """Immutable id space: [specials][256 byte tokens][learned merges]."""

    def __init__(
        self,
        specials: SpecialTokenInventory,
        merges: Sequence[tuple[int, int]] = (),
    ):
        self.specials = specials
        self._special_tokens = specials.all_tokens()
        self._n_specials = len(self._special_tokens)
        self._byte_base = self._n_specials
        self._merge_base = self._byte_base + 256

        self.merges: list[tuple[int, int]] = []
        self._merge_rank: dict[tuple[int, int], int] = {}
        self._token_bytes: dict[int, bytes] = {
            self._byte_base + b: bytes([b]) for b in range(256)
        }
        for left, right in merges:
            self._add_merge(left, right)

        self._special_to_id = {t: i for i, t in enumerate(self._special_tokens)}
        self._split_re = re.compile(
            "(" + "|".join(re.escape(t) for t in sorted(self._special_tokens, key=len, reverse=True)) + ")"
        )

    def _add_merge(self, left: int, right: int) -> int:
        for tid in (left, right):
            if not (self._byte_base <= tid < self._merge_base + len(self.merges)):
                raise CodecError(f"merge references unknown or special token id {tid}")
        new_id = self._merge_base + len(self.merges)
        self.merges.append((left, right))
        self._merge_rank[(left, right)] = len(self.merges) - 1
        self._token_bytes[new_id] = self._token_bytes[left] + self._token_bytes[right]
        return new_id

    # -- size and lookups ---------------------------------------------------

    def __len__(self) -> int:
        return self._merge_base + len(self.merges)

    @property
    def vocab_size(self) -> int:
        return len(self)

    @property
    def n_specials(self) -> int:
        return self._n_specials

    def special_id(self, token: str) -> int:
        try:
            return self._special_to_id[token]
        except KeyError:
            raise CodecError(f"{token!r} is not a special token") from None

    @property
    def pad_id(self) -> int:
        return self.special_id(self.specials.pad)

    @property
    def unk_id(self) -> int:
        return self.special_id(self.specials.unk)

    def token_string(self, token_id: int) -> str:
        if token_id < 0 or token_id >= len(self):
            raise CodecError(f"token id {token_id} out of range [0, {len(self)})")
        if token_id < self._n_specials:
            return self._special_tokens[token_id]
        return _bytes_to_str(self._token_bytes[token_id])

    def token_to_id_map(self) -> dict[str, int]:
        return {self.token_string(i): i for i in range(len(self))}

    # -- encode / decode ----------------------------------------------------

    def _apply_merges(self, ids: list[int]) -> list[int]:
        while len(ids) >= 2:
            best_rank = None
            for pair in zip(ids, ids[1:]):
                rank = self._merge_rank.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
            if best_rank is None:
                break
            left, right = self.merges[best_rank]
            merged_id = self._merge_base + best_rank
            out = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == left and ids[i + 1] == right:
                    out.append(merged_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        return ids

    def encode_plain(self, text: str) -> list[int]:
        """BPE on raw bytes; special-token substrings are NOT recognized."""
        ids = [self._byte_base + b for b in text.encode("utf-8")]
        return self._apply_merges(ids)

    def encode(self, text: str) -> list[int]:
        """Deterministic encoding; specials present verbatim map to single ids."""
        if not text:
            return []
        out: list[int] = []
        for segment in self._split_re.split(text):
            if not segment:
                continue
            if segment in self._special_to_id:
                out.append(self._special_to_id[segment])
            else:
                out.extend(self.encode_plain(segment))
        return out

    def decode(self, ids: Iterable[int]) -> str:
        parts: list[str] = []
        pending = b""
        for tid in ids:
            if tid < 0 or tid >= len(self):
                raise CodecError(f"token id {tid} out of range [0, {len(self)})")
            if tid < self._n_specials:
                if pending:
                    parts.append(pending.decode("utf-8", errors="replace"))
                    pending = b""
                parts.append(self._special_tokens[tid])
            else:
                pending += self._token_bytes[tid]
        if pending:
            parts.append(pending.decode("utf-8", errors="replace"))
        return "".join(parts)

    def decode_text(self, ids: Iterable[int]) -> str:
        """Decode, dropping special tokens; used to surface generated rationales."""
        return self.decode([i for i in ids if i >= self._n_specials])

    # -- persistence ----------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "version": VOCAB_FILE_VERSION,
            "merges": [
                [
                    _bytes_to_str(self._token_bytes[left]),
                    _bytes_to_str(self._token_bytes[right]),
                ]
                for left, right in self.merges
            ],
            "specials": list(self._special_tokens),
            "role_inventory": list(self.specials.role_inventory),
        }

    def fingerprint(self) -> str:
        """Stable content hash; checkpoints record it to catch vocab mismatches."""
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=1))

    @classmethod
    def from_json(cls, payload: dict) -> "Vocabulary":
        if payload.get("version") != VOCAB_FILE_VERSION:
            raise CodecError(f"unsupported vocabulary file version {payload.get('version')!r}")
        inventory = SpecialTokenInventory.with_roles(payload.get("role_inventory", []))
        vocab = cls(inventory)
        if payload.get("specials") != inventory.all_tokens():
            raise CodecError("special-token list in file does not match the generated inventory")
        token_ids = {_bytes_to_str(bytes([b])): vocab._byte_base + b for b in range(256)}
        for left_str, right_str in payload.get("merges", []):
            if left_str not in token_ids or right_str not in token_ids:
                raise CodecError(f"merge ({left_str!r}, {right_str!r}) references unknown token")
            new_id = vocab._add_merge(token_ids[left_str], token_ids[right_str])
            token_ids[_bytes_to_str(vocab._token_bytes[new_id])] = new_id
        return vocab

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


def train_bpe(
    corpus: Iterable[str],
    target_size: int,
    specials: SpecialTokenInventory,
) -> Vocabulary:
    """Learn byte-level BPE merges until the vocabulary has target_size entries.

    Specials are reserved at the front and never participate in merges. Ties
    between equally frequent pairs break toward the smallest (left, right) id
    pair, which makes training deterministic.
    """
    vocab = Vocabulary(specials)
    n_merges = target_size - len(vocab)
    if n_merges < 0:
        raise CodecError(
            f"target_size {target_size} is below the reserved minimum {len(vocab)} "
            "(specials + 256 byte tokens)"
        )

    sequences: list[list[int]] = []
    for text in corpus:
        # keep special literals out of merge statistics
        for segment in vocab._split_re.split(text):
            if segment and segment not in vocab._special_to_id:
                sequences.append([vocab._byte_base + b for b in segment.encode("utf-8")])
    if not sequences:
        raise CodecError("corpus is empty; cannot train a vocabulary")

    for _ in range(n_merges):
        counts: Counter[tuple[int, int]] = Counter()
        for seq in sequences:
            counts.update(zip(seq, seq[1:]))
        if not counts:
            raise CodecError(
                f"corpus exhausted after {len(vocab.merges)} merges; "
                f"cannot reach target_size {target_size}"
            )
        best_count = max(counts.values())
        left, right = min(pair for pair, n in counts.items() if n == best_count)
        new_id = vocab._add_merge(left, right)
        for si, seq in enumerate(sequences):
            out = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == left and seq[i + 1] == right:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            sequences[si] = out

    return vocab
