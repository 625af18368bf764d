"""Vocabularies, token canonicalization, and deterministic toy tokenizers.

Canonical forms are byte strings: ordinary text canonicalizes to its UTF-8
bytes, and byte-fallback tokens canonicalize to the raw byte they name. Keeping
bytes (rather than decoded text) means a multi-byte character split across two
byte-fallback tokens still concatenates to the same canonical form as the
intact character.
"""

from __future__ import annotations

import hashlib
import json
import re
import string
from typing import Iterable, Mapping, Sequence

from .errors import MalformedTokenError, UnencodableTextError, ValidationError

# Glyphs that tokenizer families use to mark a leading space, as UTF-8 bytes:
# U+0120 (GPT-2 style), U+2581 (SentencePiece), U+2423 (visible space).
_SPACE_MARKERS = (b"\xc4\xa0", b"\xe2\x96\x81", b"\xe2\x90\xa3")
_NEWLINE_MARKER = b"\xc4\x8a"  # U+010A, GPT-2 style newline
_ESCAPED_NEWLINE = b"\\n"
_BYTE_FALLBACK = re.compile(rb"<0x([0-9A-Fa-f]{2})>\Z")
_ASCII_PUNCT = frozenset(string.punctuation.encode("ascii"))


def canonicalize_bytes(raw: bytes) -> bytes:
    """Canonicalize a token given as bytes. Idempotent.

    Rules, in order: leading space-marker glyphs become literal spaces;
    newline markers (and the escaped form ``\\n``) become literal newlines;
    a whole-token byte-fallback form ``<0xHH>`` becomes that raw byte; a
    two-character leading-space-plus-ASCII-punctuation token drops the space.
    """
    out = b""
    rest = raw
    while True:
        for marker in _SPACE_MARKERS:
            if rest.startswith(marker):
                out += b" "
                rest = rest[len(marker):]
                break
        else:
            break
    rest = rest.replace(_NEWLINE_MARKER, b"\n").replace(_ESCAPED_NEWLINE, b"\n")
    rest = out + rest

    if rest.startswith(b"<0x") and rest.endswith(b">"):
        m = _BYTE_FALLBACK.match(rest)
        if m is None:
            raise MalformedTokenError(
                f"malformed byte-fallback token {rest!r}: payload is not two hex digits"
            )
        rest = bytes([int(m.group(1), 16)])

    if len(rest) == 2 and rest[0] == 0x20 and rest[1] in _ASCII_PUNCT:
        rest = rest[1:]
    return rest


def canonicalize(raw: str) -> bytes:
    """Canonical form of a raw token string."""
    return canonicalize_bytes(raw.encode("utf-8"))


class Vocabulary:
    """An ordered token list with integer ids and special-token metadata.

    Ids are the positions in ``tokens`` (0..n-1, no gaps). ``specials`` flags
    ids that are control tokens; ``special_roles`` names them (e.g.
    ``{"bos": 3}``) so corresponding roles can be paired across vocabularies.
    Instances are immutable after construction.
    """

    def __init__(
        self,
        tokens: Iterable[str],
        specials: Iterable[int] = (),
        special_roles: Mapping[str, int] | None = None,
    ) -> None:
        self.tokens: tuple[str, ...] = tuple(tokens)
        self.specials: frozenset[int] = frozenset(specials)
        self.special_roles: dict[str, int] = dict(special_roles or {})

        self.id_of: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.id_of:
                raise ValidationError(
                    f"duplicate token string {tok!r} at ids {self.id_of[tok]} and {i}"
                )
            self.id_of[tok] = i
        for sid in self.specials:
            if not 0 <= sid < len(self.tokens):
                raise ValidationError(f"special id {sid} outside vocabulary of size {len(self.tokens)}")
        for role, rid in self.special_roles.items():
            if rid not in self.specials:
                raise ValidationError(f"role {role!r} points to id {rid}, which is not a special")

        self._roles_of: dict[int, frozenset[str]] = {}
        for role, rid in self.special_roles.items():
            self._roles_of[rid] = self._roles_of.get(rid, frozenset()) | {role}
        # Specials pass through canonicalization untouched; they pair only by role.
        self._canon: tuple[bytes, ...] = tuple(
            tok.encode("utf-8") if i in self.specials else canonicalize(tok)
            for i, tok in enumerate(self.tokens)
        )

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return (
            self.tokens == other.tokens
            and self.specials == other.specials
            and self.special_roles == other.special_roles
        )

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self.tokens)}, specials={sorted(self.specials)})"

    def is_special(self, token_id: int) -> bool:
        return token_id in self.specials

    def canonical(self, token_id: int) -> bytes:
        """Canonical byte form of a token (raw bytes for specials)."""
        return self._canon[token_id]

    def roles_of(self, token_id: int) -> frozenset[str]:
        """Role names assigned to a special id (empty for ordinary tokens)."""
        return self._roles_of.get(token_id, frozenset())


def vocabulary_hash(vocab: Vocabulary) -> str:
    """Stable content hash used to cross-check files against a loaded vocabulary."""
    payload = json.dumps(
        {
            "tokens": list(vocab.tokens),
            "specials": sorted(vocab.specials),
            "special_roles": dict(sorted(vocab.special_roles.items())),
        },
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def save_vocabulary(vocab: Vocabulary, path) -> None:
    data = {
        "tokens": list(vocab.tokens),
        "specials": sorted(vocab.specials),
        "special_roles": dict(sorted(vocab.special_roles.items())),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, ensure_ascii=False, indent=1)
        fh.write("\n")


def load_vocabulary(path) -> Vocabulary:
    """Load a vocabulary file.

    The ``tokens`` field is either an array (index = id) or a map
    token -> id; the map form is validated for duplicate ids and id gaps.
    A blank file loads as an empty vocabulary.
    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        return Vocabulary(())
    data = json.loads(text)
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: vocabulary file must be a JSON object")

    raw_tokens = data.get("tokens", [])
    if isinstance(raw_tokens, list):
        tokens = [str(t) for t in raw_tokens]
    elif isinstance(raw_tokens, dict):
        by_id: dict[int, str] = {}
        for tok, tid in raw_tokens.items():
            if not isinstance(tid, int):
                raise ValidationError(f"{path}: token {tok!r} has non-integer id {tid!r}")
            if tid in by_id:
                raise ValidationError(
                    f"{path}: tokens {by_id[tid]!r} and {tok!r} share id {tid}"
                )
            by_id[tid] = tok
        tokens = []
        for i in range(len(by_id)):
            if i not in by_id:
                raise ValidationError(f"{path}: id range has a gap at id {i}")
            tokens.append(by_id[i])
    else:
        raise ValidationError(f"{path}: 'tokens' must be an array or a token->id map")

    specials = data.get("specials", [])
    roles = data.get("special_roles", {})
    return Vocabulary(tokens, specials=specials, special_roles=roles)


class Tokenizer:
    """Deterministic greedy longest-match encoder over an explicit vocabulary."""

    def __init__(self, vocabulary: Vocabulary) -> None:
        self.vocabulary = vocabulary
        self._max_len = max((len(t) for t in vocabulary.tokens), default=0)

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        lookup = self.vocabulary.id_of
        i = 0
        n = len(text)
        while i < n:
            for width in range(min(self._max_len, n - i), 0, -1):
                tid = lookup.get(text[i : i + width])
                if tid is not None:
                    ids.append(tid)
                    i += width
                    break
            else:
                raise UnencodableTextError(
                    f"no token matches text at position {i}: {text[i:i+8]!r}"
                )
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.vocabulary.tokens[i] for i in ids)

    def decode_token(self, token_id: int) -> str:
        return self.vocabulary.tokens[token_id]


_ASCII_CHARS = tuple(chr(c) for c in range(128))
TOY_KINDS = ("digit_splitting", "numeral_preserving", "char_level", "word_level")


def make_toy_tokenizer(kind: str, corpus: Sequence[str] = ()) -> Tokenizer:
    """Build a small deterministic tokenizer of the given kind.

    ``digit_splitting`` and ``char_level`` cover all single ASCII characters,
    so every digit is its own token. ``numeral_preserving`` adds every two- and
    three-digit string, so greedy matching emits maximal digit runs up to
    length 3 as single tokens. ``word_level`` adds each whitespace-separated
    corpus word plus its space-prefixed variant, with single-character
    fallback.
    """
    if kind not in TOY_KINDS:
        raise ValidationError(f"unknown toy tokenizer kind {kind!r}; expected one of {TOY_KINDS}")
    tokens = list(_ASCII_CHARS)
    if kind == "numeral_preserving":
        tokens += [f"{i:02d}" for i in range(100)]
        tokens += [f"{i:03d}" for i in range(1000)]
    elif kind == "word_level":
        if not corpus:
            raise ValidationError("word_level tokenizer needs a nonempty corpus")
        words = sorted({w for line in corpus for w in line.split()})
        seen = set(tokens)
        for word in words:
            for form in (word, " " + word):
                if form not in seen:
                    seen.add(form)
                    tokens.append(form)
    return Tokenizer(Vocabulary(tokens))
