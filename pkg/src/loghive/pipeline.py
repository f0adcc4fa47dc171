"""Frequency-based log template mining and lossless template compression.

A token is *fixed* when the share of learning lines containing it reaches
``theta``; every other token is *variable* and replaced by ``:::`` in the
line's pattern. Identical patterns share one template id. A compressed
record keeps the template id, the variable tokens, their byte offsets in the
original line and, only when a line's whitespace is not single-space
separated, the exact separator runs. That makes decompression byte-exact.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

VAR = ":::"
DEFAULT_THETA = 0.1
DEFAULT_LEARNING_WINDOW = 10_000

_SPLIT_RE = re.compile(r"(\s+)")

BATCH_MAGIC = b"LHCB"
BATCH_VERSION = 1


class PipelineError(ValueError):
    pass


class CorruptBatchError(PipelineError):
    pass


def tokenize(line: str) -> tuple[list[str], list[str]]:
    """Split ``line`` into tokens and the whitespace runs around them.

    ``separators`` has ``len(tokens) + 1`` entries: leading, between each
    pair, trailing. A blank line yields the single empty token.
    """
    parts = _SPLIT_RE.split(line)
    # parts alternates token, sep, token, ...; first/last may be empty tokens
    tokens = parts[0::2]
    seps = parts[1::2]
    lead = trail = ""
    if tokens and tokens[0] == "" and seps:
        lead = seps.pop(0)
        tokens.pop(0)
    if len(tokens) > 1 and tokens[-1] == "" and seps:
        trail = seps.pop()
        tokens.pop()
    if not tokens:
        tokens = [""]
    return tokens, [lead, *seps, trail]


def _is_canonical(separators: Sequence[str]) -> bool:
    return separators[0] == "" and separators[-1] == "" and all(s == " " for s in separators[1:-1])


@dataclass
class TemplateDictionary:
    theta: float = DEFAULT_THETA
    token_frequencies: Counter = field(default_factory=Counter)
    corpus_line_count: int = 0
    templates: dict[int, tuple[str, ...]] = field(default_factory=dict)
    _index: dict[tuple[str, ...], int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise PipelineError("theta must lie in (0, 1]")
        if self.templates and not self._index:
            self._index = {p: t for t, p in self.templates.items()}

    def observe(self, tokens: Iterable[str]) -> None:
        """Count one learning line."""
        self.token_frequencies.update(set(tokens))
        self.corpus_line_count += 1

    def is_fixed(self, token: str) -> bool:
        if token == VAR or not self.corpus_line_count:
            return False
        return self.token_frequencies[token] >= self.theta * self.corpus_line_count

    def fixed_tokens(self) -> set[str]:
        return {t for t in self.token_frequencies if self.is_fixed(t)}

    def pattern_for(self, tokens: Sequence[str]) -> tuple[str, ...]:
        return tuple(t if self.is_fixed(t) else VAR for t in tokens)

    def intern(self, pattern: tuple[str, ...]) -> int:
        tid = self._index.get(pattern)
        if tid is None:
            tid = len(self.templates)
            self.templates[tid] = pattern
            self._index[pattern] = tid
        return tid

    def template_text(self, tid: int) -> str:
        return " ".join(self.templates[tid])

    def __len__(self) -> int:
        return len(self.templates)


def learn_templates(lines: Sequence[str], theta: float = DEFAULT_THETA) -> TemplateDictionary:
    """Two passes: count token line-frequencies, then intern every line's pattern."""
    if not lines:
        raise PipelineError("empty corpus")
    d = TemplateDictionary(theta=theta)
    tokenized = [tokenize(line)[0] for line in lines]
    for tokens in tokenized:
        d.observe(tokens)
    for tokens in tokenized:
        d.intern(d.pattern_for(tokens))
    return d


@dataclass(frozen=True)
class Record:
    line_no: int
    template_id: int
    variables: tuple[str, ...]
    positions: tuple[int, ...]
    separators: tuple[str, ...] | None = None  # None means single spaces


@dataclass
class CompressedBatch:
    dictionary: TemplateDictionary
    records: list[Record] = field(default_factory=list)


def encode_line(line: str, line_no: int, d: TemplateDictionary) -> Record:
    tokens, seps = tokenize(line)
    pattern = d.pattern_for(tokens)
    tid = d.intern(pattern)
    variables = []
    positions = []
    offset = len(seps[0].encode())
    for i, (tok, pat) in enumerate(zip(tokens, pattern)):
        if pat == VAR:
            variables.append(tok)
            positions.append(offset)
        offset += len(tok.encode()) + len(seps[i + 1].encode())
    return Record(
        line_no, tid, tuple(variables), tuple(positions),
        None if _is_canonical(seps) else tuple(seps),
    )


def compress(lines: Sequence[str], d: TemplateDictionary, first_line: int = 1) -> CompressedBatch:
    """Encode ``lines``; unseen patterns extend ``d`` in place."""
    return CompressedBatch(d, [encode_line(line, first_line + i, d) for i, line in enumerate(lines)])


def decode_record(rec: Record, pattern: Sequence[str]) -> str:
    n_vars = sum(1 for t in pattern if t == VAR)
    if n_vars != len(rec.variables) or n_vars != len(rec.positions):
        raise CorruptBatchError(
            f"line {rec.line_no}: template {rec.template_id} has {n_vars} placeholders, "
            f"record has {len(rec.variables)} variables and {len(rec.positions)} positions"
        )
    seps = rec.separators
    if seps is None:
        seps = ("", *([" "] * (len(pattern) - 1)), "")
    elif len(seps) != len(pattern) + 1:
        raise CorruptBatchError(f"line {rec.line_no}: separator count mismatch")
    out = [seps[0]]
    offset = len(seps[0].encode())
    it = iter(zip(rec.variables, rec.positions))
    for i, tok in enumerate(pattern):
        if tok == VAR:
            tok, pos = next(it)
            if pos != offset:
                raise CorruptBatchError(f"line {rec.line_no}: variable offset {pos} != {offset}")
        out.append(tok)
        out.append(seps[i + 1])
        offset += len(tok.encode()) + len(seps[i + 1].encode())
    return "".join(out)


def decompress(batch: CompressedBatch) -> list[str]:
    templates = batch.dictionary.templates
    lines = []
    for rec in sorted(batch.records, key=lambda r: r.line_no):
        pattern = templates.get(rec.template_id)
        if pattern is None:
            raise CorruptBatchError(f"line {rec.line_no}: unknown template {rec.template_id}")
        lines.append(decode_record(rec, pattern))
    return lines


# -- serialized form ------------------------------------------------------------

def _put_varint(out: bytearray, n: int) -> None:
    if n < 0:
        raise ValueError("varint must be non-negative")
    while n >= 0x80:
        out.append((n & 0x7F) | 0x80)
        n >>= 7
    out.append(n)


def _put_str(out: bytearray, s: str) -> None:
    b = s.encode()
    _put_varint(out, len(b))
    out += b


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def varint(self) -> int:
        n = shift = 0
        buf = self.buf
        while True:
            if self.pos >= len(buf):
                raise CorruptBatchError("truncated varint")
            b = buf[self.pos]
            self.pos += 1
            n |= (b & 0x7F) << shift
            if b < 0x80:
                return n
            shift += 7
            if shift > 63:
                raise CorruptBatchError("varint too long")

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptBatchError("truncated field")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def str(self) -> str:
        try:
            return self.raw(self.varint()).decode()
        except UnicodeDecodeError as exc:
            raise CorruptBatchError("invalid UTF-8 in batch") from exc


def serialize_batch(batch: CompressedBatch, only_used: bool = True) -> bytes:
    """Dictionary section, then records section. See docs/batch-format.md."""
    d = batch.dictionary
    if only_used:
        used = sorted({r.template_id for r in batch.records})
    else:
        used = sorted(d.templates)
    out = bytearray(BATCH_MAGIC)
    out.append(BATCH_VERSION)
    _put_varint(out, len(used))
    for tid in used:
        pattern = d.templates[tid]
        _put_varint(out, tid)
        _put_varint(out, len(pattern))
        for tok in pattern:
            if tok == VAR:
                out.append(0)
            else:
                b = tok.encode()
                _put_varint(out, len(b) + 1)
                out += b
    _put_varint(out, len(batch.records))
    prev_line = 0
    for rec in batch.records:
        _put_varint(out, rec.line_no - prev_line if rec.line_no >= prev_line else 0)
        if rec.line_no < prev_line:
            raise PipelineError("records must be in line order to serialize")
        prev_line = rec.line_no
        _put_varint(out, rec.template_id * 2 + (rec.separators is not None))
        end = 0
        for var, pos in zip(rec.variables, rec.positions):
            _put_str(out, var)
            _put_varint(out, pos - end)
            end = pos + len(var.encode())
        if rec.separators is not None:
            for s in rec.separators:
                _put_str(out, s)
    return bytes(out)


def deserialize_batch(data: bytes, theta: float = DEFAULT_THETA) -> CompressedBatch:
    if data[:4] != BATCH_MAGIC:
        raise CorruptBatchError("bad batch magic")
    if len(data) < 5 or data[4] != BATCH_VERSION:
        raise CorruptBatchError("unsupported batch version")
    r = _Reader(data, 5)
    templates: dict[int, tuple[str, ...]] = {}
    for _ in range(r.varint()):
        tid = r.varint()
        n = r.varint()
        pattern = []
        for _ in range(n):
            ln = r.varint()
            if ln == 0:
                pattern.append(VAR)
            else:
                try:
                    pattern.append(r.raw(ln - 1).decode())
                except UnicodeDecodeError as exc:
                    raise CorruptBatchError("invalid UTF-8 in template") from exc
        templates[tid] = tuple(pattern)
    d = TemplateDictionary(theta=theta, templates=templates)
    records = []
    line_no = 0
    for _ in range(r.varint()):
        line_no += r.varint()
        code = r.varint()
        tid, has_seps = code >> 1, code & 1
        pattern = templates.get(tid)
        if pattern is None:
            raise CorruptBatchError(f"record references unknown template {tid}")
        variables = []
        positions = []
        end = 0
        for _ in range(sum(1 for t in pattern if t == VAR)):
            var = r.str()
            pos = end + r.varint()
            variables.append(var)
            positions.append(pos)
            end = pos + len(var.encode())
        seps = tuple(r.str() for _ in range(len(pattern) + 1)) if has_seps else None
        records.append(Record(line_no, tid, tuple(variables), tuple(positions), seps))
    if r.pos != len(data):
        raise CorruptBatchError("trailing bytes after batch")
    return CompressedBatch(d, records)


def compression_ratio(lines: Sequence[str], batch: CompressedBatch) -> float:
    raw = sum(len(line.encode()) + 1 for line in lines)
    return len(serialize_batch(batch)) / raw if raw else 0.0


class DevicePipeline:
    """Per-device streaming compressor.

    Token frequencies accumulate over the first ``learning_window`` lines
    (each chunk is counted before it is encoded); afterwards the frequency
    table is frozen and unseen patterns only extend the dictionary.
    """

    def __init__(self, theta: float = DEFAULT_THETA, learning_window: int = DEFAULT_LEARNING_WINDOW):
        self.dictionary = TemplateDictionary(theta=theta)
        self.learning_window = learning_window
        self.next_line = 1

    @property
    def learning(self) -> bool:
        return self.dictionary.corpus_line_count < self.learning_window

    def process(self, lines: Sequence[str], first_line: int | None = None) -> CompressedBatch:
        if first_line is not None:
            self.next_line = first_line
        d = self.dictionary
        room = self.learning_window - d.corpus_line_count
        for line in lines[:max(room, 0)]:
            d.observe(tokenize(line)[0])
        batch = compress(lines, d, self.next_line)
        self.next_line += len(lines)
        return batch
