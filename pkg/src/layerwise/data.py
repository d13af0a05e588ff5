"""On-the-fly tokenization, length filtering, weighted mixing and packing.

Documents are newline-delimited text. Nothing is pre-tokenized: every
document is encoded when it is drawn, checked against the length filter,
and either emitted or silently replaced by the next one from its source.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Protocol, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError, SourceExhaustedError


class Tokenizer(Protocol):
    vocab_size: int

    def encode(self, text: str) -> list[int]: ...

    def decode(self, ids: Sequence[int]) -> str: ...


class ByteTokenizer:
    """UTF-8 bytes as ids 0-255, then pad (256) and separator (257)."""

    vocab_size = 258
    pad_id = 256
    sep_id = 257

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


def separator_id(tokenizer: Tokenizer) -> int:
    return tokenizer.vocab_size - 1


@dataclass(frozen=True)
class SourceSpec:
    name: str
    path: Path
    weight: float

    def __post_init__(self):
        if not self.weight > 0:
            raise ConfigError(f"source {self.name!r}: weight must be positive, got {self.weight}")


@dataclass(frozen=True)
class FilterPolicy:
    min_chars: int = 200
    min_tokens: int = 256

    def __post_init__(self):
        if self.min_chars < 0 or self.min_tokens < 0:
            raise ConfigError("filter thresholds must be non-negative")


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reason: Optional[str] = None  # "char" or "token" when skipped

    def __bool__(self):
        return self.keep


KEEP = FilterDecision(True)


def filter_sequence(text: str, token_count: int, policy: FilterPolicy = FilterPolicy()) -> FilterDecision:
    # strictly shorter than a threshold is skipped; equal is kept
    if len(text) < policy.min_chars:
        return FilterDecision(False, "char")
    if token_count < policy.min_tokens:
        return FilterDecision(False, "token")
    return KEEP


@dataclass(frozen=True)
class Document:
    source: str
    text: str
    tokens: tuple[int, ...]


def read_documents(path: Union[str, Path]) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read source {path}: {exc}") from exc
    return text.splitlines()


def load_manifest(path: Union[str, Path]) -> list[SourceSpec]:
    """Read ``[source.NAME]`` sections with ``path`` and ``weight`` keys.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read source manifest {path}: {exc}") from exc
    sources = []
    for section in parser.sections():
        if not section.startswith("source."):
            continue
        sec = parser[section]
        if "path" not in sec:
            raise ConfigError(f"{path}: [{section}] has no path")
        src_path = Path(sec["path"])
        if not src_path.is_absolute():
            src_path = path.parent / src_path
        try:
            weight = sec.getfloat("weight", 1.0)
        except ValueError as exc:
            raise ConfigError(f"{path}: [{section}] bad weight") from exc
        sources.append(SourceSpec(section[len("source."):], src_path, weight))
    if not sources:
        raise ConfigError(f"{path}: no [source.*] sections")
    return sources


def _source_docs(
    src: SourceSpec, index: int, tokenizer: Tokenizer, policy: FilterPolicy, seed: int
) -> Iterator[Document]:
    docs = read_documents(src.path)
    if not docs:
        raise SourceExhaustedError(f"source {src.name!r} ({src.path}) is empty")
    epoch = 0
    while True:
        rng = np.random.default_rng([seed + epoch, index])
        emitted = 0
        for j in rng.permutation(len(docs)):
            text = docs[j]
            ids = tokenizer.encode(text)
            if filter_sequence(text, len(ids), policy):
                emitted += 1
                yield Document(src.name, text, tuple(ids))
        if not emitted:
            raise SourceExhaustedError(f"source {src.name!r}: every document is filtered out")
        epoch += 1


def mix_stream(
    sources: Sequence[SourceSpec],
    tokenizer: Tokenizer,
    policy: FilterPolicy = FilterPolicy(),
    seed: int = 0,
) -> Iterator[Document]:
    """Endless stream of surviving documents, source chosen by weight.

    Each source walks its documents in a seeded permutation and reshuffles
    with ``seed + epoch`` when it runs out. Source selection uses its own
    generator, so a source's document order never depends on the others.
    """
    if not sources:
        raise ConfigError("mix_stream needs at least one source")
    weights = np.array([s.weight for s in sources], dtype=np.float64)
    cdf = np.cumsum(weights / weights.sum())
    iters = [_source_docs(s, i, tokenizer, policy, seed) for i, s in enumerate(sources)]
    pick = np.random.default_rng([seed, len(sources), 0xC0FFEE])
    while True:
        u = pick.random(1024)
        for k in np.searchsorted(cdf, u, side="right"):
            yield next(iters[min(int(k), len(iters) - 1)])


@dataclass
class Batch:
    inputs: np.ndarray   # (rows, context_length) int64
    targets: np.ndarray  # inputs shifted left by one, separator at the end
    separator: int


def pack_rows(
    stream: Iterable[Union[Document, str]], tokenizer: Tokenizer, context_length: int
) -> Iterator[np.ndarray]:
    """Concatenate documents (each followed by a separator) into fixed-length rows."""
    sep = separator_id(tokenizer)
    buf: list[int] = []
    for doc in stream:
        if isinstance(doc, Document):
            ids = list(doc.tokens)
        else:
            try:
                ids = tokenizer.encode(doc)
            except Exception as exc:
                raise DataError(f"tokenizer failed: {exc}") from exc
        if any(i < 0 or i >= tokenizer.vocab_size for i in ids):
            raise DataError("tokenizer produced an id outside its vocabulary")
        buf.extend(ids)
        buf.append(sep)
        while len(buf) >= context_length:
            yield np.asarray(buf[:context_length], dtype=np.int64)
            del buf[:context_length]


def make_batch(rows: Sequence[np.ndarray], separator: int) -> Batch:
    inputs = np.stack(rows)
    targets = np.empty_like(inputs)
    targets[:, :-1] = inputs[:, 1:]
    targets[:, -1] = separator
    return Batch(inputs, targets, separator)


def pack_batches(
    stream: Iterable[Union[Document, str]],
    tokenizer: Tokenizer,
    context_length: int,
    tokens_per_batch: int,
) -> Iterator[Batch]:
    if context_length < 1 or tokens_per_batch < context_length:
        raise ConfigError("tokens_per_batch must be >= context_length >= 1")
    n_rows = tokens_per_batch // context_length
    sep = separator_id(tokenizer)
    rows = []
    for row in pack_rows(stream, tokenizer, context_length):
        rows.append(row)
        if len(rows) == n_rows:
            yield make_batch(rows, sep)
            rows = []


@dataclass
class FilterStats:
    source: str
    total: int = 0
    kept: int = 0
    skipped_char: int = 0
    skipped_token: int = 0


def filter_stats(
    sources: Sequence[SourceSpec], tokenizer: Tokenizer, policy: FilterPolicy = FilterPolicy()
) -> list[FilterStats]:
    out = []
    for src in sources:
        st = FilterStats(src.name)
        for text in read_documents(src.path):
            st.total += 1
            decision = filter_sequence(text, len(tokenizer.encode(text)), policy)
            if decision.keep:
                st.kept += 1
            elif decision.reason == "char":
                st.skipped_char += 1
            else:
                st.skipped_token += 1
        out.append(st)
    return out
