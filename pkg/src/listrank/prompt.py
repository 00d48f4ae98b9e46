"""Tokenization and listwise prompt assembly.

The tokenizer is deliberately simple: known words plus byte-level
fallback, with whitespace encoded as byte tokens so detokenization is an
exact inverse for canonical text. Special tokens are atomic — they can
only be inserted programmatically, never produced by tokenizing text, so
adversarial document content cannot forge an embedding marker.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    ChunkingError,
    ContextLengthError,
    ParseError,
    ValidationError,
    VocabularyError,
)

PAD = "<|pad|>"
IM_START = "<|im_start|>"
IM_END = "<|im_end|>"
DOC_EMB = "<|doc_emb|>"
QUERY_EMB = "<|query_emb|>"

SPECIALS = (PAD, IM_START, IM_END, DOC_EMB, QUERY_EMB)
_N_BYTE = 256

SYSTEM_TEXT = (
    "You are a search relevance expert who can determine "
    "a ranking of passages based on their relevance to the query."
)
INSTRUCTION_FMT = (
    "I will provide you with {k} passages, each indicated by a numerical "
    "identifier. Rank the passages based on their relevance to query: "
)

# Words every vocabulary carries so the fixed template text tokenizes
# compactly (document/query content may still fall back to bytes).
_TEMPLATE_WORDS = tuple(
    (SYSTEM_TEXT + " " + INSTRUCTION_FMT.format(k=0)).split()
    + ["<passage", "</passage>", "<query>", "</query>", "system", "user"]
    + [f'id="{n}">' for n in range(1, 100)]
    + [str(n) for n in range(1, 100)]
)


class Vocabulary:
    """Bijective surface-form <-> id table with reserved special tokens.

    Id layout: specials 0..4, byte pieces <0x00>..<0xFF> at 5..260,
    words from 261 upward.
    """

    def __init__(self, words: Iterable[str] = (), include_template: bool = True):
        self._surfaces: list[str] = list(SPECIALS)
        self._surfaces += [f"<0x{b:02X}>" for b in range(_N_BYTE)]
        self._word_ids: dict[str, int] = {}
        seed_words = list(_TEMPLATE_WORDS) if include_template else []
        for w in seed_words + list(words):
            self._add_word(w)
        self._special_ids = {s: i for i, s in enumerate(SPECIALS)}

    def _add_word(self, word: str):
        if not word or any(ch.isspace() for ch in word):
            raise VocabularyError(f"invalid vocabulary word: {word!r}")
        if word in SPECIALS or word in self._word_ids:
            return
        self._word_ids[word] = len(self._surfaces)
        self._surfaces.append(word)

    def __len__(self):
        return len(self._surfaces)

    def special_id(self, surface: str) -> int:
        return self._special_ids[surface]

    @property
    def pad_id(self) -> int:
        return self._special_ids[PAD]

    def surface(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._surfaces):
            raise VocabularyError(f"token id {token_id} outside vocabulary of {len(self)}")
        return self._surfaces[token_id]

    def is_special(self, token_id: int) -> bool:
        return token_id < len(SPECIALS)

    def _byte_ids(self, chunk: str) -> list[int]:
        return [5 + b for b in chunk.encode("utf-8", "surrogateescape")]

    def tokenize(self, text: str) -> list[int]:
        """Encode plain text. Whitespace becomes byte pieces; unknown words
        fall back to byte pieces; special surfaces are never produced."""
        ids: list[int] = []
        i, n = 0, len(text)
        while i < n:
            if text[i].isspace():
                ids += self._byte_ids(text[i])
                i += 1
                continue
            j = i
            while j < n and not text[j].isspace():
                j += 1
            word = text[i:j]
            wid = self._word_ids.get(word)
            ids += [wid] if wid is not None else self._byte_ids(word)
            i = j
        return ids

    def detokenize(self, ids: Sequence[int]) -> str:
        """Inverse of ``tokenize`` up to the documented canonicalization
        (adjacent byte runs merge; words are emitted verbatim)."""
        parts: list[str] = []
        pending: list[int] = []

        def flush():
            if pending:
                parts.append(bytes(pending).decode("utf-8", "surrogateescape"))
                pending.clear()

        for tid in ids:
            surface = self.surface(tid)
            if 5 <= tid < 5 + _N_BYTE:
                pending.append(tid - 5)
            else:
                flush()
                parts.append(surface)
        flush()
        return "".join(parts)

    def save(self, path) -> None:
        lines = []
        for tid, surface in enumerate(self._surfaces):
            flag = "\tS" if tid < len(SPECIALS) else ""
            lines.append(f"{surface}\t{tid}{flag}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        vocab = cls.__new__(cls)
        vocab._surfaces = []
        vocab._word_ids = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3):
                raise ParseError(f"vocabulary line {lineno}: expected 2-3 tab fields", lineno)
            surface, tid = fields[0], int(fields[1])
            if tid != len(vocab._surfaces):
                raise ParseError(f"vocabulary line {lineno}: non-contiguous id {tid}", lineno)
            vocab._surfaces.append(surface)
            if tid >= len(SPECIALS) + _N_BYTE:
                vocab._word_ids[surface] = tid
        vocab._special_ids = {s: i for i, s in enumerate(SPECIALS)}
        return vocab

    def entries(self) -> list[list]:
        """Serializable (surface, id, special) triples, e.g. for model meta."""
        return [[s, i, i < len(SPECIALS)] for i, s in enumerate(self._surfaces)]

    @classmethod
    def from_entries(cls, entries) -> "Vocabulary":
        vocab = cls.__new__(cls)
        vocab._surfaces = [e[0] for e in sorted(entries, key=lambda e: e[1])]
        vocab._word_ids = {
            s: i for i, s in enumerate(vocab._surfaces) if i >= len(SPECIALS) + _N_BYTE
        }
        vocab._special_ids = {s: i for i, s in enumerate(SPECIALS)}
        return vocab


@dataclass
class Document:
    doc_id: str
    text: str
    first_stage_score: Optional[float] = None


@dataclass
class RerankRequest:
    query: str
    documents: list[Document]
    ordering: str = "given"  # given | desc | asc | random
    ordering_seed: Optional[int] = None

    def __post_init__(self):
        if not self.documents:
            raise ValidationError("request needs at least one document")
        ids = [d.doc_id for d in self.documents]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate doc_ids in request")
        if self.ordering not in ("given", "desc", "asc", "random"):
            raise ValidationError(f"unknown ordering {self.ordering!r}")


@dataclass
class PromptLayout:
    token_ids: list[int]
    doc_marker_positions: list[int]
    query_marker_position: int
    dual_query_marker_position: Optional[int]
    doc_presentation_order: list[int]  # slot -> original document index
    text: str


def apply_ordering(
    documents: Sequence[Document], ordering: str, seed: Optional[int] = None
) -> tuple[list[Document], list[int]]:
    """Permute candidates by first-stage score (or randomly), returning the
    permuted list and the slot -> original-index mapping."""
    n = len(documents)
    if ordering == "given":
        perm = list(range(n))
    elif ordering in ("desc", "asc"):
        if any(d.first_stage_score is None for d in documents):
            raise ValidationError(f"ordering {ordering!r} requires first-stage scores")
        reverse = ordering == "desc"
        perm = sorted(
            range(n),
            key=lambda i: (-documents[i].first_stage_score if reverse
                           else documents[i].first_stage_score, i),
        )
    elif ordering == "random":
        if seed is None:
            raise ValidationError("random ordering requires a seed")
        perm = list(np.random.default_rng(seed).permutation(n))
    else:
        raise ValidationError(f"unknown ordering {ordering!r}")
    return [documents[i] for i in perm], [int(i) for i in perm]


def build_prompt(
    request: RerankRequest,
    vocab: Vocabulary,
    max_doc_tokens: int,
    insert_dual_query_marker: bool = False,
    max_context: Optional[int] = None,
    pad_docs: bool = False,
) -> PromptLayout:
    """Assemble the listwise prompt and record every marker position.

    Structure: system block, user block with instruction + query, one
    ``<passage id="n">`` block per document (content truncated to
    ``max_doc_tokens``, marker as final document token), then the trailing
    ``<query>`` block with the query marker, closed by the end-of-turn
    token. The dual query marker, when requested, lands immediately after
    the first query occurrence.
    """
    if not request.query.strip():
        raise ValidationError("empty query")
    docs, perm = apply_ordering(request.documents, request.ordering, request.ordering_seed)

    ids: list[int] = []
    text_parts: list[str] = []
    doc_positions: list[int] = []
    dual_position: Optional[int] = None

    def emit_text(chunk: str):
        ids.extend(vocab.tokenize(chunk))
        text_parts.append(chunk)

    def emit_special(surface: str) -> int:
        pos = len(ids)
        ids.append(vocab.special_id(surface))
        text_parts.append(surface)
        return pos

    emit_special(IM_START)
    emit_text("system\n" + SYSTEM_TEXT + "\n")
    emit_special(IM_END)
    emit_text("\n")
    emit_special(IM_START)
    emit_text("user\n" + INSTRUCTION_FMT.format(k=len(docs)) + request.query)
    if insert_dual_query_marker:
        dual_position = emit_special(QUERY_EMB)
    emit_text("\n\n")

    for slot, doc in enumerate(docs, start=1):
        emit_text(f'<passage id="{slot}">\n')
        doc_ids = vocab.tokenize(doc.text)[:max_doc_tokens]
        if pad_docs and len(doc_ids) < max_doc_tokens:
            doc_ids = doc_ids + [vocab.pad_id] * (max_doc_tokens - len(doc_ids))
        ids.extend(doc_ids)
        text_parts.append(vocab.detokenize(doc_ids))
        doc_positions.append(emit_special(DOC_EMB))
        emit_text("\n</passage>\n")

    emit_text("\n<query>\n" + request.query)
    query_position = emit_special(QUERY_EMB)
    emit_text("\n</query>\n")
    emit_special(IM_END)

    if max_context is not None and len(ids) > max_context:
        raise ContextLengthError(
            f"assembled prompt is {len(ids)} tokens, max_context is {max_context}",
            measured=len(ids), limit=max_context,
        )
    return PromptLayout(
        token_ids=ids,
        doc_marker_positions=doc_positions,
        query_marker_position=query_position,
        dual_query_marker_position=dual_position,
        doc_presentation_order=perm,
        text="".join(text_parts),
    )


def scan_marker_positions(token_ids: Sequence[int], vocab: Vocabulary):
    """Re-derive marker positions from raw token ids (self-consistency check)."""
    doc_id_, query_id_ = vocab.special_id(DOC_EMB), vocab.special_id(QUERY_EMB)
    docs = [i for i, t in enumerate(token_ids) if t == doc_id_]
    queries = [i for i, t in enumerate(token_ids) if t == query_id_]
    return docs, queries


def chunk_into_batches(
    documents: Sequence[Document],
    query: str,
    vocab: Vocabulary,
    max_docs_per_pass: int,
    max_context: int,
    max_doc_tokens: int,
) -> list[RerankRequest]:
    """Greedy in-order packing under both the per-pass document cap and the
    assembled token budget. Passage ids restart at 1 within each batch."""
    if max_docs_per_pass < 1:
        raise ValidationError("max_docs_per_pass must be >= 1")

    def fits(batch: list[Document]) -> bool:
        try:
            build_prompt(
                RerankRequest(query=query, documents=batch),
                vocab, max_doc_tokens, max_context=max_context,
            )
            return True
        except ContextLengthError:
            return False

    batches: list[list[Document]] = []
    current: list[Document] = []
    for doc in documents:
        candidate = current + [doc]
        if len(candidate) <= max_docs_per_pass and fits(candidate):
            current = candidate
            continue
        if not current:
            raise ChunkingError(
                f"document {doc.doc_id!r} plus template overhead exceeds "
                f"max_context={max_context}"
            )
        batches.append(current)
        if not fits([doc]):
            raise ChunkingError(
                f"document {doc.doc_id!r} plus template overhead exceeds "
                f"max_context={max_context}"
            )
        current = [doc]
    if current:
        batches.append(current)
    return [RerankRequest(query=query, documents=b) for b in batches]
