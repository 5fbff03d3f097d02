"""Corpus ingestion and batch construction for the three training modes.

Documents are byte strings split out of plain files on a delimiter. A MIM
batch carries the same document as two directional streams plus the index
alignment pairing the forward and backward predictions of each token. The
FIM transform rewrites a document into sentinel-delimited sections at the
byte level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import vocab
from .vocab import BOS, EOS, L2R, MID, PAD, PRE, R2L, SUF


@dataclass
class Corpus:
    train: list[list[int]]
    val: list[list[int]]
    manifest: dict

    def save_manifest(self, path):
        with open(path, "w") as f:
            json.dump(self.manifest, f, indent=2, sort_keys=True)


def split_documents(blob: bytes, delimiter: bytes = b"\n\n") -> list[bytes]:
    docs = [d.strip(b"\n") for d in blob.split(delimiter)]
    return [d for d in docs if d]


def build_corpus(paths, val_fraction: float = 0.1, seed: int = 0,
                 delimiter: bytes = b"\n\n") -> Corpus:
    """Read files, split into documents, and make a deterministic split."""
    if not paths:
        raise IOError("build_corpus: no input paths")
    docs: list[bytes] = []
    manifest_files = []
    for p in paths:
        try:
            with open(p, "rb") as f:
                blob = f.read()
        except OSError as e:
            raise IOError(f"cannot read corpus file {p}: {e}") from e
        manifest_files.append({"path": str(p), "bytes": len(blob)})
        docs.extend(split_documents(blob, delimiter))
    if not docs:
        raise IOError(f"no documents found in {list(paths)}")
    order = np.random.default_rng(seed).permutation(len(docs))
    n_val = int(len(docs) * val_fraction)
    val_idx = set(order[:n_val].tolist())
    train = [vocab.encode(docs[i]) for i in range(len(docs)) if i not in val_idx]
    val = [vocab.encode(docs[i]) for i in range(len(docs)) if i in val_idx]
    manifest = {
        "files": manifest_files,
        "delimiter": delimiter.decode("latin-1"),
        "val_fraction": val_fraction,
        "seed": seed,
        "n_train": len(train),
        "n_val": len(val),
    }
    return Corpus(train=train, val=val, manifest=manifest)


# ---------------------------------------------------------------------------
# MIM batches


@dataclass
class MimBatch:
    """One document set viewed by both directional streams.

    fwd_targets/bwd_targets use -1 for positions that carry no loss.
    alignment holds (row, fwd_pos, bwd_pos) index triples such that
    fwd_targets[row, fwd_pos] == bwd_targets[row, bwd_pos] — the two rows
    predicting the same document token.
    """

    fwd_inputs: np.ndarray
    fwd_targets: np.ndarray
    bwd_inputs: np.ndarray
    bwd_targets: np.ndarray
    align_row: np.ndarray
    align_fwd: np.ndarray
    align_bwd: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.fwd_inputs.shape[0]

    @property
    def n_tokens(self) -> int:
        return int((self.fwd_targets >= 0).sum())


class AlignmentError(ValueError):
    """A batch's forward/backward streams do not pair up."""


def make_mim_batch(docs, context_len: int) -> MimBatch:
    """Build aligned forward/backward streams for a list of documents.

    Each document x_1..x_N becomes a forward row [L2R, BOS, x_1..x_{N-1}]
    predicting x_1..x_N at positions 1..N, and a backward row
    [R2L, BOS, x_N..x_2] predicting x_N..x_1 at the same positions; the
    alignment pairs forward position i with backward position N-i+1.
    """
    if context_len < 4:
        raise ValueError(f"context_len must be >= 4, got {context_len}")
    docs = [list(d) for d in docs]
    if not docs:
        raise ValueError("make_mim_batch: empty document list")
    max_doc = context_len - 2  # two leading sentinels per stream
    docs = [d[:max_doc] for d in docs]
    if any(len(d) == 0 for d in docs):
        raise ValueError("make_mim_batch: empty document")
    width = max(len(d) + 1 for d in docs)

    b = len(docs)
    fwd_in = np.full((b, width), PAD, dtype=np.int64)
    fwd_tg = np.full((b, width), -1, dtype=np.int64)
    bwd_in = np.full((b, width), PAD, dtype=np.int64)
    bwd_tg = np.full((b, width), -1, dtype=np.int64)
    rows, fpos, bpos = [], [], []
    for r, d in enumerate(docs):
        n = len(d)
        fwd_in[r, 0] = L2R
        fwd_in[r, 1] = BOS
        fwd_in[r, 2:n + 1] = d[:-1]
        fwd_tg[r, 1:n + 1] = d
        rev = d[::-1]
        bwd_in[r, 0] = R2L
        bwd_in[r, 1] = BOS
        bwd_in[r, 2:n + 1] = rev[:-1]
        bwd_tg[r, 1:n + 1] = rev
        for i in range(1, n + 1):
            rows.append(r)
            fpos.append(i)
            bpos.append(n - i + 1)
    batch = MimBatch(
        fwd_inputs=fwd_in, fwd_targets=fwd_tg,
        bwd_inputs=bwd_in, bwd_targets=bwd_tg,
        align_row=np.asarray(rows), align_fwd=np.asarray(fpos),
        align_bwd=np.asarray(bpos),
    )
    mism = batch.fwd_targets[batch.align_row, batch.align_fwd] \
        != batch.bwd_targets[batch.align_row, batch.align_bwd]
    if mism.any():
        raise AlignmentError("forward/backward targets disagree under alignment")
    return batch


# ---------------------------------------------------------------------------
# FIM transform


@dataclass
class FimExample:
    """A training row: either a sentinel-reordered infill example or plain."""

    ids: list[int]
    kind: str                      # "psm" | "spm" | "plain"
    loss_mask: list[bool] = field(repr=False, default=None)

    @property
    def is_transformed(self) -> bool:
        return self.kind != "plain"


def apply_fim_transform(doc: bytes, rng: np.random.Generator,
                        fim_rate: float = 0.5, psm_rate: float = 0.5,
                        middle_only_loss: bool = False) -> FimExample:
    """Reorder a document into prefix/suffix/middle sections at byte level.

    With probability fim_rate, two cut points are drawn uniformly over byte
    positions (0 <= c1 <= c2 <= len) and the pieces are laid out as
    PSM = [PRE] prefix [SUF] suffix [MID] middle [EOS] (probability
    psm_rate) or SPM = [SUF] suffix [PRE] prefix [MID] middle [EOS].
    Otherwise the document becomes a plain [L2R, BOS] doc [EOS] row.
    """
    if not 0.0 <= fim_rate <= 1.0 or not 0.0 <= psm_rate <= 1.0:
        raise ValueError("fim_rate and psm_rate must lie in [0, 1]")
    if rng.random() >= fim_rate:
        ids = [L2R, BOS] + vocab.encode(doc) + [EOS]
        return FimExample(ids=ids, kind="plain", loss_mask=[True] * len(ids))
    c1, c2 = sorted(int(rng.integers(0, len(doc) + 1)) for _ in range(2))
    prefix, middle, suffix = doc[:c1], doc[c1:c2], doc[c2:]
    p, m, s = vocab.encode(prefix), vocab.encode(middle), vocab.encode(suffix)
    if rng.random() < psm_rate:
        ids = [PRE] + p + [SUF] + s + [MID] + m + [EOS]
        kind = "psm"
    else:
        ids = [SUF] + s + [PRE] + p + [MID] + m + [EOS]
        kind = "spm"
    if middle_only_loss:
        mid_at = ids.index(MID)
        mask = [False] * (mid_at + 1) + [True] * (len(m) + 1)
    else:
        mask = [True] * len(ids)
    return FimExample(ids=ids, kind=kind, loss_mask=mask)


def reconstruct_fim_bytes(example: FimExample) -> bytes:
    """Reassemble original document bytes from a transformed example."""
    ids = example.ids
    if example.kind == "plain":
        return vocab.decode(strip_specials(ids))
    pre_at = ids.index(PRE)
    suf_at = ids.index(SUF)
    mid_at = ids.index(MID)
    end = ids.index(EOS)
    if example.kind == "psm":
        prefix = ids[pre_at + 1:suf_at]
        suffix = ids[suf_at + 1:mid_at]
    else:
        suffix = ids[suf_at + 1:pre_at]
        prefix = ids[pre_at + 1:mid_at]
    middle = ids[mid_at + 1:end]
    return vocab.decode(prefix) + vocab.decode(middle) + vocab.decode(suffix)


def strip_specials(ids) -> list[int]:
    return [t for t in ids if t < 256]


# ---------------------------------------------------------------------------
# causal rows (AR and FIM modes)


def pack_causal_rows(rows: list[list[int]], context_len: int,
                     masks: list[list[bool]] | None = None):
    """Pad next-token rows to a rectangle; returns (inputs, targets).

    Each row seq becomes inputs seq[:-1] / targets seq[1:], padded with PAD
    and target -1. Rows longer than context_len + 1 are truncated.
    """
    rows = [r[:context_len + 1] for r in rows]
    if any(len(r) < 2 for r in rows):
        raise ValueError("causal row needs at least two tokens")
    width = max(len(r) - 1 for r in rows)
    b = len(rows)
    inputs = np.full((b, width), PAD, dtype=np.int64)
    targets = np.full((b, width), -1, dtype=np.int64)
    for r, seq in enumerate(rows):
        n = len(seq) - 1
        inputs[r, :n] = seq[:-1]
        targets[r, :n] = seq[1:]
        if masks is not None:
            m = masks[r][:context_len + 1]
            keep = np.asarray(m[1:n + 1], dtype=bool)
            targets[r, :n][~keep] = -1
    return inputs, targets


def sample_docs(corpus_docs, batch_tokens: int, rng: np.random.Generator):
    """Draw documents with replacement until the token budget is met."""
    docs = []
    total = 0
    while total < batch_tokens:
        d = corpus_docs[int(rng.integers(0, len(corpus_docs)))]
        docs.append(d)
        total += len(d) + 2
    return docs
