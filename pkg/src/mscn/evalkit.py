"""Retrieval evaluation: averaged score matrices and recall@K.

Scoring fans out over fixed 32-row chunks; the worker count (MSCN_THREADS
or the CPU count) only decides how many chunks run concurrently, never
how the matrix is partitioned, so outputs are bitwise invariant to it.

Ranking is deterministic: a candidate ranks ahead of the true one if its
score is strictly higher, or equal with a lower index.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model
from .datagen import Split

CHUNK_ROWS = 32


def worker_count(threads=None) -> int:
    if threads is not None:
        if threads < 1:
            raise ValueError(f"worker count must be positive, got {threads}")
        return int(threads)
    env = os.environ.get("MSCN_THREADS", "").strip()
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"MSCN_THREADS must be positive, got {env!r}")
        return n
    return os.cpu_count() or 1


def score_matrix(models, images, texts, scorer: str = "mscn",
                 threads=None) -> tuple[np.ndarray, int]:
    """(n_img, n_txt) score matrix averaged over the given network pairs.

    models: list of (MainNetParams, MetaNetParams) tuples; the meta slot
    is ignored by the cosine scorer.  Degenerate cells score 0.5 (mscn) or
    0 (cosine) and are counted, not fatal."""
    if not models:
        raise ValueError("score_matrix: need at least one model")
    if scorer not in ("mscn", "cosine"):
        raise ValueError(f"unknown scorer: {scorer!r}")
    images = np.asarray(images, dtype=np.float64)
    texts = np.asarray(texts, dtype=np.float64)
    ni = images.shape[0]
    out = np.empty((ni, texts.shape[0]), dtype=np.float64)
    bad_counts = []

    def run_chunk(start: int) -> None:
        rows = slice(start, min(start + CHUNK_ROWS, ni))
        acc = None
        bad = 0
        for main, meta in models:
            if scorer == "mscn":
                scores, n_bad = model.all_pairs_scores(
                    images[rows], texts, main, meta, degenerate="half")
            else:
                scores, n_bad = model.cosine_scores(
                    images[rows], texts, main, degenerate="zero")
            bad += n_bad
            acc = scores.data if acc is None else acc + scores.data
        out[rows] = acc / len(models)
        bad_counts.append(bad)

    starts = list(range(0, ni, CHUNK_ROWS))
    workers = worker_count(threads)
    if workers == 1 or len(starts) <= 1:
        for s in starts:
            run_chunk(s)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_chunk, starts))
    return out, sum(bad_counts)


def recall_at_k(scores: np.ndarray, truth: np.ndarray, k: int) -> float:
    """Percentage of queries whose true candidate ranks in the top k.

    rank = 1 + #(strictly higher) + #(equal with a lower index)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError(f"recall_at_k: score matrix must be 2D, got {s.shape}")
    nq, nc = s.shape
    if not 1 <= k <= nc:
        raise ValueError(f"recall_at_k: k={k} outside [1, {nc}]")
    t = np.asarray(truth, dtype=np.int64)
    if t.shape != (nq,) or (nq and (t.min() < 0 or t.max() >= nc)):
        raise ValueError("recall_at_k: truth indices out of range")
    if nq == 0:
        raise ValueError("recall_at_k: no queries")
    true_scores = s[np.arange(nq), t]
    higher = (s > true_scores[:, None]).sum(axis=1)
    cols = np.arange(nc)
    earlier_tie = ((s == true_scores[:, None]) & (cols[None, :] < t[:, None])).sum(axis=1)
    rank = 1 + higher + earlier_tie
    return 100.0 * int(np.count_nonzero(rank <= k)) / nq


@dataclass
class RecallReport:
    ks: tuple
    image_to_text: dict
    text_to_image: dict
    rsum: float
    n_images: int
    n_texts: int
    degenerate_pairs: int
    scorer: str

    def format_text(self) -> str:
        lines = [f"retrieval report ({self.scorer} scorer, "
                 f"{self.n_images} images x {self.n_texts} texts)"]
        for name, table in (("image-to-text", self.image_to_text),
                            ("text-to-image", self.text_to_image)):
            cells = "  ".join(f"R@{k}={table[k]:6.2f}" for k in self.ks)
            lines.append(f"  {name:13s} {cells}")
        lines.append(f"  rsum {self.rsum:.2f}")
        if self.degenerate_pairs:
            lines.append(f"  degenerate pairs scored neutrally: {self.degenerate_pairs}")
        return "\n".join(lines) + "\n"

    def format_kv(self) -> str:
        pairs = [("scorer", self.scorer),
                 ("n_images", str(self.n_images)),
                 ("n_texts", str(self.n_texts)),
                 ("degenerate_pairs", str(self.degenerate_pairs))]
        for k in self.ks:
            pairs.append((f"i2t_r{k}", f"{self.image_to_text[k]:.17g}"))
        for k in self.ks:
            pairs.append((f"t2i_r{k}", f"{self.text_to_image[k]:.17g}"))
        pairs.append(("rsum", f"{self.rsum:.17g}"))
        return "".join(f"{key}\t{val}\n" for key, val in pairs)


def parse_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        key, val = line.split("\t")
        out[key] = val
    return out


def _truth_maps(split: Split) -> tuple[np.ndarray, np.ndarray]:
    """Column of each image's true text and row of each text's true image.

    Record j carries the text that originally belonged to record
    original_partner[j]; on clean splits both maps are the identity."""
    id_to_pos = {int(rid): i for i, rid in enumerate(split.ids)}
    partner_pos = np.array([id_to_pos.get(int(p), -1)
                            for p in split.original_partner])
    if np.any(partner_pos < 0):
        raise ValueError("evaluate: a text's original image is not in the split")
    i2t = np.full(len(split), -1, dtype=np.int64)
    i2t[partner_pos] = np.arange(len(split))
    if np.any(i2t < 0):
        raise ValueError("evaluate: an image has no matching text in the split")
    t2i = partner_pos
    return i2t, t2i


def evaluate(models, split: Split, ks=(1, 5, 10), scorer: str = "mscn",
             threads=None) -> RecallReport:
    """Recall@K in both directions with scores averaged over `models`."""
    ks = tuple(int(k) for k in ks)
    scores, n_bad = score_matrix(models, split.images, split.texts,
                                 scorer=scorer, threads=threads)
    i2t_truth, t2i_truth = _truth_maps(split)
    i2t = {k: recall_at_k(scores, i2t_truth, k) for k in ks}
    t2i = {k: recall_at_k(scores.T, t2i_truth, k) for k in ks}
    rsum = float(sum(i2t.values()) + sum(t2i.values()))
    return RecallReport(ks=ks, image_to_text=i2t, text_to_image=t2i, rsum=rsum,
                        n_images=len(split), n_texts=len(split),
                        degenerate_pairs=n_bad, scorer=scorer)
