"""Network definitions and checkpoint serialization.

Two parameter bundles live here: the main networks (an image branch and a
text branch, each a two-layer MLP into a shared embedding space, plus a
projection used by the similarity feature) and the correction network (a
small MLP that maps a similarity feature to a match score in (0, 1)).

Row-vector convention throughout: inputs are (batch, features) and weights
are (fan_in, fan_out), applied as x @ W + b.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .autodiff import (
    ShapeMismatchError,
    Tape,
    Tensor,
    _active_tape,
    add,
    div,
    l2norm,
    matmul,
    relu,
    reshape,
    sigmoid,
    square,
    sub,
    transpose,
)

# Below this, the similarity feature's direction is numerically meaningless.
NORM_EPSILON = 1e-12


class DegenerateSimilarityError(ValueError):
    """Similarity feature norm fell below the representable threshold."""


class CheckpointFormatError(ValueError):
    """Checkpoint bytes are malformed, truncated, or incomplete."""


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class MainNetParams:
    """Image branch, text branch, and the similarity projection."""

    img_w1: object
    img_b1: object
    img_w2: object
    img_b2: object
    txt_w1: object
    txt_b1: object
    txt_w2: object
    txt_b2: object
    sim_w: object

    FIELDS = ("img_w1", "img_b1", "img_w2", "img_b2",
              "txt_w1", "txt_b1", "txt_w2", "txt_b2", "sim_w")

    @classmethod
    def init(cls, d_img: int, d_txt: int, d_emb: int, d_sim: int,
             rng: np.random.Generator, hidden: Optional[int] = None) -> "MainNetParams":
        if not d_sim < d_emb:
            raise ValueError(
                f"similarity dimension must be below embedding dimension, "
                f"got d_sim={d_sim}, d_emb={d_emb}")
        h = d_emb if hidden is None else hidden
        return cls(
            img_w1=_uniform_init(rng, d_img, (d_img, h)),
            img_b1=_uniform_init(rng, d_img, (h,)),
            img_w2=_uniform_init(rng, h, (h, d_emb)),
            img_b2=_uniform_init(rng, h, (d_emb,)),
            txt_w1=_uniform_init(rng, d_txt, (d_txt, h)),
            txt_b1=_uniform_init(rng, d_txt, (h,)),
            txt_w2=_uniform_init(rng, h, (h, d_emb)),
            txt_b2=_uniform_init(rng, h, (d_emb,)),
            sim_w=_uniform_init(rng, d_emb, (d_emb, d_sim)),
        )

    @property
    def d_img(self) -> int:
        return _shape(self.img_w1)[0]

    @property
    def d_txt(self) -> int:
        return _shape(self.txt_w1)[0]

    @property
    def d_emb(self) -> int:
        return _shape(self.sim_w)[0]

    @property
    def d_sim(self) -> int:
        return _shape(self.sim_w)[1]

    def items(self):
        return [(f, getattr(self, f)) for f in self.FIELDS]

    def arrays(self) -> list[np.ndarray]:
        return [_as_array(getattr(self, f)) for f in self.FIELDS]

    def with_arrays(self, arrays) -> "MainNetParams":
        return replace(self, **dict(zip(self.FIELDS, arrays)))

    def lift(self, tape: Optional[Tape]) -> "MainNetParams":
        """Copy with every field registered as a leaf of `tape`.

        With tape=None fields become constant Tensors (no gradients)."""
        return replace(self, **{f: _lift_field(getattr(self, f), tape)
                                for f in self.FIELDS})


@dataclass
class MetaNetParams:
    """Correction network: similarity feature -> match score."""

    w1: object
    b1: object
    w2: object
    b2: object

    FIELDS = ("w1", "b1", "w2", "b2")

    @classmethod
    def init(cls, d_sim: int, rng: np.random.Generator, hidden: int = 32) -> "MetaNetParams":
        return cls(
            w1=_uniform_init(rng, d_sim, (d_sim, hidden)),
            b1=_uniform_init(rng, d_sim, (hidden,)),
            w2=_uniform_init(rng, hidden, (hidden, 1)),
            b2=_uniform_init(rng, hidden, (1,)),
        )

    @property
    def d_sim(self) -> int:
        return _shape(self.w1)[0]

    def items(self):
        return [(f, getattr(self, f)) for f in self.FIELDS]

    def arrays(self) -> list[np.ndarray]:
        return [_as_array(getattr(self, f)) for f in self.FIELDS]

    def with_arrays(self, arrays) -> "MetaNetParams":
        return replace(self, **dict(zip(self.FIELDS, arrays)))

    def lift(self, tape: Optional[Tape]) -> "MetaNetParams":
        return replace(self, **{f: _lift_field(getattr(self, f), tape)
                                for f in self.FIELDS})


def _shape(x):
    return x.shape if isinstance(x, (np.ndarray, Tensor)) else np.asarray(x).shape


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _lift_field(x, tape: Optional[Tape]):
    arr = _as_array(x)
    return tape.leaf(arr) if tape is not None else Tensor(arr)


def _check_input(x: Tensor, d: int, op: str):
    if x.ndim not in (1, 2) or x.shape[-1] != d:
        raise ShapeMismatchError(op, x.shape, (d,))


def _mlp(x, w1, b1, w2, b2) -> Tensor:
    return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2)


def embed_image(images, params: MainNetParams) -> Tensor:
    """(d_img,) -> (d_emb,) or (k, d_img) -> (k, d_emb)."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    _check_input(x, params.d_img, "embed_image")
    return _mlp(x, params.img_w1, params.img_b1, params.img_w2, params.img_b2)


def embed_text(texts, params: MainNetParams) -> Tensor:
    """(d_txt,) -> (d_emb,) or (k, d_txt) -> (k, d_emb)."""
    x = texts if isinstance(texts, Tensor) else Tensor(texts)
    _check_input(x, params.d_txt, "embed_text")
    return _mlp(x, params.txt_w1, params.txt_b1, params.txt_w2, params.txt_b2)


def similarity_feature(u, v, sim_w) -> Tensor:
    """Unit-normalized projection of the squared embedding difference.

    u, v: (d_emb,) or (k, d_emb), same shape.  Raises
    DegenerateSimilarityError when the projection norm is not
    representable (norm <= 1e-12), which happens iff u ~ v to machine
    precision or the projection annihilates the difference.
    """
    u = u if isinstance(u, Tensor) else Tensor(u)
    v = v if isinstance(v, Tensor) else Tensor(v)
    if u.shape != v.shape:
        raise ShapeMismatchError("similarity_feature", u.shape, v.shape)
    proj = matmul(square(sub(u, v)), sim_w)
    norms = l2norm(proj)
    if np.any(norms.data <= NORM_EPSILON):
        bad = int(np.sum(norms.data <= NORM_EPSILON))
        raise DegenerateSimilarityError(
            f"{bad} pair(s) with similarity norm <= {NORM_EPSILON:g}")
    if proj.ndim == 2:
        return div(proj, reshape(norms, (proj.shape[0], 1)))
    return div(proj, norms)


def mscn_score(features, params: MetaNetParams) -> Tensor:
    """Correction-network match score; (d_sim,) -> scalar, (k, d_sim) -> (k,)."""
    f = features if isinstance(features, Tensor) else Tensor(features)
    _check_input(f, params.d_sim, "mscn_score")
    logits = _mlp(f, params.w1, params.b1, params.w2, params.b2)
    squeezed = reshape(logits, () if f.ndim == 1 else (f.shape[0],))
    return sigmoid(squeezed)


def pair_score(image, text, main: MainNetParams, meta: MetaNetParams) -> Tensor:
    """Score of aligned image/text pairs under one network pair."""
    u = embed_image(image, main)
    v = embed_text(text, main)
    return mscn_score(similarity_feature(u, v, main.sim_w), meta)


def all_pairs_scores(images, texts, main: MainNetParams, meta: MetaNetParams,
                     degenerate: str = "error") -> tuple[Tensor, int]:
    """Score matrix of every image against every text: (n_img, n_txt).

    degenerate="error" raises on unrepresentable similarity norms (the
    training contract); degenerate="half" scores those cells 0.5 and
    reports the count (evaluation only, never under an active record).
    """
    imgs = images if isinstance(images, Tensor) else Tensor(images)
    txts = texts if isinstance(texts, Tensor) else Tensor(texts)
    if imgs.ndim != 2 or txts.ndim != 2:
        raise ShapeMismatchError("all_pairs_scores", imgs.shape, txts.shape)
    u = embed_image(imgs, main)
    v = embed_text(txts, main)
    ni, nt, d = u.shape[0], v.shape[0], u.shape[1]
    diff2 = square(sub(reshape(u, (ni, 1, d)), reshape(v, (1, nt, d))))
    proj = matmul(reshape(diff2, (ni * nt, d)), _tensorish(main.sim_w))
    norms = l2norm(proj)
    mask = norms.data <= NORM_EPSILON
    n_bad = int(np.sum(mask))
    if degenerate == "error":
        if n_bad:
            raise DegenerateSimilarityError(
                f"{n_bad} pair(s) with similarity norm <= {NORM_EPSILON:g}")
        safe = norms
    elif degenerate == "half":
        if _active_tape() is not None:
            raise RuntimeError("degenerate='half' is an evaluation mode; "
                               "it cannot run under an active record")
        safe = Tensor(np.where(mask, 1.0, norms.data))
    else:
        raise ValueError(f"unknown degenerate policy: {degenerate!r}")
    unit = div(proj, reshape(safe, (ni * nt, 1)))
    scores = reshape(mscn_score(unit, meta), (ni, nt))
    if n_bad:
        scores = Tensor(np.where(mask.reshape(ni, nt), 0.5, scores.data))
    return scores, n_bad


def _tensorish(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def cosine_scores(images, texts, main: MainNetParams,
                  degenerate: str = "error") -> tuple[Tensor, int]:
    """Cosine similarity of every image embedding against every text
    embedding: (n_img, n_txt) in [-1, 1].

    Used by the fixed-margin ablation, which has no correction network.
    degenerate="zero" scores cells with an unrepresentable embedding norm
    as 0 instead of raising (evaluation only)."""
    imgs = images if isinstance(images, Tensor) else Tensor(images)
    txts = texts if isinstance(texts, Tensor) else Tensor(texts)
    if imgs.ndim != 2 or txts.ndim != 2:
        raise ShapeMismatchError("cosine_scores", imgs.shape, txts.shape)
    u = embed_image(imgs, main)
    v = embed_text(txts, main)
    nu, nv = l2norm(u), l2norm(v)
    bad_u = nu.data <= NORM_EPSILON
    bad_v = nv.data <= NORM_EPSILON
    n_bad = int(np.sum(bad_u)) * txts.shape[0] + int(np.sum(bad_v)) * imgs.shape[0]
    if degenerate == "error":
        if n_bad:
            raise DegenerateSimilarityError(
                f"{n_bad} cosine cell(s) with embedding norm <= {NORM_EPSILON:g}")
        su, sv = nu, nv
    elif degenerate == "zero":
        if _active_tape() is not None:
            raise RuntimeError("degenerate='zero' is an evaluation mode; "
                               "it cannot run under an active record")
        su = Tensor(np.where(bad_u, 1.0, nu.data))
        sv = Tensor(np.where(bad_v, 1.0, nv.data))
    else:
        raise ValueError(f"unknown degenerate policy: {degenerate!r}")
    uu = div(u, reshape(su, (u.shape[0], 1)))
    vv = div(v, reshape(sv, (v.shape[0], 1)))
    scores = matmul(uu, transpose(vv))
    if n_bad:
        mask = bad_u[:, None] | bad_v[None, :]
        scores = Tensor(np.where(mask, 0.0, scores.data))
    return scores, n_bad


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, then one self-describing record per
# tensor (name, rank, dims, float64 little-endian payload)

CHECKPOINT_MAGIC = b"MSCP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, main: MainNetParams, meta: MetaNetParams) -> None:
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    entries = [("main." + n, v) for n, v in main.items()]
    entries += [("meta." + n, v) for n, v in meta.items()]
    for name, value in entries:
        arr = _as_array(value)
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> tuple[MainNetParams, MetaNetParams]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic: {blob[:4]!r}")
    if len(blob) < 8:
        raise CheckpointFormatError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported version: {version}")
    pos = 8
    tensors: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointFormatError(
                f"truncated at byte {pos}: needed {n} more")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise CheckpointFormatError(f"implausible rank {rank} for {name}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).copy()
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor: {name}")
        tensors[name] = arr

    expected = ({"main." + f for f in MainNetParams.FIELDS}
                | {"meta." + f for f in MetaNetParams.FIELDS})
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise CheckpointFormatError(
            f"wrong tensor set: missing={missing} unexpected={extra}")
    main = MainNetParams(**{f: tensors["main." + f] for f in MainNetParams.FIELDS})
    meta = MetaNetParams(**{f: tensors["meta." + f] for f in MetaNetParams.FIELDS})
    return main, meta
