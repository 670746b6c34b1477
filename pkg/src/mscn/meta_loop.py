"""Bi-level training of two network pairs with purified co-training.

One optimization step runs in three stages on a shared retained record:

1. virtual update: a plain descent step on the main params, recorded as a
   differentiable function of the correction-network params;
2. meta update: the correction network steps on the meta loss evaluated
   through those virtual main params (the second-order path);
3. actual update: the main params step on the training loss under the
   freshly updated correction network, from the original main params.

Each epoch both network pairs score every training pair, a Beta mixture
splits the scores into clean/noisy, and each pair trains on the set the
*other* pair admitted.  A warmup phase precedes this: fixed-margin
training plus per-iteration supervised updates of the correction network.

Everything stochastic draws from SeedSequence([seed, *tags]) streams, so
a run is a pure function of (dataset bytes, config).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import evalkit, model, objective, purifier
from .datagen import Dataset, Split

log = logging.getLogger(__name__)

MODES = ("mscn", "fixed_margin_baseline")

# rng stream tags
_TAG_INIT = 0
_TAG_SHUFFLE = 1
_TAG_META_BATCH = 2
_TAG_NEG_PAIRS = 3


class NonFiniteGradientError(RuntimeError):
    """A gradient or loss left the finite range; training must not continue."""


@dataclass
class TrainConfig:
    seed: int = 20240601
    mode: str = "mscn"
    gamma: float = 0.2
    tau: float = 2.0
    batch_size: int = 64
    meta_batch_size: int = 64  # half trusted positives, half constructed negatives
    lr_main: float = 2e-4
    # the correction head sees ~800 updates at this scale, so its rate has to
    # be much hotter than the embedding rate or it never leaves init
    lr_meta: float = 1e-2
    warmup_epochs: int = 5
    epochs: int = 50
    lr_decay_epoch: int = 30  # global epoch index; both rates x factor from there on
    lr_decay_factor: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    optimizer: str = "adam"
    d_emb: int = 64
    d_sim: int = 32
    branch_hidden: Optional[int] = None
    mscn_hidden: int = 32
    warmup_meta: bool = True
    meta_bce_negative_term: bool = True
    use_adaptive_margin: bool = True
    use_purification: bool = True
    purifier_refit: str = "epoch"
    eval_ks: tuple = (1, 5, 10)

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.meta_batch_size < 2 or self.meta_batch_size % 2:
            raise ValueError("meta_batch_size must be even and at least 2")
        if self.lr_main < 0 or self.lr_meta < 0:
            raise ValueError("learning rates must be non-negative")
        if self.warmup_epochs < 0 or self.epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer: {self.optimizer!r}")
        if self.purifier_refit not in ("epoch", "step"):
            raise ValueError(f"unknown purifier_refit: {self.purifier_refit!r}")
        if not self.d_sim < self.d_emb:
            raise ValueError("d_sim must be below d_emb")
        if not self.eval_ks or list(self.eval_ks) != sorted(set(self.eval_ks)):
            raise ValueError("eval_ks must be distinct and ascending")
        objective._check_margin_params(self.gamma, self.tau)


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(seed), *map(int, tags)])))


class AdamState:
    """Per-tensor first/second moment estimates plus the step counter."""

    def __init__(self, arrays):
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0


def optimizer_step(arrays, grads, state: AdamState, lr: float,
                   cfg: TrainConfig) -> list[np.ndarray]:
    if cfg.optimizer == "sgd":
        return [a - lr * g for a, g in zip(arrays, grads)]
    state.t += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    out = []
    for i, (a, g) in enumerate(zip(arrays, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1 ** state.t)
        v_hat = state.v[i] / (1 - b2 ** state.t)
        out.append(a - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


@dataclass
class NetState:
    main: model.MainNetParams
    meta: model.MetaNetParams
    opt_main: AdamState
    opt_meta: AdamState


@dataclass
class MetaBatch:
    images: np.ndarray
    texts: np.ndarray
    labels: np.ndarray


def construct_meta_batch(meta_split: Split, train_split: Split, m: int,
                         rng: np.random.Generator) -> MetaBatch:
    """Half trusted positives (drawn with replacement from the meta split),
    half negatives built from distinct train records: image of i, text of
    j, i != j enforced by construction."""
    if m < 2 or m % 2:
        raise ValueError(f"meta batch size must be even and >= 2, got {m}")
    if len(meta_split) == 0:
        raise ValueError("meta split is empty")
    n = len(train_split)
    if n < 2:
        raise ValueError("need at least 2 train records for negatives")
    half = m // 2
    pos = rng.integers(0, len(meta_split), size=half)
    i = rng.integers(0, n, size=half)
    j = rng.integers(0, n - 1, size=half)
    j = j + (j >= i)
    images = np.concatenate([meta_split.images[pos], train_split.images[i]])
    texts = np.concatenate([meta_split.texts[pos], train_split.texts[j]])
    labels = np.concatenate([np.ones(half), np.zeros(half)])
    return MetaBatch(images=images, texts=texts, labels=labels)


def _check_finite(grads: list[np.ndarray], names, context: str):
    for name, g in zip(names, grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"{context}: non-finite gradient in {name} "
                f"(|max|={np.abs(g[np.isfinite(g)]).max() if np.any(np.isfinite(g)) else 'n/a'})")


def virtual_update(tape: ad.Tape, main_lifted: model.MainNetParams,
                   meta_lifted: model.MetaNetParams, images, texts,
                   alpha: float, cfg: TrainConfig):
    """Stage 1: record loss, gradients, and the descent step W - alpha*g as
    functions of the correction params.  Returns (virtual params, loss)."""
    loss = objective.triplet_loss(images, texts, main_lifted, meta_lifted,
                                  cfg.gamma, cfg.tau,
                                  adaptive=cfg.use_adaptive_margin)
    grads = ad.backward_retaining(tape, loss)
    stepped = [ad.sub(t, ad.scalar_mul(alpha, grads[t]))
               for _, t in main_lifted.items()]
    return main_lifted.with_arrays(stepped), loss


def meta_update(tape: ad.Tape, virtual_main: model.MainNetParams,
                meta_lifted: model.MetaNetParams, batch: MetaBatch,
                state: NetState, lr_meta: float, cfg: TrainConfig):
    """Stage 2: optimizer step on the meta loss taken through the virtual
    main params.  Returns (new meta params, meta loss value)."""
    mloss = objective.meta_loss(batch.images, batch.texts, batch.labels,
                                virtual_main, meta_lifted,
                                negative_term=cfg.meta_bce_negative_term)
    grads = ad.backward(tape, mloss)
    names = [n for n, _ in meta_lifted.items()]
    g = [grads[t].data for _, t in meta_lifted.items()]
    _check_finite(g, names, "meta_update")
    new_arrays = optimizer_step(state.meta.arrays(), g, state.opt_meta, lr_meta, cfg)
    return state.meta.with_arrays(new_arrays), mloss.item()


def actual_update(state: NetState, meta_new: model.MetaNetParams, images, texts,
                  lr_main: float, cfg: TrainConfig):
    """Stage 3: step the main params on the same batch under the updated
    correction network (held constant)."""
    with ad.Tape() as tape:
        main_l = state.main.lift(tape)
        loss = objective.triplet_loss(images, texts, main_l,
                                      meta_new.lift(None),
                                      cfg.gamma, cfg.tau,
                                      adaptive=cfg.use_adaptive_margin)
        grads = ad.backward(tape, loss)
    names = [n for n, _ in main_l.items()]
    g = [grads[t].data for _, t in main_l.items()]
    _check_finite(g, names, "actual_update")
    new_arrays = optimizer_step(state.main.arrays(), g, state.opt_main, lr_main, cfg)
    return state.main.with_arrays(new_arrays), loss.item()


def bilevel_step(state: NetState, images, texts, batch: MetaBatch,
                 lr_main: float, lr_meta: float, cfg: TrainConfig):
    """One full three-stage step; returns (new state, diagnostics)."""
    with ad.Tape(retain=True) as tape:
        main_l = state.main.lift(tape)
        meta_l = state.meta.lift(tape)
        virtual_main, train_loss = virtual_update(
            tape, main_l, meta_l, images, texts, lr_main, cfg)
        meta_new, meta_loss_val = meta_update(
            tape, virtual_main, meta_l, batch, state, lr_meta, cfg)
    main_new, _ = actual_update(state, meta_new, images, texts, lr_main, cfg)
    new_state = NetState(main=main_new, meta=meta_new,
                         opt_main=state.opt_main, opt_meta=state.opt_meta)
    return new_state, {"train_loss": train_loss.item(), "meta_loss": meta_loss_val}


def warmup_step(state: NetState, images, texts, batch: Optional[MetaBatch],
                lr_main: float, lr_meta: float, cfg: TrainConfig):
    """Fixed-margin step on the main params, then (optionally) a supervised
    step of the correction network at the updated main params."""
    with ad.Tape() as tape:
        main_l = state.main.lift(tape)
        loss = objective.triplet_loss(images, texts, main_l,
                                      state.meta.lift(None),
                                      cfg.gamma, cfg.tau, adaptive=False)
        grads = ad.backward(tape, loss)
    g = [grads[t].data for _, t in main_l.items()]
    _check_finite(g, [n for n, _ in main_l.items()], "warmup main")
    main_new = state.main.with_arrays(
        optimizer_step(state.main.arrays(), g, state.opt_main, lr_main, cfg))
    meta_new = state.meta
    meta_loss_val = None
    if batch is not None:
        with ad.Tape() as tape:
            meta_l = state.meta.lift(tape)
            mloss = objective.meta_loss(batch.images, batch.texts, batch.labels,
                                        main_new.lift(None), meta_l,
                                        negative_term=cfg.meta_bce_negative_term)
            mgrads = ad.backward(tape, mloss)
        mg = [mgrads[t].data for _, t in meta_l.items()]
        _check_finite(mg, [n for n, _ in meta_l.items()], "warmup meta")
        meta_new = state.meta.with_arrays(
            optimizer_step(state.meta.arrays(), mg, state.opt_meta, lr_meta, cfg))
        meta_loss_val = mloss.item()
    new_state = NetState(main=main_new, meta=meta_new,
                         opt_main=state.opt_main, opt_meta=state.opt_meta)
    return new_state, {"train_loss": loss.item(), "meta_loss": meta_loss_val}


def baseline_step(state: NetState, images, texts, lr_main: float,
                  cfg: TrainConfig):
    """Fixed-margin triplet step on cosine scores; no correction network."""
    with ad.Tape() as tape:
        main_l = state.main.lift(tape)
        scores, _ = model.cosine_scores(images, texts, main_l)
        loss = objective.triplet_loss_from_scores(
            scores, cfg.gamma, cfg.tau, adaptive=False, clamp_scores=False)
        grads = ad.backward(tape, loss)
    g = [grads[t].data for _, t in main_l.items()]
    _check_finite(g, [n for n, _ in main_l.items()], "baseline")
    main_new = state.main.with_arrays(
        optimizer_step(state.main.arrays(), g, state.opt_main, lr_main, cfg))
    new_state = NetState(main=main_new, meta=state.meta,
                         opt_main=state.opt_main, opt_meta=state.opt_meta)
    return new_state, {"train_loss": loss.item(), "meta_loss": None}


def _aligned_scores(split: Split, indices, main, meta) -> np.ndarray:
    """Correction scores of the split's own (image, text) pairs, no record."""
    idx = np.arange(len(split)) if indices is None else indices
    s = model.pair_score(ad.Tensor(split.images[idx]), ad.Tensor(split.texts[idx]),
                         main, meta)
    return np.atleast_1d(s.data)


def fit_purifier(net: NetState, train_split: Split, meta_split: Split,
                 seed: int, epoch: int, net_idx: int):
    """Fit the score mixture for one network pair and purify the train set.

    Components are initialized from the net's scores of the trusted meta
    pairs (positives) and of freshly constructed cross-index train pairs
    (negatives); EM then runs on the scores of all train pairs."""
    train_scores = purifier.clamp_score(
        _aligned_scores(train_split, None, net.main, net.meta))
    pos_scores = _aligned_scores(meta_split, None, net.main, net.meta)
    rng = _rng(seed, _TAG_NEG_PAIRS, epoch, net_idx)
    neg = construct_meta_batch(meta_split, train_split,
                               2 * max(len(meta_split), 2), rng)
    half = len(neg.labels) // 2
    neg_scores = np.atleast_1d(model.pair_score(
        ad.Tensor(neg.images[half:]), ad.Tensor(neg.texts[half:]),
        net.main, net.meta).data)
    init = purifier.moment_match_init(pos_scores, neg_scores)
    fit = purifier.em_fit(train_scores, init)
    admitted = purifier.purify(fit.mixture, train_scores)
    return admitted, fit, train_scores


METRICS_COLUMNS = (
    "epoch", "phase", "lr_main", "lr_meta",
    "net1_train_loss", "net1_meta_loss", "net2_train_loss", "net2_meta_loss",
    "net1_purified", "net2_purified",
    "net1_purity_precision", "net1_purity_recall",
    "net2_purity_precision", "net2_purity_recall",
    "val_i2t_r1", "val_i2t_r5", "val_i2t_r10",
    "val_t2i_r1", "val_t2i_r5", "val_t2i_r10",
    "val_rsum", "degenerate_pairs",
)


def format_metrics_row(row: dict) -> str:
    cells = []
    for col in METRICS_COLUMNS:
        v = row.get(col)
        if v is None:
            cells.append("-")
        elif isinstance(v, float):
            cells.append(f"{v:.17g}")
        else:
            cells.append(str(v))
    return "\t".join(cells)


@dataclass
class TrainResult:
    nets: list
    best_nets: list  # (main, meta) params at the best-validation epoch
    metrics: list
    audit: list
    best_epoch: int
    best_rsum: float
    final_val: evalkit.RecallReport


def _purity(admitted: np.ndarray, clean: np.ndarray) -> tuple[float, float]:
    mask = np.zeros(clean.size, dtype=bool)
    mask[admitted] = True
    tp = int(np.sum(mask & clean))
    precision = tp / max(int(mask.sum()), 1)
    recall = tp / max(int(clean.sum()), 1)
    return precision, recall


def train(ds: Dataset, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Run the full schedule (warmup then main epochs) on two network pairs.

    With out_dir set, writes metrics.tsv (one row per epoch, flushed as it
    goes), best-validation checkpoints, and final checkpoints."""
    cfg.validate()
    train_split, meta_split, val_split = ds.train, ds.meta, ds.val
    if len(train_split) < cfg.batch_size:
        raise ValueError(
            f"train split ({len(train_split)}) smaller than one batch "
            f"({cfg.batch_size})")
    if len(meta_split) < 1:
        raise ValueError("meta split is empty")
    if len(val_split) < max(cfg.eval_ks):
        raise ValueError(
            f"validation split ({len(val_split)}) too small for "
            f"R@{max(cfg.eval_ks)}")

    hidden = cfg.branch_hidden if cfg.branch_hidden is not None else cfg.d_emb
    nets = []
    for k in range(2):
        rng = _rng(cfg.seed, _TAG_INIT, k)
        main = model.MainNetParams.init(ds.d_img, ds.d_txt, cfg.d_emb, cfg.d_sim,
                                        rng, hidden=hidden)
        meta = model.MetaNetParams.init(cfg.d_sim, rng, hidden=cfg.mscn_hidden)
        nets.append(NetState(main=main, meta=meta,
                             opt_main=AdamState(main.arrays()),
                             opt_meta=AdamState(meta.arrays())))

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_path / "metrics.tsv", "w", encoding="utf-8")
        metrics_fh.write("\t".join(METRICS_COLUMNS) + "\n")
        metrics_fh.flush()

    scorer = "mscn" if cfg.mode == "mscn" else "cosine"
    total_epochs = cfg.warmup_epochs + cfg.epochs
    metrics_rows: list[dict] = []
    audit: list[dict] = []
    best_rsum = -1.0
    best_epoch = -1
    best_nets = [(net.main, net.meta) for net in nets]
    report = None

    try:
        for epoch in range(total_epochs):
            warm = epoch < cfg.warmup_epochs
            factor = cfg.lr_decay_factor if epoch >= cfg.lr_decay_epoch else 1.0
            lr_main = cfg.lr_main * factor
            lr_meta = cfg.lr_meta * factor

            pools = [np.arange(len(train_split)), np.arange(len(train_split))]
            purity = [(None, None), (None, None)]
            purified_sizes = [None, None]
            if not warm and cfg.mode == "mscn" and cfg.use_purification:
                # each net trains on the set the *other* net admitted
                for k in range(2):
                    admitted, fit, scores = fit_purifier(
                        nets[k], train_split, meta_split, cfg.seed, epoch, k)
                    fallback = admitted.size < cfg.batch_size
                    if fallback:
                        log.warning(
                            "epoch %d: net %d purified only %d pairs "
                            "(< batch %d); falling back to the full train set",
                            epoch, k + 1, admitted.size, cfg.batch_size)
                    pool = np.arange(len(train_split)) if fallback else admitted
                    pools[1 - k] = pool
                    purified_sizes[k] = int(admitted.size)
                    purity[k] = _purity(admitted, train_split.clean)
                    audit.append({
                        "epoch": epoch, "scored_by": k, "trains": 1 - k,
                        "alpha": fit.mixture.alpha.copy(),
                        "beta": fit.mixture.beta.copy(),
                        "weight": fit.mixture.weight.copy(),
                        "iterations": fit.iterations,
                        "mean_log_likelihood": fit.mean_log_likelihood,
                        "scores": scores,
                        "admitted": admitted,
                        "fallback": fallback,
                        "pool": pool,
                    })

            losses = [[], []]
            mlosses = [[], []]
            for k in range(2):
                pool = pools[k]
                order = _rng(cfg.seed, _TAG_SHUFFLE, epoch, k).permutation(pool.size)
                shuffled = pool[order]
                n_steps = pool.size // cfg.batch_size
                for step in range(n_steps):
                    sel = shuffled[step * cfg.batch_size:(step + 1) * cfg.batch_size]
                    imgs = train_split.images[sel]
                    txts = train_split.texts[sel]
                    if cfg.mode == "fixed_margin_baseline":
                        nets[k], diag = baseline_step(nets[k], imgs, txts,
                                                      lr_main, cfg)
                    else:
                        mb = construct_meta_batch(
                            meta_split, train_split, cfg.meta_batch_size,
                            _rng(cfg.seed, _TAG_META_BATCH, epoch, k, step))
                        if warm:
                            nets[k], diag = warmup_step(
                                nets[k], imgs, txts,
                                mb if cfg.warmup_meta else None,
                                lr_main, lr_meta, cfg)
                        else:
                            if cfg.purifier_refit == "step" and cfg.use_purification:
                                admitted, _, _ = fit_purifier(
                                    nets[1 - k], train_split, meta_split,
                                    cfg.seed, epoch, 1 - k)
                                if admitted.size >= cfg.batch_size:
                                    draw = _rng(cfg.seed, _TAG_SHUFFLE, epoch, k,
                                                step).permutation(admitted.size)
                                    sel = admitted[draw[:cfg.batch_size]]
                                    imgs = train_split.images[sel]
                                    txts = train_split.texts[sel]
                            nets[k], diag = bilevel_step(
                                nets[k], imgs, txts, mb, lr_main, lr_meta, cfg)
                    if not np.isfinite(diag["train_loss"]):
                        raise NonFiniteGradientError(
                            f"epoch {epoch} net {k + 1}: non-finite training loss")
                    losses[k].append(diag["train_loss"])
                    if diag["meta_loss"] is not None:
                        mlosses[k].append(diag["meta_loss"])

            report = evalkit.evaluate(
                [(net.main, net.meta) for net in nets], val_split,
                ks=cfg.eval_ks, scorer=scorer)
            row = {
                "epoch": epoch,
                "phase": "warmup" if warm else "main",
                "lr_main": lr_main,
                "lr_meta": lr_meta,
                "net1_train_loss": float(np.mean(losses[0])) if losses[0] else None,
                "net1_meta_loss": float(np.mean(mlosses[0])) if mlosses[0] else None,
                "net2_train_loss": float(np.mean(losses[1])) if losses[1] else None,
                "net2_meta_loss": float(np.mean(mlosses[1])) if mlosses[1] else None,
                "net1_purified": purified_sizes[0],
                "net2_purified": purified_sizes[1],
                "net1_purity_precision": purity[0][0],
                "net1_purity_recall": purity[0][1],
                "net2_purity_precision": purity[1][0],
                "net2_purity_recall": purity[1][1],
                "val_rsum": report.rsum,
                "degenerate_pairs": report.degenerate_pairs,
            }
            for k in cfg.eval_ks:
                row[f"val_i2t_r{k}"] = report.image_to_text[k]
                row[f"val_t2i_r{k}"] = report.text_to_image[k]
            metrics_rows.append(row)
            if metrics_fh is not None:
                metrics_fh.write(format_metrics_row(row) + "\n")
                metrics_fh.flush()

            if report.rsum > best_rsum:
                best_rsum = report.rsum
                best_epoch = epoch
                # optimizer steps replace arrays rather than mutate them, so
                # holding references freezes this epoch's params
                best_nets = [(net.main, net.meta) for net in nets]
                if out_path is not None:
                    for k, net in enumerate(nets):
                        model.save_checkpoint(
                            out_path / f"net{k + 1}_best.mscp", net.main, net.meta)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if out_path is not None:
        for k, net in enumerate(nets):
            model.save_checkpoint(out_path / f"net{k + 1}_final.mscp",
                                  net.main, net.meta)
    return TrainResult(nets=nets, best_nets=best_nets, metrics=metrics_rows,
                       audit=audit, best_epoch=best_epoch, best_rsum=best_rsum,
                       final_val=report)
