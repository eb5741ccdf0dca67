"""Salient-regions identification network.

Projects vision and text token features into a common semantic space
(mapping before aggregation, max pooling for globals), aligns the two
modalities with a bidirectional asymmetric contrastive loss, and reads
per-patch saliency off the cosine similarity between projected local
features and the pooled global feature.  Trained first, then frozen.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import backbones as bb
from . import serialization
from .autodiff import Tensor
from .config import RunConfig
from .optim import Adam


class NumericDivergenceError(RuntimeError):
    """Training loss went non-finite; carries the last good parameter snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


def _snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


class IdentificationNet:
    """Vision/text encoders + common-space projections + reconstruction arms."""

    def __init__(self, cfg: RunConfig, vocab_size: int, max_text_len: int,
                 rng: np.random.Generator | None = None, params=None):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.max_text_len = max_text_len
        self.patch_dim = cfg.patch_size * cfg.patch_size
        self.n_patches = bb.grid_size(cfg.image_size, cfg.image_size, cfg.patch_size)
        self.vision_cfg = bb.EncoderConfig(self.patch_dim, 0, self.n_patches,
                                           cfg.depth, cfg.heads, cfg.width)
        self.text_cfg = bb.EncoderConfig(0, vocab_size, max_text_len,
                                         cfg.depth, cfg.heads, cfg.width)
        if params is not None:
            self.params = params
            return
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        p = {}
        p.update(bb.init_encoder_params(self.vision_cfg, rng, "vision"))
        p.update(bb.init_encoder_params(self.text_cfg, rng, "text"))
        scale = 0.02
        dc = cfg.common_width
        p["proj_v"] = Tensor(rng.normal(0, scale, (cfg.width, dc)), requires_grad=True)
        p["proj_v_b"] = Tensor(np.zeros(dc), requires_grad=True)
        p["proj_t"] = Tensor(rng.normal(0, scale, (cfg.width, dc)), requires_grad=True)
        p["proj_t_b"] = Tensor(np.zeros(dc), requires_grad=True)
        p["img_mask_token"] = Tensor(rng.normal(0, scale, (1, cfg.width)), requires_grad=True)
        p["img_head"] = Tensor(rng.normal(0, scale, (cfg.width, self.patch_dim)), requires_grad=True)
        p["img_head_b"] = Tensor(np.zeros(self.patch_dim), requires_grad=True)
        p["txt_head"] = Tensor(rng.normal(0, scale, (cfg.width, vocab_size)), requires_grad=True)
        p["txt_head_b"] = Tensor(np.zeros(vocab_size), requires_grad=True)
        self.params = p

    # -- encoders -----------------------------------------------------------

    def encode_image(self, patches: Tensor, masked_indices=None) -> Tensor:
        mask_token = self.params["img_mask_token"] if masked_indices is not None else None
        return bb.vision_encode(patches, self.params, self.vision_cfg, "vision",
                                mask_token=mask_token, masked_indices=masked_indices or [])

    def encode_text(self, ids) -> Tensor:
        return bb.text_encode(ids, self.params, self.text_cfg, "text")

    def project_image(self, features: Tensor) -> Tensor:
        return ad.matmul(features, self.params["proj_v"]) + self.params["proj_v_b"]

    def project_text(self, features: Tensor) -> Tensor:
        return ad.matmul(features, self.params["proj_t"]) + self.params["proj_t_b"]

    # -- persistence --------------------------------------------------------

    def save(self, path):
        meta = {"kind": "identification", "vocab_size": self.vocab_size,
                "max_text_len": self.max_text_len, "config": self.cfg.to_dict()}
        serialization.save_tensors(path, {k: p.data for k, p in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "IdentificationNet":
        tensors, meta = serialization.load_tensors(path)
        cfg = RunConfig.from_dict(meta["config"])
        params = {k: Tensor(v) for k, v in tensors.items()}
        return cls(cfg, meta["vocab_size"], meta["max_text_len"], params=params)


def project_and_pool(net: IdentificationNet, e_v: Tensor, e_t: Tensor):
    """Per-token projection into the common space, then column-wise max pooling."""
    ev_p = net.project_image(e_v)
    et_p = net.project_text(e_t)
    return ev_p, et_p, ad.max_over_tokens(ev_p), ad.max_over_tokens(et_p)


def contrastive_bidirectional(v_globals, t_globals, tau, lambda_vt, lambda_tv) -> Tensor:
    """Weighted two-direction contrastive loss with positives on the diagonal."""
    b = len(v_globals)
    if b != len(t_globals) or b < 1:
        raise ad.ContractError("batch must pair every image with exactly one report")
    sims = [[None] * b for _ in range(b)]
    for i in range(b):
        for j in range(b):
            try:
                sims[i][j] = ad.cosine_similarity(v_globals[i], t_globals[j])
            except ad.UndefinedSimilarityError as exc:
                raise ad.UndefinedSimilarityError(
                    f"zero-norm global feature in batch pair ({i}, {j})") from exc
    inv_tau = 1.0 / tau
    loss_vt = Tensor(0.0)
    loss_tv = Tensor(0.0)
    for i in range(b):
        row = ad.concat([ad.reshape(sims[i][j] * inv_tau, (1,)) for j in range(b)])
        col = ad.concat([ad.reshape(sims[j][i] * inv_tau, (1,)) for j in range(b)])
        loss_vt = loss_vt - ad.gather_rows(ad.log_softmax(row, axis=0), [i])
        loss_tv = loss_tv - ad.gather_rows(ad.log_softmax(col, axis=0), [i])
    loss_vt = ad.reshape(loss_vt, ()) * (1.0 / b)
    loss_tv = ad.reshape(loss_tv, ()) * (1.0 / b)
    return lambda_vt * loss_vt + lambda_tv * loss_tv


def reconstruction_mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared pixel error over the reconstructed patches."""
    if pred.shape[0] == 0:
        raise ad.ContractError("reconstruction loss needs at least one masked patch")
    diff = pred - target
    return ad.mean(ad.mul(diff, diff))


def completion_ce(logits: Tensor, target_ids) -> Tensor:
    """Mean cross entropy of the original ids at masked token positions."""
    targets = np.asarray(target_ids, dtype=np.intp)
    if len(targets) == 0:
        raise ad.ContractError("completion loss needs at least one masked token")
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.gather_rows(ad.reshape(logp, (-1,)),
                            np.arange(len(targets)) * logits.shape[1] + targets)
    return -ad.mean(picked)


def ident_image_loss(net: IdentificationNet, patches_np: np.ndarray,
                     rng: np.random.Generator) -> Tensor:
    """Masked-patch pixel regression on the identification vision encoder."""
    n = patches_np.shape[0]
    n_masked = max(1, round(net.cfg.image_mask_ratio * n))
    masked = sorted(rng.choice(n, size=n_masked, replace=False).tolist())
    feats = net.encode_image(Tensor(patches_np), masked_indices=masked)
    pred = ad.matmul(ad.gather_rows(feats, masked), net.params["img_head"]) \
        + net.params["img_head_b"]
    return reconstruction_mse(pred, Tensor(patches_np[masked]))


def ident_text_loss(net: IdentificationNet, ids, rng: np.random.Generator) -> Tensor:
    """Masked-token id prediction on the identification text encoder."""
    ids = list(ids)
    candidates = [i for i, t in enumerate(ids) if t not in (bb.PAD, bb.BOS, bb.EOS)]
    if not candidates:
        raise ad.ContractError("text completion needs at least one maskable token")
    n_masked = max(1, round(net.cfg.text_mask_ratio * len(candidates)))
    masked = sorted(rng.choice(len(candidates), size=n_masked, replace=False).tolist())
    masked = [candidates[i] for i in masked]
    corrupted = list(ids)
    for i in masked:
        corrupted[i] = bb.MASK
    feats = net.encode_text(corrupted)
    logits = ad.matmul(ad.gather_rows(feats, masked), net.params["txt_head"]) \
        + net.params["txt_head_b"]
    return completion_ce(logits, [ids[i] for i in masked])


def batch_l1(net: IdentificationNet, batch, rng) -> tuple:
    """L1 = lambda_v L_v + lambda_t L_t + lambda_bi L_bi over one batch.

    `batch` is a list of (patches ndarray, token id list).
    """
    cfg = net.cfg
    v_globals, t_globals = [], []
    l_v = Tensor(0.0)
    l_t = Tensor(0.0)
    for patches_np, ids in batch:
        e_v = net.encode_image(Tensor(patches_np))
        real = [i for i, t in enumerate(ids) if t != bb.PAD]
        e_t = ad.gather_rows(net.encode_text(ids), real)
        _, _, g_v, g_t = project_and_pool(net, e_v, e_t)
        v_globals.append(g_v)
        t_globals.append(g_t)
        l_v = l_v + ident_image_loss(net, patches_np, rng)
        l_t = l_t + ident_text_loss(net, ids, rng)
    b = len(batch)
    l_v = l_v * (1.0 / b)
    l_t = l_t * (1.0 / b)
    l_bi = contrastive_bidirectional(v_globals, t_globals, cfg.tau,
                                     cfg.lambda_vt, cfg.lambda_tv)
    total = cfg.lambda_v * l_v + cfg.lambda_t * l_t + cfg.lambda_bi * l_bi
    return total, l_v, l_t, l_bi


def train_identification(samples, cfg: RunConfig, vocab: bb.Vocabulary | None = None,
                         progress=None):
    """Stage-1 training; returns (net, vocab, history rows).

    History rows are (epoch, L_v, L_t, L_bi, L1) epoch means.  Raises
    NumericDivergenceError carrying the last finite-epoch snapshot if the
    loss goes non-finite.
    """
    if not samples:
        raise ValueError("cannot train on an empty corpus")
    if vocab is None:
        vocab = bb.Vocabulary.from_corpus(s.report for s in samples)
    token_ids = [bb.tokenize(s.report, vocab) for s in samples]
    max_len = max(len(t) for t in token_ids) + 2
    rng = np.random.default_rng(cfg.seed)
    net = IdentificationNet(cfg, len(vocab), max_len, rng=rng)
    patches = [bb.patchify(s.image, cfg.patch_size) for s in samples]
    opt = Adam(net.params, lr=cfg.lr)
    history = []
    last_good = _snapshot(net.params)
    order = np.arange(len(samples))
    for epoch in range(cfg.align_epochs):
        rng.shuffle(order)
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [(patches[i], token_ids[i]) for i in idx]
            with ad.Tape() as tape:
                total, l_v, l_t, l_bi = batch_l1(net, batch, rng)
            if not math.isfinite(total.item()):
                raise NumericDivergenceError(
                    f"stage-1 loss diverged at epoch {epoch}", snapshot=last_good)
            opt.zero_grad()
            tape.backward(total)
            opt.step()
            sums += [l_v.item(), l_t.item(), l_bi.item(), total.item()]
            n_batches += 1
        means = sums / n_batches
        history.append((epoch, *means))
        last_good = _snapshot(net.params)
        if progress:
            progress(epoch, means)
    return net, vocab, history


# ---------------------------------------------------------------------------
# frozen-network inference


def saliency_scores(local: np.ndarray) -> np.ndarray:
    """Cosine of each local feature row against the column-wise max-pooled global."""
    global_feat = local.max(axis=0)
    g_norm = np.linalg.norm(global_feat)
    norms = np.linalg.norm(local, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if g_norm == 0.0 or zero.size:
        which = int(zero[0]) if zero.size else -1
        raise ad.UndefinedSimilarityError(
            f"zero-norm projected feature (patch index {which})")
    return (local @ global_feat) / (norms * g_norm)


def saliency_map(image: np.ndarray, net: IdentificationNet) -> np.ndarray:
    """Per-patch saliency of one image under a frozen identification network."""
    patches = bb.patchify(image, net.cfg.patch_size)
    with ad.no_grad():
        feats = net.encode_image(Tensor(patches))
        local = net.project_image(feats).data
    return saliency_scores(local)


def select_salient(scores: np.ndarray, k_percent: float):
    """Indices of the top floor(k * N_v) scores (at least one; ties to lower index)."""
    if not 0.0 < k_percent <= 1.0:
        raise ValueError(f"k_percent must lie in (0, 1], got {k_percent}")
    n = len(scores)
    count = max(1, int(math.floor(k_percent * n)))
    order = np.argsort(-np.asarray(scores), kind="stable")
    return sorted(order[:count].tolist())
