"""Report-generation network: saliency-guided masked image modeling plus a
saliency-token-conditioned transformer decoder.

The frozen identification network supplies, per image, a saliency map and the
salient patch set.  Masking probabilities start uniform and are raised by a
fixed increment on salient patches; the top round(rate * N_v) probabilities
are masked (rank-based, so the configured rate holds exactly).  Generation
always runs on the unmasked image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import backbones as bb
from . import serialization
from .align import IdentificationNet, NumericDivergenceError, _snapshot, \
    saliency_map, select_salient
from .autodiff import Tensor
from .config import RunConfig
from .optim import Adam


class DegeneratePlanError(ValueError):
    pass


@dataclass
class MaskPlan:
    probabilities: np.ndarray     # post-increment p_i, length N_v
    masked_indices: list          # strictly increasing
    target_rate: float


def masking_plan(salient_indices, n_v: int, phi: float, target_rate: float,
                 seed: int) -> MaskPlan:
    """Uniform draws plus a +phi bump on salient patches; mask the top ranks.

    Probabilities are not clamped above 1: only their ranks matter.
    """
    if phi < 0:
        raise ValueError(f"phi must be non-negative, got {phi}")
    if not 0.0 < target_rate < 1.0:
        raise ValueError(f"target_rate must lie in (0, 1), got {target_rate}")
    n_masked = round(target_rate * n_v)
    if n_masked == 0 or n_masked == n_v:
        raise DegeneratePlanError(
            f"rate {target_rate} with {n_v} patches masks {n_masked} of them")
    p = np.random.default_rng(seed).random(n_v)
    salient = np.asarray(sorted(salient_indices), dtype=np.intp)
    if salient.size:
        p[salient] += phi
    order = np.argsort(-p, kind="stable")          # ties -> lower patch index
    masked = sorted(order[:n_masked].tolist())
    return MaskPlan(probabilities=p, masked_indices=masked, target_rate=target_rate)


@dataclass
class GeneratedReport:
    token_ids: list
    confidences: np.ndarray       # one softmax row per generated position
    mode: str
    log_prob: float               # length-normalized
    truncated: bool = False


# ---------------------------------------------------------------------------
# network


class ReportGenerator:
    """RRG vision encoder + image decoder head + conditioned language decoder."""

    def __init__(self, cfg: RunConfig, vocab_size: int,
                 rng: np.random.Generator | None = None, params=None):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.patch_dim = cfg.patch_size * cfg.patch_size
        self.n_patches = bb.grid_size(cfg.image_size, cfg.image_size, cfg.patch_size)
        self.vision_cfg = bb.EncoderConfig(self.patch_dim, 0, self.n_patches,
                                           cfg.depth, cfg.heads, cfg.width)
        if cfg.dec_width % cfg.dec_heads:
            raise ValueError("decoder head count must divide decoder width")
        if params is not None:
            self.params = params
            return
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        p = bb.init_encoder_params(self.vision_cfg, rng, "vision")
        scale = 0.02

        def par(name, arr, grad=True):
            p[name] = Tensor(arr, requires_grad=grad)

        par("img_mask_token", rng.normal(0, scale, (1, cfg.width)))
        par("img_head", rng.normal(0, scale, (cfg.width, self.patch_dim)))
        par("img_head_b", np.zeros(self.patch_dim))
        par("sal_ln_g", np.ones(cfg.width))
        par("sal_ln_b", np.zeros(cfg.width))
        par("mem_proj", rng.normal(0, scale, (cfg.width, cfg.dec_width)))
        par("mem_proj_b", np.zeros(cfg.dec_width))
        par("dec.embed", rng.normal(0, scale, (vocab_size, cfg.dec_width)))
        par("dec.pos", rng.normal(0, scale, (cfg.max_report_len + 2, cfg.dec_width)))
        dh = cfg.dec_width // cfg.dec_heads
        for layer in range(cfg.dec_depth):
            base = f"dec.layer{layer}"
            for h in range(cfg.dec_heads):
                for w in ("wq", "wk", "wv"):
                    par(f"{base}.{w}{h}", rng.normal(0, scale, (cfg.dec_width, dh)))
                for w in ("cq", "ck", "cv"):
                    par(f"{base}.{w}{h}", rng.normal(0, scale, (cfg.dec_width, dh)))
            par(f"{base}.wo", rng.normal(0, scale, (cfg.dec_width, cfg.dec_width)))
            par(f"{base}.co", rng.normal(0, scale, (cfg.dec_width, cfg.dec_width)))
            for ln in ("ln1", "ln2", "ln3"):
                par(f"{base}.{ln}_g", np.ones(cfg.dec_width))
                par(f"{base}.{ln}_b", np.zeros(cfg.dec_width))
            par(f"{base}.ff1", rng.normal(0, scale, (cfg.dec_width, 2 * cfg.dec_width)))
            par(f"{base}.ff1_b", np.zeros(2 * cfg.dec_width))
            par(f"{base}.ff2", rng.normal(0, scale, (2 * cfg.dec_width, cfg.dec_width)))
            par(f"{base}.ff2_b", np.zeros(cfg.dec_width))
        par("dec.ln_f_g", np.ones(cfg.dec_width))
        par("dec.ln_f_b", np.zeros(cfg.dec_width))
        par("dec.out", rng.normal(0, scale, (cfg.dec_width, vocab_size)))
        par("dec.out_b", np.zeros(vocab_size))
        self.params = p

    # -- image side ---------------------------------------------------------

    def encode_image(self, patches: Tensor, masked_indices=None) -> Tensor:
        mask_token = self.params["img_mask_token"] if masked_indices is not None else None
        return bb.vision_encode(patches, self.params, self.vision_cfg, "vision",
                                mask_token=mask_token, masked_indices=masked_indices or [])

    def memory(self, w_prime: Tensor, e_i: Tensor) -> Tensor:
        """Decoder context: saliency token prepended to patch features."""
        stacked = ad.concat([w_prime, e_i], axis=0)
        return ad.matmul(stacked, self.params["mem_proj"]) + self.params["mem_proj_b"]

    # -- language decoder ---------------------------------------------------

    def decode_logits(self, input_ids, memory: Tensor) -> Tensor:
        """Teacher-forced decoder pass; returns l x V logits."""
        p = self.params
        cfg = self.cfg
        l = len(input_ids)
        x = ad.gather_rows(p["dec.embed"], np.asarray(input_ids, dtype=np.intp))
        x = x + ad.gather_rows(p["dec.pos"], np.arange(l))
        causal = Tensor(np.triu(np.full((l, l), bb.NEG_INF), k=1))
        dh = cfg.dec_width // cfg.dec_heads
        for layer in range(cfg.dec_depth):
            base = f"dec.layer{layer}"
            xn = ad.layer_norm(x, p[f"{base}.ln1_g"], p[f"{base}.ln1_b"])
            outs = []
            for h in range(cfg.dec_heads):
                q = ad.matmul(xn, p[f"{base}.wq{h}"])
                k = ad.matmul(xn, p[f"{base}.wk{h}"])
                v = ad.matmul(xn, p[f"{base}.wv{h}"])
                scores = ad.matmul(q, k.T) * (1.0 / np.sqrt(dh)) + causal
                outs.append(ad.matmul(ad.softmax(scores, axis=-1), v))
            x = x + ad.matmul(ad.concat(outs, axis=1), p[f"{base}.wo"])
            xn = ad.layer_norm(x, p[f"{base}.ln2_g"], p[f"{base}.ln2_b"])
            outs = []
            for h in range(cfg.dec_heads):
                q = ad.matmul(xn, p[f"{base}.cq{h}"])
                k = ad.matmul(memory, p[f"{base}.ck{h}"])
                v = ad.matmul(memory, p[f"{base}.cv{h}"])
                scores = ad.matmul(q, k.T) * (1.0 / np.sqrt(dh))
                outs.append(ad.matmul(ad.softmax(scores, axis=-1), v))
            x = x + ad.matmul(ad.concat(outs, axis=1), p[f"{base}.co"])
            xn = ad.layer_norm(x, p[f"{base}.ln3_g"], p[f"{base}.ln3_b"])
            h1 = ad.relu(ad.matmul(xn, p[f"{base}.ff1"]) + p[f"{base}.ff1_b"])
            x = x + ad.matmul(h1, p[f"{base}.ff2"]) + p[f"{base}.ff2_b"]
        x = ad.layer_norm(x, p["dec.ln_f_g"], p["dec.ln_f_b"])
        return ad.matmul(x, p["dec.out"]) + p["dec.out_b"]

    # -- persistence --------------------------------------------------------

    def save(self, path):
        meta = {"kind": "rrg", "vocab_size": self.vocab_size,
                "config": self.cfg.to_dict()}
        serialization.save_tensors(path, {k: p.data for k, p in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "ReportGenerator":
        tensors, meta = serialization.load_tensors(path)
        cfg = RunConfig.from_dict(meta["config"])
        params = {k: Tensor(v) for k, v in tensors.items()}
        return cls(cfg, meta["vocab_size"], params=params)


# ---------------------------------------------------------------------------
# losses


def masked_patch_loss(pred: Tensor, target: Tensor, mode: str = "mse") -> Tensor:
    """Per-pixel MSE over masked patches, or the unsquared per-patch norm variant."""
    if pred.shape[0] == 0:
        raise ad.ContractError("masking plan has no masked patches")
    diff = pred - target
    if mode == "l2norm":
        return ad.mean(ad.pow_scalar(ad.sum_(ad.mul(diff, diff), axis=1), 0.5))
    return ad.mean(ad.mul(diff, diff))


def mim_forward_loss(patches_np: np.ndarray, plan: MaskPlan,
                     net: ReportGenerator) -> Tensor:
    """Reconstruction loss of masked patch pixels from the visible context."""
    masked = plan.masked_indices
    if not masked:
        raise ad.ContractError("masking plan has no masked patches")
    if len(plan.probabilities) != patches_np.shape[0]:
        raise ad.ShapeError("masking plan size does not match the image patch count")
    feats = net.encode_image(Tensor(patches_np), masked_indices=masked)
    pred = ad.matmul(ad.gather_rows(feats, masked), net.params["img_head"]) \
        + net.params["img_head_b"]
    return masked_patch_loss(pred, Tensor(patches_np[masked]), net.cfg.mim_loss)


def saliency_token(scores: np.ndarray, e_i: Tensor, net: ReportGenerator) -> Tensor:
    """Normalized saliency-weighted sum of patch features (one extra token)."""
    if len(scores) != e_i.shape[0]:
        raise ad.ShapeError(
            f"saliency map length {len(scores)} does not match {e_i.shape[0]} patches")
    w = ad.matmul(Tensor(np.asarray(scores)[None, :]), e_i)
    return ad.layer_norm(w, net.params["sal_ln_g"], net.params["sal_ln_b"])


def report_loss(logits: Tensor, target_ids) -> Tensor:
    """Teacher-forced cross entropy, averaged over target positions."""
    targets = np.asarray(target_ids, dtype=np.intp)
    l = len(targets)
    if l == 0:
        raise ad.ContractError("report loss needs a non-empty reference")
    logp = ad.log_softmax(logits, axis=-1)
    flat = ad.reshape(logp, (-1,))
    picked = ad.gather_rows(flat, np.arange(l) * logits.shape[1] + targets)
    return -ad.mean(picked)


# ---------------------------------------------------------------------------
# training


def _plan_seed(seed: int, epoch: int, sample_idx: int) -> int:
    return ((seed * 1_000_003 + epoch) * 1_000_003 + sample_idx) % (2 ** 63)


def sample_loss(net: ReportGenerator, patches_np, ids, scores, salient,
                epoch: int, sample_idx: int, no_sisr_masking=False,
                no_sisr_lm=False):
    """L2 terms for one sample: (loss, L_I, L_R)."""
    cfg = net.cfg
    phi = 0.0 if no_sisr_masking else cfg.phi
    plan = masking_plan(salient, net.n_patches, phi, cfg.mask_rate,
                        _plan_seed(cfg.seed, epoch, sample_idx))
    l_i = mim_forward_loss(patches_np, plan, net)
    e_i = net.encode_image(Tensor(patches_np))
    if no_sisr_lm:
        w_prime = Tensor(np.zeros((1, cfg.width)))
    else:
        w_prime = saliency_token(scores, e_i, net)
    memory = net.memory(w_prime, e_i)
    logits = net.decode_logits(ids[:-1], memory)
    l_r = report_loss(logits, ids[1:])
    return cfg.lambda_i * l_i + cfg.lambda_r * l_r, l_i, l_r


def train_rrg(samples, ident: IdentificationNet, cfg: RunConfig,
              vocab: bb.Vocabulary, no_sisr_masking=False, no_sisr_lm=False,
              progress=None):
    """Stage-2 training against a frozen identification network.

    Returns (net, history rows (epoch, L_I, L_R, L2)).  Never touches
    `ident` parameters.
    """
    if not samples:
        raise ValueError("cannot train on an empty corpus")
    for p in ident.params.values():
        p.requires_grad = False
    max_len = cfg.max_report_len + 2  # BOS + body + EOS
    token_ids = []
    for s in samples:
        ids = bb.tokenize(s.report, vocab)
        if len(ids) > max_len:
            ids = ids[: max_len - 1] + [bb.EOS]
        token_ids.append(ids)
    patches = [bb.patchify(s.image, cfg.patch_size) for s in samples]
    sal_maps = [saliency_map(s.image, ident) for s in samples]
    salients = [select_salient(m, cfg.k_percent) for m in sal_maps]
    rng = np.random.default_rng([cfg.seed, 2])
    net = ReportGenerator(cfg, len(vocab), rng=rng)
    opt = Adam(net.params, lr=cfg.lr)
    history = []
    last_good = _snapshot(net.params)
    order = np.arange(len(samples))
    for epoch in range(cfg.rrg_epochs):
        rng.shuffle(order)
        sums = np.zeros(3)
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with ad.Tape() as tape:
                total = Tensor(0.0)
                li_sum = lr_sum = 0.0
                for i in idx:
                    loss, l_i, l_r = sample_loss(
                        net, patches[i], token_ids[i], sal_maps[i], salients[i],
                        epoch, int(i), no_sisr_masking, no_sisr_lm)
                    total = total + loss
                    li_sum += l_i.item()
                    lr_sum += l_r.item()
                total = total * (1.0 / len(idx))
            if not math.isfinite(total.item()):
                raise NumericDivergenceError(
                    f"stage-2 loss diverged at epoch {epoch}", snapshot=last_good)
            opt.zero_grad()
            tape.backward(total)
            opt.step()
            sums += [li_sum / len(idx), lr_sum / len(idx), total.item()]
            n_batches += 1
        means = sums / n_batches
        history.append((epoch, *means))
        last_good = _snapshot(net.params)
        if progress:
            progress(epoch, means)
    return net, history


# ---------------------------------------------------------------------------
# generation


def _decode_step_probs(net, ids, memory):
    logits = net.decode_logits(ids, memory)
    row = logits.data[-1]
    shifted = row - row.max()
    e = np.exp(shifted)
    probs = e / e.sum()
    return probs


def _greedy(net, memory, max_len):
    ids = [bb.BOS]
    confidences = []
    log_prob = 0.0
    truncated = True
    for _ in range(max_len):
        probs = _decode_step_probs(net, ids, memory)
        nxt = int(probs.argmax())
        confidences.append(probs)
        log_prob += math.log(probs[nxt] + ad.LOG_GUARD)
        ids.append(nxt)
        if nxt == bb.EOS:
            truncated = False
            break
    steps = len(confidences)
    return GeneratedReport(token_ids=ids, confidences=np.array(confidences),
                           mode="greedy", log_prob=log_prob / max(steps, 1),
                           truncated=truncated)


def generate(image: np.ndarray, ident: IdentificationNet, net: ReportGenerator,
             mode: str = "greedy", beam_width: int = 3,
             no_sisr_lm: bool = False) -> GeneratedReport:
    """Autoregressive decoding conditioned on the saliency token and patch features.

    Beam search is length-normalized and never returns a hypothesis scoring
    below the greedy rollout.
    """
    cfg = net.cfg
    max_len = cfg.max_report_len
    with ad.no_grad():
        patches = bb.patchify(image, cfg.patch_size)
        e_i = net.encode_image(Tensor(patches))
        if no_sisr_lm:
            w_prime = Tensor(np.zeros((1, cfg.width)))
        else:
            scores = saliency_map(image, ident)
            w_prime = saliency_token(scores, e_i, net)
        memory = net.memory(w_prime, e_i)
        greedy = _greedy(net, memory, max_len)
        if mode == "greedy" or beam_width == 1:
            return greedy
        if mode != "beam":
            raise ValueError(f"unknown decode mode {mode!r}")
        # (ids, summed log-prob, finished)
        beams = [([bb.BOS], 0.0, False)]
        finished = []
        for _ in range(max_len):
            candidates = []
            for ids, lp, done in beams:
                if done:
                    candidates.append((ids, lp, True))
                    continue
                probs = _decode_step_probs(net, ids, memory)
                top = np.argsort(-probs, kind="stable")[:beam_width]
                for t in top:
                    t = int(t)
                    candidates.append((ids + [t],
                                       lp + math.log(probs[t] + ad.LOG_GUARD),
                                       t == bb.EOS))
            candidates.sort(key=lambda c: (-c[1] / max(len(c[0]) - 1, 1), c[0]))
            beams = candidates[:beam_width]
            for ids, lp, done in beams:
                if done:
                    finished.append((ids, lp))
            if all(done for _, _, done in beams):
                break
        pool = [(ids, lp / max(len(ids) - 1, 1), False) for ids, lp in finished]
        if not pool:
            pool = [(ids, lp / max(len(ids) - 1, 1), True) for ids, lp, _ in beams]
        pool.append((greedy.token_ids, greedy.log_prob, greedy.truncated))
        pool.sort(key=lambda c: (-c[1], c[0]))
        best_ids, best_lp, best_trunc = pool[0]
        confidences = []
        for t in range(1, len(best_ids)):
            confidences.append(_decode_step_probs(net, best_ids[:t], memory))
        return GeneratedReport(token_ids=best_ids, confidences=np.array(confidences),
                               mode=f"beam{beam_width}", log_prob=best_lp,
                               truncated=best_trunc)
