import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sisr import align
from sisr import autodiff as ad
from sisr import backbones as bb
from sisr import corpus as cs
from sisr.autodiff import Tape, Tensor
from sisr.config import RunConfig

import oracles


def tiny_cfg(**kw):
    base = dict(image_size=16, patch_size=8, depth=1, heads=2, width=8,
                common_width=6, dec_width=8, dec_heads=2, dec_depth=1,
                n_samples=4, batch_size=2, align_epochs=1, rrg_epochs=1)
    base.update(kw)
    return RunConfig(**base)


def tiny_net(seed=0, **kw):
    cfg = tiny_cfg(**kw)
    return align.IdentificationNet(cfg, vocab_size=12, max_text_len=10,
                                   rng=np.random.default_rng(seed))


class TestProjectAndPool:
    def test_single_token(self):
        net = tiny_net()
        e_v = Tensor(np.random.default_rng(1).random((1, 8)))
        e_t = Tensor(np.random.default_rng(2).random((3, 8)))
        ev_p, _, g_v, _ = align.project_and_pool(net, e_v, e_t)
        assert np.array_equal(g_v.data, ev_p.data[0])

    def test_coordinatewise_max(self):
        net = tiny_net()
        e_v = Tensor(np.random.default_rng(3).random((5, 8)))
        ev_p, _, g_v, _ = align.project_and_pool(net, e_v, e_v)
        assert np.array_equal(g_v.data, ev_p.data.max(axis=0))

    def test_brute_force_four_tokens(self):
        net = tiny_net()
        e_v = Tensor(np.random.default_rng(4).uniform(-1, 1, (4, 8)))
        ev_p, _, g_v, _ = align.project_and_pool(net, e_v, e_v)
        expect = np.array([max(ev_p.data[i][j] for i in range(4)) for j in range(6)])
        assert np.array_equal(g_v.data, expect)


def random_globals(rng, b, d=5):
    return ([Tensor(rng.uniform(-1, 1, d) + 2.0) for _ in range(b)],
            [Tensor(rng.uniform(-1, 1, d) + 2.0) for _ in range(b)])


class TestContrastive:
    def test_single_pair_is_zero(self):
        v, t = random_globals(np.random.default_rng(0), 1)
        loss = align.contrastive_bidirectional(v, t, 0.07, 0.75, 0.25)
        assert loss.item() == 0.0

    def test_uniform_similarities_give_ln2(self):
        u = Tensor([1.0, 0.0])
        loss = align.contrastive_bidirectional([u, u], [u, u], 0.07, 1.0, 1.0)
        assert abs(loss.item() - 2 * math.log(2)) < 1e-12

    def test_brute_force_batch_of_three(self):
        rng = np.random.default_rng(7)
        v, t = random_globals(rng, 3)
        loss = align.contrastive_bidirectional(v, t, 0.07, 0.75, 0.25)
        expect = oracles.contrastive_reference([x.data for x in v],
                                               [x.data for x in t], 0.07, 0.75, 0.25)
        assert abs(loss.item() - expect) < 1e-10

    def test_zero_norm_names_pair(self):
        v = [Tensor([1.0, 0.0]), Tensor([0.0, 0.0])]
        t = [Tensor([1.0, 0.0]), Tensor([1.0, 1.0])]
        with pytest.raises(ad.UndefinedSimilarityError, match=r"\(1, 0\)"):
            align.contrastive_bidirectional(v, t, 0.07, 0.75, 0.25)

    def test_non_negative_directions(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            v, t = random_globals(rng, 3)
            loss = align.contrastive_bidirectional(v, t, 0.07, 1.0, 0.0)
            assert loss.item() >= 0.0
            loss = align.contrastive_bidirectional(v, t, 0.07, 0.0, 1.0)
            assert loss.item() >= 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        v, t = random_globals(rng, 3)
        base = align.contrastive_bidirectional(v, t, 0.07, 0.75, 0.25).item()
        swapped = align.contrastive_bidirectional([v[1], v[0], v[2]],
                                                  [t[1], t[0], t[2]],
                                                  0.07, 0.75, 0.25).item()
        assert abs(base - swapped) < 1e-12

    def test_scaling_invariance_of_cosine(self):
        rng = np.random.default_rng(10)
        v, t = random_globals(rng, 3)
        scaled = [Tensor(x.data * 3.7) for x in v]
        a = align.contrastive_bidirectional(v, t, 0.07, 0.75, 0.25).item()
        b = align.contrastive_bidirectional(scaled, t, 0.07, 0.75, 0.25).item()
        assert abs(a - b) < 1e-10

    def test_gradient(self):
        rng = np.random.default_rng(11)
        v, t = random_globals(rng, 2, d=4)
        for x in v + t:
            x.requires_grad = True
        params = {f"v{i}": x for i, x in enumerate(v)}
        params.update({f"t{i}": x for i, x in enumerate(t)})
        err = oracles.check_gradients(
            lambda: align.contrastive_bidirectional(v, t, 0.5, 0.75, 0.25),
            params, rtol=1e-6)
        assert err < 1e-6


class TestAuxLosses:
    def test_perfect_reconstruction_zero(self):
        target = Tensor(np.random.default_rng(0).random((3, 4)))
        assert align.reconstruction_mse(target, target).item() == 0.0

    def test_uniform_prediction_ln_v(self):
        v = 7
        logits = Tensor(np.zeros((4, v)))
        loss = align.completion_ce(logits, [0, 3, 5, 6])
        assert abs(loss.item() - math.log(v)) < 1e-10

    def test_direct_formula_random_case(self):
        rng = np.random.default_rng(12)
        logits = Tensor(rng.uniform(-1, 1, (3, 5)))
        targets = [4, 0, 2]
        probs = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
        expect = oracles.cross_entropy_reference(probs, targets)
        assert abs(align.completion_ce(logits, targets).item() - expect) < 1e-10

    def test_zero_masked_positions(self):
        with pytest.raises(ad.ContractError):
            align.reconstruction_mse(Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4))))
        with pytest.raises(ad.ContractError):
            align.completion_ce(Tensor(np.zeros((0, 5))), [])

    def test_masked_losses_through_net(self):
        net = tiny_net()
        rng = np.random.default_rng(13)
        patches = rng.random((4, 64))
        assert align.ident_image_loss(net, patches, rng).item() >= 0.0
        loss = align.ident_text_loss(net, [bb.BOS, 6, 7, 8, bb.EOS], rng)
        assert loss.item() >= 0.0


class TestSaliency:
    def test_identical_patches_all_ones(self):
        local = np.tile(np.random.default_rng(14).random(6) + 0.5, (4, 1))
        assert np.allclose(align.saliency_scores(local), 1.0, atol=1e-12)

    def test_dominant_patch_scores_one(self):
        local = np.random.default_rng(15).random((4, 6))
        local[2] = local.max(axis=0) + 0.1
        scores = align.saliency_scores(local)
        assert abs(scores[2] - 1.0) < 1e-12

    def test_brute_force(self):
        local = np.random.default_rng(16).uniform(0.1, 1.0, (4, 6))
        expect = oracles.saliency_reference(local)
        assert np.abs(align.saliency_scores(local) - expect).max() < 1e-12

    def test_zero_norm_names_patch(self):
        local = np.random.default_rng(17).random((4, 6))
        local[1] = 0.0
        with pytest.raises(ad.UndefinedSimilarityError, match="patch index 1"):
            align.saliency_scores(local)

    def test_scores_in_range(self):
        net = tiny_net()
        img = np.random.default_rng(18).random((16, 16, 1))
        scores = align.saliency_map(img, net)
        assert scores.shape == (4,)
        assert (scores >= -1.0).all() and (scores <= 1.0).all()


class TestSelectSalient:
    def test_count_at_full_scale(self):
        scores = np.random.default_rng(19).random(196)
        assert len(align.select_salient(scores, 0.20)) == 39

    def test_strictly_decreasing(self):
        scores = np.linspace(1.0, 0.0, 10)
        assert align.select_salient(scores, 0.3) == [0, 1, 2]

    def test_all_equal_tie_rule(self):
        scores = np.full(10, 0.5)
        assert align.select_salient(scores, 0.3) == [0, 1, 2]

    def test_at_least_one(self):
        assert align.select_salient(np.array([0.1, 0.9]), 0.01) == [1]

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            align.select_salient(np.zeros(4), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=20,
                    unique=True))
    def test_rank_only_dependence(self, values):
        scores = np.array(values) / 1000.0  # distinct, well-separated in float
        a = align.select_salient(scores, 0.4)
        b = align.select_salient(np.exp(3.0 * scores), 0.4)  # strictly increasing map
        assert a == b


class TestTraining:
    def make_samples(self, cfg, n=4):
        rng = np.random.default_rng(20)
        samples = []
        for i in range(n):
            lesions = []
            if i % 2:
                lesions = [cs.LesionSpec("nodule", (0, 0), "severe", (4.0, 4.0))]
            samples.append(cs.render_sample(lesions, cfg.image_size, rng, 0.02,
                                            cfg.patch_size))
        return samples

    def test_one_step_descends(self):
        cfg = tiny_cfg(lr=1e-4, align_epochs=1, batch_size=2)
        samples = self.make_samples(cfg, 2)
        vocab = bb.Vocabulary.from_corpus(s.report for s in samples)
        token_ids = [bb.tokenize(s.report, vocab) for s in samples]
        net = align.IdentificationNet(cfg, len(vocab), 24,
                                      rng=np.random.default_rng(0))
        patches = [bb.patchify(s.image, cfg.patch_size) for s in samples]
        batch = list(zip(patches, token_ids))
        from sisr.optim import Adam
        opt = Adam(net.params, lr=1e-4)
        with Tape() as tape:
            before, *_ = align.batch_l1(net, batch, np.random.default_rng(1))
        tape.backward(before)
        opt.step()
        with ad.Tape():
            after, *_ = align.batch_l1(net, batch, np.random.default_rng(1))
        assert after.item() < before.item()

    def test_training_runs_and_loss_logged(self):
        cfg = tiny_cfg(align_epochs=3)
        samples = self.make_samples(cfg)
        net, vocab, history = align.train_identification(samples, cfg)
        assert len(history) == 3
        assert all(len(row) == 5 for row in history)

    def test_checkpoint_round_trip(self, tmp_path):
        cfg = tiny_cfg()
        samples = self.make_samples(cfg)
        net, vocab, _ = align.train_identification(samples, cfg)
        net.save(tmp_path / "ident.ckpt")
        loaded = align.IdentificationNet.load(tmp_path / "ident.ckpt")
        img = samples[0].image
        assert np.array_equal(align.saliency_map(img, net),
                              align.saliency_map(img, loaded))

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            align.train_identification([], tiny_cfg())
