"""Inner/outer loop mechanics, pseudo-episode sampling, and meta updates."""

import math
from collections import OrderedDict

import pytest
import torch
import torch.nn.functional as F

from dfml.data import Episode
from dfml.episodic import (HyperParams, gradient_step, init_meta_state, inner_adapt,
                           meta_update, outer_loss, outer_loss_and_acc,
                           sample_pseudo_episode)
from dfml.errors import InputError, NumericError
from dfml.inversion import init_dynamic_dataset
from dfml.nets import ArchSpec, build_network, forward
from dfml.seeding import make_generator
from dfml.zoo import ModelZoo, ModelZooEntry

from oracles import finite_diff_grad, rel_err

TINY = ArchSpec("conv4", (1, 8, 8), 2, 1 / 16)


def hp2(**kw):
    base = dict(way=2, shots=1, queries=1)
    base.update(kw)
    return HyperParams(**base)


def toy_zoo(num_models=2, way=2, shape=(1, 8, 8)):
    """Untrained zoo; enough structure for sampling tests."""
    entries = []
    for k in range(num_models):
        spec = ArchSpec("conv4", shape, way, 1 / 16)
        gids = list(range(k * way, (k + 1) * way))
        entries.append(ModelZooEntry(spec, build_network(spec, k), gids, f"m{k}"))
    return ModelZoo(entries)


def make_episode(gen, N=2, K=1, M=1, shape=(1, 8, 8), dtype=torch.float32):
    sup = torch.rand(N * K, *shape, generator=gen).to(dtype)
    qry = torch.rand(N * M, *shape, generator=gen).to(dtype)
    return Episode(sup, torch.arange(N).repeat_interleave(K),
                   qry, torch.arange(N).repeat_interleave(M),
                   way=N, shots=K, queries_per_class=M, origin="pseudo")


class TestHyperParams:
    def test_rejects_nonpositive_steps(self):
        with pytest.raises(InputError):
            hp2(alpha_inner=0.0)
        with pytest.raises(InputError):
            hp2(beta=-1.0)

    def test_rejects_bad_patience_and_metric(self):
        with pytest.raises(InputError):
            hp2(patience=0)
        with pytest.raises(InputError):
            hp2(feedback_metric="f1")


class TestSamplePseudoEpisode:
    def test_shapes_and_labels(self):
        zoo = toy_zoo(3, 2)
        dd = init_dynamic_dataset(zoo, 2, 3, (1, 8, 8), 0)
        ep = sample_pseudo_episode(dd, 3, 2, 3, make_generator(0))
        assert ep.support_images.shape == (6, 1, 8, 8)
        assert ep.query_images.shape == (9, 1, 8, 8)
        assert ep.support_labels.tolist() == [0, 0, 1, 1, 2, 2]
        assert ep.query_labels.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2]
        assert ep.origin == "pseudo"
        assert len(set(ep.source_class_ids)) == 3

    def test_images_come_from_named_classes(self):
        zoo = toy_zoo(2, 2)
        dd = init_dynamic_dataset(zoo, 1, 1, (1, 8, 8), 1)
        for s in range(20):
            ep = sample_pseudo_episode(dd, 2, 1, 1, make_generator(s))
            for local, g in enumerate(ep.source_class_ids):
                bank = {tuple(dd.images[g, j].reshape(-1).tolist()) for j in range(2)}
                assert tuple(ep.support_images[local].reshape(-1).tolist()) in bank
                assert tuple(ep.query_images[local].reshape(-1).tolist()) in bank

    def test_support_query_disjoint_instances(self):
        zoo = toy_zoo(2, 2)
        dd = init_dynamic_dataset(zoo, 1, 1, (1, 8, 8), 2)
        for s in range(20):
            ep = sample_pseudo_episode(dd, 2, 1, 1, make_generator(s))
            for local in range(2):
                assert not torch.equal(ep.support_images[local], ep.query_images[local])

    def test_gradient_flows_to_bank(self):
        zoo = toy_zoo(2, 2)
        dd = init_dynamic_dataset(zoo, 1, 1, (1, 8, 8), 3)
        ep = sample_pseudo_episode(dd, 2, 1, 1, make_generator(0))
        (g,) = torch.autograd.grad(ep.support_images.sum() + ep.query_images.sum(),
                                   dd.images)
        # exactly the 4 sampled instances receive gradient
        assert int((g.reshape(4, 2, -1).abs().sum(-1) > 0).sum()) == 4

    def test_within_model_restricts_pool(self):
        zoo = toy_zoo(3, 2)
        dd = init_dynamic_dataset(zoo, 1, 1, (1, 8, 8), 4)
        for s in range(30):
            ep = sample_pseudo_episode(dd, 2, 1, 1, make_generator(s), within_model=True)
            owners = {dd.class_owner[g] for g in ep.source_class_ids}
            assert len(owners) == 1

    def test_km_mismatch_rejected(self):
        zoo = toy_zoo(2, 2)
        dd = init_dynamic_dataset(zoo, 1, 2, (1, 8, 8), 0)
        with pytest.raises(InputError):
            sample_pseudo_episode(dd, 2, 2, 2, make_generator(0))

    def test_too_few_classes_rejected(self):
        zoo = toy_zoo(1, 2)
        dd = init_dynamic_dataset(zoo, 1, 1, (1, 8, 8), 0)
        with pytest.raises(InputError):
            sample_pseudo_episode(dd, 3, 1, 1, make_generator(0))

    def test_deterministic_in_generator(self):
        zoo = toy_zoo(3, 2)
        dd = init_dynamic_dataset(zoo, 1, 1, (1, 8, 8), 5)
        a = sample_pseudo_episode(dd, 2, 1, 1, make_generator(42))
        b = sample_pseudo_episode(dd, 2, 1, 1, make_generator(42))
        assert a.source_class_ids == b.source_class_ids
        assert torch.equal(a.support_images, b.support_images)


class TestGradientStep:
    def test_quadratic_contraction(self):
        # loss = 0.5 ||w||^2, alpha = 0.1  ->  w' = 0.9 w exactly
        w = torch.randn(4, 3, generator=torch.Generator().manual_seed(0),
                        requires_grad=True)
        entries = OrderedDict(w=w)
        out = gradient_step(0.5 * (w ** 2).sum(), entries, 0.1, create_graph=False)
        assert torch.allclose(out["w"], 0.9 * w.detach(), atol=1e-7)

    def test_fixed_point_at_minimum(self):
        w = torch.zeros(5, requires_grad=True)
        out = gradient_step(0.5 * (w ** 2).sum(), OrderedDict(w=w), 0.3, False)
        assert torch.equal(out["w"], torch.zeros(5))

    def test_linear_loss_constant_shift(self):
        # loss = c . w  ->  w' = w - alpha c
        gen = torch.Generator().manual_seed(1)
        w = torch.randn(6, generator=gen, requires_grad=True)
        c = torch.randn(6, generator=gen)
        out = gradient_step((c * w).sum(), OrderedDict(w=w), 0.5, False)
        assert torch.allclose(out["w"], w.detach() - 0.5 * c, atol=1e-7)

    def test_create_graph_keeps_second_order_path(self):
        w = torch.tensor([2.0], requires_grad=True)
        out = gradient_step(0.5 * w.pow(2).sum(), OrderedDict(w=w), 0.1, create_graph=True)
        # d/dw of (w - 0.1 w)^2/2 evaluated through the step: out = 0.9 w,
        # f(out) = 0.5*(0.9 w)^2 -> df/dw = 0.81 w
        f = 0.5 * out["w"].pow(2).sum()
        (g,) = torch.autograd.grad(f, w)
        assert g.item() == pytest.approx(0.81 * 2.0, rel=1e-6)

    def test_detached_without_create_graph(self):
        w = torch.tensor([2.0], requires_grad=True)
        out = gradient_step(0.5 * w.pow(2).sum(), OrderedDict(w=w), 0.1, create_graph=False)
        f = 0.5 * out["w"].pow(2).sum()
        (g,) = torch.autograd.grad(f, w)
        # only the explicit -alpha*g path is gone; out = w - 0.1*g(detached)
        # so df/dw = 0.9 w * 1 = 0.9*w*d(out)/dw where d(out)/dw = 1
        assert g.item() == pytest.approx(0.9 * 2.0, rel=1e-6)

    def test_nonfinite_loss_rejected(self):
        w = torch.tensor([1.0], requires_grad=True)
        with pytest.raises(NumericError):
            gradient_step(w.sum() * float("nan"), OrderedDict(w=w), 0.1, False)


class TestInnerAdapt:
    def test_equals_manual_step(self):
        theta = build_network(TINY, 0).requires_grad_(True)
        gen = torch.Generator().manual_seed(0)
        ep = make_episode(gen)
        adapted = inner_adapt(theta, ep.support_images, ep.support_labels, 0.05)
        trace = forward(theta, ep.support_images, "batch_stats")
        loss = F.cross_entropy(trace.logits, ep.support_labels)
        grads = torch.autograd.grad(loss, list(theta.entries.values()))
        for (k, p), g in zip(theta.entries.items(), grads):
            assert torch.allclose(adapted.entries[k].detach(),
                                  (p - 0.05 * g).detach(), atol=1e-7), k

    def test_buffers_shared_not_copied(self):
        theta = build_network(TINY, 0).requires_grad_(True)
        ep = make_episode(torch.Generator().manual_seed(1))
        adapted = inner_adapt(theta, ep.support_images, ep.support_labels, 0.05)
        assert adapted.buffers is theta.buffers

    def test_empty_support_rejected(self):
        theta = build_network(TINY, 0).requires_grad_(True)
        with pytest.raises(InputError):
            inner_adapt(theta, torch.zeros(0, 1, 8, 8), torch.zeros(0, dtype=torch.long), 0.1)


class TestOuterLoss:
    def test_zero_head_negligible_adaptation_gives_log_way(self):
        """With a zeroed head and a vanishing inner step, query logits stay
        ~0 so the outer loss is exactly log(way)."""
        theta = build_network(TINY, 0)
        theta.entries["head.weight"] = torch.zeros_like(theta.entries["head.weight"])
        theta.requires_grad_(True)
        ep = make_episode(torch.Generator().manual_seed(2))
        loss = outer_loss(theta, ep, alpha_inner=1e-30)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_acc_is_query_accuracy(self):
        theta = build_network(TINY, 3).requires_grad_(True)
        ep = make_episode(torch.Generator().manual_seed(3), N=2, M=3)
        loss, acc = outer_loss_and_acc(theta, ep, 0.01)
        adapted = inner_adapt(theta, ep.support_images, ep.support_labels, 0.01)
        with torch.no_grad():
            logits = forward(adapted, ep.query_images, "batch_stats").logits
        want = (logits.argmax(1) == ep.query_labels).float().mean().item()
        assert acc == pytest.approx(want)

    def test_theta_gradient_matches_finite_differences(self):
        theta = build_network(TINY, 1).to_dtype(torch.float64).requires_grad_(True)
        ep = make_episode(torch.Generator().manual_seed(4), dtype=torch.float64)

        loss = outer_loss(theta, ep, 0.05, second_order=True)
        grads = torch.autograd.grad(loss, list(theta.entries.values()))
        for (name, p), g in zip(theta.entries.items(), grads):
            def fn(t, name=name):
                trial = theta.clone()
                trial.entries[name] = t.to(torch.float64)
                trial.requires_grad_(True)
                return outer_loss(trial, ep, 0.05, second_order=True).item()
            fd = finite_diff_grad(fn, p, h=1e-5)
            assert rel_err(g.detach(), fd, floor=1e-5) < 1e-3, name

    def test_support_pixel_gradient_matches_finite_differences(self):
        theta = build_network(TINY, 2).to_dtype(torch.float64).requires_grad_(True)
        gen = torch.Generator().manual_seed(5)
        sup = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64)
        qry = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64)
        lbl = torch.tensor([0, 1])

        def make_ep(s):
            return Episode(s, lbl, qry, lbl, 2, 1, 1, "pseudo")

        s = sup.clone().requires_grad_(True)
        loss = outer_loss(theta, make_ep(s), 0.05, second_order=True)
        (g,) = torch.autograd.grad(loss, s)
        fd = finite_diff_grad(
            lambda t: outer_loss(theta, make_ep(t.to(torch.float64)), 0.05,
                                 second_order=True).item(), sup, h=1e-5)
        assert rel_err(g.detach(), fd, floor=1e-5) < 1e-3

    def test_second_order_term_scales_with_inner_step(self):
        """The first/second-order gradient gap shrinks linearly in alpha."""
        theta = build_network(TINY, 4).to_dtype(torch.float64).requires_grad_(True)
        ep = make_episode(torch.Generator().manual_seed(6), dtype=torch.float64)

        def gap(alpha):
            g2 = torch.autograd.grad(outer_loss(theta, ep, alpha, True),
                                     list(theta.entries.values()))
            g1 = torch.autograd.grad(outer_loss(theta, ep, alpha, False),
                                     list(theta.entries.values()))
            return math.sqrt(sum(float((a - b).pow(2).sum()) for a, b in zip(g2, g1)))

        d1, d2 = gap(0.01), gap(0.001)
        assert d1 > 0
        assert d2 == pytest.approx(d1 / 10, rel=0.2)


class TestMetaUpdate:
    def setup_method(self):
        self.hp = hp2(episode_batch=2, curriculum_start_iter=3, alpha_outer=0.01)
        self.state = init_meta_state(TINY, 0, self.hp)

    def episodes(self, seed):
        gen = torch.Generator().manual_seed(seed)
        return [make_episode(gen) for _ in range(2)]

    def test_counts_and_curriculum_flag(self):
        st = self.state
        assert st.iteration == 0 and not st.curriculum_active
        for i in range(1, 4):
            st, loss, acc = meta_update(st, self.episodes(i), self.hp)
            assert st.iteration == i
            assert st.curriculum_active == (i >= 3)
            assert math.isfinite(loss) and 0.0 <= acc <= 1.0

    def test_batch_size_enforced(self):
        with pytest.raises(InputError):
            meta_update(self.state, self.episodes(0)[:1], self.hp)

    def test_loss_is_sum_of_outer_losses(self):
        eps = self.episodes(7)
        want = sum(outer_loss(self.state.theta, ep, self.hp.alpha_inner).item()
                   for ep in eps)
        _, got, _ = meta_update(self.state, eps, self.hp)
        assert got == pytest.approx(want, rel=1e-5)

    def test_parameters_and_buffers_move(self):
        before = self.state.theta.checksum()
        w_before = self.state.theta.entries["head.weight"].detach().clone()
        b_before = {k: v.clone() for k, v in self.state.theta.buffers.items()}
        meta_update(self.state, self.episodes(8), self.hp)
        assert self.state.theta.checksum() != before
        assert not torch.equal(self.state.theta.entries["head.weight"].detach(), w_before)
        moved = any(not torch.equal(self.state.theta.buffers[k], v)
                    for k, v in b_before.items())
        assert moved

    def test_overfits_single_episode_batch(self):
        hp = hp2(episode_batch=2, curriculum_start_iter=10_000, alpha_outer=0.005)
        state = init_meta_state(TINY, 1, hp)
        eps = self.episodes(9)
        first = None
        for _ in range(150):
            state, loss, acc = meta_update(state, eps, hp)
            first = loss if first is None else first
        assert loss < first
        assert acc == 1.0

    def test_deterministic(self):
        a = init_meta_state(TINY, 5, self.hp)
        b = init_meta_state(TINY, 5, self.hp)
        assert a.theta.checksum() == b.theta.checksum()
        a, la, _ = meta_update(a, self.episodes(11), self.hp)
        b, lb, _ = meta_update(b, self.episodes(11), self.hp)
        assert la == lb
        assert a.theta.checksum() == b.theta.checksum()
