"""Test-time adaptation, contrastive calibration, and evaluation harness tests."""

import json
import math

import pytest
import torch

import dfml.icfil as icfil_mod
from dfml.data import make_synthetic_blobs
from dfml.episodic import inner_adapt
from dfml.errors import InputError
from dfml.icfil import (AdaptedModel, EvalReport, IcfilConfig, calibration_loss,
                        evaluate, fast_adapt_test, icfil_calibrate, predict,
                        split_adapted, write_eval_report)
from dfml.inversion import InversionWeights
from dfml.nets import ArchSpec, build_network, forward
from dfml.seeding import make_generator

from oracles import contrastive_loops, finite_diff_grad, rel_err

TINY = ArchSpec("conv4", (1, 8, 8), 2, 1 / 16)


def tiny_adapted(seed=0, num_classes=2, dtype=torch.float32):
    net = build_network(ArchSpec("conv4", (1, 8, 8), num_classes, 1 / 16), seed)
    if dtype != torch.float32:
        net = net.to_dtype(dtype)
    return split_adapted(net)


def small_cfg(**kw):
    base = dict(pseudo_per_class=2, inversion_steps=3, head_iters=20,
                inversion_weights=InversionWeights())
    base.update(kw)
    return IcfilConfig(**base)


class TestSplitAdapted:
    def test_round_trip(self):
        net = build_network(TINY, 0)
        model = split_adapted(net)
        assert "head.weight" not in model.backbone_entries
        back = model.to_network()
        assert back.checksum() == net.checksum()
        assert list(back.entries) == list(net.entries)


class TestFastAdapt:
    def test_equals_inner_adapt_then_split(self):
        theta = build_network(TINY, 1)
        gen = torch.Generator().manual_seed(0)
        sup = torch.rand(2, 1, 8, 8, generator=gen)
        lbl = torch.tensor([0, 1])
        got = fast_adapt_test(theta, sup, lbl, 0.05)
        ref = inner_adapt(theta.clone().requires_grad_(True), sup, lbl, 0.05,
                          second_order=False)
        for k, v in got.backbone_entries.items():
            assert torch.equal(v, ref.entries[k].detach()), k
        assert torch.equal(got.head_weight, ref.entries["head.weight"].detach())
        assert not got.head_weight.requires_grad

    def test_source_theta_untouched(self):
        theta = build_network(TINY, 2)
        before = theta.checksum()
        gen = torch.Generator().manual_seed(1)
        fast_adapt_test(theta, torch.rand(2, 1, 8, 8, generator=gen),
                        torch.tensor([0, 1]), 0.05)
        assert theta.checksum() == before


class TestCalibrationLoss:
    def test_identical_pseudo_embeddings_closed_form(self):
        """P identical pseudo images give a uniform softmax, so the loss is
        (total positive pairs) * log(P) exactly."""
        model = tiny_adapted(0)
        gen = torch.Generator().manual_seed(0)
        real = torch.rand(2, 1, 8, 8, generator=gen)
        one = torch.rand(1, 1, 8, 8, generator=gen)
        pseudo = one.repeat(4, 1, 1, 1)
        loss = calibration_loss(model, real, torch.tensor([0, 1]), pseudo,
                                torch.tensor([0, 0, 1, 1]), tau=0.1)
        # each of the 2 real images has 2 positives -> 4 * log 4
        assert loss.item() == pytest.approx(4 * math.log(4), rel=1e-5)

    def test_large_tau_limit(self):
        """As tau -> inf all similarities vanish and the softmax is uniform."""
        model = tiny_adapted(1)
        gen = torch.Generator().manual_seed(1)
        real = torch.rand(3, 1, 8, 8, generator=gen)
        pseudo = torch.rand(6, 1, 8, 8, generator=gen)
        rl = torch.tensor([0, 1, 0])
        pl = torch.tensor([0, 0, 0, 1, 1, 1])
        loss = calibration_loss(model, real, rl, pseudo, pl, tau=1e6)
        pos_pairs = sum((pl == l).sum().item() for l in rl.tolist())
        assert loss.item() == pytest.approx(pos_pairs * math.log(6), abs=1e-3)

    @pytest.mark.parametrize("normalize", [True, False])
    def test_matches_loop_oracle(self, normalize):
        model = tiny_adapted(2)
        gen = torch.Generator().manual_seed(2)
        real = torch.rand(3, 1, 8, 8, generator=gen)
        pseudo = torch.rand(5, 1, 8, 8, generator=gen)
        rl = torch.tensor([0, 1, 1])
        pl = torch.tensor([0, 0, 1, 1, 1])
        got = calibration_loss(model, real, rl, pseudo, pl, tau=0.3,
                               normalize=normalize).item()
        zr = forward(model.to_network(), real, "batch_stats").embedding.detach()
        zp = forward(model.to_network(), pseudo, "batch_stats").embedding.detach()
        want = contrastive_loops(zr, rl.tolist(), zp, pl.tolist(), 0.3, normalize)
        assert got == pytest.approx(want, rel=1e-4)

    def test_pseudo_order_permutation_invariant(self):
        model = tiny_adapted(3)
        gen = torch.Generator().manual_seed(3)
        real = torch.rand(2, 1, 8, 8, generator=gen)
        pseudo = torch.rand(4, 1, 8, 8, generator=gen)
        rl = torch.tensor([0, 1])
        pl = torch.tensor([0, 1, 0, 1])
        a = calibration_loss(model, real, rl, pseudo, pl, 0.2).item()
        perm = torch.tensor([3, 1, 2, 0])
        b = calibration_loss(model, real, rl, pseudo[perm], pl[perm], 0.2).item()
        assert a == pytest.approx(b, rel=1e-5)

    def test_rejections(self):
        model = tiny_adapted(4)
        gen = torch.Generator().manual_seed(4)
        real = torch.rand(2, 1, 8, 8, generator=gen)
        pseudo = torch.rand(2, 1, 8, 8, generator=gen)
        rl = torch.tensor([0, 1])
        with pytest.raises(InputError):
            calibration_loss(model, real, rl, pseudo, torch.tensor([0, 1]), tau=0.0)
        with pytest.raises(InputError):
            calibration_loss(model, real, rl, torch.zeros(0, 1, 8, 8),
                             torch.zeros(0, dtype=torch.long), tau=0.1)
        with pytest.raises(InputError):
            calibration_loss(model, real, rl, pseudo, torch.tensor([0, 0]), tau=0.1)

    def test_backbone_gradient_matches_finite_differences(self):
        model = tiny_adapted(5, dtype=torch.float64)
        gen = torch.Generator().manual_seed(5)
        real = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64)
        pseudo = torch.rand(4, 1, 8, 8, generator=gen, dtype=torch.float64)
        rl = torch.tensor([0, 1])
        pl = torch.tensor([0, 0, 1, 1])

        for k in model.backbone_entries:
            model.backbone_entries[k].requires_grad_(True)
        loss = calibration_loss(model, real, rl, pseudo, pl, tau=0.5)
        grads = torch.autograd.grad(loss, list(model.backbone_entries.values()))

        for (name, p), g in zip(model.backbone_entries.items(), grads):
            def fn(t, name=name):
                entries = {k: v.detach().clone() for k, v in model.backbone_entries.items()}
                entries[name] = t.to(torch.float64)
                from collections import OrderedDict
                trial = AdaptedModel(OrderedDict(entries), model.buffers,
                                     model.head_weight.detach(), model.head_bias.detach(),
                                     model.spec)
                return calibration_loss(trial, real, rl, pseudo, pl, tau=0.5).item()
            fd = finite_diff_grad(fn, p, h=1e-5)
            assert rel_err(g.detach(), fd, floor=1e-5) < 1e-3, name


class TestIcfilCalibrate:
    def support(self, seed=0):
        gen = torch.Generator().manual_seed(seed)
        return torch.rand(4, 1, 8, 8, generator=gen), torch.tensor([0, 0, 1, 1])

    def test_deterministic(self):
        model = tiny_adapted(0)
        sup, lbl = self.support()
        a = icfil_calibrate(model, sup, lbl, small_cfg(seed=3))
        b = icfil_calibrate(model, sup, lbl, small_cfg(seed=3))
        assert torch.equal(a.head_weight, b.head_weight)
        for k in a.backbone_entries:
            assert torch.equal(a.backbone_entries[k], b.backbone_entries[k])

    def test_backbone_frozen_when_disabled(self):
        model = tiny_adapted(1)
        sup, lbl = self.support(1)
        out = icfil_calibrate(model, sup, lbl, small_cfg(calibrate_backbone=False))
        for k, v in out.backbone_entries.items():
            assert torch.equal(v, model.backbone_entries[k].detach()), k

    def test_backbone_moves_when_enabled(self):
        model = tiny_adapted(2)
        sup, lbl = self.support(2)
        out = icfil_calibrate(model, sup, lbl, small_cfg(backbone_lr=1e-3))
        moved = any(not torch.equal(v, model.backbone_entries[k].detach())
                    for k, v in out.backbone_entries.items())
        assert moved

    def test_head_is_retrained_and_fits_support(self):
        # wider net -> 8-dim embeddings, where 4 random points are separable
        model = split_adapted(build_network(ArchSpec("conv4", (1, 8, 8), 2, 1 / 4), 3))
        sup, lbl = self.support(3)
        out = icfil_calibrate(model, sup, lbl, small_cfg(head_iters=100))
        assert not torch.equal(out.head_weight, model.head_weight)
        preds = predict(out, sup)
        assert (preds == lbl).float().mean().item() == 1.0

    def test_empty_support_rejected(self):
        model = tiny_adapted(4)
        with pytest.raises(InputError):
            icfil_calibrate(model, torch.zeros(0, 1, 8, 8),
                            torch.zeros(0, dtype=torch.long), small_cfg())


class TestPredict:
    def test_zero_head_ties_break_to_first_class(self):
        model = tiny_adapted(0, num_classes=3)
        model.head_weight = torch.zeros_like(model.head_weight)
        model.head_bias = torch.zeros_like(model.head_bias)
        preds = predict(model, torch.rand(5, 1, 8, 8))
        assert preds.tolist() == [0] * 5

    def test_single_query_accepted(self):
        model = tiny_adapted(1)
        assert predict(model, torch.rand(1, 1, 8, 8)).shape == (1,)


class TestEvaluateStatistics:
    def scripted(self, monkeypatch, accs):
        it = iter(accs)
        recorded = []

        def fake_run_task(theta, splits, N, K, M, use_icfil, alpha_inner, cfg,
                          task_index, task_seed):
            recorded.append(task_index)
            return next(it)

        monkeypatch.setattr(icfil_mod, "_run_task", fake_run_task)
        theta = build_network(TINY, 0)
        report = evaluate(theta, [(None, {0, 1})], 2, 1, 1, len(accs), False,
                          make_generator(0))
        return report, recorded

    def test_two_task_hand_values(self, monkeypatch):
        report, _ = self.scripted(monkeypatch, [1.0, 0.0])
        assert report.mean == pytest.approx(0.5, abs=1e-12)
        assert report.std == pytest.approx(math.sqrt(0.5), abs=1e-12)
        assert report.ci95 == pytest.approx(1.96 * math.sqrt(0.5) / math.sqrt(2), abs=1e-12)
        assert report.num_tasks == 2
        assert report.per_task_acc == [1.0, 0.0]

    def test_four_task_hand_values(self, monkeypatch):
        accs = [1.0, 0.0, 1.0, 1.0]
        report, recorded = self.scripted(monkeypatch, accs)
        mean = 0.75
        std = math.sqrt(sum((a - mean) ** 2 for a in accs) / 3)
        assert report.mean == pytest.approx(mean, abs=1e-12)
        assert report.std == pytest.approx(std, abs=1e-12)
        assert report.ci95 == pytest.approx(1.96 * std / 2, abs=1e-12)
        assert recorded == [0, 1, 2, 3]

    def test_single_task_zero_std(self, monkeypatch):
        report, _ = self.scripted(monkeypatch, [0.8])
        assert report.std == 0.0 and report.ci95 == 0.0

    def test_zero_tasks_rejected(self):
        theta = build_network(TINY, 0)
        with pytest.raises(InputError):
            evaluate(theta, [(None, {0, 1})], 2, 1, 1, 0, False, make_generator(0))

    def test_empty_splits_rejected(self):
        theta = build_network(TINY, 0)
        with pytest.raises(InputError):
            evaluate(theta, [], 2, 1, 1, 1, False, make_generator(0))


@pytest.fixture(scope="module")
def eval_setup():
    ds = make_synthetic_blobs(6, 6, (1, 8, 8), 0)
    theta = build_network(TINY, 0)
    return theta, [(ds, {0, 1, 2, 3, 4, 5})]


class TestEvaluateEndToEnd:
    def test_deterministic_in_rng(self, eval_setup):
        theta, splits = eval_setup
        a = evaluate(theta, splits, 2, 1, 2, 6, False, make_generator(4))
        b = evaluate(theta, splits, 2, 1, 2, 6, False, make_generator(4))
        c = evaluate(theta, splits, 2, 1, 2, 6, False, make_generator(5))
        assert a.per_task_acc == b.per_task_acc
        assert a.per_task_acc != c.per_task_acc or a.mean == c.mean  # seeds differ

    def test_parallel_matches_serial(self, eval_setup):
        theta, splits = eval_setup
        a = evaluate(theta, splits, 2, 1, 2, 6, False, make_generator(7), parallel=1)
        b = evaluate(theta, splits, 2, 1, 2, 6, False, make_generator(7), parallel=2)
        assert a.per_task_acc == b.per_task_acc

    def test_calibration_invoked_per_task(self, eval_setup, monkeypatch):
        theta, splits = eval_setup
        calls = []
        real = icfil_mod.icfil_calibrate

        def spy(adapted, sup, lbl, cfg):
            calls.append(cfg.seed)
            return real(adapted, sup, lbl, cfg)

        monkeypatch.setattr(icfil_mod, "icfil_calibrate", spy)
        evaluate(theta, splits, 2, 1, 1, 3, True, make_generator(0),
                 icfil_cfg=small_cfg())
        assert len(calls) == 3
        assert len(set(calls)) == 3  # per-task calibration seeds differ
        calls.clear()
        evaluate(theta, splits, 2, 1, 1, 3, False, make_generator(0))
        assert calls == []

    def test_calibration_changes_predictions_path(self, eval_setup, monkeypatch):
        """If calibration output decided nothing, a poisoned calibrator would
        not move accuracy; it must."""
        theta, splits = eval_setup

        def poison(adapted, sup, lbl, cfg):
            adapted.head_weight = torch.zeros_like(adapted.head_weight)
            # huge bias on class 1 -> predict everything as class 1
            bias = torch.zeros_like(adapted.head_bias)
            bias[1] = 1e6
            adapted.head_bias = bias
            return adapted

        monkeypatch.setattr(icfil_mod, "icfil_calibrate", poison)
        report = evaluate(theta, splits, 2, 1, 3, 5, True, make_generator(1),
                          icfil_cfg=small_cfg())
        assert report.mean == pytest.approx(0.5)  # exactly the class-1 share

    def test_metadata_echoes_settings(self, eval_setup):
        theta, splits = eval_setup
        r = evaluate(theta, splits, 2, 1, 2, 2, True, make_generator(0),
                     icfil_cfg=small_cfg(tau=0.7))
        assert r.metadata["way"] == 2
        assert r.metadata["use_icfil"] is True
        assert r.metadata["icfil_tau"] == 0.7


class TestWriteReport:
    def test_json_round_trip(self, tmp_path):
        report = EvalReport([1.0, 0.5], 0.75, 0.3536, 0.49, 2, {"way": 2})
        path = tmp_path / "report.json"
        write_eval_report(report, path, config_echo={"hash": "abc"})
        data = json.loads(path.read_text())
        assert data["mean"] == 0.75
        assert data["num_tasks"] == 2
        assert data["per_task_acc"] == [1.0, 0.5]
        assert data["metadata"]["way"] == 2
        assert data["config"]["hash"] == "abc"
