from dataclasses import replace

import numpy as np
import pytest

from clim.config import DESK_LR
from clim.core import AdamWState, ContractError, lr_at
from clim.data import DomainPreset, synth_generate
from clim.losses import LossConfig
from clim.model import ModelSpec, dann_lambda, init_params
from clim.training import TrainConfig, TrainState, epoch_records, train, train_base, train_step_clim, train_step_dann

SPEC = ModelSpec(input_dim=16, encoder_hidden=(32,), encoder_out=16, proj_hidden=16, proj_out=8,
                 classifier_hidden=8)


@pytest.fixture(scope="module")
def small_data():
    return synth_generate(DomainPreset("s", 200, 300, 3.0), DomainPreset("t", 200, 400, 1.5), seed=0)


def small_cfg(**kw):
    base = dict(epochs=2, batch_size=8, labeled_batch_size=16, lr=DESK_LR, n_dev=40, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _state(spec=SPEC, seed=0, total=10, wd=0.01):
    p = init_params(spec, seed)
    return TrainState(p, AdamWState.zeros_like(p.tensors, weight_decay=wd), 0, total)


def _batches(rng):
    lab = (rng.normal(size=(6, 16)), rng.integers(0, 2, size=6))
    con = rng.normal(size=(8, 16))
    unl = rng.normal(size=(8, 16))
    return lab, con, unl


class TestClimStep:
    def test_ablated_step_equals_supervised_step(self):
        lab, con, unl = _batches(np.random.default_rng(0))
        cfg = small_cfg(lr=0.01, warmup_frac=0.1, loss=LossConfig(lambda_con=0.0))
        s = replace(_state(), t=3)
        full, losses = train_step_clim(s, lab, con, None, cfg)
        sup, _ = train_step_clim(s, lab, None, None, replace(cfg, system="base"))
        for k in full.params.tensors:
            assert full.params[k].tobytes() == sup.params[k].tobytes()
        assert losses["con"] > 0

    def test_finite_after_step(self):
        lab, con, unl = _batches(np.random.default_rng(1))
        cfg = small_cfg()
        s, _ = train_step_clim(replace(_state(), t=5), lab, con, unl, cfg)
        _, again = train_step_clim(s, lab, con, unl, cfg)
        assert np.isfinite(again["total"]) and np.isfinite(again["grad_norm"])

    def test_zero_lr_keeps_params(self):
        lab, con, unl = _batches(np.random.default_rng(2))
        s = _state()
        new, losses = train_step_clim(s, lab, con, unl, small_cfg())  # t=0: warmup lr is 0
        assert losses["lr"] == 0.0
        for k in s.params.tensors:
            np.testing.assert_array_equal(new.params[k], s.params[k])
        assert all(np.isfinite(losses[k]) for k in ("total", "con", "sent", "mi"))
        assert new.t == 1 and new.opt.t == 1


class TestDannStep:
    def _setup(self, t, total=10):
        spec = replace(SPEC, with_domain_head=True)
        r = np.random.default_rng(0)
        lab = (r.normal(size=(6, 16)), r.integers(0, 2, size=6))
        mixed = (r.normal(size=(8, 16)), np.repeat([0, 1], 4))
        return replace(_state(spec, total=total), t=t), lab, mixed

    def test_schedule_start_blocks_domain_gradient(self):
        s, lab, mixed = self._setup(0)
        cfg = small_cfg(system="dann", lr=0.01)
        from clim.core import GradTape
        from clim.losses import domain_ce
        from clim.model import domain_logits, encode

        tape = GradTape()
        leaves = {k: tape.leaf(v) for k, v in s.params.tensors.items()}
        l_dom = domain_ce(domain_logits(leaves, encode(leaves, mixed[0]), 0.0), mixed[1])
        grads = dict(zip(leaves, tape.gradient(l_dom, list(leaves.values()))))
        for k, g in grads.items():
            if k.startswith("enc."):
                assert not g.any()
            if k.startswith("dom.W"):
                assert g.any()
        _, losses = train_step_dann(s, lab, mixed, cfg)
        assert losses["dann_lambda"] == 0.0

    def test_schedule_end(self):
        s, lab, mixed = self._setup(10, total=10)
        s = replace(s, t=10, total_steps=10)
        cfg = small_cfg(system="dann", dann_gamma=1.0)
        # step t == T is past the last scheduled update, lr_at(T) == 0
        _, losses = train_step_dann(s, lab, mixed, cfg)
        assert losses["dann_lambda"] == pytest.approx(0.46212, abs=1e-5)
        assert losses["dann_lambda"] == dann_lambda(1.0, 1.0)

    def test_single_domain_batch(self):
        s, lab, (X, _) = self._setup(4)
        new, losses = train_step_dann(s, lab, (X, np.zeros(8, dtype=int)), small_cfg(system="dann"))
        assert np.isfinite(losses["domain"]) and new.t == 5


class TestTrain:
    def test_history_length(self, small_data):
        _, hist = train(small_cfg(epochs=3), small_data, spec=SPEC)
        assert len(hist) == 3
        assert [r.epoch for r in hist] == [1, 2, 3]

    @pytest.mark.parametrize("system", ["base", "dann", "clim"])
    def test_deterministic(self, small_data, system):
        a, ha = train(small_cfg(system=system), small_data, spec=SPEC)
        b, hb = train(small_cfg(system=system), small_data, spec=SPEC)
        for k in a.tensors:
            assert a[k].tobytes() == b[k].tobytes()
        assert ha == hb

    def test_base_reduction_identity(self, small_data):
        cfg = small_cfg(weight_decay=1e-4, mi_enabled=False, loss=LossConfig(lambda_con=0.0))
        clim_p, _ = train(cfg, small_data, spec=SPEC)
        base_p, _ = train_base(cfg, small_data, spec=SPEC)
        for k in clim_p.tensors:
            assert clim_p[k].tobytes() == base_p[k].tobytes()

    def test_lr_trace(self, small_data):
        cfg = small_cfg(epochs=2)
        _, hist = train(cfg, small_data, spec=SPEC, log_steps=True)
        steps = [r for r in hist if r.mean_margin is None]
        total = len(steps)
        assert total == 2 * int(np.ceil(160 / 16))
        for r in steps:
            assert r.lr == lr_at(r.step - 1, total, cfg.lr, 0.1)
        assert len(epoch_records(hist)) == 2

    def test_metric_ranges(self, small_data):
        _, hist = train(small_cfg(), small_data, spec=SPEC)
        for r in hist:
            assert 0 <= r.dev_accuracy <= 1 and 0 <= r.target_accuracy <= 1
            assert 0 <= r.marginal_entropy <= np.log(2) + 1e-12
            assert 0 <= r.mean_margin <= 1

    def test_both_domain_and_labeled_contrastive(self, small_data):
        cfg = small_cfg(strategy="both-domain", contrastive_labeled=True)
        _, hist = train(cfg, small_data, spec=SPEC)
        assert np.isfinite(hist[-1].loss_total)

    def test_weight_decay_defaults(self):
        assert TrainConfig(system="base").decay == 1e-4
        assert TrainConfig(system="clim").decay == 0.01
        assert TrainConfig(system="base", weight_decay=0.5).decay == 0.5

    def test_empty_pool(self, small_data):
        data = dict(small_data)
        data["target_unlabeled"] = data["target_unlabeled"].subset([])
        with pytest.raises(ContractError):
            train(small_cfg(), data, spec=SPEC)

    def test_bad_config(self):
        with pytest.raises(ContractError):
            TrainConfig(system="mmd")
        with pytest.raises(ContractError):
            TrainConfig(strategy="cross")
