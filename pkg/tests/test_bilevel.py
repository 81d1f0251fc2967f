"""Schedules, optimizers, and the alternating search training loop."""

import csv
import math

import numpy as np
import pytest

from stereonas.bilevel import (
    AdamConfig,
    AdamState,
    Batch,
    BilevelState,
    SearchTrainConfig,
    SgdConfig,
    SgdState,
    StereoArrays,
    TrainSchedule,
    TrainValSplit,
    adam_step,
    alternate_step,
    cosine_lr,
    evaluate_epe,
    sample_batch,
    sgd_step,
    snapshot_restart,
    step_lr,
    train_derived,
    train_search,
    write_history,
)
from stereonas.cellspace import CellKind, CellTemplate, sample_random_genotype
from stereonas.errors import ConfigError, ShapeError
from stereonas.netbuilder import (
    DerivedNetConfig,
    SearchNetConfig,
    StackConfig,
    build_derived_net,
    build_search_net,
    build_stack,
    save_checkpoint,
)
from stereonas.tensor import Tensor

TEMPLATES = {
    CellKind.NORMAL: CellTemplate(CellKind.NORMAL),
    CellKind.REDUCTION: CellTemplate(CellKind.REDUCTION),
    CellKind.UPSAMPLING: CellTemplate(CellKind.UPSAMPLING),
}
GENOTYPE = sample_random_genotype(TEMPLATES, seed=3)

TINY_SEARCH = SearchNetConfig(c_init=2, num_encoder_cells=2, num_decoder_cells=1,
                              in_channels=1, max_disp=4)
TINY_DERIVED = DerivedNetConfig(c_init=2, num_encoder_cells=2, num_decoder_cells=1,
                                in_channels=1, max_disp=4)


def toy_split(n_train=12, n_val=8, h=16, w=32, seed=0):
    """Textured scenes with a constant disparity so short runs can learn."""
    rng = np.random.default_rng(seed)

    def make(n):
        ys, xs = np.mgrid[0:h, 0:w].astype(float)
        left = np.stack([
            np.sin(xs / rng.uniform(2, 5) + rng.uniform(0, 6))[None]
            * np.cos(ys / rng.uniform(2, 5))[None]
            for _ in range(n)
        ])
        right = np.roll(left, -2, axis=3)
        disp = np.full((n, 1, h, w), 2.0)
        return StereoArrays(left, right, disp)

    return TrainValSplit(make(n_train), make(n_val))


class TestSchedules:
    def test_cosine_endpoints(self):
        assert cosine_lr(0, 100, 0.025, 0.001) == pytest.approx(0.025, abs=1e-12)
        assert cosine_lr(100, 100, 0.025, 0.001) == pytest.approx(0.001, abs=1e-12)

    def test_cosine_midpoint(self):
        assert cosine_lr(50, 100, 0.02, 0.002) == pytest.approx(0.011, abs=1e-12)

    def test_cosine_formula(self):
        for t in (0, 7, 31, 64):
            want = 0.001 + 0.5 * (0.025 - 0.001) * (1 + math.cos(math.pi * t / 64))
            assert cosine_lr(t, 64, 0.025, 0.001) == pytest.approx(want, rel=1e-14)

    def test_cosine_rejects_bad_horizon(self):
        with pytest.raises(ConfigError):
            cosine_lr(0, 0, 0.1, 0.01)
        with pytest.raises(ConfigError):
            cosine_lr(11, 10, 0.1, 0.01)

    def test_step_lr_piecewise(self):
        ms = (300, 400, 500)
        assert step_lr(0, ms, 0.5, 1e-4) == 1e-4
        assert step_lr(299, ms, 0.5, 1e-4) == 1e-4
        assert step_lr(300, ms, 0.5, 1e-4) == 5e-5  # drop applies at the milestone
        assert step_lr(501, ms, 0.5, 1e-4) == pytest.approx(1e-4 / 8)

    def test_step_lr_constant_between_milestones(self):
        ms = (10, 20)
        vals = {step_lr(t, ms, 0.5, 1.0) for t in range(10, 20)}
        assert vals == {0.5}


class TestOptimizerConfigs:
    def test_sgd_bounds(self):
        with pytest.raises(ConfigError):
            SgdConfig(lr_base=0.001, lr_min=0.01)
        with pytest.raises(ConfigError):
            SgdConfig(lr_base=0.1, lr_min=0.0)

    def test_adam_bounds(self):
        with pytest.raises(ConfigError):
            AdamConfig(betas=(1.0, 0.999))
        with pytest.raises(ConfigError):
            AdamConfig(lr=0.0)


def vec(*vals):
    # engine tensors are 4-D; park small vectors along the channel axis
    return Tensor(np.array(vals).reshape(1, -1, 1, 1), requires_grad=True)


def grad(*vals):
    return np.array(vals).reshape(1, -1, 1, 1)


class TestSgd:
    def test_zero_grad_zero_decay_is_identity(self):
        p = vec(1.0, -2.0)
        cfg = SgdConfig(weight_decay=0.0)
        st = SgdState([p])
        sgd_step([p], [grad(0.0, 0.0)], cfg, st, lr=0.1)
        assert np.array_equal(p.data.ravel(), [1.0, -2.0])

    def test_quadratic_contraction(self):
        # f(x) = x^2 / 2, grad = x; plain descent contracts by (1 - lr) per step
        p = vec(1.0)
        cfg = SgdConfig(momentum=0.0, weight_decay=0.0)
        st = SgdState([p])
        for _ in range(200):
            sgd_step([p], [p.data.copy()], cfg, st, lr=0.1)
        x = p.data.ravel()[0]
        assert abs(x) < 1e-6
        assert x == pytest.approx(0.9 ** 200, rel=1e-9)

    def test_momentum_accumulates_velocity(self):
        p = vec(0.0)
        cfg = SgdConfig(momentum=0.9, weight_decay=0.0)
        st = SgdState([p])
        sgd_step([p], [grad(1.0)], cfg, st, lr=1.0)
        sgd_step([p], [grad(1.0)], cfg, st, lr=1.0)
        # steps: -1, then -(0.9 + 1)
        assert p.data.ravel()[0] == pytest.approx(-2.9)

    def test_weight_decay_is_plain_l2(self):
        p = vec(2.0)
        cfg = SgdConfig(momentum=0.0, weight_decay=0.5)
        st = SgdState([p])
        sgd_step([p], [grad(0.0)], cfg, st, lr=0.1)
        assert p.data.ravel()[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_shape_mismatch_rejected(self):
        p = vec(0.0, 0.0, 0.0)
        with pytest.raises(ShapeError):
            sgd_step([p], [grad(0.0, 0.0)], SgdConfig(), SgdState([p]), lr=0.1)


class TestAdam:
    @pytest.mark.parametrize("scale", [1e-6, 1.0, 1e6])
    def test_first_step_magnitude_is_lr(self, scale):
        p = vec(0.0)
        cfg = AdamConfig(lr=1e-3, weight_decay=0.0)
        st = AdamState([p])
        adam_step([p], [grad(scale)], cfg, st)
        assert abs(p.data.ravel()[0]) == pytest.approx(1e-3, rel=0.02)

    def test_zero_grad_zero_decay_is_identity(self):
        p = vec(3.0)
        cfg = AdamConfig(weight_decay=0.0)
        st = AdamState([p])
        adam_step([p], [grad(0.0)], cfg, st)
        assert np.array_equal(p.data.ravel(), [3.0])

    def test_none_grads_skipped(self):
        p = vec(1.0)
        q = vec(1.0)
        cfg = AdamConfig(weight_decay=0.0)
        st = AdamState([p, q])
        adam_step([p, q], [None, grad(1.0)], cfg, st)
        assert p.data.ravel()[0] == 1.0
        assert q.data.ravel()[0] != 1.0


class TestBatches:
    def test_arrays_validated(self):
        ok = np.zeros((2, 1, 8, 8))
        with pytest.raises(ShapeError):
            StereoArrays(ok, np.zeros((2, 1, 8, 4)), ok)
        with pytest.raises(ShapeError):
            StereoArrays(ok, ok, np.zeros((2, 2, 8, 8)))

    def test_sampling_deterministic(self):
        split = toy_split()
        a = sample_batch(split.train, np.random.default_rng(5), 4)
        b = sample_batch(split.train, np.random.default_rng(5), 4)
        assert np.array_equal(a.left, b.left)

    def test_aligned_crop(self):
        split = toy_split(h=32, w=32)
        rng = np.random.default_rng(1)
        for _ in range(10):
            batch = sample_batch(split.train, rng, 2, crop=(16, 16), align=8)
            assert batch.left.shape[2:] == (16, 16)

    def test_crop_violations_rejected(self):
        split = toy_split()
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            sample_batch(split.train, rng, 2, crop=(12, 12), align=8)
        with pytest.raises(ConfigError):
            sample_batch(split.train, rng, 2, crop=(64, 64), align=8)


class TestBilevelState:
    def test_single_transition(self):
        st = BilevelState(warm_start_iters=3, alternating_iters=2)
        phases = []
        for _ in range(5):
            phases.append(st.phase)
            st.advance()
        assert phases == ["warm", "warm", "warm", "alternating", "alternating"]

    def test_zero_warm_start(self):
        st = BilevelState(warm_start_iters=0, alternating_iters=2)
        assert st.phase == "alternating"

    def test_tau_anneals_linearly(self):
        st = BilevelState(warm_start_iters=0, alternating_iters=5,
                          tau_start=1.0, tau_end=0.2)
        taus = []
        for _ in range(5):
            taus.append(st.tau())
            st.advance()
        assert taus[0] == pytest.approx(1.0)
        assert taus[-1] == pytest.approx(0.2)
        diffs = np.diff(taus)
        assert np.allclose(diffs, diffs[0])


class TestAlternateStep:
    def _setup(self):
        net = build_search_net(TINY_SEARCH, seed=0)
        split = toy_split()
        rng = np.random.default_rng(0)
        bt = sample_batch(split.train, rng, 2, tag="train")
        bv = sample_batch(split.val, rng, 2, tag="val")
        return net, bt, bv

    def test_mislabeled_batches_rejected(self):
        net, bt, bv = self._setup()
        w_state, a_state = SgdState(net.params()), AdamState(net.alpha_params())
        with pytest.raises(ConfigError):
            alternate_step(net, net.alphas, bv, bt, SgdConfig(), w_state,
                           AdamConfig(), a_state, lr_w=0.01)

    def test_alpha_updates_with_w_frozen(self):
        # lr_w = 0 freezes w; alpha must still move and w must stay bitwise put
        net, bt, bv = self._setup()
        w_params = net.params()
        w_before = [p.data.copy() for p in w_params]
        a_before = [a.data.copy() for a in net.alpha_params()]
        w_state, a_state = SgdState(w_params), AdamState(net.alpha_params())
        lt, lv = alternate_step(net, net.alphas, bt, bv, SgdConfig(), w_state,
                                AdamConfig(lr=1e-2), a_state, lr_w=0.0)
        assert lt > 0 and lv > 0
        for p, before in zip(w_params, w_before):
            assert np.array_equal(p.data, before)
        moved = [not np.array_equal(a.data, b)
                 for a, b in zip(net.alpha_params(), a_before)]
        assert any(moved)

    def test_degenerate_split_accepted(self):
        net, bt, _ = self._setup()
        same_as_val = Batch(bt.left, bt.right, bt.disp, bt.valid, tag="val")
        w_state, a_state = SgdState(net.params()), AdamState(net.alpha_params())
        alternate_step(net, net.alphas, bt, same_as_val, SgdConfig(), w_state,
                       AdamConfig(), a_state, lr_w=0.001)

    def test_untagged_batches_accepted(self):
        net, bt, bv = self._setup()
        bt = Batch(bt.left, bt.right, bt.disp)
        bv = Batch(bv.left, bv.right, bv.disp)
        w_state, a_state = SgdState(net.params()), AdamState(net.alpha_params())
        alternate_step(net, net.alphas, bt, bv, SgdConfig(), w_state,
                       AdamConfig(), a_state, lr_w=0.001)


class TestTrainSearch:
    CFG = SearchTrainConfig(net=TINY_SEARCH, warm_start_iters=6,
                            alternating_iters=10, batch_size=2)

    def test_warm_start_leaves_alpha_at_init(self):
        cfg = SearchTrainConfig(net=TINY_SEARCH, warm_start_iters=5,
                                alternating_iters=0, batch_size=2)
        result = train_search(cfg, toy_split(), seed=0)
        for a in result.alphas.params():
            assert np.all(a.data == 0.0)

    def test_alternating_moves_alpha(self):
        result = train_search(self.CFG, toy_split(), seed=0)
        assert any(np.any(a.data != 0.0) for a in result.alphas.params())

    def test_determinism(self):
        r1 = train_search(self.CFG, toy_split(), seed=4)
        r2 = train_search(self.CFG, toy_split(), seed=4)
        for a, b in zip(r1.alphas.params(), r2.alphas.params()):
            assert np.array_equal(a.data, b.data)
        assert r1.history == r2.history

    def test_seed_changes_outcome(self):
        r1 = train_search(self.CFG, toy_split(), seed=1)
        r2 = train_search(self.CFG, toy_split(), seed=2)
        assert any(not np.array_equal(a.data, b.data)
                   for a, b in zip(r1.alphas.params(), r2.alphas.params()))

    def test_history_layout(self):
        result = train_search(self.CFG, toy_split(), seed=0)
        assert len(result.history) == 16
        warm = [row for row in result.history if row[1] == "warm"]
        alt = [row for row in result.history if row[1] == "alternating"]
        assert len(warm) == 6 and len(alt) == 10
        assert all(row[3] == "" for row in warm)  # no val loss during warm start
        assert all(isinstance(row[3], float) for row in alt)
        iters = [row[0] for row in result.history]
        assert iters == list(range(16))
        # lr column follows the cosine schedule over the whole run
        for row in result.history:
            assert row[4] == pytest.approx(cosine_lr(row[0], 16, 0.025, 0.001))

    def test_tau_column_anneals(self):
        result = train_search(self.CFG, toy_split(), seed=0)
        taus = [row[5] for row in result.history if row[1] == "alternating"]
        assert taus[0] == pytest.approx(1.0)
        assert taus[-1] == pytest.approx(0.2)

    def test_history_csv_roundtrip(self, tmp_path):
        result = train_search(self.CFG, toy_split(), seed=0)
        path = tmp_path / "history.csv"
        write_history(path, result.history)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iter", "phase", "train_epe", "val_epe", "lr", "tau"]
        assert len(rows) == 17
        assert rows[1][1] == "warm"


class TestTrainDerived:
    def _net(self, seed=0):
        return build_derived_net(GENOTYPE, TINY_DERIVED, seed=seed)

    def test_zero_iterations_returns_initial_epe(self):
        split = toy_split()
        net = self._net()
        want = evaluate_epe(net, split.val)
        result = train_derived(net, split, TrainSchedule(), budget_iters=0)
        assert result.final_epe == pytest.approx(want)
        assert result.history == []

    def test_loss_decreases_smoothed(self):
        split = toy_split()
        net = self._net(seed=1)
        sched = TrainSchedule(adam=AdamConfig(lr=3e-3, weight_decay=0.0),
                              batch_size=2)
        result = train_derived(net, split, sched, budget_iters=60, seed=0)
        first = float(np.mean(result.history[:15]))
        last = float(np.mean(result.history[-15:]))
        assert last < first

    def test_frozen_stack_updates_last_net_only(self):
        split = toy_split()
        stack = build_stack(GENOTYPE, StackConfig(roles=("c", "s")),
                            base_cfg=TINY_DERIVED, seed=2)
        first_before = [p.data.copy() for p in stack.nets[0].params()]
        last_before = [p.data.copy() for p in stack.nets[1].params()]
        train_derived(stack, split, TrainSchedule(batch_size=2), budget_iters=3)
        assert all(np.array_equal(p.data, b)
                   for p, b in zip(stack.nets[0].params(), first_before))
        assert any(not np.array_equal(p.data, b)
                   for p, b in zip(stack.nets[1].params(), last_before))


class TestSnapshotRestart:
    def _checkpoint(self, tmp_path, seed=0):
        net = build_derived_net(GENOTYPE, TINY_DERIVED, seed=seed)
        save_checkpoint(str(tmp_path), net)
        return net

    def test_zero_budget_preserves_epe(self, tmp_path):
        split = toy_split()
        net = self._checkpoint(tmp_path)
        want = evaluate_epe(net, split.val)
        got = snapshot_restart(str(tmp_path), lr=1e-3, weight_decay=0.0,
                               budget_iters=0, data=split)
        assert got == pytest.approx(want)

    def test_resume_is_bitwise(self, tmp_path):
        from stereonas.netbuilder import load_checkpoint

        net = self._checkpoint(tmp_path, seed=5)
        resumed = load_checkpoint(str(tmp_path))
        for a, b in zip(net.params(), resumed.params()):
            assert np.array_equal(a.data, b.data)

    def test_longer_budget_tends_to_help(self, tmp_path):
        # soft trend: more training at the same config wins in most seeds
        split = toy_split()
        self._checkpoint(tmp_path, seed=7)
        wins = 0
        for seed in (0, 1, 2):
            short = snapshot_restart(str(tmp_path), lr=3e-3, weight_decay=0.0,
                                     budget_iters=4, data=split, seed=seed)
            long = snapshot_restart(str(tmp_path), lr=3e-3, weight_decay=0.0,
                                    budget_iters=36, data=split, seed=seed)
            wins += long <= short
        assert wins >= 2

    def test_search_checkpoint_rejected(self, tmp_path):
        net = build_search_net(TINY_SEARCH, seed=0)
        save_checkpoint(str(tmp_path), net)
        with pytest.raises(ConfigError):
            snapshot_restart(str(tmp_path), lr=1e-3, weight_decay=0.0,
                             budget_iters=0, data=toy_split())
