import math

import numpy as np
import pytest

from tsnet.data import DatasetConfig, build_dataset
from tsnet.network import NetworkConfig
from tsnet.tensor import Tensor
from tsnet.training import (
    AdamState,
    Checkpoint,
    NonFiniteGradient,
    TrainConfig,
    adam_step,
    align,
    batch_indices,
    cer,
    clip_by_global_norm,
    derangement,
    edit_distance,
    evaluate,
    train,
)

# six-character lines all render at the same width, so batches carry no padding
TINY_DATA = DatasetConfig(alphabet="abcdef ", n_styles=2, tsi_per_style=1, lines_per_tsi=10,
                          min_chars=6, max_chars=6, test_fraction=0.2)


def tiny_net(ds, **kw):
    base = dict(num_classes=ds.alphabet.num_classes, conv_channels=[4, 4], rnn_hidden=8,
                embedding_dim=4)
    base.update(kw)
    return NetworkConfig(**base)


@pytest.fixture(scope="module")
def tiny():
    return build_dataset(TINY_DATA)


def param_bytes(model):
    return {k: v.data.tobytes() for k, v in model.parameters().items()}


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        x = Tensor(np.array([1.0]))
        adam_step({"x": x}, {"x": np.array([0.5])}, AdamState(), TrainConfig(learning_rate=0.1))
        assert x.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_zero_gradient_leaves_params(self):
        x = Tensor(np.array([1.0, -2.0]))
        state = AdamState()
        adam_step({"x": x}, {"x": np.zeros(2)}, state, TrainConfig())
        np.testing.assert_array_equal(x.data, [1.0, -2.0])
        assert state.step == 1

    def test_sign_symmetry(self):
        a, b = Tensor(np.array([0.0])), Tensor(np.array([0.0]))
        sa, sb = AdamState(), AdamState()
        for g in (0.3, -1.2, 2.0):
            adam_step({"x": a}, {"x": np.array([g])}, sa, TrainConfig())
            adam_step({"x": b}, {"x": np.array([-g])}, sb, TrainConfig())
        assert a.data[0] == -b.data[0]

    def test_non_finite_gradient_aborts_untouched(self):
        x = Tensor(np.array([1.0]))
        state = AdamState()
        with pytest.raises(NonFiniteGradient):
            adam_step({"x": x}, {"x": np.array([np.nan])}, state, TrainConfig())
        assert x.data[0] == 1.0 and state.step == 0

    def test_clip_by_global_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_by_global_norm(grads, 1.0) == 5.0
        np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])
        small = {"a": np.array([0.1])}
        clip_by_global_norm(small, 1.0)
        assert small["a"][0] == 0.1


class TestMetrics:
    @pytest.mark.parametrize("a,b,d", [("kitten", "sitting", 3), ("", "ab", 2), ("ab", "", 2),
                                       ("abc", "abc", 0), ("ab", "ba", 2)])
    def test_edit_distance(self, a, b, d):
        assert edit_distance(a, b) == d

    def test_edit_distance_against_alignment_cost(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = list(rng.integers(0, 3, int(rng.integers(0, 7))))
            b = list(rng.integers(0, 3, int(rng.integers(0, 7))))
            ops = align(a, b)
            assert sum(op != "match" for op, _, _ in ops) == edit_distance(a, b)
            assert [x for op, x, _ in ops if op != "ins"] == a
            assert [y for op, _, y in ops if op != "del"] == b

    def test_align_prefers_substitution(self):
        assert align("ab", "ac") == [("match", "a", "a"), ("sub", "b", "c")]
        assert align("abc", "ac") == [("match", "a", "a"), ("del", "b", None), ("match", "c", "c")]

    def test_cer_example(self):
        assert cer(["abcd"], ["abce"]) == 0.25
        assert cer(["ab", "cd"], ["ab", ""]) == 0.5

    def test_cer_empty_reference(self):
        with pytest.raises(ValueError):
            cer([""], ["a"])


class TestBatching:
    def test_each_epoch_visits_every_sample_once(self):
        seen = [k for it in range(5) for k in batch_indices(it, 4, 10, seed=1)]
        assert sorted(seen[:10]) == list(range(10)) and sorted(seen[10:20]) == list(range(10))

    def test_seeded(self):
        assert batch_indices(7, 5, 13, seed=3) == batch_indices(7, 5, 13, seed=3)
        assert batch_indices(0, 13, 13, seed=3) != batch_indices(0, 13, 13, seed=4)

    def test_derangement(self):
        m = derangement([0, 1, 2, 3], seed=0)
        assert sorted(m.values()) == [0, 1, 2, 3] and all(m[k] != k for k in m)
        assert derangement([5], seed=0) == {5: 5}


class TestCheckpoint:
    def test_byte_round_trip(self, tiny):
        result = train(tiny, tiny_net(tiny), TrainConfig(iterations=3, batch_size=4, eval_every=100))
        raw = result.checkpoint.to_bytes()
        back = Checkpoint.from_bytes(raw)
        assert back.to_bytes() == raw
        assert param_bytes(back.to_model()) == param_bytes(result.model)
        assert back.optimizer.step == 3

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            Checkpoint.from_bytes(b"NOTIT" + bytes(20))


class TestTrain:
    def test_serial_runs_are_identical(self, tiny):
        cfg = TrainConfig(iterations=6, batch_size=4, eval_every=100)
        a = train(tiny, tiny_net(tiny), cfg)
        b = train(tiny, tiny_net(tiny), cfg)
        assert param_bytes(a.model) == param_bytes(b.model)
        assert [r[1] for r in a.log] == [r[1] for r in b.log]

    def test_resume_reproduces_uninterrupted_run(self, tiny):
        cfg = TrainConfig(iterations=8, batch_size=4, eval_every=4)
        full = train(tiny, tiny_net(tiny), cfg)
        half = train(tiny, tiny_net(tiny), cfg, stop_at=4)
        rest = train(tiny, tiny_net(tiny), cfg, resume=Checkpoint.from_bytes(half.checkpoint.to_bytes()))
        assert param_bytes(rest.model) == param_bytes(full.model)
        assert half.log + rest.log == full.log

    def test_initial_loss_is_sane(self, tiny):
        result = train(tiny, tiny_net(tiny), TrainConfig(iterations=1, batch_size=8, eval_every=100))
        loss = result.log[0][1]
        # an untrained net is close to uniform: about frames * log(classes) per line
        assert 0 < loss < 20 * math.log(tiny.alphabet.num_classes) * 2

    def test_metric_log(self, tiny, tmp_path):
        path = tmp_path / "m.csv"
        train(tiny, tiny_net(tiny), TrainConfig(iterations=4, batch_size=4, eval_every=2), log_path=path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iter,loss,train_cer,test_cer"
        assert len(lines) == 5
        assert lines[1].split(",")[2] == "" and lines[2].split(",")[2] != ""

    def test_class_count_mismatch(self, tiny):
        with pytest.raises(ValueError):
            train(tiny, tiny_net(tiny, num_classes=20), TrainConfig(iterations=1))

    @pytest.mark.parametrize("head_mode", ["tsb", "frn_baseline"])
    def test_overfits_one_tsi(self, head_mode):
        ds = build_dataset(DatasetConfig(alphabet="abcdef ", n_styles=1, tsi_per_style=1, lines_per_tsi=10,
                                         min_chars=6, max_chars=6, test_fraction=0.0))
        net = NetworkConfig(num_classes=ds.alphabet.num_classes, rnn_hidden=32, embedding_dim=8,
                            head_mode=head_mode)
        cfg = TrainConfig(iterations=150, batch_size=10, eval_every=150, augment=False, learning_rate=3e-3)
        result = train(ds, net, cfg)
        assert result.log[-1][2] == 0.0
        assert result.log[-1][1] < result.log[0][1] / 100


@pytest.fixture(scope="module")
def model(tiny):
    return train(tiny, tiny_net(tiny), TrainConfig(iterations=2, batch_size=4, eval_every=100)).model


class TestEvaluate:
    def test_shuffled_with_identity_mapping_equals_given(self, tiny, model):
        samples = tiny.subset(tiny.test)
        given = evaluate(model, samples, tiny.alphabet)
        same = evaluate(model, samples, tiny.alphabet, "shuffled", mapping={t: t for t in tiny.tsis})
        assert given.rows == same.rows

    def test_shuffled_uses_other_tsi(self, tiny, model):
        res = evaluate(model, tiny.samples, tiny.alphabet, "shuffled", seed=1)
        assert all(used != tsi for _, tsi, used, *_ in res.rows)

    def test_fixed_needs_embedding(self, tiny, model):
        with pytest.raises(ValueError):
            evaluate(model, tiny.samples, tiny.alphabet, "fixed")

    def test_fixed_with_table_row_equals_given(self, tiny, model):
        samples = [s for s in tiny.samples if s.tsi == 1]
        given = evaluate(model, samples, tiny.alphabet)
        fixed = evaluate(model, samples, tiny.alphabet, "fixed", embedding=model.table.embedding(1))
        assert [r[4] for r in given.rows] == [r[4] for r in fixed.rows]

    def test_batch_independence(self, tiny, model):
        alone = evaluate(model, tiny.samples[:1], tiny.alphabet).rows[0][4]
        assert evaluate(model, tiny.samples, tiny.alphabet).rows[0][4] == alone
