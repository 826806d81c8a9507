import numpy as np
import pytest

from sqakd import quantizers as Q
from sqakd import tensor as T
from sqakd.data import Dataset, gen_blobs, train_test_split
from sqakd.errors import ConfigError, DataError, MissingLabelsError, NumericError
from sqakd.losses import Mode, ObjectiveSpec
from sqakd.network import attach_quantizers, build_cnn, build_mlp
from sqakd.tensor import Tensor
from sqakd.training import (
    CSV_HEADER,
    SGD,
    RunRecord,
    TrainPlan,
    evaluate,
    lr_at,
    sweep_lambda,
    train_sqakd,
    train_teacher,
)


from functools import lru_cache


@lru_cache(maxsize=None)
def make_blob_setup(seed=0, n=256, classes=2, teacher_epochs=15):
    ds = gen_blobs(n, classes, seed=seed)
    train, test = train_test_split(ds, 0.25, seed=seed + 1)
    teacher = build_mlp(2, classes, np.random.Generator(np.random.PCG64(seed + 2)))
    plan = TrainPlan(ObjectiveSpec(Mode.CE_ONLY, 0.0, 4.0), epochs=teacher_epochs, batch_size=32, seed=seed)
    record = train_teacher(teacher, train, plan, test)
    return train, test, teacher, record


def make_student(classes=2, seed=3, kind="ewgs", bits_w=2, bits_a=2, rule=None):
    student = build_mlp(2, classes, np.random.Generator(np.random.PCG64(seed)))
    attach_quantizers(student, kind, bits_w, bits_a, rule or Q.BackwardRule.ewgs(0.1))
    return student


class TestLrSchedule:
    def test_zero_at_start_with_warmup(self):
        assert lr_at(0, 1e-3, warmup_iters=10, total_iters=100) == 0.0

    def test_exact_at_warmup_end(self):
        assert lr_at(10, 1e-3, warmup_iters=10, total_iters=100) == 1e-3

    def test_zero_at_final_iteration(self):
        assert abs(lr_at(99, 1e-3, warmup_iters=10, total_iters=100)) <= 1e-12
        assert abs(lr_at(49, 0.5, warmup_iters=0, total_iters=50)) <= 1e-12

    def test_monotone_decay_after_warmup(self):
        values = [lr_at(i, 1e-3, 5, 50) for i in range(5, 50)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_linear_ramp(self):
        np.testing.assert_allclose(lr_at(5, 1.0, 10, 100), 0.5, atol=1e-12)


class TestTrainTeacher:
    def test_blobs_accuracy_with_logistic_oracle(self):
        from sklearn.linear_model import LogisticRegression

        train, test, _, record = make_blob_setup(seed=0, teacher_epochs=20)
        oracle = LogisticRegression().fit(train.x, train.y)
        assert oracle.score(test.x, test.y) >= 0.95
        assert record.final_test_acc >= 0.95

    def test_zero_epochs_keeps_initialization(self):
        train, _, _, _ = make_blob_setup(seed=1, teacher_epochs=15)
        net = build_mlp(2, 2, np.random.Generator(np.random.PCG64(5)))
        before = net.param_state()
        plan = TrainPlan(ObjectiveSpec(Mode.CE_ONLY, 0.0), epochs=0, batch_size=32, seed=0)
        record = train_teacher(net, train, plan)
        after = net.param_state()
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert record.rows == []

    def test_deterministic_given_seed(self):
        def run():
            train, _, _, _ = make_blob_setup(seed=2, teacher_epochs=5)
            net = build_mlp(2, 2, np.random.Generator(np.random.PCG64(7)))
            plan = TrainPlan(ObjectiveSpec(Mode.CE_ONLY, 0.0), epochs=5, batch_size=32, seed=3)
            train_teacher(net, train, plan)
            return net.param_hash()

        assert run() == run()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_restores_last_good_state(self):
        train, _, _, _ = make_blob_setup(seed=3, teacher_epochs=5)
        net = build_mlp(2, 2, np.random.Generator(np.random.PCG64(8)))
        before = net.param_state()
        plan = TrainPlan(ObjectiveSpec(Mode.CE_ONLY, 0.0), optimizer="sgd", lr=1e12, grad_clip=0.0, epochs=3, batch_size=32, seed=0)
        record = train_teacher(net, train, plan)
        assert record.diverged
        after = net.param_state()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_rejects_quantized_network(self):
        train, _, _, _ = make_blob_setup(seed=4, teacher_epochs=1)
        net = make_student()
        with pytest.raises(ConfigError):
            train_teacher(net, train, TrainPlan(ObjectiveSpec(Mode.CE_ONLY, 0.0), epochs=1))

    def test_rejects_unlabeled_data(self):
        train, _, _, _ = make_blob_setup(seed=5, teacher_epochs=1)
        net = build_mlp(2, 2, np.random.Generator(np.random.PCG64(9)))
        with pytest.raises(MissingLabelsError):
            train_teacher(net, train.without_labels(), TrainPlan(ObjectiveSpec(Mode.CE_ONLY, 0.0), epochs=1))


class TestEvaluate:
    def test_memorizing_net_scores_one(self):
        train, _, teacher, _ = make_blob_setup(seed=0, teacher_epochs=20)
        assert evaluate(teacher, False, train) == 1.0

    def test_random_labels_score_chance(self, rng):
        x = rng.standard_normal((10_000, 2)).astype(np.float32)
        y = rng.integers(0, 10, size=10_000)
        ds = Dataset(x, y, 10)
        net = build_mlp(2, 10, np.random.Generator(np.random.PCG64(0)))
        acc = evaluate(net, False, ds)
        assert abs(acc - 0.1) <= 0.03

    def test_matches_training_time_eval_bit_exact(self):
        _, test, teacher, record = make_blob_setup(seed=1, teacher_epochs=5)
        assert evaluate(teacher, False, test) == record.final_test_acc

    def test_empty_dataset_rejected(self):
        net = build_mlp(2, 2)
        empty = Dataset(np.zeros((0, 2), dtype=np.float32), np.zeros(0, dtype=np.int64), 2)
        with pytest.raises(DataError):
            evaluate(net, False, empty)

    def test_unlabeled_dataset_rejected(self):
        net = build_mlp(2, 2)
        ds = gen_blobs(10, 2, seed=0).without_labels()
        with pytest.raises(DataError):
            evaluate(net, False, ds)


class TestTrainSqakd:
    def test_self_supervised_run_completes_without_labels(self):
        train, test, teacher, _ = make_blob_setup(seed=0)
        student = make_student()
        plan = TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0, 4.0), epochs=5, batch_size=32, seed=0)
        record = train_sqakd(teacher, student, train.without_labels(), plan, test.without_labels())
        assert len(record.rows) == 5 * 6
        assert all(r["ce_loss"] is None for r in record.rows)
        assert all(r["kl_loss"] is not None for r in record.rows)

    def test_ce_mode_without_labels_raises_missing_labels(self):
        train, _, teacher, _ = make_blob_setup(seed=0)
        student = make_student()
        plan = TrainPlan(ObjectiveSpec(Mode.CE_ONLY, 0.0, 4.0), epochs=1, batch_size=32, seed=0)
        with pytest.raises(MissingLabelsError):
            train_sqakd(teacher, student, train.without_labels(), plan)

    def test_passthrough_with_zero_lr_matches_teacher_exactly(self):
        train, test, teacher, _ = make_blob_setup(seed=0)
        student = build_mlp(2, 2, np.random.Generator(np.random.PCG64(99)))  # no quantizers
        plan = TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0, 4.0), lr=0.0, epochs=2, batch_size=32, seed=0)
        train_sqakd(teacher, student, train, plan, test)
        assert evaluate(student, True, test) == evaluate(teacher, False, test)
        t_state = teacher.param_state()
        s_state = student.param_state()
        assert all(np.array_equal(t_state[k], s_state[k]) for k in t_state)

    def test_from_teacher_reinitializes_weight_quantizers(self):
        train, _, teacher, _ = make_blob_setup(seed=0)
        student = make_student()
        plan = TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0, 4.0), epochs=0, batch_size=32, seed=0)
        train_sqakd(teacher, student, train, plan)
        layer = student.parametric_layers()[1][1]
        teacher_layer = teacher.parametric_layers()[1][1]
        assert np.array_equal(layer.W.data, teacher_layer.W.data)
        assert float(layer.weight_q.clip_params["p1"].data) == float(teacher_layer.W.data.min())
        assert float(layer.weight_q.clip_params["p2"].data) == float(teacher_layer.W.data.max())

    def test_teacher_frozen_and_hash_stable(self):
        train, test, teacher, _ = make_blob_setup(seed=0)
        h0 = teacher.param_hash()
        student = make_student()
        plan = TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0, 4.0), epochs=3, batch_size=32, seed=0)
        train_sqakd(teacher, student, train, plan, test)
        assert teacher.param_hash() == h0

    def test_latent_weights_stay_full_precision(self):
        train, test, teacher, _ = make_blob_setup(seed=0)
        student = make_student(bits_w=2, bits_a=2)
        plan = TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0, 4.0), epochs=5, batch_size=32, seed=0)
        train_sqakd(teacher, student, train, plan, test)
        layer = student.parametric_layers()[1][1]
        assert len(np.unique(layer.W.data)) > 2**2
        materialized = Q.quantize_array(layer.W.data, layer.weight_q)
        again = Q.quantize_array(materialized, layer.weight_q)
        assert len(np.unique(materialized)) <= 2**2
        assert np.array_equal(materialized, again)

    def test_quantizer_params_train(self):
        train, test, teacher, _ = make_blob_setup(seed=0)
        student = make_student()
        plan = TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0, 4.0), epochs=0, batch_size=32, seed=0)
        train_sqakd(teacher, student, train, plan)
        layer = student.parametric_layers()[1][1]
        p_before = float(layer.weight_q.clip_params["p1"].data)
        plan = TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0, 4.0), epochs=5, batch_size=32, seed=0)
        train_sqakd(teacher, student, train, plan, test)
        assert float(layer.weight_q.clip_params["p1"].data) != p_before

    def test_bit_exact_replay(self):
        def run():
            train, test, teacher, _ = make_blob_setup(seed=0)
            student = make_student()
            plan = TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0, 4.0), epochs=4, batch_size=32, seed=0)
            record = train_sqakd(teacher, student, train, plan, test)
            return student.param_hash(), [(r["kl_loss"], r["total_loss"]) for r in record.rows]

        assert run() == run()

    def test_topology_mismatch_rejected(self):
        train, _, teacher, _ = make_blob_setup(seed=0)
        student = build_mlp(2, 3, np.random.Generator(np.random.PCG64(1)))
        with pytest.raises(ConfigError):
            train_sqakd(teacher, student, train, TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0), epochs=1))

    def test_missing_teacher_rejected(self):
        train, _, _, _ = make_blob_setup(seed=0)
        student = make_student()
        with pytest.raises(ConfigError):
            train_sqakd(None, student, train, TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0), epochs=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_input_raises_numeric_error_with_context(self):
        train, _, teacher, _ = make_blob_setup(seed=0)
        poisoned = Dataset(train.x.copy(), train.y.copy(), train.n_classes)
        poisoned.x[0, 0] = np.inf
        student = make_student()
        plan = TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0, 4.0), epochs=1, batch_size=len(poisoned), seed=0)
        with pytest.raises(NumericError, match="iteration"):
            train_sqakd(teacher, student, poisoned, plan)

    @pytest.mark.parametrize("kind", ["pact", "ewgs"])
    @pytest.mark.parametrize("rule_name", ["ste", "ewgs"])
    def test_forward_backward_decoupling_pairs_run(self, kind, rule_name):
        train, test, teacher, _ = make_blob_setup(seed=0)
        rule = Q.BackwardRule.ste() if rule_name == "ste" else Q.BackwardRule.ewgs(0.1)
        student = make_student(kind=kind, rule=rule)
        plan = TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0, 4.0), epochs=2, batch_size=32, seed=0)
        record = train_sqakd(teacher, student, train, plan, test)
        assert len(record.rows) == 2 * 6
        assert all(np.isfinite(r["total_loss"]) for r in record.rows)


class TestBackwardWiring:
    def test_ste_step_equals_identity_backward_step_when_unclipped(self, rng):
        # One-layer net, EWGS weights anchored to [-1, 1] (scale 2 * 1/2 = 1),
        # latent weights inside the interval: an SGD step through the
        # straight-through quantizer must equal a step whose backward treats
        # the quantizer as identity while the forward stays discrete.
        w0 = rng.uniform(-0.9, 0.9, size=(4, 3)).astype(np.float32)
        x_data = rng.standard_normal((8, 4)).astype(np.float32)
        g_seed = rng.standard_normal((8, 3)).astype(np.float32)

        def spec_with_rule():
            spec = Q.make_quantizer("ewgs", "weights", 8, Q.BackwardRule.ste())
            spec.clip_params["p1"] = Tensor(np.float32(-1.0), requires_grad=True)
            spec.clip_params["p2"] = Tensor(np.float32(1.0), requires_grad=True)
            return spec

        # Arm A: quantizer with straight-through backward.
        spec = spec_with_rule()
        w_a = Tensor(w0.copy(), requires_grad=True)
        out_a = T.matmul(Tensor(x_data), Q.quantize(w_a, spec))
        out_a.backward(g_seed)

        # Arm B: identical discrete forward, identity backward.
        identity_quant = T.custom_grad_op(
            lambda w: Q.quantize_array(w, spec_with_rule()),
            lambda g, inputs, out: g,
        )
        w_b = Tensor(w0.copy(), requires_grad=True)
        out_b = T.matmul(Tensor(x_data), identity_quant(w_b))
        out_b.backward(g_seed)

        assert np.array_equal(out_a.data, out_b.data)
        assert np.array_equal(w_a.grad, w_b.grad)

        lr = 0.05
        SGD([("w", w_a)], weight_decay=0.0).step(lr)
        SGD([("w", w_b)], weight_decay=0.0).step(lr)
        assert np.array_equal(w_a.data, w_b.data)


class TestSweepLambda:
    def test_single_lambda_zero_still_logs_kl(self):
        train, test, teacher, _ = make_blob_setup(seed=0)
        plan = TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0, 4.0), epochs=2, batch_size=32, seed=0)
        records, _ = sweep_lambda(teacher, lambda: make_student(), train, [0.0], plan, test)
        rec = records[0.0]
        assert all(r["kl_loss"] is not None for r in rec.rows)
        assert all(r["ce_loss"] is not None for r in rec.rows)

    def test_arms_share_iteration_structure(self):
        train, test, teacher, _ = make_blob_setup(seed=0)
        plan = TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0, 4.0), epochs=2, batch_size=32, seed=0)
        records, _ = sweep_lambda(teacher, lambda: make_student(), train, [0.0, 0.5, 1.0], plan, test)
        lengths = {lam: len(rec.rows) for lam, rec in records.items()}
        assert len(set(lengths.values())) == 1

    def test_bad_lambda_rejected(self):
        train, _, teacher, _ = make_blob_setup(seed=0)
        plan = TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0, 4.0), epochs=1, batch_size=32, seed=0)
        with pytest.raises(ConfigError):
            sweep_lambda(teacher, lambda: make_student(), train, [1.5], plan)


class TestRunRecordCsv:
    def test_schema_and_determinism(self, tmp_path):
        record = RunRecord()
        record.log_iter(0, 0, 0.5, None, 0.5, 1e-3)
        record.log_iter(1, 0, 0.25, 0.1, 0.25, 9e-4)
        record.log_epoch(0, 1.0, 0.875)
        path_a, path_b = tmp_path / "a.csv", tmp_path / "b.csv"
        record.to_csv(path_a)
        record.to_csv(path_b)
        text = path_a.read_text()
        assert text.splitlines()[0] == CSV_HEADER
        assert text.splitlines()[1] == "0,0,0.5,,0.5,0.001,"
        assert text.splitlines()[2].endswith(",0.875")
        assert path_a.read_bytes() == path_b.read_bytes()


class TestCnnPath:
    def test_cnn_trains_on_synthetic_images(self, rng):
        x = rng.standard_normal((96, 1, 4, 4)).astype(np.float32)
        y = (x.reshape(96, -1).mean(axis=1) > 0).astype(np.int64)
        ds = Dataset(x, y, 2)
        train, test = train_test_split(ds, 0.25, seed=0)
        teacher = build_cnn((1, 4, 4), 2, np.random.Generator(np.random.PCG64(0)))
        plan = TrainPlan(ObjectiveSpec(Mode.CE_ONLY, 0.0), epochs=8, batch_size=24, seed=0)
        train_teacher(teacher, train, plan, test)
        student = build_cnn((1, 4, 4), 2, np.random.Generator(np.random.PCG64(1)))
        attach_quantizers(student, "ewgs", 2, 2, Q.BackwardRule.ewgs(0.1))
        qplan = TrainPlan(ObjectiveSpec(Mode.KL_ONLY, 1.0, 4.0), epochs=4, batch_size=24, seed=0)
        record = train_sqakd(teacher, student, train, qplan, test)
        assert record.final_test_acc is not None
        assert all(np.isfinite(r["total_loss"]) for r in record.rows)
        middle_conv = student.parametric_layers()[1][1]
        assert middle_conv.weight_q is not None and middle_conv.act_q is not None
        first_conv = student.parametric_layers()[0][1]
        last_dense = student.parametric_layers()[-1][1]
        assert first_conv.weight_q is None and last_dense.weight_q is None
