import numpy as np
import pytest

from dskd.models import forward_inference
from dskd.trainer import (NonFiniteLossError, RunResult, SeedRun, build_student, load_datasets, load_teacher,
                          pretrain_teacher, run_distillation, train_network)


@pytest.fixture
def teacher_ckpt(tiny_cfg, tmp_path):
    return pretrain_teacher(tiny_cfg, tmp_path / "teacher")


def train(cfg, teacher, seed=0):
    tr, te = load_datasets(cfg)
    net = build_student(cfg, seed, None if teacher is None else teacher.feature_dim, tr.class_count, 3)
    return net, train_network(net, tr, te, cfg.epochs, cfg.batch_size, cfg.optim, seed, cfg.distill, teacher)


def test_pretrain_writes_loadable_checkpoint(tiny_cfg, teacher_ckpt):
    assert {p.name for p in teacher_ckpt.parent.iterdir()} == {"teacher.ckpt", "teacher.json", "teacher_metrics.csv"}
    a, b = load_teacher(teacher_ckpt), load_teacher(teacher_ckpt)
    probe = load_datasets(tiny_cfg)[1].images
    np.testing.assert_array_equal(forward_inference(a, probe).data, forward_inference(b, probe).data)


def test_missing_teacher(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.ckpt"):
        load_teacher(tmp_path / "nope.ckpt")


def test_zero_weights_reduce_to_plain_training(tiny_cfg, teacher_ckpt):
    teacher = load_teacher(teacher_ckpt)
    _, gated = train(tiny_cfg.replace(alpha=0.0, beta=0.0), teacher)
    _, plain = train(tiny_cfg.replace(method="student_only"), None)
    for a, b in zip(gated.metrics_history, plain.metrics_history):
        assert (a["ce"], a["total"], a["test_acc"]) == (b["ce"], b["total"], b["test_acc"])
        assert a["total"] == a["ce"]


def test_kd_equals_dskd_with_switches_off(tiny_cfg, teacher_ckpt):
    teacher = load_teacher(teacher_ckpt)
    _, kd = train(tiny_cfg.replace(method="kd"), teacher)
    _, off = train(tiny_cfg.replace(enable_shallow_kd=False, enable_fea=False), teacher)
    assert kd.metrics_history == off.metrics_history


def test_teacher_untouched(tiny_cfg, teacher_ckpt):
    teacher = load_teacher(teacher_ckpt)
    before = {k: v.data.copy() for k, v in teacher.params.items()}
    train(tiny_cfg, teacher)
    for k, v in teacher.params.items():
        np.testing.assert_array_equal(v.data, before[k])
        assert v.grad is None


def test_student_heads_follow_switches(tiny_cfg):
    assert len(build_student(tiny_cfg, 0, 8, 3, 3).heads) == 3
    assert len(build_student(tiny_cfg.replace(method="kd"), 0, 8, 3, 3).heads) == 1
    assert len(build_student(tiny_cfg.replace(shallow_positions=(2,)), 0, 8, 3, 3).heads) == 2
    assert not any(".proj." in n for n in build_student(tiny_cfg.replace(method="dsn"), 0, 8, 3, 3).params)


def test_non_finite_loss_raises(tiny_cfg, teacher_ckpt):
    teacher = load_teacher(teacher_ckpt)
    teacher.params["head_final.linear.bias"].data[:] = np.nan
    with pytest.raises(NonFiniteLossError, match="kd_last"):
        train(tiny_cfg, teacher)


def test_seeded_history_repeats(tiny_cfg, teacher_ckpt):
    teacher = load_teacher(teacher_ckpt)
    assert train(tiny_cfg, teacher)[1].metrics_history == train(tiny_cfg, teacher)[1].metrics_history


def test_run_writes_per_seed_files(tiny_cfg, teacher_ckpt, tmp_path):
    result = run_distillation(tiny_cfg, teacher_ckpt, tmp_path / "out")
    assert [r.seed for r in result.per_seed] == [0, 1]
    assert len(result.metrics_csvs) == 2 and len(result.weights_csvs) == 2
    header = open(result.metrics_csvs[0]).readline().strip()
    assert header == "epoch,lr,ce,kd_last,kd_shallow,fea_last,fea_shallow,total,train_acc,test_acc"


def test_result_formatting():
    r = RunResult("dskd", [SeedRun(s, a, []) for s, a in enumerate([0.7, 0.8, 0.9])])
    assert abs(r.mean - 0.8) < 1e-15 and abs(r.std - 0.1) < 1e-15
    assert r.formatted() == "80.00±10.00"
    assert RunResult("kd", [SeedRun(0, 0.5, [])]).formatted() == "50.00±0.00"


def test_shallow_features_without_shallow_kd(tiny_cfg, teacher_ckpt):
    # aux-head linear layers are outside the graph here and must not trip the optimiser
    cfg = tiny_cfg.replace(enable_shallow_kd=False)
    net, state = train(cfg, load_teacher(teacher_ckpt))
    assert len(net.heads) == 3 and state.metrics_history[-1]["kd_shallow"] == 0
    assert state.metrics_history[-1]["fea_shallow"] > 0


def test_shallow_kd_without_shallow_features(tiny_cfg, teacher_ckpt):
    net, state = train(tiny_cfg.replace(enable_shallow_fea=False), load_teacher(teacher_ckpt))
    assert state.metrics_history[-1]["fea_shallow"] == 0 and state.metrics_history[-1]["kd_shallow"] > 0


def test_feature_normalisation_divides_by_teacher_mean_square(tiny_cfg, teacher_ckpt):
    from dskd.trainer import teacher_outputs

    teacher = load_teacher(teacher_ckpt)
    cfg = tiny_cfg.replace(epochs=1, alpha=0.0, lr0=1e-12)  # parameters barely move
    _, raw = train(cfg, teacher)
    tr, te = load_datasets(cfg)
    net = build_student(cfg, 0, teacher.feature_dim, 3, 3)
    norm = train_network(net, tr, te, 1, cfg.batch_size, cfg.optim, 0, cfg.distill, teacher, fea_normalize=True)
    ms = float(np.mean(teacher_outputs(teacher, tr.images)[1] ** 2))
    for key in ("fea_last", "fea_shallow"):
        assert abs(norm.metrics_history[0][key] - raw.metrics_history[0][key] / ms) < 1e-9 * raw.metrics_history[0][key]
