import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import cldfd.distill as D
from cldfd.augment import AugmentPolicy
from cldfd.data import LabeledDataset, generate_base
from cldfd.distill import (
    DistillConfig,
    PretrainConfig,
    SnapshotRing,
    alpha_schedule,
    fuse_features,
    kd_loss,
    pretrain_teacher,
    ring_push_and_fetch,
    topology_pairs,
    total_loss,
    train_student,
    write_history,
)
from cldfd.errors import ConfigError, ContractError, DataError, DivergenceError, ShapeError
from cldfd.model import BackboneConfig, ParamSnapshot, build_backbone, build_projector, snapshot_params
from cldfd.numerics import Tensor, backward, l2_sq

SMALL = BackboneConfig(channels=(4, 8, 8, 16), strides=(1, 2, 2, 2), input_size=16)


@pytest.fixture(scope="module")
def unlabeled():
    return np.random.default_rng(0).random((12, 3, 16, 16)).astype(np.float32)


@pytest.fixture(scope="module")
def teacher():
    net = build_backbone(SMALL, 99)
    net(Tensor(np.random.default_rng(1).random((8, 3, 16, 16)).astype(np.float32)), "train")
    return net


def _cfg(**kw):
    base = dict(epochs=3, batch_size=4, seed=0, head_hidden=8, head_dim=4)
    base.update(kw)
    return DistillConfig(**base)


# --- schedule and fusion ---------------------------------------------------------------


def test_alpha_schedule_values():
    assert alpha_schedule(0, 600) == 0
    assert alpha_schedule(600, 600) == 1
    assert alpha_schedule(150, 600) == 0.25
    vals = [alpha_schedule(i, 20) for i in range(21)]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ContractError):
        alpha_schedule(601, 600)


def test_fuse_features_identities():
    r = np.random.default_rng(0)
    o, t = r.normal(size=(2, 3, 4, 4)).astype(np.float32), r.normal(size=(2, 3, 4, 4)).astype(np.float32)
    assert np.array_equal(fuse_features(o, t, 0.0).data, t)
    assert np.array_equal(fuse_features(o, t, 1.0).data, o)
    assert float(fuse_features(np.array([2.0]), np.array([4.0]), 0.5).data[0]) == 3.0
    with pytest.raises(ShapeError):
        fuse_features(o, t[:, :2], 0.5)


# --- topology ---------------------------------------------------------------------


def test_topology_pairs():
    assert topology_pairs("cross_level", 4) == [(2, 1), (3, 2), (4, 3)]
    assert topology_pairs("same_level", 4) == [(1, 1), (2, 2), (3, 3)]
    assert topology_pairs("one_to_all", 4) == [(4, 1), (4, 2), (4, 3)]
    assert topology_pairs("single_block(1)", 4) == [(2, 1)]
    assert topology_pairs("none", 4) == []
    assert topology_pairs("final_level", 4) == [(4, 4)]
    for bad in ("single_block(0)", "single_block(4)"):
        with pytest.raises(ConfigError):
            topology_pairs(bad, 4)
    with pytest.raises(ConfigError):
        topology_pairs("sideways", 4)
    with pytest.raises(ConfigError):
        topology_pairs("cross_level", 1)


@given(L=st.integers(2, 12), kind=st.sampled_from(["cross_level", "same_level", "one_to_all"]))
def test_topology_students_distinct_and_exclude_last(L, kind):
    pairs = topology_pairs(kind, L)
    students = [s for _, s in pairs]
    assert len(set(students)) == len(students) == L - 1
    assert L not in students


# --- losses ---------------------------------------------------------------------------


def _identity(x, *a, **k):
    return x


def test_kd_loss_scalar_example_and_perfect_mimicry():
    s = [Tensor(np.array([1.0]))]
    u = [None, Tensor(np.array([3.0]))]
    assert float(kd_loss(s, u, {(2, 1): _identity}, [(2, 1)]).data) == 4.0
    assert float(kd_loss(s, [None, s[0]], {(2, 1): _identity}, [(2, 1)]).data) == 0.0
    with pytest.raises(ConfigError):
        kd_loss(s, u, {}, [(2, 1)])


def test_kd_loss_equals_per_pair_oracle():
    r = np.random.default_rng(3)
    shapes = SMALL.tap_shapes()
    taps = [Tensor(r.random((2,) + tuple(sh)).astype(np.float32)) for sh in shapes]
    united = [Tensor(r.random((2,) + tuple(sh)).astype(np.float32)) for sh in shapes]
    pairs = topology_pairs("cross_level", 4)
    projs = {(t, s): build_projector(shapes[s - 1], shapes[t - 1], 0, f"p{t}{s}") for t, s in pairs}
    got = float(kd_loss(taps, united, projs, pairs).data)
    want = sum(float(l2_sq(projs[(t, s)](taps[s - 1]), united[t - 1]).data) for t, s in pairs)
    assert got == pytest.approx(want, rel=1e-6)
    mean = float(kd_loss(taps, united, projs, pairs, reduction="mean").data)
    want_mean = sum(float(l2_sq(projs[(t, s)](taps[s - 1]), united[t - 1]).data) / united[t - 1].size for t, s in pairs)
    assert mean == pytest.approx(want_mean, rel=1e-6)


def test_kd_loss_detaches_targets():
    s = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    u = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    backward(kd_loss([s], [None, u], {(2, 1): _identity}, [(2, 1)]))
    assert u.grad is None
    np.testing.assert_allclose(s.grad, [2.0, 4.0])


def test_total_loss():
    assert float(total_loss(Tensor(1.0), Tensor(0.5), 2.0).data) == 2.0
    assert float(total_loss(Tensor(1.5), Tensor(0.7), 0.0).data) == 1.5
    assert float(total_loss(Tensor(1.5), Tensor(0.0), 2.0).data) == 1.5
    assert float(total_loss(Tensor(1.5), None, 2.0).data) == 1.5


# --- snapshot ring -----------------------------------------------------------------------


def _snap(i):
    return ParamSnapshot({"w": np.full(2, float(i))}, i)


def test_ring_tau_one_and_five():
    ring = SnapshotRing(1)
    assert ring_push_and_fetch(ring, _snap(1), 1) is None
    for i in range(2, 8):
        assert ring_push_and_fetch(ring, _snap(i), i).iteration == i - 1
        assert len(ring) <= 1
    ring = SnapshotRing(5)
    for i in range(1, 6):
        assert ring.push_and_fetch(_snap(i), i) is None
    assert ring.push_and_fetch(_snap(6), 6).iteration == 1
    assert len(ring) == 5


def test_ring_tau_zero_returns_current():
    ring = SnapshotRing(0)
    s = _snap(4)
    assert ring.push_and_fetch(s, 4) is s and len(ring) == 0


# --- config ----------------------------------------------------------------------------------


def test_distill_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig(lam=-1)
    with pytest.raises(ConfigError):
        DistillConfig(tau=-1)
    with pytest.raises(ConfigError):
        DistillConfig(topology="single_block(x)")
    with pytest.raises(ConfigError):
        DistillConfig(ss_kind="moco")
    assert DistillConfig(epochs=600).milestones() == (300, 500)
    assert DistillConfig(epochs=2).milestones() == (1,)


# --- student training ----------------------------------------------------------------------------


def test_train_student_history_and_determinism(teacher, unlabeled, tmp_path):
    a = train_student(teacher, unlabeled, _cfg(), backbone_config=SMALL)
    b = train_student(teacher, unlabeled, _cfg(), backbone_config=SMALL)
    assert len(a.history) == 9
    assert set(a.history[0]) == {"iteration", "alpha", "l_ss", "l_dis", "total", "lr"}
    assert a.history == b.history
    assert snapshot_params(a.student) == snapshot_params(b.student)
    assert a.history[-1]["alpha"] == 1.0
    path = tmp_path / "history.csv"
    write_history(path, a.history, topology="cross_level")
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,alpha,l_ss,l_dis,total,lr,topology" and len(lines) == 10


def test_tau_not_below_iterations_rejected(teacher, unlabeled):
    with pytest.raises(ConfigError):
        train_student(teacher, unlabeled, _cfg(epochs=1, tau=3), backbone_config=SMALL)


def test_teacher_bitwise_constant(teacher, unlabeled):
    before = snapshot_params(teacher)
    train_student(teacher, unlabeled, _cfg(), backbone_config=SMALL)
    assert snapshot_params(teacher) == before


def test_lambda_zero_matches_distillation_free_run(teacher, unlabeled):
    kd = train_student(teacher, unlabeled, _cfg(lam=0.0), backbone_config=SMALL)
    plain = train_student(None, unlabeled, _cfg(topology="none"), backbone_config=SMALL)
    assert [h["l_ss"] for h in kd.history] == [h["l_ss"] for h in plain.history]
    assert snapshot_params(kd.student) == snapshot_params(plain.student)


def test_targets_are_teacher_taps_until_tau(teacher, unlabeled):
    seen = []

    def probe(rec):
        seen.append(rec)

    tau = 4
    train_student(teacher, unlabeled, _cfg(tau=tau), backbone_config=SMALL, probe=probe)
    for rec in seen:
        if rec["iteration"] <= tau:
            assert rec["old_snapshot"] is None
            assert all(np.array_equal(u.data, t.data) for u, t in zip(rec["targets"], rec["teacher_taps"]))
        else:
            assert rec["old_snapshot"].iteration == rec["iteration"] - tau
            assert rec["old_snapshot"] == seen[rec["iteration"] - tau - 1]["student_snapshot"]


def test_topologies_diverge_only_after_first_kd_step(teacher, unlabeled):
    recs = {}
    for topo in ("cross_level", "same_level"):
        got = []
        train_student(teacher, unlabeled, _cfg(topology=topo, epochs=1), backbone_config=SMALL, probe=got.append)
        recs[topo] = got
    a, b = recs["cross_level"], recs["same_level"]
    assert a[0]["student_snapshot"] == b[0]["student_snapshot"]
    assert a[0]["l_ss"] == b[0]["l_ss"]
    assert a[1]["student_snapshot"] != b[1]["student_snapshot"]


def test_divergence_aborts_with_record(teacher, unlabeled, monkeypatch):
    real = D.simclr_loss

    def poisoned(z, t=0.1):
        out = real(z, t)
        return out * float("nan")

    monkeypatch.setattr(D, "simclr_loss", poisoned)
    with pytest.raises(DivergenceError) as err:
        train_student(teacher, unlabeled, _cfg(), backbone_config=SMALL)
    assert err.value.record["iteration"] == 1


def test_byol_student_runs(teacher, unlabeled):
    res = train_student(teacher, unlabeled, _cfg(ss_kind="byol", epochs=2), backbone_config=SMALL)
    assert all(np.isfinite(h["total"]) for h in res.history)
    assert 0 <= res.history[0]["l_ss"] <= 4


def test_student_needs_teacher_for_kd(unlabeled):
    with pytest.raises(ConfigError):
        train_student(None, unlabeled, _cfg(), backbone_config=SMALL)


# --- teacher pretraining --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_base():
    return generate_base(class_count=3, per_class=8, image_size=16, seed=1)


def test_pretrain_supervised_deterministic(tiny_base):
    cfg = PretrainConfig(epochs=2, batch_size=8, seed=0)
    a = pretrain_teacher(tiny_base, SMALL, cfg)
    b = pretrain_teacher(tiny_base, SMALL, cfg)
    assert snapshot_params(a.backbone) == snapshot_params(b.backbone)
    assert len(a.trace) == 2 and "train_accuracy" in a.trace[0]
    assert not any(p.requires_grad for p in a.backbone.params())


def test_supervised_pretrain_drops_color_ops_by_default(tiny_base):
    cfg = PretrainConfig(epochs=1, batch_size=8, seed=0)
    auto = pretrain_teacher(tiny_base, SMALL, cfg)
    geo = pretrain_teacher(tiny_base, SMALL, cfg, AugmentPolicy().geometric())
    colored = pretrain_teacher(tiny_base, SMALL, PretrainConfig(epochs=1, batch_size=8, seed=0, color_augment=True))
    assert snapshot_params(auto.backbone) == snapshot_params(geo.backbone)
    assert snapshot_params(auto.backbone) != snapshot_params(colored.backbone)


def test_pretrain_selfsup_runs(tiny_base):
    res = pretrain_teacher(tiny_base, SMALL, PretrainConfig(mode="selfsup", epochs=1, batch_size=8))
    assert res.classifier is None and np.isfinite(res.trace[0]["loss"])


def test_pretrain_errors(tiny_base):
    one = tiny_base.subset(np.flatnonzero(tiny_base.labels == 0))
    one = LabeledDataset(one.images, np.zeros(len(one), np.int64), 1, "base")
    with pytest.raises(ConfigError):
        pretrain_teacher(one, SMALL, PretrainConfig(epochs=1))
    empty = LabeledDataset(np.zeros((0, 3, 16, 16), np.float32), np.zeros(0, np.int64), 3, "base")
    with pytest.raises(DataError):
        pretrain_teacher(empty, SMALL, PretrainConfig(mode="selfsup", epochs=1))
    with pytest.raises(ConfigError):
        pretrain_teacher(tiny_base, SMALL, PretrainConfig(mode="other"))


@pytest.mark.slow
def test_supervised_teacher_fits_desk_base():
    base = generate_base()
    res = pretrain_teacher(base, BackboneConfig(channels=(8, 16, 32, 64)), PretrainConfig(epochs=50, seed=0))
    assert res.trace[-1]["train_accuracy"] > 0.9, res.trace[-5:]
