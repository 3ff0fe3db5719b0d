import numpy as np
import pytest

from ssmb import tensor as T
from ssmb.backbone import add_ssmb_blocks, build_backbone
from ssmb.block import GATE_SCALED, VALUE_PRESERVING
from ssmb.checkpoint import encode_tensors
from ssmb.losses import LossConfig, combine
from ssmb.tensor import Tensor
from ssmb.train import AdamState, TrainConfig, adam_step, inspect_routing, routing_histograms, steps_per_epoch, train_student


def param(v):
    return {"w": Tensor(np.array(v, dtype=np.float64), requires_grad=True)}


def test_defaults():
    c = TrainConfig()
    assert (c.lr, c.epochs, c.batch_size) == (1e-4, 50, 48)
    assert (c.betas, c.adam_eps, c.gamma, c.alpha, c.margin, c.num_experts) == ((0.9, 0.999), 1e-8, 0.5, 0.01, 0.0, 4)


def test_adam_zero_gradient():
    p, s = param([1.0, -2.0]), AdamState()
    s.m["w"], s.v["w"] = np.array([0.5, 0.5]), np.array([0.25, 0.25])
    before = p["w"].data.copy()
    adam_step(p, {"w": np.zeros(2)}, s, lr=0.0)
    np.testing.assert_array_equal(p["w"].data, before)
    np.testing.assert_allclose(s.m["w"], 0.9 * 0.5)
    np.testing.assert_allclose(s.v["w"], 0.999 * 0.25)


def test_adam_zero_gradient_fresh_state():
    p = param([1.0, -2.0])
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=1e-3)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


@pytest.mark.parametrize("g", [1e-3, 0.5, -7.0])
def test_adam_first_step_magnitude(g):
    p = param([0.0])
    adam_step(p, {"w": np.array([g])}, AdamState(), lr=1e-2)
    # m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
    assert p["w"].data[0] == pytest.approx(-1e-2 * g / (abs(g) + 1e-8), rel=1e-12)


def test_adam_frozen_untouched():
    p = param([3.0])
    before = p["w"].data.tobytes()
    adam_step(p, {"w": np.array([5.0])}, AdamState(), lr=1.0, frozen={"w": True})
    assert p["w"].data.tobytes() == before


def test_adam_shape_error():
    with pytest.raises(T.ShapeError):
        adam_step(param([1.0, 2.0]), {"w": np.zeros(3)}, AdamState())


def test_steps_per_epoch(small_dataset):
    # 14 train identities × 2 samples × 5 modalities = 140 → ceil(140 / 48)
    assert steps_per_epoch(small_dataset, 48) == 3


def _run(dataset, **kw):
    cfg = TrainConfig(epochs=2, steps_per_epoch=2, batch_size=8, **kw)
    return train_student(build_backbone(seed=1), dataset, cfg)


def test_value_preserving_first_step_tsi_zero(small_dataset):
    _, log = _run(small_dataset, gate_mode=VALUE_PRESERVING)
    assert abs(log.steps[0]["tsi"]) < 1e-6


def test_runlog_totals_recombine(small_dataset):
    _, log = _run(small_dataset)
    cfg = LossConfig()
    for s in log.steps:
        assert abs(combine(s["contrastive"], s["tsi"], s["balance"], cfg) - s["total"]) <= 1e-6
    assert len(log.routing) == 2
    assert all(np.sum(h) == 2 * 16 for r in log.routing for h in r["histograms"])


def test_freeze_contract(small_dataset):
    teacher = build_backbone(seed=1)
    student, _ = _run(small_dataset)
    for k, v in teacher.arrays().items():
        assert student.params[k].data.tobytes() == v.tobytes()
    moved = [k for k in student.params if k.startswith("ssmb.") and k.endswith("router.weight")]
    fresh = add_ssmb_blocks(build_backbone(seed=1), 4, GATE_SCALED, 0)
    assert any(not np.array_equal(student.params[k].data, fresh.params[k].data) for k in moved)


def test_training_is_deterministic(small_dataset):
    a, la = _run(small_dataset)
    b, lb = _run(small_dataset)
    assert la.to_text() == lb.to_text()
    assert encode_tensors(a.arrays()) == encode_tensors(b.arrays())


def test_requires_train_split(small_dataset):
    from ssmb.synthdata import DatasetManifest

    dev_only = DatasetManifest(small_dataset.select("dev-probe"), 7, small_dataset.root)
    with pytest.raises(ValueError):
        train_student(build_backbone(), dev_only, TrainConfig(epochs=1))


# -- routing inspection ---------------------------------------------------
def test_histograms_count_probes(small_dataset):
    student = add_ssmb_blocks(build_backbone(seed=1), 4, GATE_SCALED, 0)
    routes = inspect_routing(student, small_dataset)
    assert set(routes) == {"block0", "block1", "block2"}
    for block in routes.values():
        for m, counts in block.items():
            assert sum(counts) == len(small_dataset.select("dev-probe", m))
    assert routes == inspect_routing(student, small_dataset)


@pytest.mark.xfail(
    strict=True,
    reason="±1e-3 router init: logits follow one shared direction of the all-positive post-ReLU statistics",
)
def test_untrained_router_spreads_load():
    from ssmb.backbone import replicate_channels
    from ssmb.synthdata import MODALITIES, IdentityParams, apply_modality, render_identity

    x = np.array(
        [
            replicate_channels(apply_modality(render_identity(IdentityParams.from_seed(0, i), i), m))
            for m in MODALITIES
            for i in range(40)
        ],
        np.float32,
    )
    student = add_ssmb_blocks(build_backbone(seed=1), 4, GATE_SCALED, 0)
    for counts in routing_histograms(student, x):
        assert max(counts) / 200 <= 0.9
