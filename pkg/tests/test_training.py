import json

import numpy as np
import pytest
import torch

from moecalo.dataset import CalorimeterSpec, build_preprocess_tables
from moecalo.models import ModelConfig
from moecalo.synthgen import SynthConfig, synthesize
from moecalo.training import (
    REPORT_FIELDS,
    MixtureOfExperts,
    Standardizer,
    TrainConfig,
    TrainState,
    build_model,
    generate_responses,
    make_batch,
    parameter_digest,
    sub_seed,
    train,
    train_step,
)

SMALL = ModelConfig(gen_channels=16, disc_channels=8, aux_channels=8, router_hidden=16)


@pytest.fixture(scope="module")
def data():
    return synthesize(SynthConfig(n_samples=240, seed=3))


def small_cfg(**kw):
    base = dict(model=SMALL, epochs=2, batch_size=64, seed=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("kw", [{"n_experts": 0}, {"batch_size": 1}, {"lr_router": 0.0},
                                {"lr_generator": -1.0}, {"router_expert_loss": "mixed"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_round_trip():
    cfg = small_cfg(spec=CalorimeterSpec.zn(), n_experts=4)
    again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


def test_sub_seeds_are_named_streams():
    assert sub_seed(0, "data") == sub_seed(0, "data")
    assert len({sub_seed(0, s) for s in ("data", "init", "noise")}) == 3
    assert sub_seed(0, "data") != sub_seed(1, "data")


def test_standardizer_constant_field():
    c = np.zeros((4, 9))
    c[:, 0] = [1, 2, 3, 4]
    out = Standardizer.fit(c)(c).numpy()
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[:, 1], 0.0)
    assert out[:, 0].mean() == pytest.approx(0.0, abs=1e-6)


def _forced_state(data, target: int, n_experts: int = 3, **kw):
    cond, resp = data
    model = build_model(cond, resp, small_cfg(n_experts=n_experts, **kw))
    head = model.router.net[-1]
    with torch.no_grad():
        head.weight.zero_()
        head.bias.zero_()
        head.bias[target] = 20.0
    batch = make_batch(model, cond[:64], resp[:64], build_preprocess_tables(cond[:64], resp[:64]))
    return TrainState(model), batch


def test_empty_sub_batch_experts_untouched(data):
    state, batch = _forced_state(data, target=2)
    before = [parameter_digest(e) for e in state.model.experts]
    metrics = train_step(state, batch)
    after = [parameter_digest(e) for e in state.model.experts]
    assert metrics["counts"] == [0, 0, 64]
    assert before[:2] == after[:2]
    assert before[2] != after[2]
    assert metrics["experts"][0] is None


def test_frozen_router_only_moves_experts(data):
    state, batch = _forced_state(data, target=1, freeze_router=True)
    router_before = parameter_digest(state.model.router)
    train_step(state, batch)
    assert parameter_digest(state.model.router) == router_before


def test_frozen_router_matches_independent_gan(data):
    """A frozen router sending everything to one expert trains it exactly like a lone GAN."""
    cond, resp = data
    state, batch = _forced_state(data, target=0, n_experts=2, freeze_router=True)
    lone, _ = _forced_state(data, target=0, n_experts=1)
    # align initial weights and noise streams
    lone.model.experts[0].load_state_dict(state.model.experts[0].state_dict())
    lone.noise.set_state(state.noise.get_state())
    train_step(state, batch)
    train_step(lone, batch)
    assert parameter_digest(state.model.experts[0]) == parameter_digest(lone.model.experts[0])


def test_single_expert_router_is_inert(data):
    state, batch = _forced_state(data, target=0, n_experts=1)
    before = parameter_digest(state.model.router)
    m = train_step(state, batch)
    assert m["l_diff"] == 0.0
    assert parameter_digest(state.model.router) == before


def test_train_step_rejects_tiny_batch(data):
    state, batch = _forced_state(data, target=0)
    with pytest.raises(ValueError):
        train_step(state, batch.select(torch.tensor([True] + [False] * 63)))


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    cond, resp = data
    out = tmp_path_factory.mktemp("run")
    model, report = train(cond, resp, small_cfg(), out_dir=out)
    return model, report, out


def test_report_records(trained, data):
    model, report, out = trained
    lines = (out / "report.jsonl").read_text().splitlines()
    assert len(lines) == 2
    for line in lines:
        rec = json.loads(line)
        assert tuple(rec) == REPORT_FIELDS
        assert sum(rec["util_per_expert"]) == pytest.approx(1.0)
    # every sample is seen once per epoch
    assert sum(report.counts_total) == 2 * len(data[0])
    assert set(report.init_terms) == {"loss_G", "div", "in", "aux"}


def test_checkpoint_round_trip(trained, data):
    model, _, out = trained
    loaded = MixtureOfExperts.load(out / "checkpoint.pt")
    assert parameter_digest(loaded) == parameter_digest(model)
    a, ia = model.generate(data[0][:20], seed=9)
    b, ib = loaded.generate(data[0][:20], seed=9)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ia, ib)


def test_generation_contract(trained, data):
    model, _, _ = trained
    resp, ids = generate_responses(model, data[0][:30], seed=1)
    assert resp.shape == (30, 16, 16)
    assert resp.min() >= 0 and np.all(np.isfinite(resp))
    assert ids.min() >= 0 and ids.max() < 3
    again, _ = generate_responses(model, data[0][:30], seed=1)
    np.testing.assert_array_equal(resp, again)
    with pytest.raises(ValueError):
        generate_responses(model, data[0][:3], spec=CalorimeterSpec.zn())


def test_training_is_deterministic(trained, data):
    _, report, _ = trained
    _, again = train(*data, small_cfg())
    assert again.history == report.history


def test_unwritable_output_dir(data, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        train(*data, small_cfg(epochs=1), out_dir=blocker / "run")


def test_spec_mismatch_rejected(data):
    with pytest.raises(ValueError):
        train(*data, small_cfg(spec=CalorimeterSpec.zn()))


def test_frozen_router_equals_independent_gans_on_partition(data, monkeypatch):
    """Three experts behind a frozen router vs three lone GANs fed the same sub-batches."""
    import moecalo.training as T
    from moecalo.losses import HyperParams

    cond, resp = data
    cfg = small_cfg(freeze_router=True, hp=HyperParams(lambda_util=0.0, lambda_diff=0.0))
    model = build_model(cond, resp, cfg)
    state = TrainState(model)
    batch = make_batch(model, cond[:96], resp[:96], build_preprocess_tables(cond[:96], resp[:96]))
    # spread the batch over all three experts
    with torch.no_grad():
        head = model.router.net[-1]
        head.weight.zero_()
        head.weight[:, 0] = torch.tensor([-4.0, 0.0, 4.0])
    _, ids = model.route(batch.c)
    assert len(set(ids.tolist())) == 3

    initial = [{k: v.clone() for k, v in e.state_dict().items()} for e in model.experts]
    noise_states = {}
    original = T._expert_step

    def recording(st, e, sub):
        noise_states[e] = st.noise.get_state()
        return original(st, e, sub)

    monkeypatch.setattr(T, "_expert_step", recording)
    train_step(state, batch)
    monkeypatch.setattr(T, "_expert_step", original)

    for e in range(3):
        lone = TrainState(build_model(cond, resp, small_cfg(n_experts=1, hp=cfg.hp)))
        lone.model.experts[0].load_state_dict(initial[e])
        lone.model.transform = model.transform
        lone.noise.set_state(noise_states[e])
        train_step(lone, batch.select(ids == e))
        assert parameter_digest(lone.model.experts[0]) == parameter_digest(model.experts[e])


def test_ten_conditions_ten_responses(trained, data):
    model, _, _ = trained
    resp, _ = model.generate(data[0][:10], seed=0)
    assert resp.shape == (10, 16, 16) and np.all(resp >= 0)


def test_mode_purity_and_gaps():
    from moecalo.experiments import min_gap, mode_purity

    ids = np.array([0, 0, 1, 1, 2, 2])
    modes = np.array([0, 0, 1, 2, 2, 2])
    purity, majority = mode_purity(ids, modes, 3)
    assert purity == pytest.approx(5 / 6)
    assert majority == [0, 1, 2]
    assert min_gap([5.0, 1.0, 3.5]) == 1.5
    assert min_gap([1.0, None, 2.0]) == 0.0
