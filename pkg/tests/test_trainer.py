import json
import os

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import texpand.trainer as trainer
from texpand.archive import module_digest
from texpand.errors import (
    ArchiveError,
    ConfigError,
    ConfigMismatchError,
    IntegrityError,
    SamplingError,
    TrainingDivergedError,
)
from texpand.losses import LossReport
from texpand.trainer import (
    Checkpoint,
    TrainingConfig,
    checkpoint_hash,
    init_state,
    load_config,
    load_generator,
    lr_schedule,
    read_log,
    resolve_checkpoint,
    resume,
    save_config,
    to_checkpoint,
    train,
    train_step,
)

from .conftest import EXEMPLAR


def test_schedule_paper_values():
    cfg = TrainingConfig(exemplar="x")
    assert lr_schedule(0, cfg) == 2e-4
    assert lr_schedule(50_000, cfg) == 2e-4
    assert lr_schedule(75_000, cfg) == pytest.approx(1e-4, rel=0, abs=1e-15)
    assert lr_schedule(100_000, cfg) == 0.0
    with pytest.raises(ValueError):
        lr_schedule(100_001, cfg)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.data())
def test_schedule_shape(total, data):
    flat = data.draw(st.integers(0, total))
    cfg = TrainingConfig(exemplar="x", total_iterations=total, lr_constant_until=flat)
    lrs = [lr_schedule(i, cfg) for i in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == 0.0 and all(v == 2e-4 for v in lrs[:flat])
    steps = np.diff(lrs[flat:])
    if len(steps) > 1:
        assert np.allclose(steps, steps[0], rtol=1e-9, atol=1e-18)  # linear, no jumps


def test_config_yaml(tmp_path, tiny_config):
    path = tmp_path / "c.yaml"
    save_config(tiny_config, path)
    assert load_config(path) == tiny_config
    path.write_text("k: 32\nlr_initial: '1e-4'\nenable_adv: 'false'\nexemplar: a.png\n")
    cfg = load_config(path)
    assert cfg.k == 32 and cfg.lr_initial == 1e-4 and cfg.enable_adv is False


@pytest.mark.parametrize(
    "text,match",
    [
        ("k: 32\nbogus: 1\n", "unknown"),
        ("k: abc\n", "expected int"),
        ("k: 3.5\n", "expected int"),
        ("k: [1, 2]\n", "flat"),
        ("k: 0\n", "k"),
        ("enable_adv: false\nenable_l1: false\nenable_style: false\n", "at least one"),
        ("total_iterations: 10\nlr_constant_until: 20\n", "lr_constant_until"),
    ],
)
def test_config_errors(tmp_path, text, match):
    path = tmp_path / "c.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(path)


def test_exemplar_too_small(tiny_config):
    with pytest.raises(SamplingError, match="too small"):
        init_state(tiny_config.replace(k=132))


def run_steps(config, n, exemplar=None):
    state = init_state(config, exemplar)
    return state, [train_step(state) for _ in range(n)]


def test_steps_finite_and_deterministic(tiny_config):
    _, a = run_steps(tiny_config, 5)
    _, b = run_steps(tiny_config, 5)
    assert a == b
    for r in a:
        assert all(np.isfinite(v) for v in r.as_dict().values())
    _, c = run_steps(tiny_config.replace(seed=1), 5)
    assert c != a


def test_total_recomputed(tiny_config):
    f32 = np.float32
    for cfg in (tiny_config, tiny_config.replace(lambda1=3.0, lambda2=7.5), tiny_config.replace(enable_adv=False)):
        _, reports = run_steps(cfg, 3)
        for r in reports:
            expected = f32(0.0)
            if cfg.enable_adv:
                expected = f32(r.adv_G)
            expected = expected + f32(cfg.lambda1) * f32(r.l1)
            expected = expected + f32(cfg.lambda2) * f32(r.style)
            assert f32(r.total_G) == expected


def test_disabled_terms_report_zero(tiny_config):
    _, reports = run_steps(tiny_config.replace(enable_adv=False, enable_style=False), 2)
    assert all(r.adv_G == r.adv_D == r.style == 0.0 for r in reports)
    assert all(r.l1 > 0 for r in reports)


def test_adv_off_freezes_discriminator(tiny_config):
    state = init_state(tiny_config.replace(enable_adv=False))
    before = module_digest(state.discriminator)
    g_before = module_digest(state.generator)
    for _ in range(10):
        train_step(state)
    assert module_digest(state.discriminator) == before
    assert module_digest(state.generator) != g_before


def test_extractor_unchanged_by_training(tiny_config):
    state = init_state(tiny_config)
    before = {k: v.clone() for k, v in state.extractor.state_dict().items()}
    train_step(state)
    assert all(torch.equal(v, before[k]) for k, v in state.extractor.state_dict().items())


def test_lr_applied(tiny_config):
    state, reports = run_steps(tiny_config, 1)
    assert reports[0].lr == 2e-4
    assert state.opt_g.param_groups[0]["betas"] == (0.5, 0.999)


def test_train_writes_log_and_checkpoints(tiny_config):
    cfg = tiny_config.replace(total_iterations=12, lr_constant_until=6, checkpoint_every=4, keep_checkpoints=2)
    final = train(cfg)
    assert final.iteration == 12
    out = cfg.output_dir
    names = sorted(n for n in os.listdir(out) if n.endswith(".safetensors"))
    assert names == ["ckpt_0000008.safetensors", "ckpt_0000012.safetensors"]
    assert open(os.path.join(out, "latest")).read().strip() == "ckpt_0000012.safetensors"
    assert resolve_checkpoint(out).endswith("ckpt_0000012.safetensors")
    log = read_log(os.path.join(out, "train_log.tsv"))
    assert [r.iteration for r in log] == list(range(1, 13))
    assert log[-1].lr == lr_schedule(11, cfg)
    net = load_generator(out)
    assert not net.training


def test_checkpoint_round_trip(tiny_config, tmp_path):
    state, _ = run_steps(tiny_config, 3)
    ckpt = to_checkpoint(state)
    path = str(tmp_path / "c.safetensors")
    ckpt.save(path)
    back = Checkpoint.load(path)
    assert back.iteration == 3
    assert back.config == tiny_config
    assert set(back.tensors) == set(ckpt.tensors)
    for k, v in ckpt.tensors.items():
        assert v.shape == back.tensors[k].shape and v.tobytes() == back.tensors[k].tobytes()
    assert any(k.startswith("opt_g/") and k.endswith("/exp_avg") for k in back.tensors)
    h = checkpoint_hash(path)
    assert h == checkpoint_hash(path)


def test_resume_matches_uninterrupted(tiny_config, tmp_path):
    _, full = run_steps(tiny_config, 8)
    state, first = run_steps(tiny_config, 5)
    path = str(tmp_path / "mid.safetensors")
    to_checkpoint(state).save(path)
    del state
    resumed = resume(path)
    rest = [train_step(resumed) for _ in range(3)]
    assert first + rest == full
    assert resumed.history[-1] == full[-1]


def test_train_resume_log(tiny_config):
    cfg = tiny_config.replace(total_iterations=10, lr_constant_until=5)
    full_dir = cfg.output_dir + "_full"
    train(cfg.replace(output_dir=full_dir))
    train(cfg, stop_at=6)
    train(cfg, resume_from=cfg.output_dir)
    a = open(os.path.join(full_dir, "train_log.tsv")).read()
    b = open(os.path.join(cfg.output_dir, "train_log.tsv")).read()
    assert a == b


def test_corrupted_payload(tiny_config, tmp_path):
    state, _ = run_steps(tiny_config, 1)
    path = str(tmp_path / "c.safetensors")
    to_checkpoint(state).save(path)
    data = bytearray(open(path, "rb").read())
    data[-5] ^= 0xFF
    open(path, "wb").write(bytes(data))
    with pytest.raises(IntegrityError):
        resume(path)


def test_sidecar_mismatch(tiny_config, tmp_path):
    state, _ = run_steps(tiny_config, 1)
    a, b = str(tmp_path / "a.safetensors"), str(tmp_path / "b.safetensors")
    to_checkpoint(state).save(a)
    train_step(state)
    to_checkpoint(state).save(b)
    os.replace(b + ".json", a + ".json")
    with pytest.raises(IntegrityError, match="sidecar"):
        Checkpoint.load(a)
    with pytest.raises(ArchiveError):
        Checkpoint.load(b)


def test_config_mismatch_names_fields(tiny_config, tmp_path):
    state, _ = run_steps(tiny_config, 1)
    path = str(tmp_path / "c.safetensors")
    to_checkpoint(state).save(path)
    with pytest.raises(ConfigMismatchError) as info:
        resume(path, tiny_config.replace(k=20, lambda1=5.0, output_dir=str(tmp_path / "elsewhere")))
    assert info.value.fields == ["k", "lambda1"]
    assert "k" in str(info.value) and "lambda1" in str(info.value)
    resume(path, tiny_config.replace(output_dir=str(tmp_path / "elsewhere"), log_every=7))


def test_divergence_aborts(tiny_config, monkeypatch):
    state, _ = run_steps(tiny_config, 1)
    real_l1 = trainer.l1_loss
    monkeypatch.setattr(trainer, "l1_loss", lambda f, r: real_l1(f, r) * float("nan"))
    with pytest.raises(TrainingDivergedError, match="iteration 2"):
        train_step(state)
    diag = os.path.join(tiny_config.output_dir, "diverged.ckpt")
    assert Checkpoint.load(diag).iteration == 1


def test_missing_extractor_disables_style(tiny_config, caplog):
    cfg = tiny_config.replace(extractor="/nonexistent/vgg.safetensors")
    with pytest.warns(RuntimeWarning, match="STYLE LOSS DISABLED"):
        state = init_state(cfg)
    assert not state.weights.enable_style and state.extractor is None
    assert train_step(state).style == 0.0
    with pytest.raises(ConfigError):
        with pytest.warns(RuntimeWarning):
            init_state(cfg.replace(enable_adv=False, enable_l1=False))


def test_extractor_checksum_enforced(tiny_config):
    with pytest.raises(IntegrityError):
        init_state(tiny_config.replace(extractor_sha256="0" * 64))


def test_report_json_serialisable(tiny_config):
    _, reports = run_steps(tiny_config, 1)
    assert LossReport(**json.loads(json.dumps(reports[0].as_dict()))) == reports[0]


def test_exemplar_path_used(tiny_config):
    state = init_state(tiny_config)
    assert state.exemplar.shape == (3, 256, 256)
    assert tiny_config.exemplar == EXEMPLAR


def test_ablation_grid(tiny_config):
    cols = trainer.ablation_configs(tiny_config)
    assert set(cols) == {"no_adv", "adv", "adv_l1", "adv_style", "full"}
    assert not cols["no_adv"].enable_adv and cols["no_adv"].enable_l1 and cols["no_adv"].enable_style
    assert (cols["adv"].enable_l1, cols["adv"].enable_style) == (False, False)
    assert len({c.output_dir for c in cols.values()}) == 5
