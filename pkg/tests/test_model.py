import numpy as np
import pytest

from t2md import checkpoint
from t2md import tensor as T
from t2md.model import (BlockKind, ModelConfig, build_model, build_pattern, build_teacher, copy_from_teacher,
                        load_model, save_model)
from t2md.nn import ConfigError

SMALL = ModelConfig(groups=2, mambas_per_group=1, dim=16, heads=2, d_state=4, ssm_head_dim=8, ssm_chunk=4,
                    latent_size=8, text_vocab=10, text_dim=8)


def _inputs(cfg, b=2, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((b, cfg.channels, cfg.latent_size, cfg.latent_size)).astype(np.float32)
    return z, rng.integers(1, 100, size=b), rng.integers(0, cfg.text_vocab, size=(b, 3))


def _randomize(model, rng, skip_gates=False):
    for name, p in model.named_parameters():
        if skip_gates and "adaln" in name:
            continue
        p.data = (rng.standard_normal(p.shape) * 0.2).astype(p.data.dtype)


def test_pattern_full_scale():
    kinds = build_pattern(4, 3)
    assert len(kinds) == 28
    assert [i for i, k in enumerate(kinds) if k == BlockKind.SA] == [0, 7, 14, 21]
    assert (kinds.count(BlockKind.HM), kinds.count(BlockKind.WM)) == (12, 12)


def test_pattern_small_cases():
    assert build_pattern(1, 0) == [BlockKind.SA]
    assert build_pattern(2, 1) == [BlockKind.SA, BlockKind.HM, BlockKind.WM] * 2
    with pytest.raises(ConfigError):
        build_pattern(0, 1)
    with pytest.raises(ConfigError):
        build_pattern(1, -1)


@pytest.mark.parametrize("g,m", [(1, 0), (2, 1), (4, 3), (3, 2)])
def test_depth_formula(g, m):
    cfg = ModelConfig(groups=g, mambas_per_group=m)
    assert cfg.depth == len(cfg.pattern) == g * (1 + 2 * m)
    assert cfg.pattern.count(BlockKind.SA) / cfg.depth == pytest.approx(1 / (1 + 2 * m))


def test_full_scale_config():
    cfg = ModelConfig.full_scale()
    assert cfg.depth == 28 and cfg.dim == 1152 and cfg.d_state == 256 and cfg.expand == 2 and cfg.patch == 2
    assert cfg.pattern.count(BlockKind.SA) == 4


def test_config_validation_and_dict_round_trip():
    with pytest.raises(ConfigError):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(latent_size=15, patch=2)
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL


def test_forward_shape_and_determinism():
    cfg = ModelConfig(groups=1, mambas_per_group=1, dim=16, heads=2, d_state=4, ssm_head_dim=8, latent_size=16,
                      text_vocab=10, text_dim=8)
    model = build_model(cfg)
    _randomize(model, np.random.default_rng(1))
    z, t, tok = _inputs(cfg, b=1)
    out = model.predict(z, t, tok)
    assert out.shape == (1, 4, 16, 16)
    assert out.tobytes() == model.predict(z, t, tok).tobytes()


def test_zero_gates_make_every_block_identity():
    model = build_model(SMALL)
    rng = np.random.default_rng(2)
    _randomize(model, rng, skip_gates=True)
    x, cond, ctx, grid = model.embed(*_inputs(SMALL))
    for block in model.blocks:
        assert np.array_equal(block(x, cond, ctx, grid).data, x.data)


def test_teacher_and_student_agree_at_init():
    teacher, student = build_teacher(SMALL), build_model(SMALL.replace(init_seed=5))
    rng = np.random.default_rng(3)
    _randomize(teacher, rng, skip_gates=True)
    copy_from_teacher(student, teacher)
    args = _inputs(SMALL)
    assert np.array_equal(teacher.predict(*args), student.predict(*args))
    assert np.abs(teacher.predict(*args)).max() > 0


def test_names_align_outside_mixers():
    t, s = build_teacher(SMALL).state_dict(), build_model(SMALL).state_dict()
    strip = lambda d: {k for k in d if ".mixer." not in k}
    assert strip(t) == strip(s)
    assert {k for k in s if k.startswith("blocks.0.mixer.")} == {k for k in t if k.startswith("blocks.0.mixer.")}


def test_taps_count_shape_and_replay():
    teacher = build_teacher(SMALL)
    _randomize(teacher, np.random.default_rng(4))
    with T.no_grad():
        out, taps = teacher.forward_with_taps(*_inputs(SMALL))
    assert len(taps) == SMALL.depth
    L = (SMALL.latent_size // SMALL.patch) ** 2
    assert all(h.shape == (2, L, SMALL.dim) and m.shape == h.shape for h, m in taps)
    with T.no_grad():
        for block, (h, m) in zip(teacher.blocks, taps):
            assert np.array_equal(block.mixer(h, SMALL.base_grid).data, m.data)
        assert np.array_equal(out.data, teacher.forward(*_inputs(SMALL)).data)


def test_mamba_parameter_groups():
    model = build_model(SMALL)
    mamba = {id(p) for p in model.mamba_parameters()}
    per_block = [{id(p) for p in b.mixer.parameters()} for b in model.blocks]
    for kind, ids in zip(model.kinds, per_block):
        assert (ids <= mamba) == (kind != BlockKind.SA)
    assert not any(".mixer." in k for k in model.non_mixer_state())


def test_checkpoint_save_load_save_identical(tmp_path):
    model = build_model(SMALL)
    _randomize(model, np.random.default_rng(6))
    h1 = save_model(tmp_path / "a.t2md", model, {"stage": "TeacherPretrain", "seed": 3})
    loaded, meta = load_model(tmp_path / "a.t2md")
    assert meta["stage"] == "TeacherPretrain" and meta["seed"] == "3"
    assert loaded.cfg == SMALL
    h2 = save_model(tmp_path / "b.t2md", loaded, {"stage": "TeacherPretrain", "seed": 3})
    assert h1 == h2 and (tmp_path / "a.t2md").read_bytes() == (tmp_path / "b.t2md").read_bytes()
    args = _inputs(SMALL)
    assert np.array_equal(model.predict(*args), loaded.predict(*args))


def test_checkpoint_hash_matches_git_blob(tmp_path):
    raw = checkpoint.dumps({"w": np.ones(3, np.float32)}, {"k": "v"})
    assert checkpoint.blob_hash(raw) == checkpoint.blob_hash(bytes(raw))
    (tmp_path / "x").write_bytes(b"hello\n")
    assert checkpoint.file_hash(tmp_path / "x") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_checkpoint_layout_little_endian_float32():
    raw = checkpoint.dumps({"a": np.array([1.0, 2.0], np.float32), "b": np.zeros((2, 1), np.float32)}, {})
    assert raw[:4] == b"T2MD"
    assert raw.endswith(np.array([1.0, 2.0, 0.0, 0.0], "<f4").tobytes())


@pytest.mark.parametrize("cut", [0, 3, 10, -1, -5])
def test_truncated_checkpoint_rejected(cut):
    raw = checkpoint.dumps({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"stage": "x"})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(raw[:cut])


def test_bad_magic_version_and_trailing_bytes():
    raw = checkpoint.dumps({"w": np.zeros(2, np.float32)}, {})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"XXXX" + raw[4:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(raw + b"\0")


def test_missing_checkpoint_rejected(tmp_path):
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "nope.t2md")


def test_forcing_checkpoint_loads_into_student(tmp_path):
    teacher = build_teacher(SMALL)
    student = build_model(SMALL.replace(init_seed=9))
    _randomize(student, np.random.default_rng(7))
    save_model(tmp_path / "forced.t2md", student, {"stage": "TeacherForcing"})
    loaded, _ = load_model(tmp_path / "forced.t2md")
    copy_from_teacher(loaded, teacher, include_sa_mixers=False)
    for a, b in zip(loaded.mamba_parameters(), student.mamba_parameters()):
        assert np.array_equal(a.data, b.data)


def test_forward_stays_float32_with_float64_inputs():
    model = build_model(SMALL)
    _randomize(model, np.random.default_rng(8))
    z, t, tok = _inputs(SMALL)
    with T.no_grad():
        out, taps = model.forward_with_taps(z.astype(np.float64), t, tok)
    assert out.dtype == np.float32
    assert all(h.dtype == np.float32 and m.dtype == np.float32 for h, m in taps)
