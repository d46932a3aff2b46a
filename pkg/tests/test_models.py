import pytest
import torch

from pyvptr.attention import temporal_cross_mha
from pyvptr.autoencoder import Autoencoder, AutoencoderConfig
from pyvptr.checkpoint import state_digest
from pyvptr.core import CheckpointError, ConfigError, ModeError, ShapeError, Variant
from pyvptr.models import (
    VPTRConfig,
    VPTRNAR,
    VPTRPAR,
    build_model,
    check_mode,
    far_forward,
    infer_ril,
    infer_rip,
    load_model,
    nar_blockwise,
    nar_forward,
    par_forward,
    predict,
    save_model,
    train_stage2,
)
from pyvptr.training import TrainConfig

TINY = dict(past=2, future=2, layers_far=1, layers_enc=1, layers_dec=1, d_model=16, heads=2, max_len=16)


def identity(x):
    return x


def tiny(variant, **overrides):
    return build_model(VPTRConfig(variant=variant, **{**TINY, **overrides}))


def features(steps, batch=1):
    return torch.randn(batch, steps, 8, 8, 16)


def test_far_is_causal_and_prefix_consistent():
    model = tiny("far", layers_far=3)
    for length in range(1, 7):
        z = features(length)
        out = far_forward(z, model)
        assert out.shape == z.shape
        for step in range(length):
            changed = z.clone()
            changed[:, step] += torch.randn(8, 8, 16)
            diff = (far_forward(changed, model) - out).abs()
            if step:
                assert diff[:, :step].max() <= 1e-5
            assert diff[:, step].max() > 0
        assert (far_forward(z[:, :3], model) - out[:, :3]).abs().max() <= 1e-5


def test_par_target_is_causal_and_memories_reach_every_step():
    model = tiny("par")
    src, tgt = features(2), features(3)
    out = par_forward(src, tgt, model)
    assert out.shape == tgt.shape
    changed = tgt.clone()
    changed[:, 1] += 1.0
    diff = (par_forward(src, changed, model) - out).abs()
    assert diff[:, :1].max() <= 1e-6 and diff[:, 1:].max() > 0
    src2 = src.clone()
    src2[:, 0] += 1.0
    diff = (par_forward(src2, tgt, model) - out).abs()
    assert all(diff[:, step].max() > 0 for step in range(3))
    with pytest.raises(ShapeError):
        par_forward(src, features(3, batch=2), model)


def test_nar_predicts_every_future_step_in_one_pass():
    model = tiny("nar", future=3)
    src = features(2, batch=2)
    out = nar_forward(src, model)
    assert out.shape == (2, 3, 8, 8, 16)
    # no dropout anywhere, so train and eval agree
    model.train()
    assert torch.equal(nar_forward(src, model), out)
    assert (out[:, 0] - out[:, 1]).abs().max() > 0
    with pytest.raises(ShapeError):
        nar_forward(src, model, queries=torch.zeros(2, 8, 8, 16))
    with pytest.raises(ShapeError):
        nar_forward(torch.randn(1, 2, 4, 4, 16), model)


@pytest.mark.parametrize("injection", ["positional", "input"])
def test_nar_queries_drive_the_decoder(injection):
    model = tiny("nar", query_injection=injection)
    src = features(2)
    out = nar_forward(src, model)
    shifted = nar_forward(src, model, queries=model.queries.detach() + 0.5)
    assert (shifted - out).abs().max() > 0


def test_cross_attention_ablations_build_and_run():
    for overrides in (dict(cross_attention="fsta"), dict(memory_posenc=False), dict(norm="post")):
        model = tiny("nar", **overrides)
        assert nar_forward(features(2), model).shape == (1, 2, 8, 8, 16)


def test_decoder_steps_follow_the_memories_in_time():
    layer = tiny("par", past=3).decoder.layers[0]
    z, memory = features(2), features(3)
    after = temporal_cross_mha(z, memory, layer.cross.attention, layer.temporal_pos, query_start=3)
    overlapping = temporal_cross_mha(z, memory, layer.cross.attention, layer.temporal_pos)
    torch.testing.assert_close(layer.attend_memory(z, memory), after)
    assert (after - overlapping).abs().max() > 0

    dense = tiny("par", past=3, cross_attention="fsta").decoder.layers[0]
    table = dense.temporal_pos.query_key_term()
    expected = dense.cross(z, memory=memory, qk_pos=table[3:5, None, None, :], memory_pos=table[:3, None, None, :])
    torch.testing.assert_close(dense.attend_memory(z, memory), expected)


@pytest.mark.parametrize("variant", ["far", "par"])
def test_rip_equals_ril_with_identity_autoencoder(variant):
    model = tiny(variant)
    past = features(2)
    rip = infer_rip(past, identity, model, identity, 3)
    ril = infer_ril(past, identity, model, identity, 3)
    assert rip.shape == (1, 3, 8, 8, 16)
    assert torch.equal(rip, ril)
    assert infer_rip(past, identity, model, identity, 1).shape == (1, 1, 8, 8, 16)


def test_autoregress_with_copying_predictor():
    past = torch.arange(3.0).reshape(1, 3, 1, 1, 1)
    # a predictor without a variant is driven like FAR
    out = infer_ril(past, identity, identity, identity, 4)
    assert out.flatten().tolist() == [2.0] * 4
    with pytest.raises(ShapeError):
        infer_rip(past, identity, identity, identity, 0)


def test_nar_blockwise_feeds_back_and_truncates():
    calls = []

    def step(z):
        calls.append(z.flatten().tolist())
        return z + 1

    out = nar_blockwise(torch.zeros(1, 2, 1, 1, 1), identity, step, identity, 5)
    assert out.flatten().tolist() == [1, 1, 2, 2, 3]
    assert calls == [[0, 0], [1, 1], [2, 2]]
    with pytest.raises(ShapeError):
        nar_blockwise(torch.zeros(1, 2, 1, 1, 1), identity, step, identity, 0)


def test_mode_checks():
    check_mode("far", "rip")
    check_mode(Variant.par, "ril")
    check_mode("nar", "block")
    for variant, mode in [("far", "block"), ("par", "block"), ("nar", "rip"), ("nar", "ril"), ("far", "beam")]:
        with pytest.raises(ModeError):
            check_mode(variant, mode)
    with pytest.raises(ModeError):
        infer_rip(features(2), identity, tiny("nar"), identity, 2)
    with pytest.raises(ModeError):
        nar_blockwise(features(2), identity, tiny("far"), identity, 2)


def test_predict_through_the_autoencoder():
    autoencoder = Autoencoder(AutoencoderConfig(d_model=16, res_blocks=1)).eval()
    past = torch.rand(1, 2, 1, 64, 64)
    out = predict(past, autoencoder, tiny("nar"), "block", 3)
    assert out.shape == (1, 3, 1, 64, 64)
    assert out.min() >= 0 and out.max() <= 1
    assert predict(past, autoencoder, tiny("far"), "rip", 2).shape == (1, 2, 1, 64, 64)
    with pytest.raises(ModeError):
        predict(past, autoencoder, tiny("par"), "block", 2)


@pytest.mark.parametrize("variant", ["far", "par", "nar"])
def test_train_stage2_leaves_autoencoder_untouched(variant):
    autoencoder = Autoencoder(AutoencoderConfig(d_model=16, res_blocks=1))
    before = state_digest(autoencoder)
    clips = torch.rand(2, 5, 1, 64, 64)
    config = VPTRConfig(variant=variant, **TINY)
    model, history = train_stage2(variant, autoencoder, clips, config, TrainConfig(epochs=1, batch_size=2))
    assert model.variant is Variant(variant)
    assert [entry["epoch"] for entry in history] == [1]
    assert torch.isfinite(torch.tensor(history[0]["loss"]))
    assert state_digest(autoencoder) == before
    assert not model.training


def test_train_stage2_errors():
    autoencoder = Autoencoder(AutoencoderConfig(d_model=16, res_blocks=1))
    config = VPTRConfig(variant="par", **TINY)
    with pytest.raises(ConfigError):
        train_stage2("nar", autoencoder, torch.rand(2, 4, 1, 64, 64), config)
    with pytest.raises(ShapeError):
        train_stage2("par", autoencoder, torch.rand(2, 3, 1, 64, 64), config)


def test_model_checkpoint_is_tied_to_its_autoencoder(tmp_path):
    model = tiny("par")
    save_model(tmp_path / "m", model, "abc")
    loaded, manifest = load_model(tmp_path / "m", "abc")
    assert isinstance(loaded, VPTRPAR)
    assert manifest["autoencoder_digest"] == "abc"
    src, tgt = features(2), features(2)
    assert torch.equal(loaded(src, tgt), model.eval()(src, tgt))
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "m", "def")


def test_nar_queries_survive_a_checkpoint(tmp_path):
    model = tiny("nar")
    save_model(tmp_path / "m", model, "abc")
    loaded, _ = load_model(tmp_path / "m")
    assert isinstance(loaded, VPTRNAR)
    assert torch.equal(loaded.queries, model.queries)


def test_config_validation():
    with pytest.raises(ConfigError):
        VPTRConfig(d_model=18, heads=4)
    with pytest.raises(ConfigError):
        VPTRConfig(window=3)
    with pytest.raises(ConfigError):
        VPTRConfig(past=40, future=40)
    with pytest.raises(ConfigError):
        VPTRConfig(query_injection="sum")
    with pytest.raises(ConfigError):
        VPTRConfig(posenc="abs1d")
    with pytest.raises(ValueError):
        VPTRConfig(variant="rnn")
    full = VPTRConfig.full(variant="far")
    assert (full.past, full.future, full.d_model, full.layers_far) == (10, 10, 528, 12)
    assert full.d_ff == 4 * 528


def test_build_model_is_seeded():
    first, second = tiny("nar"), tiny("nar")
    assert state_digest(first) == state_digest(second)
    assert state_digest(tiny("nar", seed=1)) != state_digest(first)
