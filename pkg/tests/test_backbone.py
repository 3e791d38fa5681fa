import numpy as np
import pytest

from cmma.attention import video_embedding
from cmma.backbone import (BackboneConfig, Wiring, backbone_forward, init_model, load_checkpoint,
                           model_forward, save_checkpoint, sidecar_path)
from cmma.errors import ConfigurationError, DimensionError

from oracles import TINY, model_loss_gradcheck, tiny_problem


def test_desk_config_shapes():
    cfg = BackboneConfig()
    assert cfg.stage_shapes() == [(16, 32, 16), (32, 16, 8), (64, 8, 4)]
    state = init_model(cfg, Wiring.MULTI_MAM_CON, 5, 0)
    frames = np.random.default_rng(0).random((6, 3, 64, 32))
    tap1, final = backbone_forward(frames, state)
    assert tap1.shape == (6, 32, 16, 8)
    assert final.shape == (6, 64, 8, 4)
    res = model_forward(frames[None], state)
    assert res.embedding.shape == (1, 64) and res.logits.shape == (1, 5)
    assert res.attention["mam1"].shape == (1, 6, 4, 16, 8)
    assert res.attention["mam2"].shape == (1, 6, 4, 8, 4)


def test_config_reports_all_problems():
    with pytest.raises(ConfigurationError) as exc:
        BackboneConfig(input_size=(64, 32), K=3, d1=40)
    msg = str(exc.value)
    assert "K=3" in msg and "d1=40" in msg


def test_wrong_frame_shape():
    state = init_model(TINY, Wiring.BASELINE, 3, 0)
    with pytest.raises(DimensionError):
        model_forward(np.zeros((1, 2, 3, 8, 6)), state)
    with pytest.raises(DimensionError):
        model_forward(np.zeros((2, 3, 8, 8)), state)


def test_zero_input_gives_bias_only_features():
    state = init_model(TINY, Wiring.BASELINE, 3, 0)
    state.params["stage1.bias"][:] = [0.5, 0, 1, 0, 0, 2]
    _, final = backbone_forward(np.zeros((1, 3, 8, 8)), state)
    np.testing.assert_array_equal(final[0, :, 0, 0], [0.5, 0, 1, 0, 0, 2])


def test_wirings_create_expected_parameters():
    def mams(w):
        return {k.split(".")[0] for k in init_model(TINY, w, 3, 0).params if k.startswith("mam")}
    assert mams(Wiring.BASELINE) == set()
    assert mams(Wiring.SINGLE_MAM) == mams(Wiring.SINGLE_MAM_CON) == {"mam2"}
    assert mams(Wiring.MULTI_MAM) == {"mam1", "mam2"}


def test_same_seed_pairs_shared_parameters_across_ablations():
    full = init_model(TINY, Wiring.MULTI_MAM_CON, 3, 4)
    base = init_model(TINY, Wiring.BASELINE, 3, 4)
    for name, v in base.params.items():
        np.testing.assert_array_equal(v, full.params[name])


def test_baseline_embedding_is_pooled_backbone_output():
    state = init_model(TINY, Wiring.BASELINE, 3, 1)
    clips = np.random.default_rng(1).random((3, 2, 3, 8, 8))
    _, final = backbone_forward(clips.reshape(6, 3, 8, 8), state)
    expected = video_embedding(final.reshape(3, 2, 6, 2, 2)).output
    np.testing.assert_allclose(model_forward(clips, state).embedding, expected, atol=1e-12)


def test_single_mam_equals_multi_mam_without_first_tap():
    no_tap = BackboneConfig(widths=(4, 6), factors=(2, 2), tap1=None, input_size=(8, 8), K=2, d1=3)
    single = init_model(TINY, Wiring.SINGLE_MAM, 3, 2)
    multi = init_model(no_tap, Wiring.MULTI_MAM, 3, 2)
    assert set(single.params) == set(multi.params)
    clips = np.random.default_rng(2).random((2, 2, 3, 8, 8))
    a, b = model_forward(clips, single), model_forward(clips, multi)
    np.testing.assert_array_equal(a.embedding, b.embedding)


def test_embedding_invariant_to_frame_order():
    state, clips, _ = tiny_problem(3, dtype=np.float64)
    perm = clips[:, ::-1]
    np.testing.assert_allclose(model_forward(perm, state).embedding,
                               model_forward(clips, state).embedding, atol=1e-12)


def test_attention_stacks_are_distributions():
    state, clips, _ = tiny_problem(5, dtype=np.float64)
    for a in model_forward(clips, state).attention.values():
        assert np.all(a >= 0)
        np.testing.assert_allclose(a.sum(axis=(-2, -1)), 1.0, atol=1e-12)


@pytest.mark.parametrize("wiring", list(Wiring))
def test_model_gradients(wiring):
    for seed in range(3):
        state, clips, labels = tiny_problem(seed, wiring)
        assert model_loss_gradcheck(state, clips, labels) < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    state = init_model(BackboneConfig(), Wiring.MULTI_MAM_CON, 7, 3, np.float32)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, state)
    assert sidecar_path(path).exists()
    back = load_checkpoint(path)
    assert back.config == state.config and back.wiring is state.wiring
    assert back.num_classes == 7
    assert sorted(back.params) == sorted(state.params)
    for k, v in state.params.items():
        assert back.params[k].dtype == v.dtype
        np.testing.assert_array_equal(back.params[k], v)


def test_checkpoint_bytes_deterministic(tmp_path):
    for name in ("a", "b"):
        save_checkpoint(tmp_path / name, init_model(TINY, Wiring.MULTI_MAM, 3, 9))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
