import pytest
from hypothesis import given
from hypothesis import strategies as st

from limbvton.config import (
    TrainConfig,
    config_from_mapping,
    default_config,
    dump_config,
    load_config,
    lr_at,
    parse_config_text,
)
from limbvton.ltf import TextureFuser
from limbvton.pcw import ClothingWarper
from limbvton.ppe import ParsingEstimator


def test_defaults_snapshot():
    cfg = TrainConfig()
    assert (cfg.lambda_gra, cfg.lambda_vgg, cfg.lambda_tv) == (1.0, 8.0, 0.1)
    assert cfg.class_weights == (1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 1.0)
    assert (cfg.lambda_img, cfg.lambda_p, cfg.lambda_edge) == (1.0, 2.0, 0.4)
    assert cfg.patch_scale == 8
    assert cfg.batch_size == 4
    assert cfg.betas == (0.5, 0.999)
    assert cfg.lr == 1e-4
    assert (cfg.height, cfg.width) == (256, 192)


def test_full_and_desk_step_counts():
    assert [default_config(m, "full").steps for m in ("pcw", "ppe", "ltf")] == [60_000, 80_000, 80_000]
    assert [default_config(m).steps for m in ("pcw", "ppe", "ltf")] == [600, 800, 800]


def test_estimator_defaults_match_config():
    for module, cls in (("pcw", ClothingWarper), ("ppe", ParsingEstimator), ("ltf", TextureFuser)):
        cfg = default_config(module)
        est = cls(**cfg.estimator_params())
        defaults = cls().get_params()
        for key, value in est.get_params().items():
            assert defaults[key] == value, (module, key)


def test_lr_examples():
    assert lr_at(0, 1000) == 1e-4
    assert lr_at(1000, 1000) == 0.0
    assert lr_at(750, 1000) == pytest.approx(5e-5)
    assert lr_at(499, 1000) == 1e-4
    with pytest.raises(ValueError):
        lr_at(1001, 1000)


@given(st.integers(1, 200_000), st.data())
def test_lr_closed_form(total, data):
    step = data.draw(st.integers(0, total))
    expected = 1e-4 if step < total / 2 else 1e-4 * (1 - (step - total / 2) / (total / 2))
    assert lr_at(step, total) == pytest.approx(expected, abs=1e-15)
    assert 0 <= lr_at(step, total) <= 1e-4


def test_parse_config_text():
    text = """
    # comment
    steps = 20          # trailing
    lr = 2e-4
    deterministic = false
    data_root = /data/viton
    class_weights = (1, 1, 1, 2, 2, 2, 1)
    ppe.batch_size = 2
    """
    d = parse_config_text(text)
    assert d["steps"] == 20 and d["lr"] == 2e-4 and d["deterministic"] is False
    assert d["data_root"] == "/data/viton"
    assert d["class_weights"] == (1, 1, 1, 2, 2, 2, 1)
    assert d["ppe.batch_size"] == 2


def test_parse_config_errors():
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("just words")
    with pytest.raises(ValueError):
        parse_config_text(" = 3")


def test_scoped_keys_apply_to_their_module():
    m = {"steps": 30, "ppe.steps": 7, "ltf.lambda_p": 0.0, "train.seed": 5}
    assert config_from_mapping(m, "ppe").steps == 7
    pcw = config_from_mapping(m, "pcw")
    assert pcw.steps == 30 and pcw.seed == 5 and pcw.checkpoint_every == 3
    assert config_from_mapping(m, "ltf").lambda_p == 0.0


def test_unknown_keys_rejected():
    with pytest.raises(KeyError):
        config_from_mapping({"lamda_gra": 1.0})
    with pytest.raises(KeyError):
        config_from_mapping({"warp.steps": 1})
    with pytest.raises(ValueError):
        config_from_mapping({"steps": 0})


def test_dump_load_round_trip(tmp_path):
    cfg = default_config("ltf", steps=12, data_root="x y", perceptual_weights=(1.0,) * 5)
    path = tmp_path / "c.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
