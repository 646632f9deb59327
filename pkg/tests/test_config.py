import pytest

from forgeloc.config import ConfigError, RunConfig, parse_pairs, parse_value, validate_config


def test_defaults():
    cfg = validate_config()
    assert cfg == RunConfig()
    assert (cfg.lr_init, cfg.min_lr, cfg.batch_size, cfg.input_size) == (1e-4, 1e-6, 4, 512)
    assert cfg.contrast().temperature == 0.1
    assert cfg.focal().alpha == 0.5 and cfg.focal().gamma == 2.0
    assert cfg.sampler().negatives == 512


def test_file_then_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nbatch_size = 2\ninput_size = 128  # small\nloss_within_image = false\n")
    cfg = validate_config(p, ["batch_size=8", "jpeg_axis=90,70"])
    assert cfg.batch_size == 8 and cfg.input_size == 128 and not cfg.loss_within_image
    assert cfg.jpeg_axis == (90.0, 70.0)
    assert validate_config(p, {"temperature": "0.5"}).temperature == 0.5


def test_round_trip_dumps():
    cfg = RunConfig(global_seed=7, temperature=0.05, shared_pools=True, noise_axis=(0.01,))
    again = RunConfig(**parse_pairs(cfg.dumps().splitlines()))
    assert again == cfg


@pytest.mark.parametrize(
    "item, key",
    [
        ("lr_init=-1", "lr_init"),
        ("input_size=100", "input_size"),
        ("temperature=0", "temperature"),
        ("backbone_size=huge", "backbone_size"),
        ("batch_size=two", "batch_size"),
        ("bogus=1", "bogus"),
        ("threshold=1.5", "threshold"),
        ("normalize_embeddings=maybe", "normalize_embeddings"),
    ],
)
def test_errors_name_key(item, key):
    with pytest.raises(ConfigError) as err:
        validate_config(overrides=[item])
    assert err.value.key == key
    assert key in str(err.value)


def test_all_losses_disabled():
    with pytest.raises(ConfigError):
        RunConfig(loss_within_image=False, loss_cross_scale=False, loss_cross_modality=False)


def test_malformed_lines(tmp_path):
    with pytest.raises(ConfigError):
        parse_pairs(["just words"])
    with pytest.raises(ConfigError):
        validate_config(overrides=["no_equals"])
    with pytest.raises(ConfigError):
        validate_config(tmp_path / "absent.cfg")


def test_parse_value_types():
    assert parse_value("shared_pools", "yes") is True
    assert parse_value("global_seed", "12") == 12
    assert parse_value("min_lr", "1e-6") == 1e-6
    assert parse_value("resize_axis", "0.9, 0.5") == (0.9, 0.5)
