import json
from pathlib import Path

import pytest

from opengcd.config import ConfigError, RunConfig

GOLDEN = Path(__file__).parent / "golden" / "default_config.json"


def test_defaults_match_golden_file():
    assert RunConfig().to_json() == GOLDEN.read_text()


def test_json_roundtrip():
    cfg = RunConfig().replace(tau=0.3, ood_split=(0.5, 0.5, 0.0), synth={"dim": 16})
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg
    assert cfg.digest() != RunConfig().digest()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="lamda_oe"):
        RunConfig.from_dict({"lamda_oe": 1.0})
    with pytest.raises(ConfigError, match="synth.dimm"):
        RunConfig.from_dict({"synth": {"dimm": 3}})


@pytest.mark.parametrize("change", [{"rho": 0.0}, {"rho": 1.5}, {"beta": 0.5}, {"tau": 0.0},
                                    {"ood_split": (0, 0, 0)}, {"momentum": 1.0}, {"batch_size": 1},
                                    {"synth": {"n_classes": 3}}])
def test_illegal_values_rejected(change):
    with pytest.raises(ConfigError):
        RunConfig().replace(**change)
