"""YAML loading, defaults and field-path errors."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hapschain.config import (
    ConfigInvalid,
    ConfigNotFound,
    ScenarioConfig,
    dump_config,
    from_dict,
    parse_config,
)


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("")
    cfg = parse_config(p)
    assert cfg == ScenarioConfig()
    assert cfg.consensus_params.t_th == 100 and cfg.adversary.pmn == pytest.approx(0.30)


def test_out_of_range_pmn_names_the_field(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("adversary:\n  pmn: 1.5\n")
    with pytest.raises(ConfigInvalid) as err:
        parse_config(p)
    assert err.value.field == "adversary.pmn"


def test_missing_file(tmp_path):
    with pytest.raises(ConfigNotFound):
        parse_config(tmp_path / "nope.yaml")


def test_unknown_key_rejected():
    with pytest.raises(ConfigInvalid) as err:
        from_dict({"topology": {"sensorz": 3}})
    assert err.value.field == "topology.sensorz"


def test_wrong_type_rejected():
    with pytest.raises(ConfigInvalid) as err:
        from_dict({"sim_time": "long"})
    assert err.value.field == "sim_time"


def test_unknown_mode_rejected():
    with pytest.raises(ConfigInvalid):
        from_dict({"consensus": "raft"})


def test_dotted_replace():
    cfg = ScenarioConfig().replace(**{"adversary.pmn": 0.5, "seed": 4})
    assert cfg.adversary.pmn == 0.5 and cfg.seed == 4
    with pytest.raises(ConfigInvalid):
        ScenarioConfig().replace(**{"adversary.nope": 1})


def test_dump_round_trip(tmp_path):
    cfg = ScenarioConfig().replace(**{"topology.sensors": 300, "network.mtu": 15})
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert parse_config(p) == cfg


@given(st.floats(min_value=0.0, max_value=0.999), st.integers(min_value=0, max_value=10 ** 6),
       st.sampled_from(["quico", "pbft_baseline"]))
@settings(max_examples=40, deadline=None)
def test_valid_overrides_round_trip(pmn, sim_time, mode):
    cfg = from_dict({"adversary": {"pmn": pmn}, "sim_time": sim_time, "consensus": mode})
    assert from_dict(cfg.to_dict()) == cfg
