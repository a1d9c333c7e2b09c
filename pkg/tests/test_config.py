import pytest
import yaml

from timingsim.codes import EventCode
from timingsim.config import (
    ConfigError,
    builtin_names,
    load_builtin,
    load_scenario,
    resolve,
    scenario_from_dict,
    to_dict,
)


def base(**extra):
    d = {"cycles": 10, "mtg": {"coupling": 0.5}}
    d.update(extra)
    return d


def test_minimal_scenario():
    sc = scenario_from_dict(base())
    assert sc.cycles == 10 and sc.mtg.coupling == 0.5
    assert not sc.grid_seed_explicit


@pytest.mark.parametrize(
    "raw, section",
    [
        (base(colour="red"), "scenario"),
        (base(grid={"wander": 1}), "grid"),
        (base(mtg={"coupling": 0.5, "ncs": 6000}), "mtg"),
        (base(ring={"energy": 1000}), "ring"),
        (base(rtdl={"baud": 1}), "rtdl"),
        (base(clients={"choppers": [{"name": "a", "speed": 3}]}), "clients.choppers[0]"),
    ],
)
def test_unknown_keys_rejected(raw, section):
    with pytest.raises(ConfigError) as exc:
        scenario_from_dict(raw)
    assert exc.value.section == section
    assert "unknown key" in str(exc.value)


def test_transients_and_codes():
    sc = scenario_from_dict(
        base(
            grid={"seed": 4, "transients": [{"at_ps": 10, "kind": "phase-step", "magnitude": 600e6}]},
            clients={"utility_modules": [{"name": "a", "interrupts": ["cycle_start", 7]}]},
        )
    )
    assert sc.grid.transients[0].magnitude == 600e6
    assert sc.grid_seed_explicit
    assert sc.clients.utility_modules[0].interrupts == [EventCode.CYCLE_START, 7]


@pytest.mark.parametrize(
    "raw",
    [
        base(grid={"transients": [{"at_ps": 1, "kind": "surge", "magnitude": 1}]}),
        base(grid={"transients": [{"kind": "phase-step", "magnitude": 1}]}),
        base(clients={"utility_modules": [{"name": "a", "interrupts": ["BOGUS"]}]}),
        base(mtg={"n_cs": 1000, "coupling": 0.5}),
        base(mtg={}),
        base(mtg={"coupling": 0.5, "target_sigma_ps": 1}),
        base(rtdl={"lead_ps": 10_000_000}),
        base(rtdl={"encoder_list": [0x55]}),
        base(link_mode="fibre"),
        base(checks=["everything"]),
        base(cycles=0),
        base(clients={"klystron_window_ps": 1}),
        base(clients={"choppers": [{"name": "x"}, {"name": "x"}]}),
    ],
)
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        scenario_from_dict(raw)


def test_builtins_load():
    names = builtin_names()
    assert {"reference", "quiet", "harsh", "phase_step", "drift", "nominal"} <= set(names)
    for n in names:
        assert resolve(f"builtin:{n}").name == n
    with pytest.raises(ConfigError):
        load_builtin("nope")


def test_file_round_trip(tmp_path):
    sc = load_builtin("phase_step")
    p = tmp_path / "s.yaml"
    p.write_text(yaml.safe_dump(to_dict(sc)))
    back = load_scenario(p)
    assert to_dict(back) == to_dict(sc)


def test_name_from_file(tmp_path):
    p = tmp_path / "mine.yaml"
    p.write_text(yaml.safe_dump(base()))
    assert load_scenario(p).name == "mine"
