import math
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from timingsim.clients import (
    BeamGateProgram,
    ChopperDriver,
    ChopperRotor,
    KlystronWindow,
    UtilityModule,
    beam_gate_edges,
    chopper_phase_error_at,
    chopper_step,
    edge_instants,
)
from timingsim.codes import EventCode
from timingsim.rtdl import ADDR_RESET, ADDR_RING_PERIOD, RtdlFrame, encode_frame
from timingsim.ring import carrier_period
from timingsim.simcore import TimedEvent

T = 945_390
CYCLE_S = 1 / 60


def test_mapped_event_interrupts():
    um = UtilityModule("a", interrupt_codes={EventCode.CYCLE_START})
    assert um.on_event(TimedEvent(5, EventCode.CYCLE_START)) == (5, EventCode.CYCLE_START)
    assert um.on_event(TimedEvent(6, EventCode.EXTRACTION)) is None
    assert um.interrupt_count(EventCode.CYCLE_START) == 1


def test_frame_updates_memory():
    um = UtilityModule("a")
    um.store_frame(RtdlFrame(ADDR_RING_PERIOD, T))
    assert um.rtdl_memory[ADDR_RING_PERIOD] == T


def test_reset_selectivity():
    mods = [UtilityModule(f"m{i}", reset_address=0x100 + i) for i in range(4)]
    raw = encode_frame(RtdlFrame(ADDR_RESET, 0x102))
    for m in mods:
        assert m.receive_rtdl(raw, 77)
    assert [m.reset_asserted for m in mods] == [False, False, True, False]
    assert mods[2].reset_at == 77
    assert all(m.rtdl_memory[ADDR_RESET] == 0x102 for m in mods)


def test_no_reset_on_zero():
    um = UtilityModule("a", reset_address=0)
    um.store_frame(RtdlFrame(ADDR_RESET, 0))
    assert not um.reset_asserted


def test_corrupt_frame_counted():
    um = UtilityModule("a")
    raw = bytearray(encode_frame(RtdlFrame(2, 5)))
    raw[5] ^= 1
    assert not um.receive_rtdl(bytes(raw))
    assert um.rtdl_errors == 1 and um.rtdl_memory[2] == 0


# -- chopper -----------------------------------------------------------------


def test_equilibrium():
    r = ChopperRotor("c", omega=10.0)
    a = r.step(1e-3, 0.0, 10.0)
    assert a == 0.0 and r.omega == 10.0


def test_small_offset_matches_linear_oracle():
    # well inside the drive limit the loop is linear: compare against exact
    # integration of the closed-loop ODE via matrix exponential
    import numpy as np
    from scipy.linalg import expm

    kp, ki, kd = 300.0, 1000.0, 30.0
    r = ChopperRotor("c", kp=kp, ki=ki, kd=kd, alpha_max=1e9, phase=-1e-3)
    # state [integral of error, phase, omega] with error = -phase
    A = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [ki, -kp, -kd]])
    x0 = np.array([0.0, -1e-3, 0.0])
    dt = 1e-5
    for k in range(1, 11):
        for _ in range(10_000):
            chopper_step(r, dt, 0.0, 0.0)
        x = expm(A * dt * 10_000 * k) @ x0
        assert abs(r.phase - x[1]) < 1e-6
    assert r.clamp_events == 0
    assert abs(r.phase) < 1e-3 / 20


@given(st.floats(-3, 3), st.floats(-50, 50), st.floats(1, 500))
def test_acceleration_never_exceeds_limit(phase, omega, amax):
    r = ChopperRotor("c", alpha_max=amax, phase=phase, omega=omega)
    for _ in range(100):
        a = r.step(1e-3, 0.0, 0.0)
        assert abs(a) <= amax
    assert r.max_accel <= amax


def test_error_conversion():
    r = ChopperRotor.for_kind("f", "fermi")
    assert r.harmonic == 10 and r.alpha_max == 1000
    zero = chopper_phase_error_at(r, 0.0, CYCLE_S)
    assert zero.time_error_ps == 0 and zero.desired_ok and zero.required_ok
    r.phase = -2 * math.pi * 10 * 0.7e-6 / CYCLE_S
    e = chopper_phase_error_at(r, 0.0, CYCLE_S)
    assert e.time_error_ps == pytest.approx(700_000, abs=1)
    assert not e.desired_ok and e.required_ok


def test_bad_rotor_config():
    with pytest.raises(ValueError):
        ChopperRotor("x", kind="disc")
    with pytest.raises(ValueError):
        ChopperRotor("x", harmonic=0)
    with pytest.raises(ValueError):
        ChopperRotor("x").step(0, 0)


def drive(extractions, rotor):
    d = ChopperDriver(rotor)
    d.start(extractions[0], 16_666_666_667)
    return d, [d.advance_to(t, i) for i, t in enumerate(extractions)]


def test_driver_locks_on_steady_train():
    ext = [22_000_000_000 + k * 16_666_666_667 for k in range(30)]
    d, errs = drive(ext, ChopperRotor.for_kind("t0", "t0"))
    assert d.locked and d.locked_at == 9
    assert all(abs(e.time_error_ps) <= 1 for e in errs)


def test_step_in_train_clamps():
    ext = [k * 16_666_666_667 for k in range(1, 40)]
    ext = ext[:20] + [t + 600_000_000 for t in ext[20:]]
    d, errs = drive(ext, ChopperRotor.for_kind("t0", "t0"))
    assert d.rotor.clamp_events > 0
    assert d.rotor.max_accel == d.rotor.alpha_max


# -- klystron / beam gate --------------------------------------------------------


def test_klystron_window():
    kw = KlystronWindow(500_000_000)
    assert kw.check(0, 500_000_000).passed
    assert not kw.check(1, -500_000_001).passed
    assert kw.failed_cycles() == [1]


def test_first_turn_edges():
    edges = beam_gate_edges(BeamGateProgram.for_period(T))
    assert edges[:2] == [(0, "off"), (5, "on")]
    assert len(edges) == 2120
    assert 5 * carrier_period(T) == Fraction(4_726_950, 16)
    assert edges[-1] == (16 * 1059 + 5, "on")


def test_off_edges_sixteen_ticks_apart():
    offs = [t for t, k in beam_gate_edges(BeamGateProgram()) if k == "off"]
    assert set(b - a for a, b in zip(offs, offs[1:])) == {16}


def test_last_on_edge_precedes_extraction():
    prog = BeamGateProgram.for_period(T)
    inj = 10**12
    origin = prog.origin(inj, T)
    assert edge_instants(prog, origin, T)[-1] < inj + 1060 * T


@given(st.integers(900_000, 960_000), st.integers(0, 10**13))
def test_extraction_on_turn_boundary_is_mid_gap(period, inj):
    prog = BeamGateProgram.for_period(period)
    origin = prog.origin(inj, period)
    ext = inj + 1060 * period
    assert abs(prog.alignment(ext, origin, period)) <= 5_000
    assert prog.alignment(ext, origin, period) == 0


def test_bad_gap():
    with pytest.raises(ValueError):
        BeamGateProgram(gap_ticks=16)
