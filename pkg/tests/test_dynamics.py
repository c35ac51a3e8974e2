import numpy as np
import pytest

from waferforge.dynamics import (
    EventQueue,
    SynapticMatrix,
    UnitParams,
    integrate,
)
from waferforge.psp import psp_analytic, psp_peak_factor, psp_peak_time


def leak_params(n=1, e_leak=0.7, g_leak=1.2e-10, v_threshold=2.0, v_reset=0.5,
                tau_ref=0.0, **kw):
    return UnitParams.build(
        capacitance=2.16e-12, g_leak=g_leak, e_leak=e_leak,
        v_threshold=v_threshold, v_reset=v_reset, tau_ref=tau_ref,
        e_synx=kw.get("e_synx", 1.4), e_syni=kw.get("e_syni", 0.3),
        tau_synx=kw.get("tau_synx", 1.1e-3), tau_syni=kw.get("tau_syni", 1.1e-3),
        g_base_x=kw.get("g_base_x", 0.0), g_base_i=kw.get("g_base_i", 0.0),
        i_sat=kw.get("i_sat", np.inf), n=n)


def run(params, duration, dt=1e-4, **kw):
    kw.setdefault("events_x", EventQueue.empty())
    kw.setdefault("events_i", EventQueue.empty())
    return integrate(params, duration, dt, **kw)


def test_leak_relaxation_is_exact():
    # exponential Euler solves the pure leak equation exactly at any dt
    p = leak_params()
    res = run(p, 0.05, dt=1e-3, v_init=np.array([0.2]))
    tau = 2.16e-12 / 1.2e-10
    exact = 0.7 + (0.2 - 0.7) * np.exp(-res.t / tau)
    assert np.max(np.abs(res.v[0] - exact)) < 1e-13


def test_no_conductance_no_drift():
    p = leak_params(g_leak=0.0)
    res = run(p, 0.02, v_init=np.array([0.6321]))
    assert np.all(res.v[0] == 0.6321)


def test_isi_matches_closed_form():
    # suprathreshold leak: T = tau_ref + tau * ln((E-Vr)/(E-Vth))
    tau = 2.16e-12 / 1.2e-10  # 18 ms
    p = leak_params(e_leak=1.2, v_threshold=0.9, v_reset=0.5, tau_ref=0.0)
    dt = 1e-4
    res = run(p, 0.5, dt=dt)
    times = res.spikes_of(0)
    isi = np.diff(times)
    analytic = tau * np.log((1.2 - 0.5) / (1.2 - 0.9))
    assert len(times) > 10
    assert abs(np.mean(isi) - analytic) < dt
    # release-boundary quantization cancels in the ISI: successive ISIs agree
    assert np.std(isi) < dt


def test_refractory_period_extends_isi():
    tau = 2.16e-12 / 1.2e-10
    analytic = tau * np.log((1.2 - 0.5) / (1.2 - 0.9))
    p0 = leak_params(e_leak=1.2, v_threshold=0.9, tau_ref=0.0)
    p2 = leak_params(e_leak=1.2, v_threshold=0.9, tau_ref=2e-3)
    dt = 1e-4
    isi0 = np.mean(np.diff(run(p0, 0.5, dt=dt).spikes_of(0)))
    isi2 = np.mean(np.diff(run(p2, 0.5, dt=dt).spikes_of(0)))
    assert abs((isi2 - isi0) - 2e-3) < dt
    assert abs(isi2 - (analytic + 2e-3)) < 2 * dt


def test_psp_convergence_first_order():
    # single excitatory kick vs analytic difference-of-exponentials PSP
    e_leak, e_synx = 0.7, 1.4
    g_l = 2.16e-12 / 19e-3
    tau_s = 1.1e-3
    g0 = 2.0e-12
    p = leak_params(e_leak=e_leak, g_leak=g_l, e_synx=e_synx, tau_synx=tau_s)
    tau_m = 19e-3
    h_lin = g0 * (e_synx - e_leak) / 2.16e-12 * (tau_s * tau_m / (tau_m - tau_s))
    h_lin *= psp_peak_factor(tau_m, tau_s)
    errs = []
    for dt in (1e-4, 5e-5, 2.5e-5):
        q = EventQueue.from_times(np.array([0.01]), np.array([0]),
                                  np.array([g0]), dt)
        res = run(p, 0.08, dt=dt, events_x=q, v_init=np.array([e_leak]))
        model = psp_analytic(res.t, 0.01 + dt, h_lin, tau_m, tau_s, e_leak)
        errs.append(np.max(np.abs(res.v[0] - model)))
    assert errs[0] / errs[1] > 1.8
    assert errs[1] / errs[2] > 1.8
    assert errs[2] < 1e-5  # < 10 uV at dt = 25 us for a 0.6 mV PSP


def test_psp_peak_factor_alpha_limit():
    # equal time constants degrade smoothly into the alpha function
    t = np.linspace(0, 0.05, 200)
    a = psp_analytic(t, 0.0, 1.0, 5e-3, 5e-3, 0.0)
    b = psp_analytic(t, 0.0, 1.0, 5e-3, 5e-3 * (1 + 1e-10), 0.0)
    assert np.max(np.abs(a - b)) < 1e-6
    at_peak = psp_analytic(np.array([5e-3]), 0.0, 1.0, 5e-3, 5e-3, 0.0)
    assert at_peak[0] == pytest.approx(1.0, abs=1e-9)  # h is the peak height
    tpk = psp_peak_time(19e-3, 1.1e-3)
    assert tpk == pytest.approx(np.log(19 / 1.1) / (1 / 1.1e-3 - 1 / 19e-3), rel=1e-9)
    assert 0 < psp_peak_factor(19e-3, 1.1e-3) < 1
    assert abs(psp_peak_factor(5e-3, 5e-3 * (1 + 1e-12))) < 1e-9  # vanishes at r=1


def test_event_delivery_strictly_after_spike():
    # an event exactly on a grid point acts on the following step
    dt = 1e-4
    q = EventQueue.from_times(np.array([10 * dt]), np.array([0]),
                              np.array([1e-9]), dt)
    assert q.boundary[0] == 11
    q2 = EventQueue.from_times(np.array([10.5 * dt]), np.array([0]),
                               np.array([1e-9]), dt)
    assert q2.boundary[0] == 11
    p = leak_params(g_leak=0.0)
    res = run(p, 0.002, dt=dt, events_x=q, v_init=np.array([0.7]))
    assert np.all(res.v[0][:12] == 0.7)  # untouched through boundary 11
    assert res.v[0][12] > 0.7


def test_synaptic_matrix_accumulate_matches_dense():
    rng = np.random.default_rng(42)
    n = 13
    pre = rng.integers(n, size=40)
    post = rng.integers(n, size=40)
    amount = rng.uniform(0, 1e-9, size=40)
    dense = np.zeros((n, n))
    np.add.at(dense, (pre, post), amount)
    m = SynapticMatrix.from_triplets(n, pre, post, amount)
    assert m.n_connections == 40
    sources = np.array([0, 3, 3, 7])  # repeated source fires twice this step
    out = np.zeros(n)
    m.accumulate(sources, out)
    assert np.allclose(out, dense[sources].sum(axis=0), rtol=1e-12)


def test_synaptic_matrix_rejects_negative():
    with pytest.raises(ValueError):
        SynapticMatrix.from_triplets(2, [0], [0], [-1e-12])


def test_saturation_limits_charge_rate():
    # with the OTA pinned, the membrane charges linearly at i_sat/C
    i_sat = 5e-11
    cap = 2.16e-12
    p = leak_params(g_leak=0.0, i_sat=i_sat, e_synx=1.4)
    dt = 1e-4
    q = EventQueue.from_times(np.array([0.0]), np.array([0]),
                              np.array([1e-6]), dt)  # absurdly strong synapse
    res = run(p, 0.004, dt=dt, events_x=q, v_init=np.array([0.3]))
    v = res.v[0]
    rate = np.diff(v[2:20]) / dt
    assert np.allclose(rate, i_sat / cap, rtol=1e-6)
    # and never overshoots the excitatory reversal potential
    assert np.max(v) <= 1.4 + 1e-12


def test_spike_records_are_sorted_and_interpolated():
    p = leak_params(n=2, e_leak=1.2, v_threshold=0.9)
    res = run(p, 0.1, dt=1e-4)
    assert np.all(np.diff(res.spike_times) >= 0)
    t0 = res.spikes_of(0)[0]
    assert t0 % 1e-4 != 0.0  # sub-step threshold crossing time
    assert np.array_equal(res.spikes_of(0), res.spikes_of(1))  # identical units


def test_record_subset_of_units():
    p = leak_params(n=5)
    res = run(p, 0.01, record_units=[3, 1])
    assert res.v.shape[0] == 2
    assert np.array_equal(res.record_units, [3, 1])
    full = run(p, 0.01)
    assert np.array_equal(res.v[0], full.v[3])
    assert np.array_equal(res.v[1], full.v[1])
