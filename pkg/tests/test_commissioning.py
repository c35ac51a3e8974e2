import dataclasses

import numpy as np
import pytest

from waferforge.availability import AvailabilityDb, AvailabilityState
from waferforge.commissioning import (CommResult, analog_readout_test, array_exclusion,
                                      comm_test, commission, effective_exclusion,
                                      exclusion_report, individual_from_defects,
                                      memory_test, stability_test, write_report_csv)
from waferforge.defects import Defect, DefectRates, DefectSet, DefectType, random_defects
from waferforge.topology import Coord, Direction, Kind, TopologyConfig
from waferforge.variability import VariabilityConfig
from waferforge.wafer import build_wafer

CFG = TopologyConfig()
FULL_BYTES = 117250  # sum of the per-hicann memory map


def jtag(h):
    return Coord(Kind.JTAG_LINK, (h,))


def highspeed(h):
    return Coord(Kind.HIGHSPEED_LINK, (h,))


def wafer_with(defects=None, seed=11, **kw):
    return build_wafer(seed, defects=DefectSet(list(defects or [])), **kw)


def baseline_effective():
    return effective_exclusion(CFG, AvailabilityState())


# ---- comm test -------------------------------------------------------------


def test_comm_test_defect_free():
    db = AvailabilityDb(CFG)
    res = comm_test(wafer_with(), db)
    assert res.n_jtag_ok == 384
    assert res.n_highspeed_ok == 368  # center groups unbonded by design
    assert not res.highspeed_ok[list(CFG.no_highspeed_hicanns())].any()
    assert len(db.state("individual")) == 0  # by-design gaps are not failures


def test_comm_test_records_individual_failures():
    db = AvailabilityDb(CFG)
    res = comm_test(wafer_with([
        Defect(DefectType.JTAG_DEAD, Coord.hicann_(40)),
        Defect(DefectType.HIGHSPEED_DEAD, Coord.hicann_(40)),  # probed independently
        Defect(DefectType.HIGHSPEED_DEAD, Coord.hicann_(41)),
    ]), db)
    assert not res.jtag_ok[40] and res.jtag_ok[41]
    assert not res.highspeed_ok[40] and not res.highspeed_ok[41]
    ind = db.state("individual")
    assert ind.excluded_of(Kind.JTAG_LINK) == {jtag(40)}
    assert ind.excluded_of(Kind.HIGHSPEED_LINK) == {highspeed(40), highspeed(41)}


# ---- memory test -----------------------------------------------------------


def test_memory_test_defect_free_coverage():
    db = AvailabilityDb(CFG)
    w = wafer_with()
    comm_test(w, db)
    res = memory_test(w, db)
    assert res.full_passes == 384 and res.reduced_passes == 0 and res.skipped == 0
    assert res.bytes_tested == 384 * FULL_BYTES == 45024000
    assert res.bytes_tested > 42 * 1024 * 1024
    assert res.bytes_by_region["synapse_array"] == 384 * 110 * 1024
    assert res.duration_s == 8 * 70.0  # groups in parallel, 8 dies each in series
    assert res.discovered == [] and res.unstable_arrays == []
    assert len(db.state("individual")) == 0


def test_memory_test_reduced_pass_on_failed_highspeed():
    db = AvailabilityDb(CFG)
    w = wafer_with([Defect(DefectType.HIGHSPEED_DEAD, Coord.hicann_(100))])
    comm_test(w, db)
    res = memory_test(w, db)
    assert (res.full_passes, res.reduced_passes, res.skipped) == (383, 1, 0)
    assert res.bytes_tested == 383 * FULL_BYTES + 640 + 960  # routing regions only


def test_memory_test_skips_unreachable_die():
    db = AvailabilityDb(CFG)
    w = wafer_with([
        Defect(DefectType.JTAG_DEAD, Coord.hicann_(100)),
        # undiscoverable: sits behind the dead control link
        Defect(DefectType.REPEATER_BROKEN, Coord.repeater(100, 17)),
    ])
    comm_test(w, db)
    res = memory_test(w, db)
    assert (res.full_passes, res.reduced_passes, res.skipped) == (383, 0, 1)
    assert res.bytes_tested == 383 * FULL_BYTES
    assert db.state("individual").excluded_of(Kind.REPEATER) == set()


def test_memory_test_granularity():
    db = AvailabilityDb(CFG)
    w = wafer_with([
        Defect(DefectType.MEMORY_STUCK, Coord.synapse(10, 1, 30, 40), pattern=0xA5),
        Defect(DefectType.MEMORY_STUCK, Coord.fg_block(11, 2), pattern=0x00),
        Defect(DefectType.SYNAPSE_DRIVER_BROKEN, Coord.synapse_driver(12, 0, 55)),
        Defect(DefectType.SWITCH_BROKEN, Coord.switch(13, 600)),
        Defect(DefectType.FG_CONTROLLER_BROKEN, Coord.hicann_(14)),
        Defect(DefectType.REPEATER_BROKEN, Coord.repeater(15, 300)),
    ])
    comm_test(w, db)
    res = memory_test(w, db)
    ind = db.state("individual")
    assert ind.excluded_of(Kind.SYNAPSE) == {Coord.synapse(10, 1, 30, 40)}
    # a stuck FG-controller SRAM cell corrupts programming for the whole die
    assert ind.excluded_of(Kind.HICANN) == {Coord.hicann_(11), Coord.hicann_(14)}
    assert ind.excluded_of(Kind.SYNAPSE_DRIVER) == {Coord.synapse_driver(12, 0, 55)}
    assert ind.excluded_of(Kind.SWITCH) == {Coord.switch(13, 600)}
    assert ind.excluded_of(Kind.REPEATER) == {Coord.repeater(15, 300)}
    assert res.discovered == ind.all_excluded()


def test_reduced_pass_still_finds_routing_faults():
    # a die reachable only over the control link gets repeater/switch tests,
    # but its driver registers stay untested
    db = AvailabilityDb(CFG)
    w = wafer_with([
        Defect(DefectType.HIGHSPEED_DEAD, Coord.hicann_(60)),
        Defect(DefectType.REPEATER_BROKEN, Coord.repeater(60, 5)),
        Defect(DefectType.SWITCH_BROKEN, Coord.switch(60, 100)),
        Defect(DefectType.SYNAPSE_DRIVER_BROKEN, Coord.synapse_driver(60, 0, 10)),
    ])
    comm_test(w, db)
    memory_test(w, db)
    ind = db.state("individual")
    assert ind.excluded_of(Kind.REPEATER) == {Coord.repeater(60, 5)}
    assert ind.excluded_of(Kind.SWITCH) == {Coord.switch(60, 100)}
    assert ind.excluded_of(Kind.SYNAPSE_DRIVER) == set()


def test_memory_test_worker_count_irrelevant():
    rates = DefectRates(jtag=0.01, highspeed=0.02, fg_controller=0.003,
                        repeater=5e-4, switch=2e-5, synapse_driver=1e-4,
                        synapse_stuck=5e-7, synapse_unstable=2e-8,
                        merger_stuck=2e-4, fg_block_stuck=2e-4)
    defects = random_defects(3, CFG, rates)
    results = []
    for jobs in (1, 8):
        w = build_wafer(21, defects=defects)
        db = AvailabilityDb(CFG)
        comm_test(w, db)
        res = memory_test(w, db, jobs=jobs)
        results.append((db.state("individual"), res))
    (ind1, r1), (ind8, r8) = results
    assert ind1 == ind8
    assert r1.discovered == r8.discovered
    assert r1.bytes_tested == r8.bytes_tested
    assert r1.duration_s == r8.duration_s


# ---- stability test --------------------------------------------------------


def test_stability_stable_without_unstable_cells():
    w = wafer_with([Defect(DefectType.MEMORY_STUCK, Coord.synapse(3, 0, 1, 2), pattern=1)])
    res = stability_test(w, Coord.synapse_array(3, 0))
    assert res.stable and res.unstable_cells == []
    with pytest.raises(ValueError, match="synapse array"):
        stability_test(w, Coord.hicann_(3))


def test_stability_detection_rate():
    # p=0.2 cell escapes 10 same-value reps with 0.8^10 ~ 0.107
    d = Defect(DefectType.MEMORY_UNSTABLE, Coord.synapse(3, 0, 10, 20),
               flip_probability=0.2)
    hits = sum(not stability_test(build_wafer(1000 + s, defects=DefectSet([d])),
                                  Coord.synapse_array(3, 0)).stable
               for s in range(300))
    assert abs(hits / 300 - (1 - 0.8 ** 10)) < 0.05


def test_unstable_cell_takes_whole_array():
    db = AvailabilityDb(CFG)
    w = wafer_with([Defect(DefectType.MEMORY_UNSTABLE, Coord.synapse(7, 1, 100, 200),
                           flip_probability=0.9)], seed=2)
    comm_test(w, db)
    res = memory_test(w, db)
    assert res.unstable_arrays == [Coord.synapse_array(7, 1)]
    ind = db.state("individual")
    assert ind.count_excluded(Kind.SYNAPSE) == 220 * 256 == 56320
    assert ind.count_excluded(Kind.SYNAPSE_ROW) == 224
    assert ind.count_excluded(Kind.SYNAPSE_DRIVER) == 110
    assert ind.excluded_of(Kind.SYNAPSE_ARRAY) == {Coord.synapse_array(7, 1)}
    assert all(c.indices[1] == 1 for c in ind.excluded_of(Kind.SYNAPSE_ROW))
    assert set(array_exclusion(CFG, 7, 1)) <= set(ind.all_excluded())


# ---- effective exclusion ---------------------------------------------------


def test_defect_free_closure_is_design_plus_edge():
    eff = baseline_effective()
    center = set(CFG.no_highspeed_hicanns())
    assert eff.excluded_of(Kind.HIGHSPEED_LINK) == {highspeed(h) for h in center}
    assert eff.excluded_of(Kind.NEURON) == {Coord.neuron(h, n)
                                            for h in center for n in range(512)}
    assert eff.excluded_of(Kind.EXT_MERGER) == {Coord.ext_merger(h, m)
                                                for h in center for m in range(8)}
    edge_buses = {Coord.bus(h, d * 80 + lane)
                  for h in CFG.edge_hicanns for d in Direction for lane in range(80)
                  if CFG.neighbor(h, d) is None}
    assert eff.excluded_of(Kind.BUS) == edge_buses
    assert len(edge_buses) == 1120  # 12 southern groups + 2 rim corners
    for kind in (Kind.JTAG_LINK, Kind.HICANN, Kind.REPEATER, Kind.MERGER,
                 Kind.SYNAPSE, Kind.SWITCH):
        assert eff.count_excluded(kind) == 0


def test_single_repeater_takes_its_two_buses():
    h = CFG.hicann_at(18, 4)
    ind = AvailabilityState([Coord.repeater(h, 85)])
    eff = effective_exclusion(CFG, ind)
    assert eff.excluded_of(Kind.REPEATER) == {Coord.repeater(h, 85)}
    added = eff.excluded_of(Kind.BUS) - baseline_effective().excluded_of(Kind.BUS)
    partner = CFG.bus_partner(h, 85)
    assert added == {Coord.bus(h, 85), Coord.bus(*partner)}


def test_two_repeaters_close_the_block():
    h = CFG.hicann_at(18, 4)
    ind = AvailabilityState([Coord.repeater(h, 85), Coord.repeater(h, 99)])
    eff = effective_exclusion(CFG, ind)
    reps = eff.excluded_of(Kind.REPEATER)
    assert reps == {Coord.repeater(h, r) for r in range(80, 120)}
    assert eff.excluded_of(Kind.REPEATER_BLOCK) == {Coord.repeater_block(h, 2)}
    added = eff.excluded_of(Kind.BUS) - baseline_effective().excluded_of(Kind.BUS)
    assert len(added) == 80  # 40 own + 40 partner-side


def test_rim_facing_repeater_has_one_bus():
    h = CFG.hicann_at(13, 0)  # top row, northern group faces off-grid
    ind = AvailabilityState([Coord.repeater(h, 7)])
    eff = effective_exclusion(CFG, ind)
    added = eff.excluded_of(Kind.BUS) - baseline_effective().excluded_of(Kind.BUS)
    assert added == {Coord.bus(h, 7)}


def test_fg_controller_acts_like_dead_jtag():
    f = CFG.hicann_at(12, 0)  # corner: east + south neighbors only
    ind = AvailabilityState([Coord.hicann_(f)])
    eff = effective_exclusion(CFG, ind)
    assert not eff.is_usable(jtag(f))
    assert not eff.is_usable(highspeed(f))
    assert {c.hicann for c in eff.excluded_of(Kind.NEURON)} \
        == set(CFG.no_highspeed_hicanns()) | {f}
    added = eff.excluded_of(Kind.BUS) - baseline_effective().excluded_of(Kind.BUS)
    east, south = CFG.neighbor(f, Direction.E), CFG.neighbor(f, Direction.S)
    expected = {Coord.bus(east, Direction.W * 80 + lane) for lane in range(80)}
    expected |= {Coord.bus(south, Direction.N * 80 + lane) for lane in range(80)}
    assert added == expected  # neighbors lose their facing groups, not f its own


def test_no_route_excludes_neurons_and_ext_mergers():
    h = CFG.hicann_at(18, 4)
    # channels 0 and 4 share the injection pair (bus 0, bus 160)
    ind = AvailabilityState([Coord.repeater(h, 0), Coord.repeater(h, 160)])
    eff = effective_exclusion(CFG, ind)
    neurons = {c for c in eff.excluded_of(Kind.NEURON) if c.hicann == h}
    assert {c.indices[1] // 64 for c in neurons} == {0, 4}
    assert len(neurons) == 128
    ext = {c.indices[1] for c in eff.excluded_of(Kind.EXT_MERGER) if c.hicann == h}
    assert ext == {0, 4}


def test_broken_leaf_merger_strands_its_neurons():
    h = CFG.hicann_at(18, 4)
    eff = effective_exclusion(CFG, AvailabilityState([Coord.merger(h, 3)]))
    neurons = {c.indices[1] for c in eff.excluded_of(Kind.NEURON) if c.hicann == h}
    assert neurons == set(range(3 * 64, 4 * 64))
    # external input does not pass the leaf merger
    assert all(c.hicann != h for c in eff.excluded_of(Kind.EXT_MERGER))


def test_closure_properties_on_random_sets():
    rates = DefectRates(jtag=0.02, highspeed=0.03, fg_controller=0.004,
                        repeater=0.001, switch=3e-5, synapse_driver=1e-4,
                        synapse_stuck=1e-6, merger_stuck=3e-4, fg_block_stuck=3e-4)
    extra_rates = DefectRates(jtag=0.01, repeater=3e-4, merger_stuck=2e-4)
    for s in range(10):
        ds = random_defects(s, CFG, rates)
        ind = individual_from_defects(CFG, ds)
        eff = effective_exclusion(CFG, ind)
        assert eff.issuperset(ind)
        assert effective_exclusion(CFG, eff) == eff
        grown = DefectSet(ds.defects + random_defects(900 + s, CFG, extra_rates).defects)
        eff_grown = effective_exclusion(CFG, individual_from_defects(CFG, grown))
        assert eff_grown.issuperset(eff)


# ---- analog readout test ---------------------------------------------------


def test_analog_readout_defect_free_passes():
    assert analog_readout_test(wafer_with(seed=7)).all()


def test_analog_readout_flags_noisy_adc():
    noisy = dataclasses.replace(VariabilityConfig(), adc_noise_sigma=0.01)
    ok = analog_readout_test(build_wafer(7, variability=noisy))
    assert not ok.any()


def test_analog_readout_needs_output_and_link():
    db = AvailabilityDb(CFG)
    ind = db.ensure("individual")
    ind.exclude(jtag(5))
    ind.exclude(Coord.analog_out(9, 0))
    ind.exclude(Coord.analog_out(9, 1))
    ind.exclude(Coord.analog_out(10, 0))  # second output still works
    ok = analog_readout_test(wafer_with(seed=7), db)
    assert not ok[5] and not ok[9]
    assert ok[10] and ok[0]


# ---- pipeline + report -----------------------------------------------------


def test_commission_pipeline_builds_both_states():
    w = wafer_with([Defect(DefectType.REPEATER_BROKEN, Coord.repeater(33, 50))])
    db, res = commission(w)
    assert db.names() == ["effective", "individual"]
    assert db.state("effective").issuperset(db.state("individual"))
    assert not db.state("effective").is_usable(Coord.bus(33, 50))


def test_report_reference_totals():
    w = wafer_with()
    db, _ = commission(w)
    rows = {r.resource: r for r in
            exclusion_report(CFG, db.state("individual"), db.state("effective"))}
    assert rows["jtag_link"].components == 384
    assert rows["highspeed_link"].tested == 368
    assert rows["ext_merger"].components == 2984
    assert rows["bus"].components == 119360
    assert rows["repeater"].components == 119360
    assert rows["switch"].components == 2864640
    assert rows["synapse"].components == 40099840
    assert rows["synapse_driver"].components == 78320
    assert rows["synapse_row"].components == 159488
    assert rows["fg_block"].components == 1492
    assert rows["merger"].components == 5340
    assert rows["synapse_array"].components == 712
    assert rows["analog_out"].components == 712
    assert rows["highspeed_link"].effective == 16  # by design
    assert f"{rows['highspeed_link'].effective_pct:.2f}" == "4.17"


def test_report_csv(tmp_path):
    w = wafer_with()
    db, _ = commission(w)
    rows = exclusion_report(CFG, db.state("individual"), db.state("effective"))
    path = tmp_path / "report.csv"
    write_report_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == ("resource,components,tested,individual,individual_pct,"
                        "effective,effective_pct")
    assert lines[1] == "jtag_link,384,384,0,0.00,0,0.00"
    assert lines[2] == "highspeed_link,384,368,0,0.00,16,4.17"
