import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segmeans import calibrate
from segmeans.errors import ConfigError, MapFormatError, MapVersionError
from segmeans.profiler import (
    PerformanceMap,
    PerfRecord,
    SimulatorEngine,
    SweepGrid,
    load_map,
    run_sweep,
    save_map,
)


@pytest.fixture(scope="module")
def cm():
    return calibrate.builtin_cost_model()


@pytest.fixture(scope="module")
def default_map(cm):
    return run_sweep(SweepGrid(), SimulatorEngine(cm), cm)


SMALL = SweepGrid(batches=(1, 8), crs=(9.9,), bandwidths_mbps=(300, 400),
                  warmup_runs=2, measured_runs=3)


class TestSweepGrid:
    def test_defaults(self):
        grid = SweepGrid()
        assert grid.batches == (1, 2, 4, 8, 16, 32)
        assert grid.crs == (3.3, 4.95, 9.9)
        assert grid.bandwidths_mbps == tuple(range(200, 1000, 100))
        assert grid.warmup_runs == 20 and grid.measured_runs == 20

    def test_empty_axis_rejected(self):
        with pytest.raises(ConfigError):
            SweepGrid(batches=())

    def test_negative_warmup_rejected(self):
        with pytest.raises(ConfigError):
            SweepGrid(warmup_runs=-1)


class TestRunSweep:
    def test_default_grid_cardinality(self, default_map):
        # 6 batches x (1 local + 3 rates) x 8 bandwidths
        assert len(default_map.records) == 192

    def test_invocation_count(self, cm):
        engine = SimulatorEngine(cm)
        grid = SMALL
        run_sweep(grid, engine, cm)
        # distributed points plus one local point per batch, each warm + measured
        points = (len(grid.batches) * len(grid.crs) * len(grid.bandwidths_mbps)
                  + len(grid.batches))
        assert engine.invocations == points * (grid.warmup_runs + grid.measured_runs)

    def test_local_replicated_across_bandwidths(self, default_map):
        rows = [r for r in default_map.records if r.mode == "local" and r.batch == 4]
        assert len(rows) == 8
        assert len({r.total_ms for r in rows}) == 1
        assert len({r.bandwidth_mbps for r in rows}) == 8

    def test_warmup_has_no_effect_with_simulator(self, cm):
        cold = run_sweep(SweepGrid(batches=(2,), crs=(9.9,), bandwidths_mbps=(400,),
                                   warmup_runs=0, measured_runs=3),
                         SimulatorEngine(cm), cm)
        warm = run_sweep(SweepGrid(batches=(2,), crs=(9.9,), bandwidths_mbps=(400,),
                                   warmup_runs=20, measured_runs=3),
                         SimulatorEngine(cm), cm)
        for a, b in zip(cold.records, warm.records):
            assert a.total_ms == b.total_ms

    def test_per_sample_definition(self, default_map):
        for r in default_map.records:
            assert r.per_sample_ms == pytest.approx(r.total_ms / r.batch)

    def test_deterministic_dispersion_is_zero(self, default_map):
        assert all(r.std_ms == 0.0 for r in default_map.records)

    def test_permuted_grid_yields_same_records(self, cm):
        a = run_sweep(SMALL, SimulatorEngine(cm), cm)
        permuted = SweepGrid(batches=(8, 1), crs=(9.9,), bandwidths_mbps=(400, 300),
                             warmup_runs=2, measured_runs=3)
        b = run_sweep(permuted, SimulatorEngine(cm), cm)
        key = lambda r: r.key
        assert sorted(a.records, key=key) == sorted(b.records, key=key)

    def test_engine_failure_marks_record(self, cm):
        class Flaky(SimulatorEngine):
            def __call__(self, mode, cr, batch, bandwidth_mbps):
                if mode == "prism" and batch == 8:
                    raise RuntimeError("boom")
                return super().__call__(mode, cr, batch, bandwidth_mbps)

        pm = run_sweep(SMALL, Flaky(cm), cm)
        failed = [r for r in pm.records if r.failed]
        assert failed and all(r.mode == "prism" and r.batch == 8 for r in failed)
        ok = [r for r in pm.records if not r.failed]
        assert len(ok) == len(pm.records) - len(failed) > 0
        assert pm.grid["failures"]

    def test_cr_one_profiles_as_full_exchange(self, cm):
        grid = SweepGrid(batches=(1,), crs=(1.0,), bandwidths_mbps=(400,),
                         warmup_runs=0, measured_runs=1)
        pm = run_sweep(grid, SimulatorEngine(cm), cm)
        modes = {r.mode for r in pm.records}
        assert modes == {"local", "voltage"}


class TestMapPersistence:
    def test_round_trip(self, default_map, tmp_path):
        path = tmp_path / "map.json"
        save_map(default_map, path)
        again = load_map(path)
        assert default_map.value_equal(again)

    def test_file_size_bounded(self, default_map, tmp_path):
        path = tmp_path / "map.json"
        save_map(default_map, path)
        assert path.stat().st_size < 256 * 1024

    def test_schema_fields_exact(self, default_map, tmp_path):
        path = tmp_path / "map.json"
        save_map(default_map, path)
        payload = json.loads(path.read_text())
        assert payload["schema"] == 1
        record = payload["records"][0]
        assert set(record) == {"batch", "mode", "cr", "bandwidth_mbps", "total_ms",
                               "per_sample_ms", "per_sample_j", "comp_ms",
                               "staging_ms", "comm_ms", "runs", "std_ms", "failed"}

    def test_truncated_file_is_parse_error(self, default_map, tmp_path):
        path = tmp_path / "map.json"
        save_map(default_map, path)
        path.write_text(path.read_text()[:100])
        with pytest.raises(MapFormatError):
            load_map(path)

    def test_version_mismatch(self, default_map, tmp_path):
        path = tmp_path / "map.json"
        save_map(default_map, path)
        payload = json.loads(path.read_text())
        payload["schema"] = 99
        path.write_text(json.dumps(payload))
        with pytest.raises(MapVersionError):
            load_map(path)

    def test_missing_record_field(self, tmp_path):
        path = tmp_path / "map.json"
        path.write_text(json.dumps({"schema": 1, "model": {}, "grid": {},
                                    "records": [{"batch": 1}]}))
        with pytest.raises(MapFormatError):
            load_map(path)

    @settings(max_examples=25, deadline=None)
    @given(records=st.lists(
        st.builds(
            PerfRecord,
            batch=st.integers(1, 64),
            mode=st.sampled_from(["local", "prism", "voltage"]),
            cr=st.one_of(st.none(), st.sampled_from([1.0, 3.3, 4.95, 9.9])),
            bandwidth_mbps=st.integers(100, 1000),
            total_ms=st.floats(0, 1e6, allow_nan=False),
            per_sample_ms=st.floats(0, 1e6, allow_nan=False),
            per_sample_j=st.floats(0, 1e3, allow_nan=False),
            comp_ms=st.floats(0, 1e6, allow_nan=False),
            staging_ms=st.floats(0, 1e6, allow_nan=False),
            comm_ms=st.floats(0, 1e6, allow_nan=False),
            runs=st.integers(0, 100),
            std_ms=st.floats(0, 1e3, allow_nan=False),
            failed=st.booleans(),
        ),
        max_size=8, unique_by=lambda r: r.key))
    def test_arbitrary_records_round_trip(self, records, tmp_path_factory):
        pm = PerformanceMap(model={"embed_dim": 8}, grid={}, records=records)
        path = tmp_path_factory.mktemp("maps") / "map.json"
        save_map(pm, path)
        assert load_map(path).value_equal(pm)


class TestPerformanceMapQueries:
    def test_lookup_and_plans(self, default_map):
        rec = default_map.lookup(8, "prism", 9.9, 400)
        assert rec is not None and rec.batch == 8
        assert ("local", None) in default_map.plans
        assert ("prism", 9.9) in default_map.plans
        assert default_map.batches == [1, 2, 4, 8, 16, 32]
