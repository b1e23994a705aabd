import csv
import io

import pytest

from vmseg.bench import (
    CSV_FIELDS,
    BenchReport,
    compare_variants,
    format_table,
    measure_inference,
    measure_memory,
    param_bytes,
    ranking_csv,
    variant_configs,
)
from vmseg.errors import ContractError
from vmseg.segnet import NetConfig, build_network

BASE = NetConfig(depth=1, base_channels=4)
SHAPE = (1, 1, 16, 16)


@pytest.fixture(scope="module")
def compared():
    return compare_variants(variant_configs(BASE), SHAPE, warmup=1, runs=3)


class TestReport:
    def test_complete(self, compared):
        reports, _ = compared
        assert [r.variant for r in reports] == ["baseline", "se", "cbam"]
        for r in reports:
            assert r.input_shape == SHAPE and r.warmup == 1 and r.runs == 3 and len(r.times) == 3
            assert all(t > 0 for t in r.times)
            assert min(r.times) <= r.median <= max(r.times)
            assert r.cv >= 0
            assert r.peak_bytes >= r.param_bytes > 0

    def test_csv(self, compared):
        reports, text = compared
        rows = list(csv.DictReader(io.StringIO(text)))
        assert tuple(rows[0])[:len(CSV_FIELDS)] == CSV_FIELDS
        assert sorted(r["variant"] for r in rows) == ["baseline", "cbam", "se"]
        assert sorted(int(r["time_rank"]) for r in rows) == [1, 2, 3]
        assert sorted(int(r["memory_rank"]) for r in rows) == [1, 2, 3]
        medians = [float(r["median_s"]) for r in rows]
        assert medians == sorted(medians)

    def test_table(self, compared):
        lines = format_table(compared[0]).splitlines()
        assert lines[0].startswith("# input") and len(lines) == 5
        assert [ln.split()[0] for ln in lines[2:]] == ["baseline", "se", "cbam"]

    def test_attention_adds_parameter_bytes(self, compared):
        by_name = {r.variant: r for r in compared[0]}
        assert by_name["baseline"].param_bytes < by_name["se"].param_bytes < by_name["cbam"].param_bytes

    def test_ranking_breaks_ties_by_input_order(self):
        reports = [BenchReport(v, SHAPE, 1, 3, [1.0, 1.0, 1.0], 10, 1) for v in ("a", "b")]
        rows = list(csv.DictReader(io.StringIO(ranking_csv(reports))))
        assert [r["variant"] for r in rows] == ["a", "b"] and [r["memory_rank"] for r in rows] == ["1", "2"]


class TestMemory:
    @pytest.mark.parametrize("variant", ["baseline", "se", "cbam"])
    def test_bitwise_reproducible(self, variant):
        net = build_network(NetConfig(variant=variant, depth=2, base_channels=4))
        assert measure_memory(net, SHAPE) == measure_memory(net, SHAPE)
        again = build_network(NetConfig(variant=variant, depth=2, base_channels=4))
        assert measure_memory(again, SHAPE) == measure_memory(net, SHAPE)

    def test_grows_with_input(self):
        net = build_network(BASE)
        sizes = [measure_memory(net, (1, 1, s, s)) for s in (8, 16, 32)]
        assert sizes[0] < sizes[1] < sizes[2]

    def test_grows_with_batch(self):
        net = build_network(BASE)
        assert measure_memory(net, (1, 1, 16, 16)) < measure_memory(net, (2, 1, 16, 16))

    def test_includes_parameters_and_input(self):
        net = build_network(BASE)
        assert measure_memory(net, SHAPE) > param_bytes(net) + 16 * 16 * 4


class TestContract:
    def test_too_few_runs(self):
        with pytest.raises(ContractError):
            measure_inference(build_network(BASE), SHAPE, runs=2)

    def test_no_warmup(self):
        with pytest.raises(ContractError):
            measure_inference(build_network(BASE), SHAPE, warmup=0)

    def test_needs_two_configs(self):
        with pytest.raises(ContractError):
            compare_variants([BASE], SHAPE)
